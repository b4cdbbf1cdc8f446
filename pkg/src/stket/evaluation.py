"""Recall-based scene-graph evaluation under the No Constraint protocol.

Every frame pools all (pair, predicate) scores. A triplet's ranking score
is its predicate confidence times the class confidences of both
endpoints. Predictions are processed in rank order and each one claims at
most one still-unmatched ground-truth triplet; a ground-truth triplet is
recalled at K when the prediction that claimed it ranks within the top K.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import FrameAnnotation, VideoAnnotation, iou
from .knowledge import SpatialMatrixBank, TemporalMatrixBank, row_entropy
from .model import TASKS, STKET, ModelConfigError, prepare_video

DEFAULT_KS = (10, 20, 50)
SGGEN_IOU = 0.5
NO_HIT = np.iinfo(np.int64).max


class EvaluationError(ValueError):
    pass


@dataclass
class FramePredictions:
    """Scored triplets of one frame, plus the proposal boxes/classes they refer to."""

    boxes: np.ndarray       # [N, 4]
    classes: np.ndarray     # [N]
    subj: np.ndarray        # [P] proposal index
    obj: np.ndarray
    predicate: np.ndarray
    conf: np.ndarray
    pair: np.ndarray        # pair index, for tie-breaking

    @classmethod
    def from_pair_scores(cls, subj, obj, scores: np.ndarray, classes, class_conf, boxes) -> "FramePredictions":
        scores = np.asarray(scores, dtype=np.float64)
        k, c = scores.shape if scores.ndim == 2 else (0, 0)
        subj = np.asarray(subj, dtype=np.int64)
        obj = np.asarray(obj, dtype=np.int64)
        class_conf = np.asarray(class_conf, dtype=np.float64)
        pair = np.repeat(np.arange(k), c)
        pred = np.tile(np.arange(c), k)
        conf = (scores * (class_conf[subj] * class_conf[obj])[:, None]).reshape(-1) if k else np.zeros(0)
        return cls(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes, dtype=np.int64),
                   subj[pair], obj[pair], pred, conf, pair)

    def order(self) -> np.ndarray:
        """Rank order: confidence descending, then lower predicate id, then lower pair index."""
        return np.lexsort((self.pair, self.predicate, -self.conf))

    def __len__(self) -> int:
        return len(self.conf)


@dataclass
class FrameTruth:
    boxes: np.ndarray
    classes: np.ndarray
    subj: np.ndarray
    obj: np.ndarray
    predicate: np.ndarray

    @classmethod
    def from_frame(cls, frame: FrameAnnotation) -> "FrameTruth":
        trip = [(r.subject_index, r.object_index, p) for r in frame.relationships for p in r.predicates]
        arr = np.array(trip, dtype=np.int64).reshape(-1, 3)
        return cls(np.array([p.box for p in frame.proposals], dtype=np.float64).reshape(-1, 4),
                   np.array([p.predicted_class for p in frame.proposals], dtype=np.int64),
                   arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return len(self.predicate)


def match_triplets(pred: FramePredictions, gt: FrameTruth, task: str,
                   max_k: Optional[int] = None) -> np.ndarray:
    """Rank (0-based) of the prediction that recalls each ground-truth triplet, or ``NO_HIT``.

    PredCls/SGCls match by proposal identity and require both predicted
    classes to be correct; SGGen requires correct classes and IoU >= 0.5
    for both boxes. Only the first ``max_k`` ranked predictions are used.
    """
    if task not in TASKS:
        raise EvaluationError(f"unknown task {task!r}")
    ranks = np.full(len(gt), NO_HIT, dtype=np.int64)
    if not len(gt) or not len(pred):
        return ranks
    order = pred.order()
    if max_k is not None:
        order = order[:max_k]
    by_pred: dict[int, list[int]] = {}
    for g, p in enumerate(gt.predicate):
        by_pred.setdefault(int(p), []).append(g)
    if task == "sggen":
        ious = np.array([[iou(pb, gb) for gb in gt.boxes] for pb in pred.boxes]).reshape(
            len(pred.boxes), len(gt.boxes))
    for r, i in enumerate(order):
        cands = by_pred.get(int(pred.predicate[i]))
        if not cands:
            continue
        s, o = pred.subj[i], pred.obj[i]
        cs, co = pred.classes[s], pred.classes[o]
        for g in cands:
            if ranks[g] != NO_HIT:
                continue
            gs, go = gt.subj[g], gt.obj[g]
            if cs != gt.classes[gs] or co != gt.classes[go]:
                continue
            if task == "sggen":
                ok = ious[s, gs] >= SGGEN_IOU and ious[o, go] >= SGGEN_IOU
            else:
                ok = s == gs and o == go
            if ok:
                ranks[g] = r
                break
    return ranks


@dataclass
class RecallAccumulator:
    num_predicates: int
    ks: tuple[int, ...] = DEFAULT_KS
    frame_ranks: list[np.ndarray] = field(default_factory=list)
    frame_predicates: list[np.ndarray] = field(default_factory=list)

    def add(self, ranks: np.ndarray, gt_predicates: np.ndarray) -> None:
        if len(ranks):
            self.frame_ranks.append(np.asarray(ranks))
            self.frame_predicates.append(np.asarray(gt_predicates))

    def merge(self, other: "RecallAccumulator") -> None:
        self.frame_ranks.extend(other.frame_ranks)
        self.frame_predicates.extend(other.frame_predicates)


def recall_at_k(frame_ranks: Sequence[np.ndarray], k: int, average: str = "micro") -> float:
    """Percentage of ground-truth triplets recalled within the top ``k``.

    Frames without ground truth are skipped. ``micro`` pools hits and
    triplets over the dataset; ``macro`` averages per-frame recalls.
    """
    frames = [r for r in frame_ranks if len(r)]
    if not frames:
        raise EvaluationError("recall is undefined: no ground-truth triplets")
    if average == "micro":
        hits = sum(int((r < k).sum()) for r in frames)
        return 100.0 * hits / sum(len(r) for r in frames)
    if average == "macro":
        return 100.0 * float(np.mean([(r < k).mean() for r in frames]))
    raise EvaluationError(f"unknown averaging {average!r}")


def per_predicate_recall(frame_ranks: Sequence[np.ndarray], frame_predicates: Sequence[np.ndarray],
                         k: int, num_predicates: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-predicate recall (percent; NaN where there is no ground truth) and ground-truth counts."""
    hits = np.zeros(num_predicates)
    counts = np.zeros(num_predicates, dtype=np.int64)
    for r, p in zip(frame_ranks, frame_predicates):
        np.add.at(counts, p, 1)
        np.add.at(hits, p, (r < k).astype(np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        rec = np.where(counts > 0, 100.0 * hits / np.maximum(counts, 1), np.nan)
    return rec, counts


def mean_recall_at_k(frame_ranks, frame_predicates, k: int, num_predicates: int) -> float:
    """Unweighted mean of per-predicate recall over predicates with ground truth."""
    rec, counts = per_predicate_recall(frame_ranks, frame_predicates, k, num_predicates)
    if not np.any(counts > 0):
        raise EvaluationError("mean recall is undefined: no ground-truth triplets")
    return float(np.mean(rec[counts > 0]))


@dataclass
class MetricsReport:
    task: str
    ks: list[int]
    recall: dict[str, float]
    mean_recall: dict[str, float]
    per_predicate: list[dict]
    knowledge_entropy: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task": self.task, "ks": list(self.ks), "recall": self.recall,
                "mean_recall": self.mean_recall, "per_predicate": self.per_predicate,
                "knowledge_entropy": self.knowledge_entropy}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["task"], list(d["ks"]), d["recall"], d["mean_recall"], d["per_predicate"],
                   d.get("knowledge_entropy", []))

    def write_per_predicate_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "name", "gt_count"] + [f"R@{k}" for k in self.ks])
            for row in self.per_predicate:
                w.writerow([row["id"], row["name"], row["gt_count"]]
                           + ["" if row["r_at"][str(k)] is None else row["r_at"][str(k)] for k in self.ks])


def build_report(acc: RecallAccumulator, task: str, predicate_names: Sequence[str],
                 average: str = "micro") -> MetricsReport:
    ks = list(acc.ks)
    recall = {str(k): recall_at_k(acc.frame_ranks, k, average) for k in ks}
    mean = {str(k): mean_recall_at_k(acc.frame_ranks, acc.frame_predicates, k, acc.num_predicates) for k in ks}
    per = []
    table = {k: per_predicate_recall(acc.frame_ranks, acc.frame_predicates, k, acc.num_predicates) for k in ks}
    for p in range(acc.num_predicates):
        counts = table[ks[0]][1]
        per.append({"id": p, "name": predicate_names[p] if p < len(predicate_names) else str(p),
                    "gt_count": int(counts[p]),
                    "r_at": {str(k): (None if math.isnan(table[k][0][p]) else float(table[k][0][p]))
                             for k in ks}})
    return MetricsReport(task, ks, recall, mean, per)


def entropy_table(temporal: TemporalMatrixBank, class_names: Sequence[str] = (),
                  predicate_names: Sequence[str] = ()) -> list[dict]:
    """Shannon entropy of every transition row of every observed class pair.

    Rows whose source predicate never occurred cannot be normalized and get ``None``.
    """
    out = []
    for (i, j), mat in temporal.matrices.items():
        src = temporal.source_counts[(i, j)]
        for x in range(temporal.num_predicates):
            out.append({"subject": i, "object": j,
                        "subject_name": class_names[i] if i < len(class_names) else str(i),
                        "object_name": class_names[j] if j < len(class_names) else str(j),
                        "predicate": x,
                        "predicate_name": predicate_names[x] if x < len(predicate_names) else str(x),
                        "source_count": int(src[x]), "entropy": row_entropy(mat[x]) if src[x] else None})
    return out


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

def frequency_prior_baseline(spatial: SpatialMatrixBank, videos: Sequence[VideoAnnotation],
                             task: str = "predcls") -> list[list[FramePredictions]]:
    """Score each ground-truth pair's predicates by its class pair's co-occurrence vector.

    Unseen pairs get a uniform ``1/C``; ties then fall back to predicate id.
    """
    if task != "predcls":
        raise EvaluationError("the frequency prior baseline is defined for predcls only")
    out = []
    c = spatial.num_predicates
    for v in videos:
        frames = []
        for f in v.frames:
            classes = np.array([p.predicted_class for p in f.proposals], dtype=np.int64)
            scores = np.zeros((len(f.relationships), c))
            for k, r in enumerate(f.relationships):
                key = (int(classes[r.subject_index]), int(classes[r.object_index]))
                scores[k] = spatial.matrix(*key) if spatial.pair_counts.get(key) else np.full(c, 1.0 / c)
            frames.append(FramePredictions.from_pair_scores(
                [r.subject_index for r in f.relationships], [r.object_index for r in f.relationships],
                scores, classes, np.ones(len(classes)), [p.box for p in f.proposals]))
        out.append(frames)
    return out


def predict_video(model: STKET, video: VideoAnnotation, task: str, spatial, temporal,
                  use_track_ids: bool = True) -> list[FramePredictions]:
    """Evaluation-mode forward (no tape, no dropout) turned into ranked triplets."""
    pv = prepare_video(video, model.config, use_track_ids)
    out = model.forward(pv, task, spatial, temporal, None)
    preds = []
    for t, fb in enumerate(pv.frames):
        preds.append(FramePredictions.from_pair_scores(
            fb.subj, fb.obj, out.final[t].data, out.classes[t], out.class_conf[t], fb.boxes))
    return preds


def accumulate(predictions: Sequence[Sequence[FramePredictions]], truth: Sequence[VideoAnnotation],
               task: str, ks: Sequence[int] = DEFAULT_KS) -> RecallAccumulator:
    if not truth:
        raise EvaluationError("empty ground-truth dataset")
    acc = RecallAccumulator(truth[0].num_predicates, tuple(ks))
    max_k = max(ks)
    for vp, vt in zip(predictions, truth):
        if len(vp) != len(vt.frames):
            raise EvaluationError(f"video {vt.video_id}: {len(vp)} predicted frames vs {len(vt.frames)}")
        for fp, ft in zip(vp, vt.frames):
            gt = FrameTruth.from_frame(ft)
            acc.add(match_triplets(fp, gt, task, max_k), gt.predicate)
    return acc


_worker: dict = {}


def _init_worker(cfg_dict, state, spatial, temporal, task, use_track_ids):
    from .model import ModelConfig
    model = STKET(ModelConfig.from_dict(cfg_dict))
    model.load_state_dict(state)
    _worker.update(model=model, spatial=spatial, temporal=temporal, task=task, ids=use_track_ids)


def _predict_in_worker(video):
    w = _worker
    return predict_video(w["model"], video, w["task"], w["spatial"], w["temporal"], w["ids"])


def evaluate(model: STKET, videos: Sequence[VideoAnnotation], task: str = "predcls",
             ks: Sequence[int] = DEFAULT_KS, spatial: Optional[SpatialMatrixBank] = None,
             temporal: Optional[TemporalMatrixBank] = None,
             detections: Optional[Sequence[VideoAnnotation]] = None,
             average: str = "micro", jobs: int = 1) -> MetricsReport:
    """Score ``model`` on ``videos``; SGGen reads proposals from ``detections``."""
    if task not in TASKS:
        raise EvaluationError(f"unknown task {task!r}")
    if videos and videos[0].num_predicates != model.config.num_predicates:
        raise ModelConfigError(f"dataset has {videos[0].num_predicates} predicates, "
                               f"model expects {model.config.num_predicates}")
    inputs = list(videos)
    if task == "sggen":
        if detections is None:
            raise EvaluationError("sggen evaluation needs detected proposals")
        by_id = {v.video_id: v for v in detections}
        missing = [v.video_id for v in videos if v.video_id not in by_id]
        if missing:
            raise EvaluationError(f"no detections for videos {missing[:5]}")
        inputs = [by_id[v.video_id] for v in videos]
    use_ids = task != "sggen"
    if jobs > 1 and len(inputs) > 1:
        init = (model.config.to_dict(), model.state_dict(), spatial, temporal, task, use_ids)
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=init) as ex:
            preds = list(ex.map(_predict_in_worker, inputs))
    else:
        preds = [predict_video(model, v, task, spatial, temporal, use_ids) for v in inputs]
    acc = accumulate(preds, videos, task, ks)
    report = build_report(acc, task, videos[0].predicate_names, average)
    if temporal is not None:
        report.knowledge_entropy = entropy_table(temporal, videos[0].class_names, videos[0].predicate_names)
    return report
