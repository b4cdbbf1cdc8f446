"""Annotated video scene graphs: types, validation, IoU, pair tracking, JSON I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import tensorio

Box = tuple[float, float, float, float]
FeatureSource = Union[np.ndarray, str, None]

TRACK_IOU = 0.8


class AnnotationError(ValueError):
    """Malformed annotation content; the message names the field and video."""


class IntegrityError(AnnotationError):
    """Annotation references something that does not exist or breaks an invariant."""


def _resolve(src: FeatureSource, reader: Optional[Callable[[str], np.ndarray]], what: str) -> np.ndarray:
    if isinstance(src, np.ndarray):
        return src
    if src is None:
        raise AnnotationError(f"missing {what} payload")
    if reader is None:
        raise AnnotationError(f"{what} reference {src!r} has no tensor reader attached")
    return reader(src)


@dataclass(eq=False)
class ObjectProposal:
    box: Box
    class_distribution: np.ndarray
    feature: FeatureSource = None
    reader: Optional[Callable[[str], np.ndarray]] = field(default=None, repr=False)

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.class_distribution))

    @property
    def visual_feature(self) -> np.ndarray:
        return _resolve(self.feature, self.reader, "visual feature")


@dataclass(eq=False)
class RelationshipInstance:
    subject_index: int
    object_index: int
    predicates: tuple[int, ...] = ()
    union: FeatureSource = None
    pair_track_id: Optional[str] = None
    reader: Optional[Callable[[str], np.ndarray]] = field(default=None, repr=False)

    @property
    def union_feature(self) -> np.ndarray:
        return _resolve(self.union, self.reader, "union feature")


@dataclass(eq=False)
class FrameAnnotation:
    frame_index: int
    proposals: list[ObjectProposal]
    relationships: list[RelationshipInstance]


@dataclass(eq=False)
class VideoAnnotation:
    video_id: str
    frames: list[FrameAnnotation]
    class_names: list[str]
    predicate_names: list[str]
    predicate_type_sizes: list[int] = field(default_factory=list)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def box_area(b: Sequence[float]) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def union_box(a: Sequence[float], b: Sequence[float]) -> Box:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def occupancy_masks(b_subj: Sequence[float], b_obj: Sequence[float], size: int = 7) -> np.ndarray:
    """Binary ``[2, size, size]`` masks of subject and object over their union box.

    A grid cell is occupied when its centre lies in the half-open box
    ``[x1, x2) x [y1, y2)``, so boxes that only share an edge stay disjoint.
    """
    ux1, uy1, ux2, uy2 = union_box(b_subj, b_obj)
    if ux2 - ux1 <= 0 or uy2 - uy1 <= 0:
        raise ValueError(f"degenerate union box {(ux1, uy1, ux2, uy2)}")
    cx = ux1 + (np.arange(size) + 0.5) * (ux2 - ux1) / size
    cy = uy1 + (np.arange(size) + 0.5) * (uy2 - uy1) / size
    out = np.zeros((2, size, size))
    for ch, b in enumerate((b_subj, b_obj)):
        inx = (cx >= b[0]) & (cx < b[2])
        iny = (cy >= b[1]) & (cy < b[3])
        out[ch] = np.outer(iny, inx)
    return out


# ---------------------------------------------------------------------------
# pair tracking
# ---------------------------------------------------------------------------

def track_pairs(prev: FrameAnnotation, curr: FrameAnnotation,
                threshold: float = TRACK_IOU) -> list[Optional[int]]:
    """Map each relationship of ``curr`` to a relationship of ``prev`` (or None).

    Both endpoints must keep their predicted class and overlap their
    previous box with IoU above ``threshold``. Competing candidates are
    resolved by summed endpoint IoU, ties by lower index; the result is
    injective.
    """

    def same(p: ObjectProposal, q: ObjectProposal) -> float:
        if p.predicted_class != q.predicted_class:
            return -1.0
        v = iou(p.box, q.box)
        return v if v > threshold else -1.0

    cands = []
    for k, r in enumerate(curr.relationships):
        ps, po = curr.proposals[r.subject_index], curr.proposals[r.object_index]
        for j, q in enumerate(prev.relationships):
            s = same(ps, prev.proposals[q.subject_index])
            if s < 0:
                continue
            o = same(po, prev.proposals[q.object_index])
            if o < 0:
                continue
            cands.append((-(s + o), k, j))
    cands.sort()
    out: list[Optional[int]] = [None] * len(curr.relationships)
    taken: set[int] = set()
    for _, k, j in cands:
        if out[k] is None and j not in taken:
            out[k] = j
            taken.add(j)
    return out


def pair_chains(video: VideoAnnotation, use_track_ids: bool = True) -> list[list[tuple[int, int]]]:
    """Group a video's relationships into per-pair chains of ``(frame position, rel index)``.

    Ground-truth ``pair_track_id`` values are used when every relationship
    carries one (and ``use_track_ids``); otherwise consecutive frames are
    linked with :func:`track_pairs`. Chains are ordered by first appearance.
    """
    rels = [r for f in video.frames for r in f.relationships]
    if use_track_ids and rels and all(r.pair_track_id is not None for r in rels):
        chains: dict[str, list[tuple[int, int]]] = {}
        for t, frame in enumerate(video.frames):
            for k, r in enumerate(frame.relationships):
                chains.setdefault(r.pair_track_id, []).append((t, k))
        return list(chains.values())

    out: list[list[tuple[int, int]]] = []
    open_chain: dict[int, int] = {}  # rel index in previous frame -> chain id
    for t, frame in enumerate(video.frames):
        links = track_pairs(video.frames[t - 1], frame) if t > 0 else [None] * len(frame.relationships)
        nxt: dict[int, int] = {}
        for k, j in enumerate(links):
            if j is not None and j in open_chain:
                cid = open_chain[j]
            else:
                cid = len(out)
                out.append([])
            out[cid].append((t, k))
            nxt[k] = cid
        open_chain = nxt
    return out


def successors(video: VideoAnnotation, chains: list[list[tuple[int, int]]]) -> dict[tuple[int, int], int]:
    """``(t, k) -> k'`` where ``k'`` is the same pair in frame position ``t + 1``."""
    out = {}
    for chain in chains:
        for (t, k), (t2, k2) in zip(chain, chain[1:]):
            if t2 == t + 1:
                out[(t, k)] = k2
    return out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_video(video: VideoAnnotation) -> None:
    vid = video.video_id
    m = len(video.class_names)
    c = len(video.predicate_names)
    if video.predicate_type_sizes and sum(video.predicate_type_sizes) != c:
        raise AnnotationError(f"predicate_type_sizes sum {sum(video.predicate_type_sizes)} "
                              f"!= {c} predicates (video {vid})")
    last = None
    for frame in video.frames:
        fi = frame.frame_index
        if last is not None and fi <= last:
            raise IntegrityError(f"video {vid}: frame_index {fi} not strictly increasing")
        last = fi
        for p, prop in enumerate(frame.proposals):
            x1, y1, x2, y2 = prop.box
            if not (x1 < x2 and y1 < y2):
                raise IntegrityError(f"video {vid} frame {fi} proposal {p}: box {prop.box} has no area")
            d = prop.class_distribution
            if d.shape != (m,):
                raise AnnotationError(f"video {vid} frame {fi} proposal {p}: class_distribution "
                                      f"length {d.shape[0] if d.ndim else 0} != {m}")
            if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-6:
                raise IntegrityError(f"video {vid} frame {fi} proposal {p}: class_distribution "
                                     "is not a probability vector")
        n = len(frame.proposals)
        for k, rel in enumerate(frame.relationships):
            if not (0 <= rel.subject_index < n and 0 <= rel.object_index < n):
                raise IntegrityError(f"video {vid} frame {fi} relationship {k}: dangling proposal "
                                     f"index ({rel.subject_index}, {rel.object_index}) with {n} proposals")
            if rel.subject_index == rel.object_index:
                raise IntegrityError(f"video {vid} frame {fi} relationship {k}: subject == object")
            for p in rel.predicates:
                if not 0 <= p < c:
                    raise IntegrityError(f"video {vid} frame {fi} relationship {k}: predicate {p} "
                                         f"outside [0, {c})")


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def _field(obj: dict, key: str, where: str):
    if key not in obj:
        raise AnnotationError(f"{where}: missing field '{key}'")
    return obj[key]


def parse_dataset(doc: dict, reader: Optional[Callable[[str], np.ndarray]] = None) -> list[VideoAnnotation]:
    class_names = list(_field(doc, "class_names", "dataset"))
    predicate_names = list(_field(doc, "predicate_names", "dataset"))
    sizes = list(doc.get("predicate_type_sizes", []))
    videos = []
    for vdoc in _field(doc, "videos", "dataset"):
        vid = str(_field(vdoc, "video_id", "video"))
        frames = []
        for fdoc in _field(vdoc, "frames", f"video {vid}"):
            where = f"video {vid}"
            fi = _field(fdoc, "frame_index", where)
            if not isinstance(fi, int):
                raise AnnotationError(f"{where}: field 'frame_index' must be an integer")
            where = f"video {vid} frame {fi}"
            props = []
            for pdoc in _field(fdoc, "proposals", where):
                box = _field(pdoc, "box", where)
                if len(box) != 4:
                    raise AnnotationError(f"{where}: field 'box' must have 4 numbers")
                dist = np.asarray(_field(pdoc, "class_distribution", where), dtype=np.float64)
                props.append(ObjectProposal(tuple(float(v) for v in box), dist,
                                            pdoc.get("feature_ref"), reader))
            rels = []
            for rdoc in fdoc.get("relationships", []):
                preds = _field(rdoc, "predicates", where)
                tid = rdoc.get("pair_track_id")
                rels.append(RelationshipInstance(
                    int(_field(rdoc, "subject", where)), int(_field(rdoc, "object", where)),
                    tuple(sorted(set(int(p) for p in preds))), rdoc.get("union_feature_ref"),
                    None if tid is None else str(tid), reader))
            frames.append(FrameAnnotation(fi, props, rels))
        video = VideoAnnotation(vid, frames, class_names, predicate_names, sizes)
        validate_video(video)
        videos.append(video)
    return videos


def load_annotations(path: str | os.PathLike) -> list[VideoAnnotation]:
    """Read and validate an annotation JSON file; features resolve lazily next to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from None
    return parse_dataset(doc, tensorio.TensorReader(path.parent))


def save_annotations(path: str | os.PathLike, videos: Sequence[VideoAnnotation]) -> None:
    """Write ``videos`` as annotation JSON plus a ``<stem>.features.stkt`` sidecar."""
    path = Path(path)
    feat_name = path.stem + ".features.stkt"
    if not videos:
        raise AnnotationError("cannot save an empty dataset (class/predicate names unknown)")
    head = videos[0]
    out_videos = []
    with open(path.parent / feat_name, "wb") as fh:
        def ref(arr):
            return f"{feat_name}#{tensorio.write_tensor(fh, np.asarray(arr))}"

        for v in videos:
            frames = []
            for f in v.frames:
                props = []
                for p in f.proposals:
                    pd = {"box": list(p.box), "class_distribution": p.class_distribution.tolist()}
                    if p.feature is not None:
                        pd["feature_ref"] = ref(p.visual_feature)
                    props.append(pd)
                rels = []
                for r in f.relationships:
                    rd = {"subject": r.subject_index, "object": r.object_index,
                          "predicates": list(r.predicates)}
                    if r.union is not None:
                        rd["union_feature_ref"] = ref(r.union_feature)
                    if r.pair_track_id is not None:
                        rd["pair_track_id"] = r.pair_track_id
                    rels.append(rd)
                frames.append({"frame_index": f.frame_index, "proposals": props, "relationships": rels})
            out_videos.append({"video_id": v.video_id, "frames": frames})
    doc = {"class_names": head.class_names, "predicate_names": head.predicate_names,
           "predicate_type_sizes": head.predicate_type_sizes, "videos": out_videos}
    path.write_text(json.dumps(doc, indent=1))
