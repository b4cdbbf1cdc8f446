"""Spatial co-occurrence and temporal transition statistics, and their learnable embeddings.

Counts are kept as integers so banks can be merged by addition and every
stored probability is recoverable as ``count / denominator``.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from . import tensorio
from .data import VideoAnnotation, pair_chains, successors
from .layers import MLP, Classifier, Module, bce
from .tensor import Tensor

Pair = tuple[int, int]
ROW_MODES = ("argmax", "expected")


class KnowledgeConfigError(ValueError):
    pass


@dataclass
class SpatialMatrixBank:
    num_predicates: int
    pair_counts: dict[Pair, int] = field(default_factory=dict)
    predicate_counts: dict[Pair, np.ndarray] = field(default_factory=dict)

    def matrix(self, subj: int, obj: int) -> np.ndarray:
        """Co-occurrence vector for a class pair; zeros when the pair was never seen."""
        n = self.pair_counts.get((subj, obj))
        if not n:
            return np.zeros(self.num_predicates)
        return self.predicate_counts[(subj, obj)] / n

    @property
    def matrices(self) -> dict[Pair, np.ndarray]:
        return {k: self.matrix(*k) for k in sorted(self.pair_counts)}

    def merge(self, other: "SpatialMatrixBank") -> "SpatialMatrixBank":
        out = SpatialMatrixBank(self.num_predicates, dict(self.pair_counts),
                                {k: v.copy() for k, v in self.predicate_counts.items()})
        for k, n in other.pair_counts.items():
            out.pair_counts[k] = out.pair_counts.get(k, 0) + n
            out.predicate_counts[k] = out.predicate_counts.get(k, 0) + other.predicate_counts[k]
        return out

    def filtered(self, min_pair_count: int) -> "SpatialMatrixBank":
        keep = {k for k, n in self.pair_counts.items() if n >= min_pair_count}
        return SpatialMatrixBank(self.num_predicates, {k: self.pair_counts[k] for k in keep},
                                 {k: self.predicate_counts[k] for k in keep})


@dataclass
class TemporalMatrixBank:
    num_predicates: int
    transition_counts: dict[Pair, np.ndarray] = field(default_factory=dict)
    source_counts: dict[Pair, np.ndarray] = field(default_factory=dict)

    def matrix(self, subj: int, obj: int) -> np.ndarray:
        c = self.num_predicates
        trans = self.transition_counts.get((subj, obj))
        if trans is None:
            return np.zeros((c, c))
        src = self.source_counts[(subj, obj)]
        out = np.zeros((c, c))
        nz = src > 0
        out[nz] = trans[nz] / src[nz, None]
        return out

    @property
    def matrices(self) -> dict[Pair, np.ndarray]:
        return {k: self.matrix(*k) for k in sorted(self.transition_counts)}

    def merge(self, other: "TemporalMatrixBank") -> "TemporalMatrixBank":
        out = TemporalMatrixBank(self.num_predicates,
                                 {k: v.copy() for k, v in self.transition_counts.items()},
                                 {k: v.copy() for k, v in self.source_counts.items()})
        for k, v in other.transition_counts.items():
            out.transition_counts[k] = out.transition_counts.get(k, 0) + v
            out.source_counts[k] = out.source_counts.get(k, 0) + other.source_counts[k]
        return out

    def filtered(self, keep: set) -> "TemporalMatrixBank":
        return TemporalMatrixBank(self.num_predicates,
                                  {k: v for k, v in self.transition_counts.items() if k in keep},
                                  {k: v for k, v in self.source_counts.items() if k in keep})


def _rel_classes(frame, rel) -> Pair:
    return (frame.proposals[rel.subject_index].predicted_class,
            frame.proposals[rel.object_index].predicted_class)


def _spatial_one(video: VideoAnnotation) -> SpatialMatrixBank:
    c = video.num_predicates
    bank = SpatialMatrixBank(c)
    for frame in video.frames:
        for rel in frame.relationships:
            key = _rel_classes(frame, rel)
            bank.pair_counts[key] = bank.pair_counts.get(key, 0) + 1
            counts = bank.predicate_counts.setdefault(key, np.zeros(c, dtype=np.int64))
            for p in rel.predicates:
                counts[p] += 1
    return bank


def _temporal_one(video: VideoAnnotation, use_track_ids: bool = True) -> TemporalMatrixBank:
    c = video.num_predicates
    bank = TemporalMatrixBank(c)
    succ = successors(video, pair_chains(video, use_track_ids))
    for (t, k), k2 in sorted(succ.items()):
        frame = video.frames[t]
        rel = frame.relationships[k]
        nxt = video.frames[t + 1].relationships[k2]
        key = _rel_classes(frame, rel)
        trans = bank.transition_counts.setdefault(key, np.zeros((c, c), dtype=np.int64))
        src = bank.source_counts.setdefault(key, np.zeros(c, dtype=np.int64))
        for x in rel.predicates:
            src[x] += 1
            for y in nxt.predicates:
                trans[x, y] += 1
    return bank


def _reduce(parts, empty):
    out = empty
    for p in parts:
        out = out.merge(p)
    return out


def _num_predicates(videos: Sequence[VideoAnnotation]) -> int:
    return videos[0].num_predicates if videos else 0


def build_spatial_matrix(videos: Sequence[VideoAnnotation], jobs: int = 1) -> SpatialMatrixBank:
    """Per class pair: how often each predicate is annotated, over how often the pair is annotated."""
    empty = SpatialMatrixBank(_num_predicates(videos))
    if jobs > 1 and len(videos) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return _reduce(ex.map(_spatial_one, videos), empty)
    return _reduce(map(_spatial_one, videos), empty)


def build_temporal_matrix(videos: Sequence[VideoAnnotation], use_track_ids: bool = True,
                          jobs: int = 1) -> TemporalMatrixBank:
    """Per class pair: frequency of predicate y at frame t given predicate x on the same pair at t-1.

    The denominator for row x is the number of times x occurred on a pair
    that has a tracked successor in the next frame.
    """
    empty = TemporalMatrixBank(_num_predicates(videos))
    parts = [(v, use_track_ids) for v in videos]
    if jobs > 1 and len(videos) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return _reduce(ex.map(_temporal_star, parts), empty)
    return _reduce(map(_temporal_star, parts), empty)


def _temporal_star(args):
    return _temporal_one(*args)


def row_entropy(row: np.ndarray) -> float:
    """Shannon entropy (nats) of a row after normalising it to sum 1; 0 for an all-zero row."""
    s = row.sum()
    if s <= 0:
        return 0.0
    p = row[row > 0] / s
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_banks(out_dir: str | os.PathLike, spatial: SpatialMatrixBank, temporal: TemporalMatrixBank) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"num_predicates": spatial.num_predicates, "spatial": [], "temporal": []}
    with open(out / "spatial.stkt", "wb") as fh:
        for (i, j) in sorted(spatial.pair_counts):
            off = tensorio.write_tensor(fh, spatial.predicate_counts[(i, j)].astype(np.float64))
            index["spatial"].append({"subject": i, "object": j, "pair_count": spatial.pair_counts[(i, j)],
                                     "counts_ref": f"spatial.stkt#{off}"})
    with open(out / "temporal.stkt", "wb") as fh:
        for (i, j) in sorted(temporal.transition_counts):
            o1 = tensorio.write_tensor(fh, temporal.transition_counts[(i, j)].astype(np.float64))
            o2 = tensorio.write_tensor(fh, temporal.source_counts[(i, j)].astype(np.float64))
            index["temporal"].append({"subject": i, "object": j, "transition_ref": f"temporal.stkt#{o1}",
                                      "source_ref": f"temporal.stkt#{o2}"})
    (out / "knowledge.json").write_text(json.dumps(index, indent=1))


def load_banks(in_dir: str | os.PathLike) -> tuple[SpatialMatrixBank, TemporalMatrixBank]:
    base = Path(in_dir)
    index = json.loads((base / "knowledge.json").read_text())
    read = tensorio.TensorReader(base)
    c = int(index["num_predicates"])
    sp = SpatialMatrixBank(c)
    for e in index["spatial"]:
        key = (int(e["subject"]), int(e["object"]))
        sp.pair_counts[key] = int(e["pair_count"])
        sp.predicate_counts[key] = read(e["counts_ref"]).astype(np.int64)
    tp = TemporalMatrixBank(c)
    for e in index["temporal"]:
        key = (int(e["subject"]), int(e["object"]))
        tp.transition_counts[key] = read(e["transition_ref"]).astype(np.int64)
        tp.source_counts[key] = read(e["source_ref"]).astype(np.int64)
    return sp, tp


# ---------------------------------------------------------------------------
# learnable embeddings
# ---------------------------------------------------------------------------

class KnowledgeEmbedder(Module):
    """``f_spa`` / ``f_tem`` stacks (C -> hidden... -> d) plus their auxiliary predicate heads."""

    def __init__(self, num_predicates: int, d: int, hidden: Sequence[int], partition: Sequence[int],
                 rng: np.random.Generator, dtype=np.float64):
        widths = [num_predicates, *hidden, d]
        self.f_spa = MLP(widths, rng, dtype)
        self.f_tem = MLP(widths, rng, dtype)
        self.spk_head = Classifier(d, partition, rng, dtype)
        self.tpk_head = Classifier(d, partition, rng, dtype)


def spatial_rows(bank: SpatialMatrixBank, pairs: Sequence[Pair]) -> np.ndarray:
    c = bank.num_predicates
    return np.stack([bank.matrix(*p) for p in pairs]) if pairs else np.zeros((0, c))


def temporal_rows(bank: TemporalMatrixBank, pairs: Sequence[Pair], coarse: np.ndarray,
                  mode: str = "argmax") -> np.ndarray:
    """Select one transition row per relationship from its coarse predicate scores.

    ``argmax`` takes the row of the most confident predicate; ``expected``
    mixes rows with the scores normalised to sum 1.
    """
    if mode not in ROW_MODES:
        raise KnowledgeConfigError(f"unknown temporal row mode {mode!r}; expected one of {ROW_MODES}")
    c = bank.num_predicates
    out = np.zeros((len(pairs), c))
    for k, p in enumerate(pairs):
        mat = bank.matrix(*p)
        phi = np.asarray(coarse[k], dtype=np.float64)
        if mode == "argmax":
            out[k] = mat[int(np.argmax(phi))]
        else:
            s = phi.sum()
            w = phi / s if s > 0 else np.full(c, 1.0 / c)
            out[k] = w @ mat
    return out


def spatial_embedding(bank: SpatialMatrixBank, pairs: Sequence[Pair], embedder: KnowledgeEmbedder,
                      dtype=np.float64) -> Tensor:
    """``[K, d]`` spatial knowledge embeddings for the class pairs of one frame."""
    return embedder.f_spa(Tensor(spatial_rows(bank, pairs), dtype=dtype))


def temporal_embedding(bank: TemporalMatrixBank, pairs: Sequence[Pair], coarse: np.ndarray,
                       embedder: KnowledgeEmbedder, mode: str = "argmax", dtype=np.float64) -> Tensor:
    return embedder.f_tem(Tensor(temporal_rows(bank, pairs, coarse, mode), dtype=dtype))


def knowledge_losses(embedder: KnowledgeEmbedder, s: Tensor, labels: np.ndarray,
                     t: Optional[Tensor], next_labels: Optional[np.ndarray]) -> tuple[Tensor, Tensor]:
    """``(L_spk, L_tpk)``.

    ``t`` and ``next_labels`` hold only relationships with a tracked
    successor; pass ``None`` when there are none.
    """
    l_spk = bce(embedder.spk_head(s), labels)
    if t is None or t.shape[0] == 0:
        l_tpk = Tensor(np.zeros((), dtype=s.dtype))
    else:
        l_tpk = bce(embedder.tpk_head(t), next_labels)
    return l_spk, l_tpk
