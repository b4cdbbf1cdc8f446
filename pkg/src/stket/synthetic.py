"""Synthetic annotated videos with known predicate dynamics.

Every video holds one person and a few objects. Each (person, object)
pair carries one active predicate per predicate type, and each type
evolves as an independent Markov chain started from its stationary
distribution. Because the chains are stationary, the per-pair
co-occurrence vector equals the stationary marginals and the transition
statistics have a closed form (see :func:`true_transition_matrix`).

Visual features are class-conditioned Gaussians; union features are
Gaussians whose mean is the sum of the active predicates' prototypes, so
the predicate labels are learnable from appearance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import FrameAnnotation, ObjectProposal, RelationshipInstance, VideoAnnotation


class GenConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    num_object_classes: int = 4              # M, person excluded
    predicate_type_sizes: list[int] = field(default_factory=lambda: [2, 3, 5])
    num_videos: int = 20
    frames_per_video: int = 8
    max_objects: int = 3
    skew: float = 1.0                        # power-law exponent over predicate rank
    pair_variation: float = 0.0              # per-pair log-normal tilt of the power law
    stay: float = 0.6                        # self-transition mass
    refresh: float = 0.2                     # mass of resampling from the stationary law
    visual_dim: int = 32
    union_channels: int = 4
    union_size: int = 7
    visual_noise: float = 1.0
    union_noise: float = 1.0
    image_size: tuple[float, float] = (640.0, 480.0)
    box_jitter: float = 0.01                 # per-frame random-walk step, fraction of box size
    detection_jitter: float = 0.05
    seed: int = 0
    # optional explicit dynamics: {"<obj class>": [P_type0, P_type1, ...]} with row-stochastic P
    transitions: Optional[dict] = None

    @property
    def num_predicates(self) -> int:
        return int(sum(self.predicate_type_sizes))

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise GenConfigError(f"unknown generator options: {sorted(extra)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class GroundTruthDynamics:
    """Per object class j: the (person, j) pair's co-occurrence vector and transition matrix."""

    cooccurrence: dict[int, np.ndarray]
    transition: dict[int, np.ndarray]
    type_transitions: dict[int, list[np.ndarray]]

    def to_json(self) -> str:
        return json.dumps({
            "subject_class": 0,
            "pairs": {str(j): {"cooccurrence": self.cooccurrence[j].tolist(),
                               "transition": self.transition[j].tolist(),
                               "type_transitions": [p.tolist() for p in self.type_transitions[j]]}
                      for j in sorted(self.cooccurrence)},
        }, indent=1)


def check_stochastic(p: np.ndarray, label: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise GenConfigError(f"{label}: transition matrix must be square, got shape {p.shape}")
    for r, row in enumerate(p):
        if np.any(row < 0) or np.any(row > 1):
            raise GenConfigError(f"{label}: row {r} has entries outside [0, 1]")
        if abs(row.sum() - 1.0) > 1e-9:
            raise GenConfigError(f"{label}: row {r} sums to {row.sum():.6g}, not 1")
    return p


def stationary(p: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix (left eigenvector for 1)."""
    n = p.shape[0]
    a = np.vstack([p.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _sampled_chain(pi: np.ndarray, stay: float, refresh: float, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic matrix with stationary law ``pi``.

    Mixes a sticky identity, a refresh towards ``pi`` and a Metropolis walk
    on a random cycle of the states; each part leaves ``pi`` invariant.
    """
    n = len(pi)
    if n == 1:
        return np.ones((1, 1))
    order = rng.permutation(n)
    prop = np.zeros((n, n))
    for a, b in zip(order, np.roll(order, -1)):
        prop[a, b] += 0.5
        prop[b, a] += 0.5
    walk = np.zeros((n, n))
    for x in range(n):
        for y in range(n):
            if x != y and prop[x, y] > 0:
                walk[x, y] = prop[x, y] * min(1.0, pi[y] / pi[x])
        walk[x, x] = 1.0 - walk[x].sum()
    move = 1.0 - stay - refresh
    return stay * np.eye(n) + refresh * np.tile(pi, (n, 1)) + move * walk


def true_transition_matrix(type_transitions: list[np.ndarray]) -> np.ndarray:
    """Conditional frequency P(y active at t | x active at t-1) over all predicates.

    Within one type this is the chain itself; across independent
    stationary types it is the stationary probability of ``y``.
    """
    sizes = [p.shape[0] for p in type_transitions]
    pis = [stationary(p) for p in type_transitions]
    c = sum(sizes)
    out = np.zeros((c, c))
    starts = np.cumsum([0] + sizes)
    for g, pg in enumerate(type_transitions):
        for h, pih in enumerate(pis):
            rows = slice(starts[g], starts[g + 1])
            cols = slice(starts[h], starts[h + 1])
            out[rows, cols] = pg if g == h else np.tile(pih, (sizes[g], 1))
    return out


def make_dynamics(cfg: GenConfig) -> GroundTruthDynamics:
    if not 0 <= cfg.stay <= 1 or not 0 <= cfg.refresh <= 1 or cfg.stay + cfg.refresh > 1:
        raise GenConfigError("stay and refresh must be in [0, 1] with stay + refresh <= 1")
    if any(s < 1 for s in cfg.predicate_type_sizes):
        raise GenConfigError("predicate type sizes must be positive")
    rng = np.random.default_rng([cfg.seed, 0xD1])
    co, tr, types = {}, {}, {}
    for j in range(1, cfg.num_object_classes + 1):
        chains = []
        explicit = (cfg.transitions or {}).get(str(j))
        for g, n in enumerate(cfg.predicate_type_sizes):
            if explicit is not None:
                p = check_stochastic(explicit[g], f"object class {j} predicate type {g}")
                if p.shape[0] != n:
                    raise GenConfigError(f"object class {j} type {g}: expected {n}x{n} matrix")
            else:
                w = (np.arange(n) + 1.0) ** -cfg.skew
                w = w * np.exp(cfg.pair_variation * rng.standard_normal(n))
                p = _sampled_chain(w / w.sum(), cfg.stay, cfg.refresh, rng)
            chains.append(p)
        types[j] = chains
        co[j] = np.concatenate([stationary(p) for p in chains])
        tr[j] = true_transition_matrix(chains)
    return GroundTruthDynamics(co, tr, types)


def _walk_box(box: np.ndarray, rng: np.random.Generator, jitter: float, size) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    step = rng.normal(0.0, jitter, 4) * np.array([w, h, w, h])
    x1, y1, x2, y2 = (box + step).tolist()
    x1, x2 = min(max(x1, 0.0), size[0] - 2), min(max(x2, 0.0), size[0])
    y1, y2 = min(max(y1, 0.0), size[1] - 2), min(max(y2, 0.0), size[1])
    return np.array([x1, y1, max(x2, x1 + 2.0), max(y2, y1 + 2.0)])


def _random_box(rng: np.random.Generator, size) -> np.ndarray:
    w = rng.uniform(0.15, 0.4) * size[0]
    h = rng.uniform(0.15, 0.4) * size[1]
    x = rng.uniform(0, size[0] - w)
    y = rng.uniform(0, size[1] - h)
    return np.array([x, y, x + w, y + h])


def _draw(rng: np.random.Generator, cdf: np.ndarray) -> int:
    """Inverse-CDF sample of one categorical draw."""
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)


def generate_synthetic_dataset(cfg: GenConfig, with_detections: bool = False):
    """Sample videos under ``cfg``.

    Returns ``(videos, dynamics)``, or ``(videos, dynamics, detections)``
    when ``with_detections`` is set; the detection set has jittered boxes,
    noisy class distributions, no labels and no track ids.
    """
    dyn = make_dynamics(cfg)
    m1 = cfg.num_object_classes + 1
    c = cfg.num_predicates
    sizes = cfg.predicate_type_sizes
    starts = np.cumsum([0] + list(sizes))[:-1]
    class_names = ["person"] + [f"object{j}" for j in range(1, m1)]
    predicate_names = [f"pred{p}" for p in range(c)]

    world = np.random.default_rng([cfg.seed, 0xFEA7])
    class_proto = world.normal(0.0, 1.0, (m1, cfg.visual_dim))
    union_shape = (cfg.union_channels, cfg.union_size, cfg.union_size)
    pred_proto = world.normal(0.0, 1.0, (c,) + union_shape)

    start_cdf = {j: [np.cumsum(stationary(p)) for p in ps] for j, ps in dyn.type_transitions.items()}
    step_cdf = {j: [np.cumsum(p, axis=1) for p in ps] for j, ps in dyn.type_transitions.items()}
    videos, dets = [], []
    for v in range(cfg.num_videos):
        rng = np.random.default_rng([cfg.seed, v])
        vid = f"v{v:04d}"
        n_obj = int(rng.integers(1, cfg.max_objects + 1))
        classes = [0] + [int(x) for x in rng.integers(1, m1, n_obj)]
        boxes = [_random_box(rng, cfg.image_size) for _ in classes]
        state = [[_draw(rng, start_cdf[j][g]) for g in range(len(sizes))] for j in classes[1:]]
        frames, dframes = [], []
        for t in range(cfg.frames_per_video):
            if t > 0:
                boxes = [_walk_box(b, rng, cfg.box_jitter, cfg.image_size) for b in boxes]
                for i, j in enumerate(classes[1:]):
                    state[i] = [_draw(rng, step_cdf[j][g][state[i][g]]) for g in range(len(sizes))]
            props = []
            for cls, b in zip(classes, boxes):
                onehot = np.zeros(m1)
                onehot[cls] = 1.0
                feat = class_proto[cls] + cfg.visual_noise * rng.standard_normal(cfg.visual_dim)
                props.append(ObjectProposal(tuple(float(x) for x in b), onehot, feat))
            rels = []
            for i in range(n_obj):
                preds = tuple(int(starts[g] + state[i][g]) for g in range(len(sizes)))
                u = pred_proto[list(preds)].sum(axis=0) + cfg.union_noise * rng.standard_normal(union_shape)
                rels.append(RelationshipInstance(0, i + 1, preds, u, f"{vid}:{i + 1}"))
            frames.append(FrameAnnotation(t, props, rels))
            if with_detections:
                dprops = []
                for p in props:
                    b = np.asarray(p.box)
                    nb = _walk_box(b, rng, cfg.detection_jitter, cfg.image_size)
                    logits = 3.0 * p.class_distribution + rng.normal(0.0, 1.0, m1)
                    dist = np.exp(logits - logits.max())
                    dprops.append(ObjectProposal(tuple(float(x) for x in nb), dist / dist.sum(), p.feature))
                drels = [RelationshipInstance(r.subject_index, r.object_index, (), r.union) for r in rels]
                dframes.append(FrameAnnotation(t, dprops, drels))
        videos.append(VideoAnnotation(vid, frames, class_names, predicate_names, list(sizes)))
        if with_detections:
            dets.append(VideoAnnotation(vid, dframes, class_names, predicate_names, list(sizes)))
    if with_detections:
        return videos, dyn, dets
    return videos, dyn
