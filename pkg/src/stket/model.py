"""The knowledge-embedded spatial/temporal transformer for video scene graphs.

Per video, the forward pass runs:

1. relationship representations ``x`` per frame (subject/object/union
   appearance plus semantic embeddings of both classes);
2. the spatial stack: attention across a frame's relationships with the
   spatial knowledge embedding added to queries and keys, followed by a
   coarse predicate head;
3. the temporal stack over two-frame windows ``[F_{t-1}, F_t]`` with
   ``[T_{t-1}, S_t]`` plus frame encodings added to queries and keys;
4. the aggregation stage: self-attention over each tracked pair's
   concatenated spatial/temporal rows in windows of ``window`` entries,
   projected back to the model width and classified.

Every frame/pair output is taken from the first window that contains it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import VideoAnnotation, occupancy_masks, pair_chains, successors
from .knowledge import (ROW_MODES, KnowledgeEmbedder, SpatialMatrixBank, TemporalMatrixBank,
                        knowledge_losses, spatial_rows, temporal_rows)
from .layers import AttentionBlock, Classifier, Dropout, Linear, Module, bce, cross_entropy, param
from .tensor import Tensor

TASKS = ("predcls", "sgcls", "sggen")
CLASSIFIER_MODES = ("three-head", "single-head")
FIRST_FRAME_MODES = ("solo", "duplicate")
MASK_NEG = -1e9


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_predicates: int = 26
    num_classes: int = 36                      # object classes including person
    predicate_type_sizes: list[int] = field(default_factory=lambda: [3, 6, 17])
    visual_dim: int = 2048
    pair_dim: int = 512                        # f_s / f_o output width
    union_channels: int = 256
    union_size: int = 7
    union_dim: int = 512                       # f_u output width
    semantic_dim: int = 200
    heads: int = 8
    dropout: float = 0.1
    ffn_width: int = 2048
    n_spatial: int = 2
    n_temporal: int = 2
    window: int = 4
    knowledge_hidden: list[int] = field(default_factory=lambda: [256, 512, 1024])
    classifier_mode: str = "three-head"
    tkel_first_frame: str = "solo"
    temporal_row_mode: str = "argmax"
    tkel_causal: bool = False
    use_knowledge: bool = True
    dtype: str = "float64"

    @property
    def d(self) -> int:
        return 2 * self.pair_dim + self.union_dim + 2 * self.semantic_dim

    @property
    def union_flat(self) -> int:
        return self.union_channels * self.union_size * self.union_size

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def partition(self) -> list[int]:
        return list(self.predicate_type_sizes) if self.classifier_mode == "three-head" else [self.num_predicates]

    def validate(self) -> "ModelConfig":
        if self.d % self.heads or (2 * self.d) % self.heads:
            raise ModelConfigError(f"model width {self.d} not divisible by {self.heads} heads")
        if self.window < 1 or self.n_spatial < 1 or self.n_temporal < 1:
            raise ModelConfigError("window, n_spatial and n_temporal must be >= 1")
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ModelConfigError(f"classifier_mode must be one of {CLASSIFIER_MODES}")
        if self.classifier_mode == "three-head" and sum(self.predicate_type_sizes) != self.num_predicates:
            raise ModelConfigError(f"predicate_type_sizes {self.predicate_type_sizes} do not sum "
                                   f"to {self.num_predicates}")
        if self.tkel_first_frame not in FIRST_FRAME_MODES:
            raise ModelConfigError(f"tkel_first_frame must be one of {FIRST_FRAME_MODES}")
        if self.temporal_row_mode not in ROW_MODES:
            raise ModelConfigError(f"temporal_row_mode must be one of {ROW_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError("dropout must be in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ModelConfigError("dtype must be float64 or float32")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ModelConfigError(f"unknown model options: {sorted(extra)}")
        return cls(**d).validate()


@dataclass
class FrameBatch:
    """Numpy inputs of one frame, extracted once from the annotation."""

    frame_index: int
    visual: np.ndarray          # [N, visual_dim]
    class_dist: np.ndarray      # [N, num_classes]
    boxes: np.ndarray           # [N, 4]
    subj: np.ndarray            # [K]
    obj: np.ndarray             # [K]
    union: np.ndarray           # [K, union_flat], channel-major
    masks: np.ndarray           # [K * S * S, 2]
    labels: np.ndarray          # [K, C] multi-hot

    @property
    def k(self) -> int:
        return len(self.subj)

    @property
    def gt_classes(self) -> np.ndarray:
        return self.class_dist.argmax(axis=1)


def prepare_frame(frame, cfg: ModelConfig) -> FrameBatch:
    n = len(frame.proposals)
    s = cfg.union_size
    visual = (np.stack([p.visual_feature.reshape(-1) for p in frame.proposals])
              if n else np.zeros((0, cfg.visual_dim)))
    if visual.shape[1] != cfg.visual_dim:
        raise ModelConfigError(f"visual feature width {visual.shape[1]} != configured {cfg.visual_dim}")
    dist = np.stack([p.class_distribution for p in frame.proposals]) if n else np.zeros((0, cfg.num_classes))
    boxes = np.array([p.box for p in frame.proposals]).reshape(-1, 4)
    rels = frame.relationships
    k = len(rels)
    subj = np.array([r.subject_index for r in rels], dtype=np.intp)
    obj = np.array([r.object_index for r in rels], dtype=np.intp)
    union = np.zeros((k, cfg.union_flat))
    masks = np.zeros((k * s * s, 2))
    labels = np.zeros((k, cfg.num_predicates))
    for i, r in enumerate(rels):
        u = r.union_feature
        if u.size != cfg.union_flat:
            raise ModelConfigError(f"union feature size {u.size} != configured {cfg.union_flat}")
        union[i] = u.reshape(-1)
        m = occupancy_masks(frame.proposals[r.subject_index].box, frame.proposals[r.object_index].box, s)
        masks[i * s * s:(i + 1) * s * s] = m.reshape(2, s * s).T
        labels[i, list(r.predicates)] = 1.0
    dt = cfg.np_dtype
    return FrameBatch(frame.frame_index, visual.astype(dt), dist, boxes, subj, obj,
                      union.astype(dt), masks.astype(dt), labels)


@dataclass
class PreparedVideo:
    video_id: str
    frames: list[FrameBatch]
    chains: list[list[tuple[int, int]]]
    succ: dict[tuple[int, int], int]


def prepare_video(video: VideoAnnotation, cfg: ModelConfig, use_track_ids: bool = True) -> PreparedVideo:
    chains = pair_chains(video, use_track_ids)
    return PreparedVideo(video.video_id, [prepare_frame(f, cfg) for f in video.frames],
                         chains, successors(video, chains))


@dataclass
class VideoOutputs:
    x: list[Tensor]
    spatial_knowledge: list[Optional[Tensor]]
    temporal_knowledge: list[Optional[Tensor]]
    f_spatial: list[Tensor]
    f_temporal: list[Tensor]
    final_repr: Tensor                     # [sum K, d]
    coarse: list[Tensor]                   # SKEL head
    temporal_pred: list[Tensor]            # TKEL head
    final: list[Tensor]                    # aggregation head
    obj_logits: list[Optional[Tensor]]
    classes: list[np.ndarray]              # class used per proposal
    class_conf: list[np.ndarray]


class STKET(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        cfg = config
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        d = cfg.d
        # relationship representation
        self.f_s = Linear(cfg.visual_dim, cfg.pair_dim, rng, dt)
        self.f_o = Linear(cfg.visual_dim, cfg.pair_dim, rng, dt)
        self.f_box = Linear(2, cfg.union_channels, rng, dt)
        self.f_u = Linear(cfg.union_flat, cfg.union_dim, rng, dt)
        self.semantic = param(rng.normal(0.0, 1.0, (cfg.num_classes, cfg.semantic_dim)), dt)
        self.obj_classifier = Linear(cfg.visual_dim, cfg.num_classes, rng, dt)
        # knowledge
        self.knowledge = KnowledgeEmbedder(cfg.num_predicates, d, cfg.knowledge_hidden, cfg.partition, rng, dt)
        # spatial stack
        self.skel = [AttentionBlock(d, cfg.heads, cfg.ffn_width, rng, dt) for _ in range(cfg.n_spatial)]
        self.skel_head = Classifier(d, cfg.partition, rng, dt)
        # temporal stack
        self.frame_enc = param(rng.normal(0.0, 0.02, (2, d)), dt)
        self.tkel = [AttentionBlock(d, cfg.heads, cfg.ffn_width, rng, dt) for _ in range(cfg.n_temporal)]
        self.tkel_head = Classifier(d, cfg.partition, rng, dt)
        # aggregation
        self.sta_enc = param(rng.normal(0.0, 0.02, (cfg.window, 2 * d)), dt)
        self.sta = AttentionBlock(2 * d, cfg.heads, None, rng, dt)
        self.sta_proj = Linear(2 * d, d, rng, dt)
        self.sta_head = Classifier(d, cfg.partition, rng, dt)

    # -- representation ----------------------------------------------------

    def spatial_map(self, masks: np.ndarray, k: int) -> Tensor:
        """Learned box encoding, ``[K, union_flat]`` in the union feature's channel-major layout."""
        cfg = self.config
        ss = cfg.union_size * cfg.union_size
        m = Tensor(masks, dtype=cfg.np_dtype)
        z = T.reshape(self.f_box(m), (k, ss, cfg.union_channels))
        return T.reshape(T.permute(z, (0, 2, 1)), (k, cfg.union_flat))

    def represent(self, fb: FrameBatch, sem_dist) -> Tensor:
        """Relationship representations ``[K, d]`` of one frame.

        ``sem_dist`` is the per-proposal class distribution used for the
        semantic embeddings (a Tensor when it comes from the object classifier).
        """
        cfg = self.config
        dt = cfg.np_dtype
        vis = Tensor(fb.visual, dtype=dt)
        vs = T.take_rows(vis, fb.subj)
        vo = T.take_rows(vis, fb.obj)
        u = Tensor(fb.union, dtype=dt) + self.spatial_map(fb.masks, fb.k)
        if not isinstance(sem_dist, Tensor):
            sem_dist = Tensor(np.asarray(sem_dist), dtype=dt)
        sem = T.matmul(sem_dist, self.semantic)
        return T.concat([self.f_s(vs), self.f_o(vo), self.f_u(u),
                         T.take_rows(sem, fb.subj), T.take_rows(sem, fb.obj)], axis=1)

    def classify_objects(self, fb: FrameBatch, task: str):
        """Per-proposal (classes, confidences, distribution used for semantics, logits)."""
        if task == "predcls":
            cls = fb.gt_classes
            onehot = np.eye(self.config.num_classes)[cls]
            return cls, np.ones(len(cls)), onehot, None
        if task == "sggen":
            return fb.class_dist.argmax(axis=1), fb.class_dist.max(axis=1), fb.class_dist, None
        if task != "sgcls":
            raise ModelConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        logits = self.obj_classifier(Tensor(fb.visual, dtype=self.config.np_dtype))
        probs = T.softmax_rows(logits)
        return probs.data.argmax(axis=1), probs.data.max(axis=1), probs, logits

    # -- stacks --------------------------------------------------------------

    def skel_forward(self, x: Tensor, s: Optional[Tensor], drop: Optional[Dropout] = None) -> Tensor:
        if x.shape[0] == 0:
            return x
        for layer in self.skel:
            x = layer(x, s, None, drop)
        return x

    def tkel_forward(self, fs: Sequence[Tensor], s: Sequence[Optional[Tensor]],
                     tk: Sequence[Optional[Tensor]], drop: Optional[Dropout] = None) -> list[Tensor]:
        cfg = self.config
        d = cfg.d
        e1 = T.index(self.frame_enc, (slice(0, 1),))
        e2 = T.index(self.frame_enc, (slice(1, 2),))

        def know(block: Optional[Tensor], enc: Tensor, rows: int) -> Tensor:
            if block is None:
                block = Tensor(np.zeros((rows, d), dtype=cfg.np_dtype))
            return block + enc

        out = []
        for t, cur in enumerate(fs):
            kt = cur.shape[0]
            if kt == 0:
                out.append(cur)
                continue
            if t == 0 and cfg.tkel_first_frame == "duplicate":
                prev, prev_k = cur, tk[0]
            elif t == 0 or fs[t - 1].shape[0] == 0:
                prev, prev_k = None, None
            else:
                prev, prev_k = fs[t - 1], tk[t - 1]
            if prev is None:
                x, bias, start = cur, know(s[t], e2, kt), 0
            else:
                start = prev.shape[0]
                x = T.concat([prev, cur], axis=0)
                bias = T.concat([know(prev_k, e1, start), know(s[t], e2, kt)], axis=0)
            mask = None
            if cfg.tkel_causal and start:
                mask = np.zeros((start + kt, start + kt))
                mask[:start, start:] = MASK_NEG
            for layer in self.tkel:
                x = layer(x, bias, mask, drop)
            out.append(T.index(x, (slice(start, None),)) if start else x)
        return out

    def sta_forward(self, fs_all: Tensor, ft_all: Tensor, chains: Sequence[Sequence[int]],
                    drop: Optional[Dropout] = None) -> Tensor:
        """Aggregated ``[N, d]`` representations; ``chains`` hold global row indices per pair."""
        tau = self.config.window
        n = fs_all.shape[0]
        c_all = T.concat([fs_all, ft_all], axis=1)
        pieces, order = [], []
        for g in chains:
            rows = T.take_rows(c_all, g)
            length = len(g)
            if length <= tau:
                windows = [(0, length, list(range(length)))]
            else:
                windows = [(0, tau, list(range(tau)))]
                windows += [(i, i + tau, [i + tau - 1]) for i in range(1, length - tau + 1)]
            for a, b, keep in windows:
                w = rows if (a, b) == (0, length) else T.index(rows, (slice(a, b),))
                enc = T.index(self.sta_enc, (slice(0, b - a),))
                out = self.sta(w, enc, None, drop)
                pieces.append(out if len(keep) == b - a else T.take_rows(out, [j - a for j in keep]))
                order.extend(g[j] for j in keep)
        if sorted(order) != list(range(n)):
            raise RuntimeError("aggregation windows must cover every (pair, frame) exactly once")
        z = T.take_rows(T.concat(pieces, axis=0), np.argsort(order, kind="stable"))
        return self.sta_proj(z)

    # -- full pass -------------------------------------------------------------

    def forward(self, video: PreparedVideo, task: str = "predcls",
                spatial_bank: Optional[SpatialMatrixBank] = None,
                temporal_bank: Optional[TemporalMatrixBank] = None,
                dropout_rng: Optional[np.random.Generator] = None) -> VideoOutputs:
        cfg = self.config
        dt = cfg.np_dtype
        use_k = cfg.use_knowledge and spatial_bank is not None and temporal_bank is not None
        drop = Dropout(cfg.dropout, dropout_rng)
        xs, ss, fss, coarse, objl, classes, confs, pairs_t = [], [], [], [], [], [], [], []
        for fb in video.frames:
            cls, conf, sem_dist, logits = self.classify_objects(fb, task)
            classes.append(cls)
            confs.append(conf)
            objl.append(logits)
            pairs = [(int(cls[a]), int(cls[b])) for a, b in zip(fb.subj, fb.obj)]
            pairs_t.append(pairs)
            x = self.represent(fb, sem_dist)
            s = None
            if use_k and fb.k:
                s = self.knowledge.f_spa(Tensor(spatial_rows(spatial_bank, pairs), dtype=dt))
            f = self.skel_forward(x, s, drop)
            xs.append(x)
            ss.append(s)
            fss.append(f)
            coarse.append(self.skel_head(f))
        tks: list[Optional[Tensor]] = []
        for t, fb in enumerate(video.frames):
            if use_k and fb.k:
                rows = temporal_rows(temporal_bank, pairs_t[t], coarse[t].data, cfg.temporal_row_mode)
                tks.append(self.knowledge.f_tem(Tensor(rows, dtype=dt)))
            else:
                tks.append(None)
        fts = self.tkel_forward(fss, ss, tks, drop)
        tpred = [self.tkel_head(f) for f in fts]

        offsets = np.cumsum([0] + [fb.k for fb in video.frames])
        chains = [[int(offsets[t] + k) for t, k in ch] for ch in video.chains]
        fs_all = T.concat(fss, axis=0)
        ft_all = T.concat(fts, axis=0)
        final_repr = self.sta_forward(fs_all, ft_all, chains, drop)
        phi = self.sta_head(final_repr)
        final = [T.index(phi, (slice(int(offsets[t]), int(offsets[t + 1])),))
                 for t in range(len(video.frames))]
        return VideoOutputs(xs, ss, tks, fss, fts, final_repr, coarse, tpred, final, objl, classes, confs)

    def loss_terms(self, video: PreparedVideo, out: VideoOutputs, task: str = "predcls") -> dict[str, Tensor]:
        """All loss terms and their unit-weight sum under ``"total"``."""
        frames = video.frames
        labels = np.concatenate([fb.labels for fb in frames], axis=0)
        terms = {
            "skel": bce(T.concat(out.coarse, axis=0), labels),
            "tkel": bce(T.concat(out.temporal_pred, axis=0), labels),
            "sta": bce(T.concat(out.final, axis=0), labels),
        }
        terms["cls"] = terms["skel"] + terms["tkel"] + terms["sta"]
        zero = Tensor(np.zeros((), dtype=self.config.np_dtype))
        present = [s for s in out.spatial_knowledge if s is not None]
        if present:
            s_all = T.concat(present, axis=0)
            s_labels = np.concatenate([fb.labels for fb, s in zip(frames, out.spatial_knowledge)
                                       if s is not None], axis=0)
            t_rows, nxt = [], []
            for (t, k), k2 in sorted(video.succ.items()):
                tk = out.temporal_knowledge[t]
                if tk is None:
                    continue
                t_rows.append(T.index(tk, (slice(k, k + 1),)))
                nxt.append(frames[t + 1].labels[k2])
            t_all = T.concat(t_rows, axis=0) if t_rows else None
            terms["spk"], terms["tpk"] = knowledge_losses(
                self.knowledge, s_all, s_labels, t_all, np.stack(nxt) if nxt else None)
        else:
            terms["spk"], terms["tpk"] = zero, zero
        if task in ("sgcls", "sggen") and any(l is not None for l in out.obj_logits):
            logits = T.concat([l for l in out.obj_logits if l is not None], axis=0)
            gt = np.concatenate([fb.gt_classes for fb, l in zip(frames, out.obj_logits) if l is not None])
            terms["obj"] = cross_entropy(logits, gt)
        else:
            terms["obj"] = zero
        terms["total"] = terms["cls"] + terms["spk"] + terms["tpk"] + terms["obj"]
        return terms

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ModelConfigError(f"parameter mismatch: missing {sorted(missing)[:5]}, "
                                   f"unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ModelConfigError(f"parameter {name}: shape {arr.shape} != expected {p.shape}")
            p.data[...] = arr
