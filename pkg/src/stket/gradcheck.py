"""Finite-difference verification of every differentiable op and of the full training loss."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T
from .data import FrameAnnotation, ObjectProposal, RelationshipInstance, VideoAnnotation
from .knowledge import build_spatial_matrix, build_temporal_matrix
from .layers import bce, cross_entropy
from .model import ModelConfig, STKET, prepare_video
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _away_from(rng, shape, kink: float = 0.0, gap: float = 0.05) -> np.ndarray:
    """Random values at least ``gap`` away from ``kink`` so differences never straddle it."""
    x = rng.normal(0.0, 1.0, shape)
    return np.where(np.abs(x - kink) < gap, kink + np.sign(x - kink + 1e-300) * gap, x)


def _weighted(rng, out_shape) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(0.0, 1.0, out_shape))
    return lambda y: T.sum_all(T.mul(y, w))


OpCase = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]


def _unary(fn, shape=(3, 4), make=None) -> OpCase:
    def case(rng):
        x = _leaf(make(rng) if make else rng.normal(0.0, 1.0, shape))
        red = _weighted(rng, fn(x).shape)
        return (lambda t: red(fn(t))), x
    return case


def _with_other(fn, x_shape, other_shape) -> OpCase:
    """Check the gradient with respect to each of a binary op's operands."""
    def case(rng):
        x = _leaf(rng.normal(0.0, 1.0, x_shape))
        other = Tensor(rng.normal(0.0, 1.0, other_shape))
        red = _weighted(rng, fn(x, other).shape)
        return (lambda t: red(fn(t, other))), x
    return case


def _layer_norm_param(which: int) -> OpCase:
    def case(rng):
        args = [Tensor(rng.normal(0.0, 1.0, (3, 6))), Tensor(rng.normal(1.0, 0.3, 6)),
                Tensor(rng.normal(0.0, 0.3, 6))]
        args[which] = _leaf(args[which].data)
        red = _weighted(rng, (3, 6))

        def f(t):
            a = list(args)
            a[which] = t
            return red(T.layer_norm(*a))
        return f, args[which]
    return case


def _dropout_case(rng):
    mask = rng.random((4, 5)) >= 0.3
    return _unary(lambda t: T.dropout(t, mask, 0.3), (4, 5))(rng)


def _bce_case(rng):
    y = (rng.random((3, 5)) < 0.4).astype(float)
    x = _leaf(rng.uniform(0.05, 0.95, (3, 5)))
    return (lambda t: bce(t, y)), x


def _ce_case(rng):
    cls = rng.integers(0, 5, 4)
    x = _leaf(rng.normal(0.0, 1.0, (4, 5)))
    return (lambda t: cross_entropy(t, cls)), x


OP_CASES: dict[str, OpCase] = {
    "add": _with_other(T.add, (3, 4), (4,)),
    "add_rhs": _with_other(lambda t, o: T.add(o, t), (4,), (3, 4)),
    "sub": _with_other(T.sub, (3, 4), (3, 4)),
    "sub_rhs": _with_other(lambda t, o: T.sub(o, t), (1, 4), (3, 4)),
    "mul": _with_other(T.mul, (3, 4), (3, 1)),
    "mul_rhs": _with_other(lambda t, o: T.mul(o, t), (3, 1), (3, 4)),
    "scale": _unary(lambda t: T.scale(t, -1.7)),
    "relu": _unary(T.relu, make=lambda r: _away_from(r, (3, 4))),
    "sigmoid": _unary(T.sigmoid),
    "clamp": _unary(lambda t: T.clamp(t, -0.5, 0.5),
                    make=lambda r: _away_from(r, (3, 4), 0.5) * 0.8),
    "log": _unary(T.log, make=lambda r: r.uniform(0.2, 3.0, (3, 4))),
    "dropout": _dropout_case,
    "matmul_lhs": _with_other(T.matmul, (3, 4), (4, 2)),
    "matmul_rhs": _with_other(lambda t, o: T.matmul(o, t), (4, 2), (3, 4)),
    "transpose": _unary(T.transpose),
    "permute": _unary(lambda t: T.permute(t, (2, 0, 1)), (2, 3, 4)),
    "reshape": _unary(lambda t: T.reshape(t, (4, 3))),
    "concat": _with_other(lambda t, o: T.concat([o, t, o], axis=1), (3, 2), (3, 4)),
    "index": _unary(lambda t: T.index(t, (slice(1, 3), [0, 2, 2]))),
    "take_rows": _unary(lambda t: T.take_rows(t, [2, 0, 2, 1])),
    "sum_all": _unary(T.sum_all),
    "softmax_rows": _unary(T.softmax_rows),
    "log_softmax_rows": _unary(T.log_softmax_rows),
    "layer_norm_x": _layer_norm_param(0),
    "layer_norm_gamma": _layer_norm_param(1),
    "layer_norm_beta": _layer_norm_param(2),
    "bce": _bce_case,
    "cross_entropy": _ce_case,
}


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

def toy_config(**overrides) -> ModelConfig:
    base = dict(num_predicates=6, num_classes=4, predicate_type_sizes=[1, 2, 3], visual_dim=5, pair_dim=4,
                union_channels=2, union_size=3, union_dim=4, semantic_dim=2, heads=2, ffn_width=6,
                n_spatial=2, n_temporal=2, window=2, knowledge_hidden=[5, 7], dropout=0.1)
    base.update(overrides)
    return ModelConfig(**base)


def toy_video(seed: int, cfg: Optional[ModelConfig] = None) -> VideoAnnotation:
    """Two frames, one person and three objects, so three tracked pairs per frame."""
    cfg = cfg or toy_config()
    rng = np.random.default_rng([seed, 0x70E])
    classes = [0, 1, 2, 3]
    sizes = cfg.predicate_type_sizes
    starts = np.cumsum([0] + list(sizes))[:-1]
    base_boxes = [np.array([10.0, 10.0, 60.0, 90.0]), np.array([40.0, 50.0, 80.0, 80.0]),
                  np.array([5.0, 60.0, 35.0, 100.0]), np.array([50.0, 0.0, 100.0, 30.0])]
    frames = []
    for t in range(2):
        props = [ObjectProposal(tuple(b + t), np.eye(cfg.num_classes)[c], rng.normal(0.0, 1.0, cfg.visual_dim))
                 for b, c in zip(base_boxes, classes)]
        rels = []
        for i in range(1, 4):
            preds = tuple(int(s + rng.integers(0, n)) for s, n in zip(starts, sizes))
            u = rng.normal(0.0, 1.0, (cfg.union_channels, cfg.union_size, cfg.union_size))
            rels.append(RelationshipInstance(0, i, preds, u, f"toy:{i}"))
        frames.append(FrameAnnotation(t, props, rels))
    return VideoAnnotation("toy", frames, [f"c{i}" for i in range(cfg.num_classes)],
                           [f"p{i}" for i in range(cfg.num_predicates)], list(sizes))


def end_to_end_checks(seed: int, task: str = "predcls", coords_per_seed: int = 24,
                      cfg: Optional[ModelConfig] = None) -> list[CheckResult]:
    """Finite-difference the total loss at randomly sampled parameter coordinates.

    Dropout is active but re-seeded on every evaluation so the loss is a
    deterministic function of the parameters.
    """
    cfg = cfg or toy_config()
    model = STKET(cfg, seed)
    video = toy_video(seed, cfg)
    spatial = build_spatial_matrix([video])
    temporal = build_temporal_matrix([video])
    pv = prepare_video(video, cfg)

    def loss(_: Tensor) -> Tensor:
        out = model.forward(pv, task, spatial, temporal, np.random.default_rng([seed, 0xD20]))
        return model.loss_terms(pv, out, task)["total"]

    named = list(model.named_parameters())
    rng = np.random.default_rng([seed, 0xC0])
    results = []
    for _ in range(coords_per_seed):
        name, p = named[int(rng.integers(len(named)))]
        coord = int(rng.integers(p.size))
        results.append(CheckResult(f"loss[{task}]/{name}[{coord}]", seed,
                                   T.finite_diff_check(loss, p, coords=[coord])))
    return results


def run_suite(seeds: Iterable[int] = range(20), tasks: Iterable[str] = ("predcls", "sgcls"),
              coords_per_seed: int = 24) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for name, case in OP_CASES.items():
            f, x = case(np.random.default_rng([seed, zlib.crc32(name.encode())]))
            results.append(CheckResult(name, seed, T.finite_diff_check(f, x)))
        for task in tasks:
            results.extend(end_to_end_checks(seed, task, coords_per_seed))
    return results


def summarize(results: list[CheckResult], elapsed: float) -> dict:
    worst = max(results, key=lambda r: r.error)
    failed = [r for r in results if not r.passed]
    return {"checks": len(results), "failed": len(failed), "worst": worst.name, "worst_seed": worst.seed,
            "max_rel_error": worst.error, "seconds": elapsed,
            "failures": [{"name": r.name, "seed": r.seed, "error": r.error} for r in failed[:20]]}


def timed_suite(**kw) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = run_suite(**kw)
    return res, time.perf_counter() - t0
