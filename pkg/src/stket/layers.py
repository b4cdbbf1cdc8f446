"""Parameter containers and transformer building blocks on top of the tensor engine."""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Collects parameters from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    """Row-vector affine map ``x @ weight + bias``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = param(rng.uniform(-bound, bound, (n_in, n_out)), dtype)
        self.bias = param(rng.uniform(-bound, bound, n_out), dtype)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Affine layers with ReLU between them and nothing after the last."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, dtype=np.float64):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(widths, widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class Dropout:
    """Draws keep-masks from a caller-supplied generator; ``rng=None`` means eval mode."""

    def __init__(self, rate: float, rng: Optional[np.random.Generator]):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.rate == 0.0:
            return x
        return T.dropout(x, self.rng.random(x.shape) >= self.rate, self.rate)


class MultiHeadAttention(Module):
    """Multi-head attention whose queries and keys can carry an additive bias.

    ``qk_bias`` is added after the query/key projections, which is how
    knowledge embeddings and frame encodings enter; values never see it.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)

    def __call__(self, x: Tensor, qk_bias: Optional[Tensor] = None, mask: Optional[np.ndarray] = None,
                 drop: Optional[Dropout] = None, keep_weights: bool = False):
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        if qk_bias is not None:
            q = q + qk_bias
            k = k + qk_bias
        d = x.shape[1]
        dh = d // self.heads
        scale = 1.0 / math.sqrt(dh)
        outs, weights = [], []
        for h in range(self.heads):
            cols = (slice(None), slice(h * dh, (h + 1) * dh))
            scores = T.matmul(q[cols], T.transpose(k[cols])) * scale
            if mask is not None:
                scores = scores + Tensor(mask, dtype=scores.dtype)
            p = T.softmax_rows(scores)
            if keep_weights:
                weights.append(p.data)
            if drop is not None:
                p = drop(p)
            outs.append(T.matmul(p, v[cols]))
        out = self.wo(T.concat(outs, axis=1))
        return (out, weights) if keep_weights else out


class AttentionBlock(Module):
    """Post-norm transformer layer: attention, residual, norm, then optional FFN, residual, norm."""

    def __init__(self, d: int, heads: int, ffn_width: Optional[int], rng: np.random.Generator,
                 dtype=np.float64):
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm1_g = param(np.ones(d), dtype)
        self.norm1_b = param(np.zeros(d), dtype)
        if ffn_width:
            self.ffn_in = Linear(d, ffn_width, rng, dtype)
            self.ffn_out = Linear(ffn_width, d, rng, dtype)
            self.norm2_g = param(np.ones(d), dtype)
            self.norm2_b = param(np.zeros(d), dtype)
        self.has_ffn = bool(ffn_width)

    def __call__(self, x: Tensor, qk_bias: Optional[Tensor] = None, mask: Optional[np.ndarray] = None,
                 drop: Optional[Dropout] = None) -> Tensor:
        drop = drop or Dropout(0.0, None)
        a = self.attn(x, qk_bias, mask, drop)
        x = T.layer_norm(x + drop(a), self.norm1_g, self.norm1_b)
        if self.has_ffn:
            f = self.ffn_out(drop(T.relu(self.ffn_in(x))))
            x = T.layer_norm(x + drop(f), self.norm2_g, self.norm2_b)
        return x


class Classifier(Module):
    """Sigmoid predicate head; one affine block per predicate type, concatenated."""

    def __init__(self, d: int, partition: Sequence[int], rng: np.random.Generator, dtype=np.float64):
        self.blocks = [Linear(d, n, rng, dtype) for n in partition]

    def logits(self, x: Tensor) -> Tensor:
        return T.concat([b(x) for b in self.blocks], axis=1)

    def __call__(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x))


def bce(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Summed binary cross-entropy, ``-sum(y log p + (1 - y) log(1 - p))``, p clamped by 1e-12."""
    y = Tensor(np.asarray(targets, dtype=probs.dtype))
    p = T.clamp(probs, T.CLAMP_EPS, 1.0 - T.CLAMP_EPS)
    pos = T.mul(y, T.log(p))
    neg = T.mul(1.0 - y, T.log(1.0 - p))
    return -(T.sum_all(pos + neg))


def cross_entropy(logits: Tensor, classes: Sequence[int]) -> Tensor:
    """Summed softmax cross-entropy of integer ``classes``."""
    logp = T.log_softmax_rows(logits)
    rows = np.arange(len(classes))
    return -T.sum_all(T.index(logp, (rows, np.asarray(classes, dtype=np.intp))))
