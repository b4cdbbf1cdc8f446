"""AdamW with global-norm clipping, the epoch loop, and checkpoints."""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensorio
from .knowledge import SpatialMatrixBank, TemporalMatrixBank, load_banks, save_banks
from .model import TASKS, ModelConfig, ModelConfigError, PreparedVideo, STKET
from .tensor import NonFiniteError, Tape, Tensor

CHECKPOINT_VERSION = 1
LOSS_TERMS = ("total", "cls", "skel", "tkel", "sta", "spk", "tpk", "obj")


class NumericError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainRunConfig:
    epochs: int = 10
    seed: int = 0
    lr: float = 2e-5
    clip_norm: float = 5.0
    weight_decay: float = 1e-4
    task: str = "predcls"
    checkpoint_every: int = 0        # epochs; 0 = only at the end
    use_track_ids: bool = True
    shuffle: bool = True

    def validate(self) -> "TrainRunConfig":
        if self.lr < 0 or self.clip_norm <= 0:
            raise TrainConfigError("lr must be >= 0 and clip_norm > 0")
        if self.task not in TASKS:
            raise TrainConfigError(f"task must be one of {TASKS}")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise TrainConfigError("epochs and checkpoint_every must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise TrainConfigError(f"unknown training options: {sorted(extra)}")
        return cls(**d).validate()


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the factor."""
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * factor
    return factor


def adamw_step(named_params: Sequence[tuple[str, Tensor]], state: OptimizerState) -> None:
    """One AdamW update in place, with bias correction and decoupled weight decay."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.lr
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochSummary:
    epoch: int
    mean: dict[str, float]
    max_clip_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


def train_epoch(model: STKET, videos: Sequence[PreparedVideo], spatial: Optional[SpatialMatrixBank],
                temporal: Optional[TemporalMatrixBank], state: OptimizerState, run: TrainRunConfig,
                epoch: int, on_record: Optional[Callable[[dict], None]] = None) -> EpochSummary:
    """One pass over ``videos`` with batch size 1: forward, loss, backward, clip, AdamW step."""
    named = list(model.named_parameters())
    params = [p for _, p in named]
    order = (np.random.default_rng([run.seed, epoch, 0x5EED]).permutation(len(videos))
             if run.shuffle else np.arange(len(videos)))
    sums = dict.fromkeys(LOSS_TERMS, 0.0)
    worst_post = 0.0
    for vi in order:
        pv = videos[int(vi)]
        rng = np.random.default_rng([run.seed, epoch, int(vi)])
        try:
            with Tape() as tape:
                out = model.forward(pv, run.task, spatial, temporal, rng)
                terms = model.loss_terms(pv, out, run.task)
        except NonFiniteError as exc:
            raise NumericError(f"{exc} on video {pv.video_id} (epoch {epoch})") from None
        values = {k: terms[k].item() for k in LOSS_TERMS}
        for k, v in values.items():
            if not math.isfinite(v):
                raise NumericError(f"non-finite loss term '{k}' = {v} on video {pv.video_id} (epoch {epoch})")
        model.zero_grad()
        tape.backward(terms["total"])
        tape.clear()
        clip_gradients(params, run.clip_norm)
        worst_post = max(worst_post, global_grad_norm(params))
        adamw_step(named, state)
        for k, v in values.items():
            sums[k] += v
        if on_record is not None:
            on_record({"epoch": epoch, "video": pv.video_id, **values})
    n = max(1, len(videos))
    return EpochSummary(epoch, {k: v / n for k, v in sums.items()}, worst_post)


def train(model: STKET, videos: Sequence[PreparedVideo], spatial, temporal, run: TrainRunConfig,
          state: Optional[OptimizerState] = None, start_epoch: int = 0,
          on_record: Optional[Callable[[dict], None]] = None,
          checkpoint_dir: Optional[str | os.PathLike] = None) -> tuple[list[EpochSummary], OptimizerState]:
    run.validate()
    if state is None:
        state = OptimizerState(lr=run.lr, weight_decay=run.weight_decay)
    history = []
    for epoch in range(start_epoch, run.epochs):
        summary = train_epoch(model, videos, spatial, temporal, state, run, epoch, on_record)
        history.append(summary)
        if on_record is not None:
            on_record({"epoch": epoch, "video": None, **{f"mean_{k}": v for k, v in summary.mean.items()}})
        due = run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0
        if checkpoint_dir is not None and (due or epoch + 1 == run.epochs):
            save_checkpoint(checkpoint_dir, model, state, epoch + 1, run, spatial, temporal)
    return history, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, model: STKET, state: Optional[OptimizerState] = None,
                    epoch: int = 0, run: Optional[TrainRunConfig] = None,
                    spatial: Optional[SpatialMatrixBank] = None,
                    temporal: Optional[TemporalMatrixBank] = None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": CHECKPOINT_VERSION, "epoch": epoch,
                "model_config": model.config.to_dict(),
                "train_config": asdict(run) if run is not None else None,
                "parameters": [], "optimizer": None, "knowledge": None}
    with open(out / "params.stkt", "wb") as fh:
        for name, p in model.named_parameters():
            off = tensorio.write_tensor(fh, p.data)
            manifest["parameters"].append({"name": name, "shape": list(p.shape), "ref": f"params.stkt#{off}"})
    if state is not None:
        opt = {"lr": state.lr, "betas": list(state.betas), "eps": state.eps,
               "weight_decay": state.weight_decay, "step": state.step, "moments": []}
        with open(out / "optim.stkt", "wb") as fh:
            for name in sorted(state.exp_avg):
                o1 = tensorio.write_tensor(fh, state.exp_avg[name])
                o2 = tensorio.write_tensor(fh, state.exp_avg_sq[name])
                opt["moments"].append({"name": name, "exp_avg": f"optim.stkt#{o1}",
                                       "exp_avg_sq": f"optim.stkt#{o2}"})
        manifest["optimizer"] = opt
    elif (out / "optim.stkt").exists():
        (out / "optim.stkt").unlink()
    if spatial is not None and temporal is not None:
        save_banks(out / "knowledge", spatial, temporal)
        manifest["knowledge"] = "knowledge"
    elif (out / "knowledge").exists():
        shutil.rmtree(out / "knowledge")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


@dataclass
class Checkpoint:
    model: STKET
    state: Optional[OptimizerState]
    epoch: int
    run: Optional[TrainRunConfig]
    spatial: Optional[SpatialMatrixBank]
    temporal: Optional[TemporalMatrixBank]


def load_checkpoint(path: str | os.PathLike, expect: Optional[ModelConfig] = None) -> Checkpoint:
    base = Path(path)
    try:
        manifest = json.loads((base / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{base}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{base}: corrupt manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{base}: checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in cfg.to_dict().items() if expect.to_dict().get(k) != v)
        raise ModelConfigError(f"checkpoint config differs from expected in {diff}")
    read = tensorio.TensorReader(base)
    model = STKET(cfg)
    try:
        state_dict = {e["name"]: read(e["ref"]) for e in manifest["parameters"]}
        model.load_state_dict(state_dict)
        state = None
        opt = manifest.get("optimizer")
        if opt is not None:
            state = OptimizerState(lr=opt["lr"], betas=tuple(opt["betas"]), eps=opt["eps"],
                                   weight_decay=opt["weight_decay"], step=opt["step"])
            for e in opt["moments"]:
                state.exp_avg[e["name"]] = read(e["exp_avg"]).copy()
                state.exp_avg_sq[e["name"]] = read(e["exp_avg_sq"]).copy()
    except tensorio.TensorFormatError as exc:
        raise CheckpointError(f"{base}: corrupt tensor file ({exc})") from None
    run = TrainRunConfig(**manifest["train_config"]) if manifest.get("train_config") else None
    spatial = temporal = None
    if manifest.get("knowledge"):
        spatial, temporal = load_banks(base / manifest["knowledge"])
    return Checkpoint(model, state, int(manifest.get("epoch", 0)), run, spatial, temporal)
