"""Losses, Adam with cosine annealing, the epoch loop and binary checkpoints."""

from __future__ import annotations

import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .backbone import BackboneConfig
from .csra import CsraHeadConfig
from .errors import (CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError, NonFiniteError, NumericalError, ValidationError)
from .frontend import MaskSpec, draw_masks
from .model import MultiBreathModel

LOSS_MODES = ("multilabel_bce", "singlelabel_ce")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    eta_min: float = 0.0
    loss_mode: str = "multilabel_bce"
    seed: int = 0
    mask: MaskSpec = field(default_factory=MaskSpec)
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1 or self.threads < 1:
            raise ValidationError("learning_rate, batch_size, epochs and threads must be positive")
        if self.eta_min < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ValidationError("eta_min, weight_decay and grad_clip must be >= 0")
        if isinstance(self.mask, dict):
            object.__setattr__(self, "mask", MaskSpec(**self.mask))

    @property
    def num_outputs(self) -> int:
        return 2 if self.loss_mode == "multilabel_bce" else 4


# --- losses ------------------------------------------------------------------

def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy over batch and labels, from logits."""
    y = np.asarray(targets)
    if np.any((y != 0) & (y != 1)):
        raise ValidationError("BCE targets must be 0/1")
    return ad.bce_with_logits(logits, y)


def cross_entropy_loss(logits: Tensor, class_ids) -> Tensor:
    c = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if c.shape != (n,) or np.any((c < 0) | (c >= k)):
        raise ValidationError(f"class ids must be {n} values in 0..{k - 1}")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), c] = 1
    return ad.scale(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), Tensor(onehot))), -1.0 / n)


# --- schedule & optimiser -------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-3, eta_min: float = 0.0) -> float:
    if total_steps <= 0 or step >= total_steps:
        return eta_min
    step = max(step, 0)
    return eta_min + 0.5 * (lr_max - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params, state: OptimizerState, lr: float, weight_decay: float = 0.0,
              grad_clip: float = 0.0):
    """Bias-corrected Adam. All gradients are validated before anything is mutated."""
    grads = {}
    for name, t in params.items():
        if t.grad is None:
            raise NumericalError(f"adam_step: parameter {name} has no gradient")
        if not np.isfinite(t.grad).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for {name}")
        grads[name] = t.grad
    if grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * t.data
        m = state.m.setdefault(name, np.zeros_like(t.data))
        v = state.v.setdefault(name, np.zeros_like(t.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        mhat = m / c1
        vhat = v / c2
        t.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(t.data.dtype)


# --- epoch loop ------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr_start: float
    lr_end: float
    steps: int
    batch_losses: list
    wall_seconds: float


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _masked_item(spec: np.ndarray, mask: MaskSpec, fill: float, seed) -> np.ndarray:
    rects = draw_masks(spec.shape, mask, np.random.default_rng(seed))
    out = spec.copy()
    for r in rects:
        if r.axis == "time":
            out[:, r.start:r.start + r.width] = fill
        else:
            out[r.start:r.start + r.width, :] = fill
    return out


def make_batch(spectrograms: np.ndarray, idx: np.ndarray, cfg: TrainConfig, epoch: int,
               fill: float, pool: ThreadPoolExecutor | None = None) -> np.ndarray:
    # one independent stream per (seed, epoch, sample) keeps batches identical at any thread count
    jobs = [(spectrograms[i], cfg.mask, fill, [cfg.seed, epoch, int(i)]) for i in idx]
    items = list(pool.map(lambda a: _masked_item(*a), jobs)) if pool else [_masked_item(*a) for a in jobs]
    return np.stack(items)


def train_epoch(model: MultiBreathModel, spectrograms: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                epoch_index: int, state: OptimizerState, total_steps: int,
                pool: ThreadPoolExecutor | None = None) -> EpochLog:
    """One pass over the data in seeded random order; the last partial batch is kept.

    ``labels`` are ``[N, 2]`` bits for BCE, or class ids ``[N]`` for CE.
    """
    n = len(spectrograms)
    if n == 0:
        raise ValidationError("train_epoch needs at least one sample")
    t0 = time.perf_counter()
    order = np.random.default_rng([cfg.seed, epoch_index]).permutation(n)
    bc = model.backbone_cfg
    # mask fill is expressed in standardised units
    fill = bc.input_mean + cfg.mask.fill_value * bc.input_std
    losses = []
    lr_start = cosine_lr(state.step, total_steps, cfg.learning_rate, cfg.eta_min)
    lr = lr_start
    for lo in range(0, n, cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        x = make_batch(spectrograms, idx, cfg, epoch_index, fill, pool)
        lr = cosine_lr(state.step, total_steps, cfg.learning_rate, cfg.eta_min)
        model.params.zero_grads()
        try:
            logits = model.logits(x, mode="train")
            if cfg.loss_mode == "multilabel_bce":
                loss = bce_loss(logits, labels[idx])
            else:
                loss = cross_entropy_loss(logits, labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"loss = {value}")
            loss.backward()
        except NonFiniteError as exc:
            raise NumericalError(f"epoch {epoch_index}, batch starting at {lo}: non-finite training "
                                 f"state ({exc}); sample indices {idx.tolist()}") from exc
        adam_step(model.params, state, lr, cfg.weight_decay, cfg.grad_clip)
        losses.append(value)
        del logits, loss
    return EpochLog(epoch_index, float(np.mean(losses)), lr_start, lr, len(losses), losses,
                    time.perf_counter() - t0)


# --- checkpoints -------------------------------------------------------------------

MAGIC = b"MBREATH\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    arrays: dict  # name -> float32 array

    def backbone_config(self) -> BackboneConfig:
        c = dict(self.config["backbone"])
        c["widths"] = tuple(c["widths"])
        return BackboneConfig(**c)

    def head_config(self) -> CsraHeadConfig:
        c = dict(self.config["head"])
        c["temperatures"] = tuple(float(t) for t in c["temperatures"])
        return CsraHeadConfig(**c)

    def build_model(self) -> MultiBreathModel:
        model = MultiBreathModel(self.backbone_config(), self.head_config(), seed=0)
        restore_model(model, self)
        return model

    def optimizer_state(self) -> OptimizerState | None:
        opt = self.config.get("optimizer")
        if opt is None:
            return None
        state = OptimizerState(step=int(opt["step"]), beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
        for name, arr in self.arrays.items():
            if name.startswith("optim.m."):
                state.m[name[len("optim.m."):]] = arr.copy()
            elif name.startswith("optim.v."):
                state.v[name[len("optim.v."):]] = arr.copy()
        return state


def _encode_config(config: dict) -> bytes:
    def fix(o):
        if isinstance(o, float) and math.isinf(o):
            return "inf"
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        return o
    return json.dumps(fix(config), sort_keys=True, separators=(",", ":")).encode()


def _decode_config(raw: bytes) -> dict:
    def fix(o):
        if o == "inf":
            return math.inf
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, list):
            return [fix(v) for v in o]
        return o
    return fix(json.loads(raw.decode()))


def model_config(model: MultiBreathModel) -> dict:
    return {"backbone": asdict(model.backbone_cfg), "head": asdict(model.head_cfg)}


def save_checkpoint(path, model: MultiBreathModel, extra_config: dict | None = None,
                    optimizer: OptimizerState | None = None):
    config = {"format_version": FORMAT_VERSION, **model_config(model), **(extra_config or {})}
    arrays = {name: t.data for name, t in model.params.items()}
    for name in sorted(model.stats):
        arrays[f"stats.{name}.mean"] = model.stats[name].mean
        arrays[f"stats.{name}.var"] = model.stats[name].var
    if optimizer is not None:
        config["optimizer"] = {"step": optimizer.step, "beta1": optimizer.beta1,
                               "beta2": optimizer.beta2, "eps": optimizer.eps}
        for name in sorted(optimizer.m):
            arrays[f"optim.m.{name}"] = optimizer.m[name]
            arrays[f"optim.v.{name}"] = optimizer.v[name]
    cfg_bytes = _encode_config(config)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if len(r.buf) < len(MAGIC) or r.buf[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a multibreath checkpoint (bad magic)")
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        config = _decode_config(r.take(r.u32()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt embedded config ({exc})") from None
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return Checkpoint(config, arrays)


def restore_model(model: MultiBreathModel, ckpt: Checkpoint):
    """Copy checkpoint values into ``model``; shapes must agree name by name."""
    for name, t in model.params.items():
        if name not in ckpt.arrays:
            raise CheckpointShapeError(f"checkpoint has no parameter {name}")
        arr = ckpt.arrays[name]
        if arr.shape != t.shape:
            raise CheckpointShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.astype(t.dtype).copy()
    for name, st in model.stats.items():
        for part in ("mean", "var"):
            key = f"stats.{name}.{part}"
            arr = ckpt.arrays.get(key)
            if arr is None or arr.shape != getattr(st, part).shape:
                raise CheckpointShapeError(f"running statistic {key} missing or mis-shaped")
            setattr(st, part, arr.astype(st.mean.dtype).copy())
