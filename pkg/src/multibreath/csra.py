"""Multi-head class-specific residual attention classifier.

A feature map ``[N, d, f, t]`` is viewed as ``P = f*t`` position vectors.
For each head and class, positions are weighted by a softmax over
``T * <x_j, C_i>`` (one-hot argmax when ``T`` is infinite), the weighted
sum ``a_i`` is added with weight ``lam`` to a class-agnostic pooled
feature ``g``, and the result is scored against the same class vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ShapeError

INF = math.inf

TEMPERATURE_SCHEDULES = {
    1: (1.0,),
    2: (1.0, INF),
    4: (1.0, 2.0, 3.0, INF),
    6: (1.0, 2.0, 3.0, 4.0, 5.0, INF),
}


@dataclass(frozen=True)
class CsraHeadConfig:
    num_classes: int = 2
    num_heads: int = 4
    temperatures: tuple | None = None
    lam: float = 0.1
    feature_dim: int = 512
    aggregation: str = "mean"
    share_weights: bool = False

    def __post_init__(self):
        if self.temperatures is None:
            if self.num_heads not in TEMPERATURE_SCHEDULES:
                raise ValueError(f"no fixed temperature schedule for H={self.num_heads}; "
                                 f"pass temperatures explicitly")
            object.__setattr__(self, "temperatures", TEMPERATURE_SCHEDULES[self.num_heads])
        temps = tuple(float(t) for t in self.temperatures)
        object.__setattr__(self, "temperatures", temps)
        if len(temps) != self.num_heads:
            raise ValueError(f"{self.num_heads} heads but {len(temps)} temperatures")
        if any(not t > 0 for t in temps):
            raise ValueError(f"temperatures must be in (0, inf], got {temps}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError(f"aggregation must be 'mean' or 'sum', got {self.aggregation!r}")

    @property
    def weight_shape(self) -> tuple:
        return (1 if self.share_weights else self.num_heads, self.num_classes, self.feature_dim)


def init_head(cfg: CsraHeadConfig, seed: int, dtype=np.float32) -> ParameterSet:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(cfg.feature_dim)
    w = rng.uniform(-bound, bound, size=cfg.weight_shape).astype(dtype)
    return ParameterSet({"head.classifier": Tensor(w)})


def positions(features: Tensor) -> Tensor:
    """``[N, d, f, t] -> [N, P, d]`` with position index ``j = f_idx * t + t_idx``."""
    n, d, f, t = features.shape
    return ad.transpose(ad.reshape(features, (n, d, f * t)), (0, 2, 1))


def _position_logits(x: Tensor, c: Tensor) -> Tensor:
    n, p, d = x.shape
    m = c.shape[0]
    if c.shape[1] != d:
        raise ShapeError(f"class vectors {c.shape} do not match feature dim {d}")
    flat = ad.matmul(ad.reshape(x, (n * p, d)), ad.transpose(c, (1, 0)))
    return ad.transpose(ad.reshape(flat, (n, p, m)), (0, 2, 1))


def attention_scores(x: Tensor, c: Tensor, temperature: float) -> Tensor:
    """Scores ``[N, m, P]`` that sum to one over positions."""
    logits = _position_logits(x, c)
    if math.isinf(temperature):
        # max pooling limit; np.argmax takes the lowest index on ties
        idx = np.argmax(logits.data, axis=-1)
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        return Tensor(onehot)
    return ad.softmax(ad.scale(logits, temperature), axis=-1)


def class_feature(scores: Tensor, x: Tensor) -> Tensor:
    """``a_i = sum_k s_k^i x_k`` -> ``[N, m, d]``."""
    return ad.matmul(scores, x)


def global_feature(features: Tensor) -> Tensor:
    """Average over time, then max + mean over frequency -> ``[N, d]``."""
    per_freq = ad.mean(features, axis=3)
    return ad.add(ad.amax(per_freq, axis=2), ad.mean(per_freq, axis=2))


def _head_weights(weights: Tensor, h: int) -> Tensor:
    return ad.select(weights, h)


def csra_logits(features: Tensor, weights: Tensor, cfg: CsraHeadConfig) -> Tensor:
    n, d, f, t = features.shape
    if d != cfg.feature_dim or weights.shape != cfg.weight_shape:
        raise ShapeError(f"head config expects features with d={cfg.feature_dim} and weights "
                         f"{cfg.weight_shape}; got features {features.shape}, weights {weights.shape}")
    m = cfg.num_classes
    x = positions(features)
    g = global_feature(features)
    g_b = ad.broadcast_to(ad.reshape(g, (n, 1, d)), (n, m, d))
    total = None
    for h, temp in enumerate(cfg.temperatures):
        c = _head_weights(weights, 0 if cfg.share_weights else h)
        a = class_feature(attention_scores(x, c, temp), x)
        fi = ad.add(g_b, ad.scale(a, cfg.lam)) if cfg.lam else g_b
        c_b = ad.broadcast_to(ad.reshape(c, (1, m, d)), (n, m, d))
        z = ad.sum(ad.mul(fi, c_b), axis=2)
        total = z if total is None else ad.add(total, z)
    return ad.scale(total, 1.0 / cfg.num_heads) if cfg.aggregation == "mean" else total


def all_attention_scores(features: Tensor, weights: Tensor, cfg: CsraHeadConfig) -> np.ndarray:
    """Stacked scores ``[N, H, m, P]`` for inspection."""
    with ad.no_grad():
        x = positions(features)
        return np.stack([
            attention_scores(x, _head_weights(weights, 0 if cfg.share_weights else h), temp).data
            for h, temp in enumerate(cfg.temperatures)
        ], axis=1)


def sigmoid_np(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return ad._sigmoid(z)


def predict_labels(logits, threshold: float = 0.5) -> tuple:
    """Return ``(labels, probabilities)``; a label is on when ``p >= threshold``."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    p = sigmoid_np(z)
    return (p >= threshold).astype(np.int64), p
