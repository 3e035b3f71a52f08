"""Diagnosis guided feature fusion.

The per-channel means of a feature map are concatenated with the diagnosis
probabilities, mapped back to K channels and squashed by tanh.  The resulting
gate reweights the channels; a learned mix of the gated and ungated maps is
refined by two 3x3 convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    he_uniform,
    linear,
    relu,
    tanh,
)

__all__ = [
    "DgffParams",
    "channel_gap",
    "diagnosis_gate",
    "mix_features",
    "recalibrate",
    "identity_kernel",
]


def identity_kernel(channels: int, size: int = 3, dtype=np.float64) -> np.ndarray:
    """Dirac kernel: a padded 'same' convolution with it returns its input."""
    w = np.zeros((channels, channels, size, size), dtype=dtype)
    c = size // 2
    w[np.arange(channels), np.arange(channels), c, c] = 1.0
    return w


@dataclass
class DgffParams:
    gate_weight: Parameter  # (K, K + C)
    gate_bias: Parameter  # (K,)
    alpha: Parameter  # gated-branch weight, (1,) or (K,)
    lam: Parameter  # identity-branch weight, (1,) or (K,)
    conv1_weight: Parameter
    conv1_bias: Parameter
    conv2_weight: Parameter
    conv2_bias: Parameter

    @classmethod
    def create(
        cls,
        prefix: str,
        channels: int,
        num_classes: int,
        rng: np.random.Generator,
        dtype=np.float64,
        per_channel_mix: bool = False,
    ) -> "DgffParams":
        k, c = channels, num_classes
        mix_shape = (k,) if per_channel_mix else (1,)
        return cls(
            gate_weight=Parameter(f"{prefix}.gate.weight", he_uniform(rng, (k, k + c), k + c, dtype)),
            gate_bias=Parameter(f"{prefix}.gate.bias", np.zeros(k, dtype)),
            alpha=Parameter(f"{prefix}.alpha", np.zeros(mix_shape, dtype)),
            lam=Parameter(f"{prefix}.lambda", np.ones(mix_shape, dtype)),
            conv1_weight=Parameter(f"{prefix}.conv1.weight", identity_kernel(k, 3, dtype)),
            conv1_bias=Parameter(f"{prefix}.conv1.bias", np.zeros(k, dtype)),
            conv2_weight=Parameter(f"{prefix}.conv2.weight", identity_kernel(k, 3, dtype)),
            conv2_bias=Parameter(f"{prefix}.conv2.bias", np.zeros(k, dtype)),
        )

    def __iter__(self) -> Iterator[Parameter]:
        return iter(vars(self).values())

    @property
    def channels(self) -> int:
        return self.gate_weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.gate_weight.shape[1] - self.gate_weight.shape[0]


def channel_gap(features: Tensor) -> Tensor:
    """Spatial mean per channel: (K,H,W) -> (K,) or (N,K,H,W) -> (N,K)."""
    if features.ndim not in (3, 4):
        raise ShapeError(f"channel_gap expects (K,H,W) or (N,K,H,W), got {features.shape}")
    return features.mean(axis=(-2, -1))


def diagnosis_gate(h: Tensor, g: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """tanh(linear(concat(h, g))); accepts vectors or (N, .) batches."""
    single = h.ndim == 1
    hb = h.reshape(1, -1) if single else h
    gb = g.reshape(1, -1) if g.ndim == 1 else g
    if hb.shape[0] != gb.shape[0]:
        raise ShapeError(f"batch mismatch between channel means {h.shape} and diagnosis {g.shape}")
    mu = concat([hb, gb], axis=1)
    if mu.shape[1] != weight.shape[1] or weight.shape[0] != hb.shape[1]:
        raise ShapeError(
            f"gate weight {weight.shape} incompatible with K={hb.shape[1]}, C={gb.shape[1]}"
        )
    out = tanh(linear(mu, weight, bias))
    return out.reshape(out.shape[1]) if single else out


def mix_features(features: Tensor, gate: Tensor, params: DgffParams) -> Tensor:
    """``alpha * (gate (x) F) + lambda * F`` on an (N, K, H, W) batch."""
    n, k = features.shape[:2]
    gb = gate.reshape(1, -1) if gate.ndim == 1 else gate
    if gb.shape != (n, k):
        raise ShapeError(f"gate {gate.shape} does not match features {features.shape}")
    if params.channels != k:
        raise ShapeError(f"DGFF parameters built for {params.channels} channels, got {k}")
    gated = gb.reshape(n, k, 1, 1) * features
    return params.alpha.reshape(-1, 1, 1) * gated + params.lam.reshape(-1, 1, 1) * features


def recalibrate(features: Tensor, gate: Tensor, params: DgffParams) -> Tensor:
    """``conv(relu(conv(mix_features(F))))`` with 'same' padding; keeps F's shape."""
    single = features.ndim == 3
    fb = features.reshape((1,) + features.shape) if single else features
    mixed = mix_features(fb, gate, params)
    hidden = relu(conv2d(mixed, params.conv1_weight, params.conv1_bias, padding=1))
    out = conv2d(hidden, params.conv2_weight, params.conv2_bias, padding=1)
    return out.reshape(features.shape) if single else out
