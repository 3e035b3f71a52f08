"""Cascade network: backbone, FCN-8s style fusion and LPSE/DGFF stages.

Each stage takes a feature map F_in, predicts a segmentation from it, pools
F_in over the predicted lesion center/periphery to diagnose the lesion, and
uses the diagnosis to recalibrate F_in into the features of the next stage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import (
    ConfigurationError,
    Parameter,
    ShapeError,
    Tensor,
    avg_pool2d,
    conv2d,
    cross_entropy,
    he_uniform,
    linear,
    relu,
    softmax,
    upsample_bilinear,
)
from .dgff import DgffParams, channel_gap, diagnosis_gate, recalibrate
from .lpse import lpse_forward
from .morphology import RegionPair

__all__ = [
    "ModelConfig",
    "StageOutputs",
    "StageParams",
    "CascadeNet",
    "seg_head",
    "stage_forward",
    "total_loss",
]

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    input_channels: int = 3
    block_channels: tuple = (16, 32, 64, 128, 256)
    num_classes_seg: int = 2
    num_classes_cls: int = 2
    num_stages: int = 3
    beta: float = 0.3
    precision: str = "float32"
    pooling: str = "lpse"  # "lpse" or "gap" (baseline classifier)
    use_dgff: bool = True
    share_stages: bool = False
    supervise: str = "all"  # "all" stages or "final" only
    per_channel_mix: bool = False

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) != 5:
            raise ConfigurationError("block_channels must list exactly five widths")
        if self.num_stages < 1:
            raise ConfigurationError("num_stages must be >= 1")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.precision not in DTYPES:
            raise ConfigurationError(f"precision must be one of {sorted(DTYPES)}")
        if self.pooling not in ("lpse", "gap"):
            raise ConfigurationError("pooling must be 'lpse' or 'gap'")
        if self.supervise not in ("all", "final"):
            raise ConfigurationError("supervise must be 'all' or 'final'")
        if self.num_classes_seg != 2:
            raise ConfigurationError("segmentation is lesion vs background (2 classes)")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def feature_channels(self) -> int:
        return self.block_channels[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass
class StageParams:
    seg_weight: Parameter  # (2, K, 1, 1)
    seg_bias: Parameter
    cls_weight: Parameter  # (C, 4K) for lpse pooling, (C, K) for gap
    cls_bias: Parameter
    dgff: Optional[DgffParams] = None

    def __iter__(self) -> Iterator[Parameter]:
        yield from (self.seg_weight, self.seg_bias, self.cls_weight, self.cls_bias)
        if self.dgff is not None:
            yield from self.dgff


@dataclass
class StageOutputs:
    seg_scores: Tensor  # (N, 2, h, w)
    seg_probs: Tensor  # (N, 2, h, w) at feature resolution
    seg_probs_full: Tensor  # (N, 2, H, W)
    diagnosis: Tensor  # (N, C)
    features_out: Tensor  # (N, K, h, w)
    descriptor: Optional[Tensor] = None  # (N, K, 4) with lpse pooling
    regions: list = field(default_factory=list)


def _conv_params(name: str, c_out: int, c_in: int, k: int, rng, dtype) -> tuple[Parameter, Parameter]:
    w = he_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
    return Parameter(f"{name}.weight", w), Parameter(f"{name}.bias", np.zeros(c_out, dtype))


def _linear_params(name: str, d_out: int, d_in: int, rng, dtype) -> tuple[Parameter, Parameter]:
    w = he_uniform(rng, (d_out, d_in), d_in, dtype)
    return Parameter(f"{name}.weight", w), Parameter(f"{name}.bias", np.zeros(d_out, dtype))


def seg_head(features: Tensor, weight: Tensor, bias: Tensor, target_h: int, target_w: int):
    """Per-pixel linear classifier, softmax, then bilinear resize of the class planes.

    Returns ``(scores, probs, probs_full)``; ``probs_full`` is renormalized so
    each pixel's class probabilities sum to one.
    """
    scores = conv2d(features, weight, bias)
    probs = softmax(scores, axis=1)
    up = upsample_bilinear(probs, target_h, target_w, align_corners=False)
    full = up / up.sum(axis=1, keepdims=True)
    return scores, probs, full


def stage_forward(
    features: Tensor,
    params: StageParams,
    target_hw: tuple[int, int],
    pooling: str = "lpse",
) -> StageOutputs:
    """One recursive counterpart: segment, diagnose from the lesion regions, recalibrate."""
    scores, probs, full = seg_head(features, params.seg_weight, params.seg_bias, *target_hw)
    descriptor = None
    regions: list[RegionPair] = []
    if pooling == "lpse":
        diagnosis, descriptor, regions = lpse_forward(
            features, probs.data[:, 1], params.cls_weight, params.cls_bias
        )
    else:
        diagnosis = softmax(linear(channel_gap(features), params.cls_weight, params.cls_bias), axis=-1)
    if params.dgff is not None:
        gate = diagnosis_gate(
            channel_gap(features), diagnosis, params.dgff.gate_weight, params.dgff.gate_bias
        )
        out = recalibrate(features, gate, params.dgff)
    else:
        out = features
    return StageOutputs(scores, probs, full, diagnosis, out, descriptor, regions)


class CascadeNet:
    """Parameter registry plus forward pass for the full cascade."""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        cfg = self.config
        dtype = cfg.dtype
        rng = np.random.default_rng(seed)
        widths = (cfg.input_channels,) + cfg.block_channels

        self.blocks: list[tuple[Parameter, ...]] = []
        for i in range(5):
            w1, b1 = _conv_params(f"backbone.block{i + 1}.conv1", widths[i + 1], widths[i], 3, rng, dtype)
            w2, b2 = _conv_params(f"backbone.block{i + 1}.conv2", widths[i + 1], widths[i + 1], 3, rng, dtype)
            self.blocks.append((w1, b1, w2, b2))

        k = cfg.feature_channels
        self.projections = [
            _conv_params(f"fuse.proj{b}", k, cfg.block_channels[b - 1], 1, rng, dtype) for b in (3, 4, 5)
        ]

        n_unique = 1 if cfg.share_stages else cfg.num_stages
        unique = [self._make_stage(f"stage{i + 1}", rng) for i in range(n_unique)]
        self.stages = [unique[0]] * cfg.num_stages if cfg.share_stages else unique

    def _make_stage(self, prefix: str, rng) -> StageParams:
        cfg = self.config
        k, c, dtype = cfg.feature_channels, cfg.num_classes_cls, cfg.dtype
        seg_w, seg_b = _conv_params(f"{prefix}.seg", cfg.num_classes_seg, k, 1, rng, dtype)
        d_in = 4 * k if cfg.pooling == "lpse" else k
        cls_w, cls_b = _linear_params(f"{prefix}.cls", c, d_in, rng, dtype)
        dgff = (
            DgffParams.create(f"{prefix}.dgff", k, c, rng, dtype, cfg.per_channel_mix)
            if cfg.use_dgff
            else None
        )
        return StageParams(seg_w, seg_b, cls_w, cls_b, dgff)

    # parameters --------------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        seen: dict[str, Parameter] = {}
        for block in self.blocks:
            for p in block:
                seen[p.name] = p
        for pair in self.projections:
            for p in pair:
                seen[p.name] = p
        for stage in self.stages:
            for p in stage:
                seen.setdefault(p.name, p)
        return list(seen.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    # forward -----------------------------------------------------------------
    def _as_input(self, images) -> Tensor:
        data = images.data if isinstance(images, Tensor) else np.asarray(images)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected (N, {self.config.input_channels}, H, W) images, got {data.shape}")
        h, w = data.shape[2:]
        if h % 32 or w % 32:
            raise ConfigurationError(f"image size {h}x{w} must be divisible by 32")
        if isinstance(images, Tensor) and images.requires_grad:
            return images
        return Tensor(data.astype(self.config.dtype, copy=False))

    def backbone_forward(self, images) -> list[Tensor]:
        x = self._as_input(images)
        feats = []
        for w1, b1, w2, b2 in self.blocks:
            x = relu(conv2d(avg_pool2d(x), w1, b1, padding=1))
            x = relu(conv2d(x, w2, b2, padding=1))
            feats.append(x)
        return feats

    def fuse_fcn8s(self, b3: Tensor, b4: Tensor, b5: Tensor) -> Tensor:
        (w3, c3), (w4, c4), (w5, c5) = self.projections
        h, w = b3.shape[2:]
        if b4.shape[2:] != (h // 2, w // 2) or b5.shape[2:] != (h // 4, w // 4):
            raise ShapeError(f"block resolutions {b3.shape}, {b4.shape}, {b5.shape} do not nest")
        fused = (
            conv2d(b3, w3, c3)
            + upsample_bilinear(conv2d(b4, w4, c4), h, w, align_corners=False)
            + upsample_bilinear(conv2d(b5, w5, c5), h, w, align_corners=False)
        )
        return relu(fused)

    def features(self, images) -> Tensor:
        blocks = self.backbone_forward(images)
        return self.fuse_fcn8s(*blocks[2:])

    def forward(self, images) -> list[StageOutputs]:
        x = self._as_input(images)
        target = x.shape[2:]
        feats = self.features(x)
        outputs = []
        for stage in self.stages:
            out = stage_forward(feats, stage, target, self.config.pooling)
            outputs.append(out)
            feats = out.features_out
        return outputs

    __call__ = forward


def total_loss(
    outputs: Sequence[StageOutputs],
    seg_gt: np.ndarray,
    cls_gt: np.ndarray,
    beta: float = 0.3,
    supervise: str = "all",
) -> Tensor:
    """Sum over supervised stages of pixel CE + beta * image CE."""
    seg_gt = np.asarray(seg_gt)
    cls_gt = np.asarray(cls_gt)
    if seg_gt.ndim == 2:
        seg_gt = seg_gt[None]
    if cls_gt.ndim == 0:
        cls_gt = cls_gt[None]
    stages = outputs if supervise == "all" else outputs[-1:]
    expected = stages[0].seg_probs_full.shape
    if seg_gt.shape != (expected[0],) + expected[2:]:
        raise ShapeError(f"segmentation ground truth {seg_gt.shape} does not match predictions {expected}")
    loss = None
    for out in stages:
        term = cross_entropy(out.seg_probs_full, seg_gt.astype(np.intp), axis=1)
        if beta:
            term = term + beta * cross_entropy(out.diagnosis, cls_gt.astype(np.intp), axis=1)
        loss = term if loss is None else loss + term
    return loss
