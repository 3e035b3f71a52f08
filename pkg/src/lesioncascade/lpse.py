"""Lesion-based pooling and shape extraction.

Feature maps are pooled separately over the lesion center and the lesion
periphery: per channel we keep the mean and population standard deviation of
each region, giving a (K, 4) descriptor ``[mean_c, mean_p, std_c, std_p]``.
The descriptor is classified by a linear layer followed by softmax.

Region membership comes from a thresholded segmentation map and carries no
gradient; only the feature values do.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import ShapeError, Tensor, _result, linear, softmax
from .morphology import RegionPair, disk_element, lesion_regions, threshold_mask

__all__ = [
    "resolve_regions",
    "region_statistics",
    "classify_descriptor",
    "lpse_forward",
    "descriptor_to_csv",
]


def resolve_regions(mask: np.ndarray) -> RegionPair:
    """Center/periphery regions for ``mask`` with the empty-region fallbacks.

    * empty mask: both regions are the whole frame (global statistics);
    * mask thinner than the disk (empty erosion): the mask itself is the center.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        full = np.ones_like(mask)
        return RegionPair(center=full, periphery=full.copy())
    regions = lesion_regions(mask, disk_element(mask.shape[0]))
    center = regions.center if regions.center.any() else mask
    periphery = regions.periphery if regions.periphery.any() else np.ones_like(mask)
    return RegionPair(center=center, periphery=periphery)


def _as_region_stack(regions, n: int, hw: tuple) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(regions, RegionPair):
        regions = [regions]
    if len(regions) != n:
        raise ShapeError(f"got {len(regions)} region pairs for a batch of {n}")
    center = np.stack([np.asarray(r.center, dtype=bool) for r in regions])
    periph = np.stack([np.asarray(r.periphery, dtype=bool) for r in regions])
    if center.shape[1:] != hw or periph.shape[1:] != hw:
        raise ShapeError(f"region masks {center.shape[1:]} do not match feature map {hw}")
    return center, periph


def region_statistics(features: Tensor, regions) -> Tensor:
    """Masked mean / population std of each channel over the two regions.

    ``features`` is (K, H, W) with one :class:`RegionPair`, or (N, K, H, W)
    with a sequence of N pairs.  Returns (K, 4) or (N, K, 4).
    An empty region falls back to the whole frame.
    """
    single = features.ndim == 3
    fd = features.data[None] if single else features.data
    if fd.ndim != 4:
        raise ShapeError(f"region_statistics expects (K,H,W) or (N,K,H,W), got {features.shape}")
    n, k, h, w = fd.shape
    center, periph = _as_region_stack(regions, n, (h, w))

    masks = []
    for region in (center, periph):
        region = region.copy()
        region[~region.reshape(n, -1).any(axis=1)] = True
        masks.append(region[:, None].astype(fd.dtype))

    means, stds, devs, counts = [], [], [], []
    for m in masks:
        cnt = m.sum(axis=(2, 3))  # (N, 1)
        mean = (fd * m).sum(axis=(2, 3)) / cnt
        dev = (fd - mean[:, :, None, None]) * m
        std = np.sqrt((dev * dev).sum(axis=(2, 3)) / cnt)
        means.append(mean)
        stds.append(std)
        devs.append(dev)
        counts.append(cnt)

    z = np.stack([means[0], means[1], stds[0], stds[1]], axis=-1)

    def fn(g):
        g = g[None] if single else g
        grad = np.zeros_like(fd)
        for r in range(2):
            cnt = counts[r][:, :, None, None]
            g_mean = g[..., r][:, :, None, None]
            g_std = g[..., 2 + r]
            std = stds[r]
            scale = np.divide(g_std, cnt[:, :, 0, 0] * std, out=np.zeros_like(std), where=std > 0)
            grad += masks[r] * (g_mean / cnt) + devs[r] * scale[:, :, None, None]
        return (grad[0] if single else grad,)

    return _result(z[0] if single else z, (features,), fn, "region_statistics")


def classify_descriptor(z: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Softmax classifier over the flattened descriptor.

    Flattening is channel-major: ``[z1_1, z2_1, z3_1, z4_1, z1_2, ...]``.
    """
    flat = z.reshape(1, -1) if z.ndim == 2 else z.reshape(z.shape[0], -1)
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"descriptor has {flat.shape[1]} values but classifier expects {weight.shape[1]}"
        )
    probs = softmax(linear(flat, weight, bias), axis=-1)
    return probs.reshape(probs.shape[1]) if z.ndim == 2 else probs


def lpse_forward(
    features: Tensor,
    seg_probs: np.ndarray,
    weight: Tensor,
    bias: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor, list[RegionPair]]:
    """Threshold -> disk morphology -> region statistics -> softmax diagnosis.

    ``seg_probs`` is the lesion-probability plane at the feature resolution,
    (H, W) for a single (K, H, W) map or (N, H, W) for a batch.
    Returns ``(diagnosis_probs, descriptor, regions)``.
    """
    probs = np.asarray(seg_probs)
    batch = probs[None] if features.ndim == 3 else probs
    if batch.shape[1:] != features.shape[-2:]:
        raise ShapeError(
            f"segmentation map {probs.shape} does not match features {features.shape}"
        )
    regions = [resolve_regions(threshold_mask(p)) for p in batch]
    z = region_statistics(features, regions[0] if features.ndim == 3 else regions)
    return classify_descriptor(z, weight, bias), z, regions


def descriptor_to_csv(z: np.ndarray) -> str:
    """K rows x 4 columns, with a header row."""
    rows = ["channel,center_mean,periphery_mean,center_std,periphery_std"]
    for k, row in enumerate(np.asarray(z)):
        rows.append(f"{k}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(rows) + "\n"
