"""Binary lesion masks and disk morphology for center/periphery regions.

Masks are plain boolean numpy arrays of shape (H, W).  Pixels outside the
image are treated as background by both dilation and erosion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "StructuringElement",
    "RegionPair",
    "disk_element",
    "disk_radius",
    "threshold_mask",
    "dilate",
    "erode",
    "lesion_regions",
    "mask_to_uint8",
    "mask_from_uint8",
]


@dataclass(frozen=True)
class StructuringElement:
    radius: int
    offsets: tuple[tuple[int, int], ...]  # (dx, dy) pairs with dx^2 + dy^2 <= radius^2

    @classmethod
    def disk(cls, radius: int) -> "StructuringElement":
        if radius < 0:
            raise ValueError(f"radius must be non-negative, got {radius}")
        r2 = radius * radius
        offsets = tuple(
            (dx, dy)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if dx * dx + dy * dy <= r2
        )
        return cls(radius, offsets)

    def __len__(self) -> int:
        return len(self.offsets)


@dataclass(frozen=True)
class RegionPair:
    center: np.ndarray
    periphery: np.ndarray

    @property
    def n_center(self) -> int:
        return int(self.center.sum())

    @property
    def n_periphery(self) -> int:
        return int(self.periphery.sum())


def disk_radius(mask_height: int) -> int:
    """One sixteenth of the mask height, rounded half-up, at least 1."""
    if mask_height < 1:
        raise ValueError(f"mask_height must be >= 1, got {mask_height}")
    return max(1, int(np.floor(mask_height / 16 + 0.5)))


def disk_element(mask_height: int) -> StructuringElement:
    return StructuringElement.disk(disk_radius(mask_height))


def threshold_mask(prob_map: np.ndarray) -> np.ndarray:
    """Lesion where probability is strictly above 0.5."""
    p = np.asarray(prob_map)
    if p.size and (np.nanmin(p) < 0 or np.nanmax(p) > 1 or np.isnan(p).any()):
        raise ValueError("lesion probabilities must lie in [0, 1]")
    return p > 0.5


def _shifted(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """``out[y, x] = mask[y - dy, x - dx]`` with zero fill."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    yt = slice(max(-dy, 0), h + min(-dy, 0))
    xt = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = mask[yt, xt]
    return out


def dilate(mask: np.ndarray, element: StructuringElement) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for dx, dy in element.offsets:
        out |= _shifted(mask, dx, dy)
    return out


def erode(mask: np.ndarray, element: StructuringElement) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    out = np.ones_like(mask)
    for dx, dy in element.offsets:
        out &= _shifted(mask, -dx, -dy)
    return out


def lesion_regions(mask: np.ndarray, element: StructuringElement) -> RegionPair:
    """Center = eroded mask; periphery = dilated minus eroded."""
    inner = erode(mask, element)
    outer = dilate(mask, element)
    return RegionPair(center=inner, periphery=outer & ~inner)


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def mask_from_uint8(values: np.ndarray, threshold: int = 128) -> np.ndarray:
    return np.asarray(values) >= threshold
