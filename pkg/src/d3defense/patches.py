"""Overlapping patch extraction and averaging reconstruction.

Images are ``(height, width, channels)`` float arrays. A patch vector is the
row-major copy of a ``P x P x C`` window, so channels are interleaved per
pixel (RGB RGB ...).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError


def as_image(img) -> np.ndarray:
    """Return ``img`` as a float64 ``(H, W, C)`` array; 2-D input gets ``C = 1``."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"expected HxW or HxWxC image with C in (1, 3), got shape {arr.shape}")
    return arr


def default_stride(patch_size: int) -> int:
    """75% overlap between neighbouring windows."""
    return max(1, patch_size // 4)


def window_starts(dim: int, patch_size: int, stride: int) -> np.ndarray:
    return np.arange(0, dim - patch_size + 1, stride)


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    rows: int
    cols: int
    channels: int
    patches: np.ndarray  # (rows * cols, P * P * C), row-major over windows

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def with_patches(self, patches: np.ndarray) -> "PatchGrid":
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape != self.patches.shape:
            raise DimensionError(f"patch array shape {patches.shape} != grid shape {self.patches.shape}")
        return PatchGrid(self.patch_size, self.stride, self.rows, self.cols, self.channels, patches)


def _check_geometry(height: int, width: int, patch_size: int, stride: int) -> None:
    if not 1 <= patch_size <= min(height, width):
        raise DimensionError(
            f"patch size {patch_size} must be in [1, {min(height, width)}] for a {height}x{width} image"
        )
    if not 1 <= stride <= patch_size:
        raise DimensionError(f"stride {stride} must be in [1, {patch_size}] (patch size {patch_size})")


def grid_shape(height: int, width: int, patch_size: int, stride: int) -> tuple[int, int]:
    _check_geometry(height, width, patch_size, stride)
    return (height - patch_size) // stride + 1, (width - patch_size) // stride + 1


def extract_patches(img, patch_size: int, stride: int | None = None) -> PatchGrid:
    """Cut ``img`` into overlapping ``patch_size`` windows, top-left first.

    No padding is applied; the last window in each direction starts at the
    largest multiple of ``stride`` that still fits.
    """
    img = as_image(img)
    height, width, channels = img.shape
    if stride is None:
        stride = default_stride(patch_size)
    rows, cols = grid_shape(height, width, patch_size, stride)
    # (H-P+1, W-P+1, C, P, P) -> pick strided starts -> (rows, cols, P, P, C)
    windows = sliding_window_view(img, (patch_size, patch_size), axis=(0, 1))[::stride, ::stride]
    windows = windows.transpose(0, 1, 3, 4, 2)
    patches = np.ascontiguousarray(windows).reshape(rows * cols, patch_size * patch_size * channels)
    return PatchGrid(patch_size, stride, rows, cols, channels, patches)


def coverage_count(height: int, width: int, patch_size: int, stride: int) -> np.ndarray:
    """Number of windows containing each pixel, shape ``(H, W)``."""
    grid_shape(height, width, patch_size, stride)
    count_r = np.zeros(height, dtype=np.int64)
    count_c = np.zeros(width, dtype=np.int64)
    for r in window_starts(height, patch_size, stride):
        count_r[r:r + patch_size] += 1
    for c in window_starts(width, patch_size, stride):
        count_c[c:c + patch_size] += 1
    return np.outer(count_r, count_c)


def uncovered_margin(height: int, width: int, patch_size: int, stride: int) -> tuple[int, int]:
    """Rows at the bottom and columns at the right that no window reaches."""
    grid_shape(height, width, patch_size, stride)
    return (height - patch_size) % stride, (width - patch_size) % stride


def merge_patches(grid: PatchGrid, height: int, width: int, fill=None, clamp: bool = True) -> np.ndarray:
    """Average overlapping patches back into an ``(H, W, C)`` image.

    Pixels not covered by any window (only possible when the stride does not
    divide ``dim - P``) are taken from ``fill``; without ``fill`` such a
    geometry is rejected.
    """
    P, s, C = grid.patch_size, grid.stride, grid.channels
    rows, cols = grid_shape(height, width, P, s)
    if (rows, cols) != (grid.rows, grid.cols):
        raise DimensionError(
            f"grid {grid.rows}x{grid.cols} (P={P}, stride={s}) does not fit a {height}x{width} image"
        )
    if grid.patches.shape != (rows * cols, P * P * C):
        raise DimensionError(f"patch array shape {grid.patches.shape} inconsistent with grid geometry")

    acc = np.zeros((height, width, C))
    blocks = grid.patches.reshape(rows, cols, P, P, C)
    for bi, r in enumerate(window_starts(height, P, s)):
        for bj, c in enumerate(window_starts(width, P, s)):
            acc[r:r + P, c:c + P] += blocks[bi, bj]
    count = coverage_count(height, width, P, s)
    covered = count > 0
    out = np.empty_like(acc)
    out[covered] = acc[covered] / count[covered][:, None]
    if not covered.all():
        if fill is None:
            raise DimensionError(
                f"stride {s} leaves a {uncovered_margin(height, width, P, s)} margin uncovered; pass fill"
            )
        fill = as_image(fill)
        if fill.shape != (height, width, C):
            raise DimensionError(f"fill shape {fill.shape} != {(height, width, C)}")
        out[~covered] = fill[~covered]
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out
