"""Dense multi-channel 2-D maps and the numerical kernels built on them.

Everything downstream (features, regression filters, response maps, labels)
is a DenseMap: a (channels, height, width) array of float64. Correlation is
plain spatial cross-correlation without kernel flip, valid mode only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when map shapes are incompatible with an operation."""


@dataclass(frozen=True)
class DenseMap:
    """Multi-channel real-valued 2-D array, row-major within each channel.

    data has shape (channels, height, width) and dtype float64. All values
    must be finite.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3:
            raise ShapeError(f"DenseMap needs (channels, h, w) data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ShapeError(f"DenseMap dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("DenseMap values must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, i: int) -> np.ndarray:
        return self.data[i]


@dataclass(frozen=True)
class MapStats:
    """Summary of a single-channel response map.

    max_pos is the row-major-first argmax; mean_excluding_max averages every
    cell except that single max cell, and mean_abs_excluding_max does the
    same over absolute values (a noise-amplitude measure that stays positive
    on maps oscillating around zero).
    """

    max_value: float
    max_pos: tuple[int, int]
    min_value: float
    mean_excluding_max: float
    mean_abs_excluding_max: float


def xcorr2d_valid(x: DenseMap, f: DenseMap) -> DenseMap:
    """Valid-mode cross-correlation of x with filter f, summed over channels.

    No kernel flip: out(i, j) = sum_l sum_{u,v} x[l, i+u, j+v] * f[l, u, v].
    Output is single channel, sized (xh - fh + 1, xw - fw + 1).
    """
    if x.channels != f.channels:
        raise ShapeError(
            f"channel mismatch: x has {x.channels} channels, f has {f.channels}"
        )
    if f.height > x.height or f.width > x.width:
        raise ShapeError(
            f"filter {f.shape} larger than input {x.shape} in valid mode"
        )
    out = xcorr2d_valid_raw(x.data, f.data)
    return DenseMap(out[np.newaxis])


def xcorr2d_valid_raw(x: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Array-level valid cross-correlation; x, f are (c, h, w); returns 2-D."""
    windows = np.lib.stride_tricks.sliding_window_view(x, f.shape[1:], axis=(1, 2))
    # windows: (c, oh, ow, fh, fw)
    return np.einsum("cijuv,cuv->ij", windows, f, optimize=True)


def hann1d(n: int) -> np.ndarray:
    """1-D Hann window; all-ones for n == 1."""
    if n < 1:
        raise ShapeError(f"window length must be >= 1, got {n}")
    if n == 1:
        return np.ones(1)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / (n - 1)))


def hann2d(height: int, width: int) -> DenseMap:
    """Outer product of 1-D Hann windows, single channel."""
    return DenseMap(np.outer(hann1d(height), hann1d(width))[np.newaxis])


def gaussian_label(
    height: int,
    width: int,
    center: tuple[float, float],
    sigma: tuple[float, float],
) -> DenseMap:
    """Gaussian regression target peaked at `center` (row, col), peak value 1."""
    sr, sc = float(sigma[0]), float(sigma[1])
    if sr <= 0 or sc <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cr, cc = center
    rows = np.arange(height, dtype=np.float64) - cr
    cols = np.arange(width, dtype=np.float64) - cc
    y = np.exp(-(rows[:, None] ** 2 / (2.0 * sr**2) + cols[None, :] ** 2 / (2.0 * sc**2)))
    return DenseMap(y[np.newaxis])


def map_stats(r: DenseMap) -> MapStats:
    """Peak statistics of a single-channel map with at least 2 cells."""
    if r.channels != 1:
        raise ShapeError(f"map_stats expects single channel, got {r.channels}")
    a = r.data[0]
    if a.size < 2:
        raise ShapeError("map_stats needs at least 2 cells")
    flat_idx = int(np.argmax(a))  # row-major first-max tie break
    max_pos = np.unravel_index(flat_idx, a.shape)
    max_value = float(a.flat[flat_idx])
    mean_excl = (float(a.sum()) - max_value) / (a.size - 1)
    mean_abs_excl = (float(np.abs(a).sum()) - abs(max_value)) / (a.size - 1)
    return MapStats(
        max_value=max_value,
        max_pos=(int(max_pos[0]), int(max_pos[1])),
        min_value=float(a.min()),
        mean_excluding_max=mean_excl,
        mean_abs_excluding_max=mean_abs_excl,
    )
