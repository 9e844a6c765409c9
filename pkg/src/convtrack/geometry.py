"""Shared coordinate bookkeeping between image, patch, feature and response grids.

The search window is padding_factor x target size, resampled to a fixed
patch_size, so feature/filter/response shapes are constants of the config
and extractor. Mapping between response cells and image pixels is done in
displacement form around the window center, which makes the centering
identity exact.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import TrackerConfig
from .densemap import DenseMap, ShapeError, gaussian_label, hann2d
from .features import ConvStack, Window


@dataclass(frozen=True)
class ResponseGeometry:
    patch_hw: tuple[int, int]
    feature_hw: tuple[int, int]
    filter_hw: tuple[int, int]
    response_hw: tuple[int, int]
    channels: int
    stride: int
    padding_factor: float
    label_sigma: tuple[float, float]  # in response cells

    @property
    def response_center(self) -> tuple[float, float]:
        rh, rw = self.response_hw
        return ((rh - 1) / 2.0, (rw - 1) / 2.0)

    def search_window(self, center: tuple[float, float], size: tuple[float, float]) -> Window:
        return Window(
            cx=center[0],
            cy=center[1],
            w=self.padding_factor * size[0],
            h=self.padding_factor * size[1],
        )

    def _px_per_cell(self, window: Window) -> tuple[float, float]:
        ph, pw = self.patch_hw
        sx = (window.w - 1.0) / (pw - 1) if pw > 1 else 1.0
        sy = (window.h - 1.0) / (ph - 1) if ph > 1 else 1.0
        return self.stride * sx, self.stride * sy

    def peak_to_image(self, peak_rc: tuple[float, float], window: Window) -> tuple[float, float]:
        """Map a (possibly sub-cell) response peak to image (x, y)."""
        cr, cc = self.response_center
        px_x, px_y = self._px_per_cell(window)
        x = window.cx + (peak_rc[1] - cc) * px_x
        y = window.cy + (peak_rc[0] - cr) * px_y
        return x, y

    def image_to_cell(self, xy: tuple[float, float], window: Window) -> tuple[float, float]:
        """Inverse of peak_to_image: image point -> real response cell (row, col)."""
        cr, cc = self.response_center
        px_x, px_y = self._px_per_cell(window)
        return (cr + (xy[1] - window.cy) / px_y, cc + (xy[0] - window.cx) / px_x)

    def label_for(self, center_rc: tuple[float, float]) -> DenseMap:
        return gaussian_label(*self.response_hw, center=center_rc, sigma=self.label_sigma)

    def centered_label(self) -> DenseMap:
        return self.label_for(self.response_center)

    def feature_window(self) -> DenseMap:
        return hann2d(*self.feature_hw)


def response_geometry(cfg: TrackerConfig, stack: ConvStack) -> ResponseGeometry:
    """Derive all grid shapes for a config + extractor pair.

    The filter spans the feature map of a target-sized (unpadded) patch, so
    the response retains spatial extent over the context region.
    """
    p = cfg.patch_size
    feature_hw = stack.output_hw(p, p)
    target_px = max(2, round(p / cfg.padding_factor))
    filter_hw = stack.output_hw(target_px, target_px)
    rh = feature_hw[0] - filter_hw[0] + 1
    rw = feature_hw[1] - filter_hw[1] + 1
    if rh < 3 or rw < 3:
        raise ShapeError(
            f"response grid {rh}x{rw} too small; increase patch_size or padding_factor"
        )
    stride = stack.total_stride
    target_cells = target_px / stride
    sigma = max(cfg.label_sigma_factor * target_cells, 1e-3)
    return ResponseGeometry(
        patch_hw=(p, p),
        feature_hw=feature_hw,
        filter_hw=filter_hw,
        response_hw=(rh, rw),
        channels=stack.out_channels(1),
        stride=stride,
        padding_factor=cfg.padding_factor,
        label_sigma=(sigma, sigma),
    )
