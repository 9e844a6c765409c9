"""Online tracking state machine with gated one-step model updates.

Per frame: crop the search window at the previous state, featurize, window,
correlate with the filter bank, refine the peak, map back to image
coordinates, then (only when the response is trusted) estimate scale and run
a one-step SGD update of both filter banks. Trust is decided by comparing
the frame's peak-versus-noise ratio and peak value against their running
historical means.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrackerConfig
from .densemap import DenseMap, MapStats, map_stats, xcorr2d_valid
from .features import ConvStack, Window, default_stack
from .geometry import ResponseGeometry, response_geometry
from .regression import (
    FilterBank,
    prepare_features,
    train_first_frame,
    update_one_step,
)
from .scale import (
    ScaleFilter,
    build_scale_samples,
    estimate_scale_multires,
    new_scale_filter,
    refine_peak_1d,
    scale_feature_vector,
    scale_label_at,
    scale_response,
    train_scale_filter,
)


@dataclass
class TargetState:
    """Sub-pixel target center and size in image pixels, plus frame scores."""

    center: tuple[float, float]
    size: tuple[float, float]
    score: float = 0.0
    pnr: float = 0.0
    updated: bool = False
    clamped: bool = False

    def box(self) -> tuple[float, float, float, float]:
        return (
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.size[0],
            self.size[1],
        )

    @classmethod
    def from_box(cls, box) -> "TargetState":
        x, y, w, h = box
        return cls(center=(x + w / 2.0, y + h / 2.0), size=(float(w), float(h)))


@dataclass
class UpdateHistory:
    """Running peak-quality records used as update thresholds."""

    pnr_values: list[float] = field(default_factory=list)
    rmax_values: list[float] = field(default_factory=list)
    window: int = 0  # 0 = unbounded

    def __len__(self) -> int:
        return len(self.pnr_values)

    def append(self, pnr_t: float, rmax_t: float) -> None:
        self.pnr_values.append(float(pnr_t))
        self.rmax_values.append(float(rmax_t))
        if self.window and len(self.pnr_values) > self.window:
            del self.pnr_values[0]
            del self.rmax_values[0]

    def means(self) -> tuple[float, float]:
        if not self.pnr_values:
            raise ValueError("history is empty; the first frame must seed it")
        return (
            float(np.mean(self.pnr_values)),
            float(np.mean(self.rmax_values)),
        )


def pnr(stats: MapStats, epsilon: float) -> float:
    """Peak-versus-noise ratio with a guarded denominator.

    The noise proxy is the mean absolute response excluding the max cell:
    on sign-oscillating maps the plain mean crosses zero and would inflate
    the ratio on exactly the unreliable frames where it must collapse.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    denom = max(stats.mean_abs_excluding_max, epsilon)
    return (stats.max_value - stats.min_value) / denom


def should_update(
    history: UpdateHistory,
    pnr_t: float,
    rmax_t: float,
    beta_pnr: float,
    beta_rmax: float,
    mode: str = "both",
) -> bool:
    """Gate on the historical means of frames 1..T-1, then record the frame.

    Both criteria must hold (inclusive >=); history is appended with the
    current values whatever the verdict. mode="rmax_only" drops the PNR
    criterion, mode="always" records but never blocks.
    """
    pnr_mean, rmax_mean = history.means()
    ok_pnr = pnr_t >= beta_pnr * pnr_mean
    ok_rmax = rmax_t >= beta_rmax * rmax_mean
    if mode == "both":
        verdict = ok_pnr and ok_rmax
    elif mode == "rmax_only":
        verdict = ok_rmax
    elif mode == "always":
        verdict = True
    else:
        raise ValueError(f"unknown gate mode {mode!r}")
    history.append(pnr_t, rmax_t)
    return verdict


def subpixel_refine(resp: np.ndarray, peak: tuple[int, int]) -> tuple[float, float]:
    """Independent per-axis quadratic fits; zero offset on border or flat peaks."""
    i, j = peak
    h, w = resp.shape

    def axis_offset(rm: float, r0: float, rp: float) -> float:
        denom = rm - 2.0 * r0 + rp
        if denom >= 0.0:
            return 0.0
        return float(np.clip((rm - rp) / (2.0 * denom), -0.5, 0.5))

    di = 0.0 if (i <= 0 or i >= h - 1) else axis_offset(resp[i - 1, j], resp[i, j], resp[i + 1, j])
    dj = 0.0 if (j <= 0 or j >= w - 1) else axis_offset(resp[i, j - 1], resp[i, j], resp[i, j + 1])
    return di, dj


def map_to_image(
    peak_rc: tuple[float, float], window: Window, geom: ResponseGeometry
) -> tuple[float, float]:
    """Response-cell peak to image (x, y); inverse of the crop geometry."""
    return geom.peak_to_image(peak_rc, window)


def build_extractor(cfg: TrackerConfig, rng: np.random.Generator) -> ConvStack:
    if cfg.feature_mode == "raw":
        return ConvStack([])
    return default_stack(rng, cfg.stack_init_std)


class Tracker:
    """Single-target tracker; one instance owns its mutable model state."""

    def __init__(
        self,
        cfg: TrackerConfig,
        stack: ConvStack,
        geom: ResponseGeometry,
        fb: FilterBank,
        scale_filter: ScaleFilter | None,
        state: TargetState,
        history: UpdateHistory,
    ):
        self.cfg = cfg
        self.stack = stack
        self.geom = geom
        self.fb = fb
        self.scale_filter = scale_filter
        self.state = state
        self.history = history
        self.hann = geom.feature_window()

    # ------------------------------------------------------------------ init

    @classmethod
    def init(
        cls,
        image: DenseMap,
        bbox: tuple[float, float, float, float],
        cfg: TrackerConfig,
        stack: ConvStack | None = None,
    ) -> "Tracker":
        x, y, w, h = bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"bbox must have positive size, got {bbox}")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7C1]))
        if stack is None:
            stack = build_extractor(cfg, rng)
        geom = response_geometry(cfg, stack)
        state = TargetState.from_box(bbox)
        hann = geom.feature_window()
        window = geom.search_window(state.center, state.size)
        feat, _, _ = prepare_features(image, window, geom, stack, hann, unit_rms=True)
        label = geom.centered_label()
        fb = train_first_frame(feat, label, cfg, rng)

        scale_filter = None
        if cfg.scale_mode == "branch":
            probe = scale_feature_vector(image, state.center, state.size, cfg, stack)
            scale_filter = new_scale_filter(cfg, len(probe))
            samples = build_scale_samples(
                image, state.center, state.size, scale_filter, cfg, stack
            )
            scale_filter = train_scale_filter(samples, scale_filter, cfg)

        tracker = cls(cfg, stack, geom, fb, scale_filter, state, UpdateHistory(window=cfg.history_window))
        # seed the gate history from a post-training self-evaluation
        resp = xcorr2d_valid(feat, fb.f)
        stats = map_stats(resp)
        tracker.history.append(pnr(stats, cfg.pnr_epsilon), stats.max_value)
        tracker.state = replace(state, score=stats.max_value, pnr=tracker.history.pnr_values[0])
        return tracker

    # ------------------------------------------------------------------ step

    def _respond(self, image: DenseMap, window: Window):
        feat, _, _ = prepare_features(image, window, self.geom, self.stack, self.hann, unit_rms=True)
        resp = xcorr2d_valid(feat, self.fb.f)
        return feat, resp

    def step(self, image: DenseMap) -> TargetState:
        cfg = self.cfg
        window = self.geom.search_window(self.state.center, self.state.size)
        _, resp = self._respond(image, window)
        stats = map_stats(resp)
        pnr_t = pnr(stats, cfg.pnr_epsilon)

        peak = (float(stats.max_pos[0]), float(stats.max_pos[1]))
        if cfg.subpixel:
            di, dj = subpixel_refine(resp.data[0], stats.max_pos)
            peak = (peak[0] + di, peak[1] + dj)
        cx, cy = self.geom.peak_to_image(peak, window)

        clamped = False
        if not (0 <= cx <= image.width - 1):
            cx = float(np.clip(cx, 0, image.width - 1))
            clamped = True
        if not (0 <= cy <= image.height - 1):
            cy = float(np.clip(cy, 0, image.height - 1))
            clamped = True
        center = (cx, cy)
        size = self.state.size

        do_update = should_update(
            self.history, pnr_t, stats.max_value, cfg.beta_pnr, cfg.beta_rmax, cfg.gate_mode
        )

        if cfg.scale_mode == "branch" and self.scale_filter is not None:
            if do_update or not cfg.scale_gated:
                # one pyramid serves both estimation and the gated filter
                # update, with the update label re-centered on the estimated
                # scale tap (same recipe as the translation filter's fresh
                # position-centered label)
                filt = self.scale_filter
                samples = build_scale_samples(image, center, size, filt, cfg, self.stack)
                resp = scale_response(samples, filt)
                idx = int(np.argmax(resp))
                n = idx - (filt.num_scales - 1) // 2
                if cfg.subpixel:
                    n = n + refine_peak_1d(resp, idx)
                clamp = cfg.scale_clamp
                mult = float(np.clip(filt.factor ** float(n), 1.0 / clamp, clamp))
                size = (size[0] * mult, size[1] * mult)
                if do_update:
                    label = scale_label_at(filt.num_scales, cfg.scale_sigma, idx)
                    self.scale_filter = train_scale_filter(
                        samples, filt, cfg, steps=1, label=label
                    )
        elif cfg.scale_mode == "multires":
            mult, _ = estimate_scale_multires(
                image,
                center,
                size,
                self.fb,
                cfg,
                self.stack,
                self.geom,
                self.hann,
                cfg.multires_scales(),
            )
            clamp = cfg.scale_clamp
            mult = float(np.clip(mult, 1.0 / clamp, clamp)) ** cfg.multires_damping
            size = (size[0] * mult, size[1] * mult)

        if do_update:
            new_window = self.geom.search_window(center, size)
            feat, _, _ = prepare_features(image, new_window, self.geom, self.stack, self.hann, unit_rms=True)
            self.fb = update_one_step(feat, self.geom.centered_label(), self.fb, cfg)

        self.state = TargetState(
            center=center,
            size=size,
            score=stats.max_value,
            pnr=pnr_t,
            updated=do_update,
            clamped=clamped,
        )
        return self.state
