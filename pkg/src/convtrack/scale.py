"""1-D convolutional scale branch and the exhaustive multi-resolution baseline.

A pyramid of S crops sized a^n * (W, H) is resampled to a small template and
featurized; an S-tap multi-channel 1-D filter is correlated along the scale
axis against a Gaussian target centered at n = 0. Zooming the target shifts
the pyramid rows, so the response argmax reads off the scale change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrackerConfig
from .densemap import DenseMap, ShapeError
from .features import ConvStack, Patch, Window, crop_and_resize, normalize_patch, to_gray
from .regression import FilterBank, SgdState, sgd_step
from .densemap import xcorr2d_valid


class ScaleError(ValueError):
    pass


@dataclass
class ScaleFilter:
    """Multi-channel 1-D filter over the scale axis.

    weights has shape (S, L): one L-dim tap per scale offset. label is the
    1-D Gaussian target over scale indices, peaked at the middle (n = 0).
    """

    weights: np.ndarray
    num_scales: int
    factor: float
    label: np.ndarray
    trained: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.num_scales % 2 == 0 or self.num_scales < 1:
            raise ScaleError(f"S must be odd and positive, got {self.num_scales}")
        if self.factor <= 1.0:
            raise ScaleError(f"scale factor must be > 1, got {self.factor}")
        if self.weights.shape[0] != self.num_scales:
            raise ScaleError(
                f"weights rows {self.weights.shape[0]} != num_scales {self.num_scales}"
            )

    @property
    def exponents(self) -> np.ndarray:
        half = (self.num_scales - 1) // 2
        return np.arange(-half, half + 1)


@dataclass
class ScaleSampleSet:
    """Per-scale feature vectors, row n extracted from an a^n-sized crop."""

    rows: np.ndarray  # (S, L), ordered by ascending exponent

    @property
    def num_scales(self) -> int:
        return self.rows.shape[0]


def scale_label_at(num_scales: int, sigma: float, center_idx: float) -> np.ndarray:
    """1-D Gaussian over scale taps peaked at an arbitrary tap index."""
    k = np.arange(num_scales, dtype=np.float64)
    return np.exp(-((k - center_idx) ** 2) / (2.0 * sigma**2))


def scale_label(num_scales: int, sigma: float) -> np.ndarray:
    return scale_label_at(num_scales, sigma, (num_scales - 1) // 2)


def new_scale_filter(cfg: TrackerConfig, feature_len: int) -> ScaleFilter:
    return ScaleFilter(
        weights=np.zeros((cfg.num_scales, feature_len)),
        num_scales=cfg.num_scales,
        factor=cfg.scale_factor,
        label=scale_label(cfg.num_scales, cfg.scale_sigma),
    )


def _pool_to_limit(feat: np.ndarray, max_dims: int) -> np.ndarray:
    """Mean-pool each channel down so the flattened vector fits max_dims."""
    c, h, w = feat.shape
    side = max(1, int(np.sqrt(max_dims / c)))
    side = min(side, h, w)
    hs, ws = h // side, w // side
    pooled = feat[:, : side * hs, : side * ws]
    pooled = pooled.reshape(c, side, hs, side, ws).mean(axis=(2, 4))
    return pooled.reshape(-1)


def scale_feature_vector(
    image: DenseMap,
    center: tuple[float, float],
    size: tuple[float, float],
    cfg: TrackerConfig,
    extractor: ConvStack,
) -> np.ndarray:
    t = cfg.scale_template_size
    window = Window(center[0], center[1], size[0], size[1])
    patch = normalize_patch(crop_and_resize(to_gray(image), window, (t, t)))
    from .features import stack_forward

    feat, _ = stack_forward(patch.pixels.data, extractor)
    return _pool_to_limit(feat, cfg.scale_feature_dims)


def pyramid_sizes(size: tuple[float, float], filt: ScaleFilter) -> np.ndarray:
    """Exact (unrounded) pyramid sizes a^n * (W, H), one row per exponent."""
    s = filt.factor ** filt.exponents.astype(np.float64)
    return np.stack([s * size[0], s * size[1]], axis=1)


def build_scale_samples(
    image: DenseMap,
    center: tuple[float, float],
    size: tuple[float, float],
    filt: ScaleFilter,
    cfg: TrackerConfig,
    extractor: ConvStack,
) -> ScaleSampleSet:
    """Crop the a^n pyramid around the target and featurize each level."""
    rows = []
    for n, (sw, sh) in zip(filt.exponents, pyramid_sizes(size, filt)):
        if sw < 1.0 or sh < 1.0:
            raise ScaleError(f"degenerate patch at scale exponent {n}")
        w = max(2.0, round(sw))
        h = max(2.0, round(sh))
        rows.append(scale_feature_vector(image, center, (w, h), cfg, extractor))
    return ScaleSampleSet(np.stack(rows))


def scale_response(samples: ScaleSampleSet, filt: ScaleFilter) -> np.ndarray:
    """Same-mode 1-D correlation of the filter with the pyramid rows.

    response[t] = sum_s weights[s] . rows[t + s - c] with zero padding, c the
    center tap. A pyramid shifted by m rows shifts the response by m.
    """
    S = filt.num_scales
    if samples.num_scales != S:
        raise ScaleError(f"sample rows {samples.num_scales} != filter taps {S}")
    if samples.rows.shape[1] != filt.weights.shape[1]:
        raise ScaleError(
            f"feature length {samples.rows.shape[1]} != filter length {filt.weights.shape[1]}"
        )
    c = (S - 1) // 2
    padded = np.zeros((S + 2 * c, samples.rows.shape[1]))
    padded[c : c + S] = samples.rows
    windows = np.lib.stride_tricks.sliding_window_view(padded, S, axis=0)
    # windows: (S, L, S_taps); response[t] = sum_{l,s} padded[t+s, l] * w[s, l]
    return np.einsum("tls,sl->t", windows, filt.weights, optimize=True)


def _scale_grad(
    samples: ScaleSampleSet, filt: ScaleFilter, lam: float
) -> tuple[np.ndarray, float]:
    resp = scale_response(samples, filt)
    resid = resp - filt.label
    S = filt.num_scales
    c = (S - 1) // 2
    padded = np.zeros((S + 2 * c, samples.rows.shape[1]))
    padded[c : c + S] = samples.rows
    windows = np.lib.stride_tricks.sliding_window_view(padded, S, axis=0)
    grad = 2.0 * np.einsum("t,tls->sl", resid, windows, optimize=True)
    grad += 2.0 * lam * filt.weights
    value = float(np.sum(resid**2) + lam * np.sum(filt.weights**2))
    return grad, value


def scale_loss(samples: ScaleSampleSet, filt: ScaleFilter, lam: float) -> float:
    return _scale_grad(samples, filt, lam)[1]


def scale_gradient(samples: ScaleSampleSet, filt: ScaleFilter, lam: float) -> np.ndarray:
    return _scale_grad(samples, filt, lam)[0]


def train_scale_filter(
    samples: ScaleSampleSet,
    filt: ScaleFilter,
    cfg: TrackerConfig,
    steps: int | None = None,
    label: np.ndarray | None = None,
) -> ScaleFilter:
    """Momentum-SGD ridge fit of the scale response to the Gaussian label.

    The learning rate is halved (up to 12 times) until the run ends with a
    loss no worse than it started, so feature magnitude differences between
    extractors cannot blow the fit up. If no usable rate is found the filter
    is returned unchanged. A transient label (e.g. re-centered on a freshly
    estimated scale tap) may be supplied for the fit; the returned filter
    always keeps the canonical centered label.
    """
    n_steps = cfg.scale_first_frame_steps if steps is None else steps
    lam = cfg.scale_lambda
    fit_label = filt.label if label is None else np.asarray(label, dtype=np.float64)

    def make(weights):
        out = ScaleFilter(weights, filt.num_scales, filt.factor, fit_label, trained=True)
        return out

    initial = scale_loss(samples, make(filt.weights.copy()), lam)
    lr = cfg.scale_lr
    for _ in range(12):
        work = make(filt.weights.copy())
        state = SgdState.zeros_like(work.weights, cfg.momentum, lr)
        diverged = False
        for step in range(n_steps):
            grad, value = _scale_grad(samples, work, lam)
            if not np.isfinite(value):
                diverged = True
                break
            work.weights = sgd_step(work.weights, grad, state)
        if not diverged and np.all(np.isfinite(work.weights)):
            final = scale_loss(samples, work, lam)
            if np.isfinite(final) and final <= initial:
                return ScaleFilter(
                    work.weights, filt.num_scales, filt.factor, filt.label, trained=True
                )
        lr *= 0.5
    return ScaleFilter(
        filt.weights.copy(), filt.num_scales, filt.factor, filt.label, trained=True
    )


def refine_peak_1d(resp: np.ndarray, idx: int) -> float:
    """Quadratic sub-tap refinement around an interior argmax; 0 on borders."""
    if idx <= 0 or idx >= len(resp) - 1:
        return 0.0
    rm, r0, rp = resp[idx - 1], resp[idx], resp[idx + 1]
    denom = rm - 2.0 * r0 + rp
    if denom >= 0.0:
        return 0.0
    offset = (rm - rp) / (2.0 * denom)
    return float(np.clip(offset, -0.5, 0.5))


def estimate_scale(
    image: DenseMap,
    center: tuple[float, float],
    size: tuple[float, float],
    filt: ScaleFilter,
    cfg: TrackerConfig,
    extractor: ConvStack,
) -> float:
    """Scale multiplier a^(n* + refinement), clamped per frame."""
    if not filt.trained:
        raise ScaleError("scale filter has not been trained")
    samples = build_scale_samples(image, center, size, filt, cfg, extractor)
    resp = scale_response(samples, filt)
    idx = int(np.argmax(resp))
    n = idx - (filt.num_scales - 1) // 2
    if cfg.subpixel:
        n = n + refine_peak_1d(resp, idx)
    mult = filt.factor ** float(n)
    clamp = cfg.scale_clamp
    return float(np.clip(mult, 1.0 / clamp, clamp))


def estimate_scale_multires(
    image: DenseMap,
    center: tuple[float, float],
    size: tuple[float, float],
    fb: FilterBank,
    cfg: TrackerConfig,
    extractor: ConvStack,
    geom,
    hann: DenseMap,
    scales: list[float],
) -> tuple[float, DenseMap]:
    """Exhaustive baseline: score the translation filter at each resolution.

    Returns the best multiplier (ties to the one nearest 1.0) and its
    response map. Larger windows tend to score higher peaks outright, so each
    candidate's peak is discounted by penalty^|n| with n the candidate's
    exponent in the a^n pyramid; without this the box size drifts upward.
    """
    from .regression import prepare_features

    if not scales:
        raise ScaleError("multires scale list must be non-empty")
    log_a = np.log(cfg.scale_factor)
    best = None
    for s in scales:
        window = geom.search_window(center, (size[0] * s, size[1] * s))
        feat, _, _ = prepare_features(image, window, geom, extractor, hann, unit_rms=True)
        resp = xcorr2d_valid(feat, fb.f)
        n = abs(np.log(s) / log_a) if s > 0 else 0.0
        peak = float(resp.data.max()) * cfg.multires_penalty**n
        key = (peak, -abs(s - 1.0))
        if best is None or key > best[0]:
            best = (key, s, resp)
    return best[1], best[2]
