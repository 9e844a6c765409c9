"""The tracking head: regression filters, their gradients, and SGD training.

The filter bank is trained by minimizing the squared error between its
valid correlation response and a Gaussian target, plus an L2 penalty on the
filter weights. Offline training backpropagates the same objective through
the feature extractor so both are learned jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrackerConfig
from .densemap import DenseMap, ShapeError, xcorr2d_valid, xcorr2d_valid_raw
from .features import (
    ConvLayer,
    ConvStack,
    Window,
    apply_window,
    crop_and_resize,
    normalize_patch,
    stack_backward,
    stack_forward,
    to_gray,
)
from .geometry import ResponseGeometry


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, context: str = ""):
        self.step = step
        suffix = f" ({context})" if context else ""
        super().__init__(f"non-finite loss at step {step}{suffix}")


@dataclass
class FilterBank:
    """Regression filters, one per feature channel, no bias."""

    f: DenseMap

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.f.shape


@dataclass
class TrainSample:
    x: DenseMap
    y: DenseMap

    def __post_init__(self):
        if self.y.channels != 1:
            raise ShapeError("label must be single channel")


@dataclass
class SgdState:
    """Momentum-SGD state for one tensor; weight decay rides inside the grad."""

    velocity: np.ndarray
    momentum: float
    learning_rate: float

    @classmethod
    def zeros_like(cls, param: np.ndarray, momentum: float, lr: float) -> "SgdState":
        return cls(np.zeros_like(param), momentum, lr)


def _check_sample(sample: TrainSample, f: DenseMap) -> None:
    if sample.x.channels != f.channels:
        raise ShapeError(
            f"sample has {sample.x.channels} channels, filter has {f.channels}"
        )
    expect = (sample.x.height - f.height + 1, sample.x.width - f.width + 1)
    if (sample.y.height, sample.y.width) != expect:
        raise ShapeError(
            f"label size {sample.y.height}x{sample.y.width} != "
            f"valid response size {expect[0]}x{expect[1]}"
        )


def residual_map(sample: TrainSample, fb: FilterBank) -> np.ndarray:
    r = xcorr2d_valid(sample.x, fb.f)
    return r.data[0] - sample.y.data[0]


def loss(sample: TrainSample, fb: FilterBank, lam: float) -> float:
    """Squared response error plus lam * squared filter norm."""
    _check_sample(sample, fb.f)
    resid = residual_map(sample, fb)
    return float(np.sum(resid**2) + lam * np.sum(fb.f.data**2))


def grad_filters(
    sample: TrainSample, fb: FilterBank, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of loss() w.r.t. the filters and the sample features.

    d/df[l,u,v] = 2 sum_ij resid[i,j] x[l,i+u,j+v] + 2 lam f[l,u,v]
    d/dx is the transposed correlation of the residual with f.
    """
    _check_sample(sample, fb.f)
    resid = residual_map(sample, fb)
    x = sample.x.data
    f = fb.f.data
    rh, rw = resid.shape
    # correlate each channel of x with the residual to get df
    windows = np.lib.stride_tricks.sliding_window_view(x, (rh, rw), axis=(1, 2))
    df = 2.0 * np.einsum("cuvij,ij->cuv", windows, resid, optimize=True) + 2.0 * lam * f
    dx = np.zeros_like(x)
    fh, fw = f.shape[1:]
    for u in range(fh):
        for v in range(fw):
            dx[:, u : u + rh, v : v + rw] += 2.0 * resid[None] * f[:, u : u + 1, v : v + 1]
    return df, dx


def sgd_step(param: np.ndarray, grad: np.ndarray, state: SgdState) -> np.ndarray:
    """v <- momentum*v - lr*grad; param <- param + v. Mutates state.velocity."""
    if param.shape != grad.shape or param.shape != state.velocity.shape:
        raise ShapeError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"velocity {state.velocity.shape}"
        )
    state.velocity = state.momentum * state.velocity - state.learning_rate * grad
    return param + state.velocity


def init_filters(
    shape: tuple[int, int, int], std: float, rng: np.random.Generator
) -> FilterBank:
    if std == 0.0:
        return FilterBank(DenseMap(np.zeros(shape)))
    return FilterBank(DenseMap(rng.normal(0.0, std, size=shape)))


def train_first_frame(
    features: DenseMap,
    label: DenseMap,
    cfg: TrackerConfig,
    rng: np.random.Generator,
    steps: int | None = None,
) -> FilterBank:
    """Adapt randomly initialized filters to the first frame by momentum SGD."""
    shape = (
        features.channels,
        features.height - label.height + 1,
        features.width - label.width + 1,
    )
    fb = init_filters(shape, cfg.filter_init_std, rng)
    sample = TrainSample(features, label)
    lam = cfg.lambda_first_frame
    initial = loss(sample, fb, lam)
    n_steps = cfg.first_frame_steps if steps is None else steps
    f0 = fb.f.data
    lr = cfg.lr_first_frame
    # feature magnitudes vary across extractors, so back off the step size
    # until the loss actually decreases instead of trusting a fixed rate
    for _ in range(12):
        state = SgdState.zeros_like(f0, cfg.momentum, lr)
        f = f0
        diverged = False
        for step in range(n_steps):
            df, _ = grad_filters(sample, FilterBank(DenseMap(f)), lam)
            f = sgd_step(f, df, state)
            if not np.all(np.isfinite(f)):
                diverged = True
                break
        if not diverged:
            final = loss(sample, FilterBank(DenseMap(f)), lam)
            if np.isfinite(final) and final <= initial:
                return FilterBank(DenseMap(f))
        lr *= 0.5
    raise TrainingDiverged(n_steps, "first-frame training")


def update_one_step(
    features: DenseMap, label: DenseMap, fb: FilterBank, cfg: TrackerConfig
) -> FilterBank:
    """One-step online SGD update of the filters (no re-initialization)."""
    sample = TrainSample(features, label)
    before = loss(sample, fb, cfg.lambda_update)
    df, _ = grad_filters(sample, fb, cfg.lambda_update)
    lr = cfg.lr_update
    # back off if a single step would overshoot; keep the old filters when
    # no usable step size is found
    for _ in range(8):
        f = fb.f.data - lr * df
        if np.all(np.isfinite(f)):
            after = loss(sample, FilterBank(DenseMap(f)), cfg.lambda_update)
            if np.isfinite(after) and after <= before:
                return FilterBank(DenseMap(f))
        lr *= 0.5
    return fb


def prepare_features(
    image: DenseMap,
    window: Window,
    geom: ResponseGeometry,
    stack: ConvStack,
    hann: DenseMap,
    unit_rms: bool = False,
) -> tuple[DenseMap, list, DenseMap]:
    """Crop -> gray -> normalize -> extract -> Hann. Returns (features, cache, raw).

    With unit_rms the feature map is rescaled to unit root-mean-square so
    filter fitting sees the same magnitude from any extractor; the joint
    offline pass keeps raw magnitudes because its gradient flows through the
    extractor.
    """
    patch = crop_and_resize(to_gray(image), window, geom.patch_hw)
    patch = normalize_patch(patch)
    raw_feat, cache = stack_forward(patch.pixels.data, stack)
    if unit_rms:
        rms = float(np.sqrt(np.mean(raw_feat**2)))
        if rms > 0.0:
            raw_feat = raw_feat / rms
    feat = apply_window(DenseMap(raw_feat), hann)
    return feat, cache, DenseMap(raw_feat)


def offline_train(
    corpus: list[tuple[DenseMap, tuple[float, float, float, float]]],
    stack: ConvStack,
    fb: FilterBank,
    cfg: TrackerConfig,
    geom: ResponseGeometry,
    rng: np.random.Generator,
    epochs: int | None = None,
) -> tuple[ConvStack, FilterBank, list[float]]:
    """Joint SGD over extractor and filters on (image, box) pairs with jittering.

    Boxes are (x, y, w, h) top-left in image coordinates. Crops are jittered
    in translation and scale; the Gaussian label is centered where the true
    target lands in the response grid. Returns per-epoch mean losses.
    """
    if not corpus:
        raise ValueError("offline_train needs a non-empty corpus")
    n_epochs = cfg.epochs if epochs is None else epochs
    lam = cfg.lambda_offline
    hann = geom.feature_window()
    f = fb.f.data.copy()
    weights = [layer.weights.copy() for layer in stack.layers]
    f_state = SgdState.zeros_like(f, cfg.momentum, cfg.lr_offline)
    w_states = [SgdState.zeros_like(w, cfg.momentum, cfg.lr_offline) for w in weights]
    epoch_losses: list[float] = []
    order = np.arange(len(corpus))
    for epoch in range(n_epochs):
        rng.shuffle(order)
        total = 0.0
        for idx in order:
            image, box = corpus[idx]
            x, y, w, h = box
            center = (x + w / 2.0, y + h / 2.0)
            size = (w, h)
            jit_size = (
                max(2.0, w * (1.0 + rng.normal(0.0, cfg.scale_jitter))),
                max(2.0, h * (1.0 + rng.normal(0.0, cfg.scale_jitter))),
            )
            jit_center = (
                center[0] + rng.normal(0.0, cfg.translation_jitter) * geom.padding_factor * w,
                center[1] + rng.normal(0.0, cfg.translation_jitter) * geom.padding_factor * h,
            )
            window = geom.search_window(jit_center, jit_size)
            live_stack = ConvStack(
                [
                    ConvLayer(wt, layer.relu, layer.stride)
                    for wt, layer in zip(weights, stack.layers)
                ]
            )
            feat, cache, _ = prepare_features(image, window, geom, live_stack, hann)
            label = geom.label_for(geom.image_to_cell(center, window))
            sample = TrainSample(feat, label)
            bank = FilterBank(DenseMap(f))
            sample_loss = loss(sample, bank, lam)
            if not np.isfinite(sample_loss):
                raise TrainingDiverged(epoch, f"offline epoch {epoch}, sample {int(idx)}")
            total += sample_loss
            df, dx_windowed = grad_filters(sample, bank, lam)
            f = sgd_step(f, df, f_state)
            if weights:
                dfeat = dx_windowed * hann.data[0]
                dws, _ = stack_backward(live_stack, cache, dfeat)
                for i, (wt, dw, st) in enumerate(zip(weights, dws, w_states)):
                    weights[i] = sgd_step(wt, dw + 2.0 * lam * wt, st)
            # bound magnitudes well below overflow so divergence is reported
            # here rather than as a downstream non-finite-value error
            healthy = np.all(np.isfinite(f)) and np.abs(f).max() < 1e100
            for w in weights:
                healthy = healthy and np.all(np.isfinite(w)) and np.abs(w).max() < 1e100
            if not healthy:
                raise TrainingDiverged(epoch, f"offline epoch {epoch}, sample {int(idx)}")
        epoch_losses.append(total / len(corpus))
    new_stack = ConvStack(
        [ConvLayer(wt, layer.relu, layer.stride) for wt, layer in zip(weights, stack.layers)]
    )
    return new_stack, FilterBank(DenseMap(f)), epoch_losses
