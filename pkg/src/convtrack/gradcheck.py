"""Central finite-difference verification of every analytic gradient."""

from __future__ import annotations

import numpy as np

from .config import TrackerConfig
from .densemap import DenseMap
from .features import ConvLayer, ConvStack, Patch, Window, backward_stack, extract
from .regression import FilterBank, TrainSample, grad_filters, loss
from .scale import ScaleFilter, ScaleSampleSet, scale_gradient, scale_label, scale_loss

EPS = 1e-5


def finite_diff(fun, arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. an array."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = fun()
        arr[idx] = orig - eps
        lo = fun()
        arr[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / scale


def check_filter_grads(rng: np.random.Generator) -> float:
    """grad_filters (both outputs) vs finite differences on a random instance."""
    c = int(rng.integers(1, 4))
    fh, fw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    xh, xw = fh + int(rng.integers(1, 5)), fw + int(rng.integers(1, 5))
    lam = float(rng.uniform(0.0, 0.1))
    x = rng.normal(size=(c, xh, xw))
    f = rng.normal(size=(c, fh, fw)) * 0.5
    y = rng.normal(size=(1, xh - fh + 1, xw - fw + 1))

    def value():
        return loss(TrainSample(DenseMap(x), DenseMap(y)), FilterBank(DenseMap(f)), lam)

    df, dx = grad_filters(TrainSample(DenseMap(x), DenseMap(y)), FilterBank(DenseMap(f)), lam)
    return max(rel_error(df, finite_diff(value, f)), rel_error(dx, finite_diff(value, x)))


def _random_stack(rng: np.random.Generator) -> ConvStack:
    n_layers = int(rng.integers(1, 3))
    layers = []
    in_ch = 1
    for _ in range(n_layers):
        out_ch = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        layers.append(
            ConvLayer(rng.normal(size=(out_ch, in_ch, k, k)) * 0.5, relu=bool(rng.integers(2)), stride=stride)
        )
        in_ch = out_ch
    return ConvStack(layers)


def check_stack_grads(rng: np.random.Generator) -> float:
    """backward_stack vs finite differences of a random linear functional."""
    stack = _random_stack(rng)
    mh, mw = stack.min_input_hw()
    h = mh + int(rng.integers(0, 6))
    w = mw + int(rng.integers(0, 6))
    pixels = rng.normal(size=(1, h, w)) * 0.5
    patch = Patch(DenseMap(pixels), Window(0, 0, w, h))
    g = rng.normal(size=extract(patch, stack).shape)

    def value():
        return float(np.sum(extract(Patch(DenseMap(pixels), patch.source_window), stack).data * g))

    dws, dx = backward_stack(stack, patch, DenseMap(g))
    errors = [rel_error(dx, finite_diff(value, pixels))]
    for layer, dw in zip(stack.layers, dws):
        errors.append(rel_error(dw, finite_diff(value, layer.weights)))
    return max(errors)


def check_end_to_end_grads(rng: np.random.Generator) -> float:
    """Joint stack + filter gradient of the regression loss vs finite differences."""
    from .features import apply_window, stack_backward, stack_forward
    from .densemap import hann2d

    stack = _random_stack(rng)
    mh, mw = stack.min_input_hw()
    h = mh + int(rng.integers(2, 6))
    w = mw + int(rng.integers(2, 6))
    pixels = rng.normal(size=(1, h, w)) * 0.5
    oh, ow = stack.output_hw(h, w)
    oc = stack.out_channels(1)
    fh = max(1, oh - 1)
    fw = max(1, ow - 1)
    f = rng.normal(size=(oc, fh, fw)) * 0.5
    y = rng.normal(size=(1, oh - fh + 1, ow - fw + 1))
    lam = float(rng.uniform(0.0, 0.1))
    hann = hann2d(oh, ow)

    def value():
        feat, _ = stack_forward(pixels, stack)
        feat = apply_window(DenseMap(feat), hann)
        return loss(TrainSample(feat, DenseMap(y)), FilterBank(DenseMap(f)), lam)

    feat_arr, cache = stack_forward(pixels, stack)
    feat = apply_window(DenseMap(feat_arr), hann)
    df, dxw = grad_filters(TrainSample(feat, DenseMap(y)), FilterBank(DenseMap(f)), lam)
    dws, _ = stack_backward(stack, cache, dxw * hann.data[0])
    errors = [rel_error(df, finite_diff(value, f))]
    for layer, dw in zip(stack.layers, dws):
        errors.append(rel_error(dw, finite_diff(value, layer.weights)))
    return max(errors)


def check_scale_grads(rng: np.random.Generator) -> float:
    """Scale-filter ridge gradient vs finite differences."""
    S = int(rng.choice([5, 7, 9]))
    L = int(rng.integers(3, 10))
    lam = float(rng.uniform(0.0, 0.1))
    weights = rng.normal(size=(S, L)) * 0.5
    rows = rng.normal(size=(S, L))
    filt = ScaleFilter(weights, S, 1.02, scale_label(S, S / 16.0))
    samples = ScaleSampleSet(rows)

    def value():
        return scale_loss(samples, filt, lam)

    grad = scale_gradient(samples, filt, lam)
    return rel_error(grad, finite_diff(value, filt.weights))


def run_all(seed: int = 0, trials: int = 50) -> dict[str, float]:
    """Max relative FD error per gradient suite over `trials` random instances."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFD]))
    suites = {
        "filter_bank": check_filter_grads,
        "conv_stack": check_stack_grads,
        "end_to_end": check_end_to_end_grads,
        "scale_filter": check_scale_grads,
    }
    return {name: max(fn(rng) for _ in range(trials)) for name, fn in suites.items()}
