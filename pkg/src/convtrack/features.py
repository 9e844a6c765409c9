"""Patch preprocessing and the trainable convolutional feature extractor.

The extractor is a short stack of strided valid-mode convolutions with
optional rectifiers. An empty stack is the raw-channel extractor. The stack
is trained end-to-end with the regression filters, so exact analytic
gradients (weights and input) are provided here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .densemap import DenseMap, ShapeError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class Window:
    """Axis-aligned sampling window in image coordinates: center + size in px."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"window size must be positive, got {self.w}x{self.h}")


@dataclass(frozen=True)
class Patch:
    """Resampled image window with pixels normalized to [0, 1]."""

    pixels: DenseMap
    source_window: Window


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out_ch, in_ch, kh, kw)
    relu: bool
    stride: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


@dataclass
class ConvStack:
    """Ordered convolutional layers; empty list means raw-channel features."""

    layers: list[ConvLayer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[0] != b.weights.shape[1]:
                raise ShapeError(
                    f"adjacent layer channels mismatch: {a.weights.shape} -> {b.weights.shape}"
                )

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    @property
    def in_channels(self) -> int:
        return self.layers[0].weights.shape[1] if self.layers else 1

    def out_channels(self, input_channels: int = 1) -> int:
        return self.layers[-1].weights.shape[0] if self.layers else input_channels

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        """Spatial output size by exact valid-mode arithmetic per layer."""
        h, w = height, width
        for layer in self.layers:
            kh, kw = layer.weights.shape[2:]
            h = (h - kh) // layer.stride + 1
            w = (w - kw) // layer.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(
                    f"input {height}x{width} too small for stack "
                    f"(minimum {self.min_input_hw()[0]}x{self.min_input_hw()[1]})"
                )
        return h, w

    def min_input_hw(self) -> tuple[int, int]:
        """Smallest input that produces a 1x1 output (the receptive field)."""
        h = w = 1
        for layer in reversed(self.layers):
            kh, kw = layer.weights.shape[2:]
            h = (h - 1) * layer.stride + kh
            w = (w - 1) * layer.stride + kw
        return h, w


def default_stack(rng: np.random.Generator, init_std: float = 0.1) -> ConvStack:
    """Small trainable extractor: 8x3x3/s2 + relu, then 16x3x3/s2; stride 4."""
    l1 = ConvLayer(rng.normal(0.0, init_std, size=(8, 1, 3, 3)), relu=True, stride=2)
    l2 = ConvLayer(rng.normal(0.0, init_std, size=(16, 8, 3, 3)), relu=False, stride=2)
    return ConvStack([l1, l2])


def to_gray(image: DenseMap) -> DenseMap:
    """Collapse 3-channel input with fixed luminance weights; pass through 1ch."""
    if image.channels == 1:
        return image
    if image.channels != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {image.channels}")
    g = np.tensordot(np.asarray(GRAY_WEIGHTS), image.data, axes=(0, 0))
    return DenseMap(g[np.newaxis])


def crop_and_resize(image: DenseMap, window: Window, out_hw: tuple[int, int]) -> Patch:
    """Bilinear crop of `window` to out_hw; out-of-image samples replicate edges.

    Sample grid aligns window corners with output corners, so a full-image
    window at native size reproduces the image exactly.
    """
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be positive, got {out_hw}")
    if image.height < 1 or image.width < 1:
        raise ShapeError("empty image")

    def grid(center: float, size: float, n: int) -> np.ndarray:
        if n == 1:
            return np.array([center])
        return center + (np.arange(n) - (n - 1) / 2.0) * ((size - 1.0) / (n - 1))

    xs = grid(window.cx, window.w, ow)
    ys = grid(window.cy, window.h, oh)
    out = _bilinear_sample(image.data, ys, xs)
    return Patch(pixels=DenseMap(out), source_window=window)


def _bilinear_sample(data: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (c, h, w) data at the outer grid of ys x xs with edge clamping."""
    _, h, w = data.shape
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    # clamp the fractions too, so fully-outside windows replicate the edge
    fx = np.clip(xs, 0, w - 1) - x0c
    fy = np.clip(ys, 0, h - 1) - y0c
    fx = np.clip(fx, 0.0, 1.0)[None, None, :]
    fy = np.clip(fy, 0.0, 1.0)[None, :, None]
    tl = data[:, y0c[:, None], x0c[None, :]]
    tr = data[:, y0c[:, None], x1c[None, :]]
    bl = data[:, y1c[:, None], x0c[None, :]]
    br = data[:, y1c[:, None], x1c[None, :]]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def normalize_patch(patch: Patch) -> Patch:
    """Subtract the per-patch mean (pixels are already in [0, 1])."""
    data = patch.pixels.data
    return Patch(DenseMap(data - data.mean()), patch.source_window)


def _conv_forward(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
    """One layer forward; returns (activation, pre_activation)."""
    kh, kw = layer.weights.shape[2:]
    if x.shape[1] < kh or x.shape[2] < kw:
        mh, mw = kh, kw
        raise ShapeError(f"input {x.shape[1]}x{x.shape[2]} smaller than filter {mh}x{mw}")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, :: layer.stride, :: layer.stride]
    pre = np.einsum("cijuv,ocuv->oij", windows, layer.weights, optimize=True)
    out = np.maximum(pre, 0.0) if layer.relu else pre
    return out, pre


def stack_forward(x: np.ndarray, stack: ConvStack) -> tuple[np.ndarray, list]:
    """Run the stack; cache holds per-layer (input, pre_activation) for backward."""
    cache = []
    cur = x
    for layer in stack.layers:
        out, pre = _conv_forward(cur, layer)
        cache.append((cur, pre))
        cur = out
    return cur, cache


def extract(patch: Patch, stack: ConvStack) -> DenseMap:
    """Feature map of a patch; identity (raw channels) for the empty stack."""
    x = patch.pixels.data
    if stack.layers and x.shape[0] != stack.in_channels:
        raise ShapeError(
            f"patch has {x.shape[0]} channels, stack expects {stack.in_channels}"
        )
    out, _ = stack_forward(x, stack)
    return DenseMap(out)


def stack_backward(
    stack: ConvStack, cache: list, dy: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Backprop through the stack: per-layer weight grads plus input grad."""
    dweights: list[np.ndarray] = [None] * len(stack.layers)
    grad = dy
    for idx in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[idx]
        x, pre = cache[idx]
        if layer.relu:
            grad = grad * (pre > 0)
        kh, kw = layer.weights.shape[2:]
        s = layer.stride
        windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
        windows = windows[:, ::s, ::s]
        dweights[idx] = np.einsum("oij,cijuv->ocuv", grad, windows, optimize=True)
        dx = np.zeros_like(x)
        oh, ow = grad.shape[1:]
        for u in range(kh):
            for v in range(kw):
                # scatter-add over the strided taps of this kernel offset
                contrib = np.einsum("oij,oc->cij", grad, layer.weights[:, :, u, v])
                dx[:, u : u + oh * s : s, v : v + ow * s : s] += contrib
        grad = dx
    return dweights, grad


def backward_stack(
    stack: ConvStack, patch: Patch, upstream_grad: DenseMap
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of extract(patch, stack) w.r.t. every layer's weights.

    Also returns the gradient w.r.t. the patch pixels. upstream_grad must
    match the extract() output shape.
    """
    out, cache = stack_forward(patch.pixels.data, stack)
    if upstream_grad.shape != out.shape:
        raise ShapeError(
            f"upstream grad shape {upstream_grad.shape} != output shape {out.shape}"
        )
    return stack_backward(stack, cache, upstream_grad.data)


def apply_window(features: DenseMap, window: DenseMap) -> DenseMap:
    """Multiply every feature channel cellwise by a single-channel window."""
    if window.channels != 1:
        raise ShapeError("window must be single channel")
    if (features.height, features.width) != (window.height, window.width):
        raise ShapeError(
            f"window size {window.height}x{window.width} != "
            f"feature size {features.height}x{features.width}"
        )
    return DenseMap(features.data * window.data[0])
