"""Binary model/tracker snapshot format.

Layout (little-endian):

    magic   8 bytes  b"CVTRK001"
    stack   u32 n_layers, then per layer:
              u32 out_ch, in_ch, kh, kw; u32 stride; u8 relu
              f64 weights, row-major (out, in, kh, kw)
    filters u32 channels, height, width; f64 data, row-major
    scale   u8 present; if present:
              u32 num_scales, feature_len; f64 factor; u8 trained
              f64 label[num_scales]; f64 weights (num_scales, feature_len)
    state   u8 present; if present:
              u32 json_len; utf-8 JSON config
              f64 cx, cy, w, h, score, pnr
              u32 history_len; f64 pnr_values[]; f64 rmax_values[]

Everything float64; arrays serialize with ndarray.tobytes().
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .config import TrackerConfig, config_from_dict
from .densemap import DenseMap
from .features import ConvLayer, ConvStack
from .geometry import response_geometry
from .regression import FilterBank
from .scale import ScaleFilter
from .tracker import TargetState, Tracker, UpdateHistory

MAGIC = b"CVTRK001"


class SnapshotError(ValueError):
    pass


def _w_u32(fh, *values):
    fh.write(struct.pack("<" + "I" * len(values), *values))


def _r_u32(fh, n=1):
    vals = struct.unpack("<" + "I" * n, fh.read(4 * n))
    return vals[0] if n == 1 else vals


def _w_f64(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _r_f64(fh, shape):
    n = int(np.prod(shape))
    data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
    return data.astype(np.float64)


def write_model(
    fh,
    stack: ConvStack,
    fb: FilterBank,
    scale_filter: ScaleFilter | None,
) -> None:
    fh.write(MAGIC)
    _w_u32(fh, len(stack.layers))
    for layer in stack.layers:
        _w_u32(fh, *layer.weights.shape, layer.stride)
        fh.write(struct.pack("<B", int(layer.relu)))
        _w_f64(fh, layer.weights)
    _w_u32(fh, *fb.f.shape)
    _w_f64(fh, fb.f.data)
    fh.write(struct.pack("<B", int(scale_filter is not None)))
    if scale_filter is not None:
        _w_u32(fh, scale_filter.num_scales, scale_filter.weights.shape[1])
        fh.write(struct.pack("<d", scale_filter.factor))
        fh.write(struct.pack("<B", int(scale_filter.trained)))
        _w_f64(fh, scale_filter.label)
        _w_f64(fh, scale_filter.weights)


def read_model(fh) -> tuple[ConvStack, FilterBank, ScaleFilter | None]:
    magic = fh.read(8)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}; not a model snapshot")
    n_layers = _r_u32(fh)
    layers = []
    for _ in range(n_layers):
        out_ch, in_ch, kh, kw, stride = _r_u32(fh, 5)
        relu = bool(struct.unpack("<B", fh.read(1))[0])
        weights = _r_f64(fh, (out_ch, in_ch, kh, kw))
        layers.append(ConvLayer(weights, relu=relu, stride=stride))
    stack = ConvStack(layers)
    c, h, w = _r_u32(fh, 3)
    fb = FilterBank(DenseMap(_r_f64(fh, (c, h, w))))
    has_scale = bool(struct.unpack("<B", fh.read(1))[0])
    scale_filter = None
    if has_scale:
        num_scales, feat_len = _r_u32(fh, 2)
        factor = struct.unpack("<d", fh.read(8))[0]
        trained = bool(struct.unpack("<B", fh.read(1))[0])
        label = _r_f64(fh, (num_scales,))
        weights = _r_f64(fh, (num_scales, feat_len))
        scale_filter = ScaleFilter(weights, num_scales, factor, label, trained=trained)
    return stack, fb, scale_filter


def save_model(path, stack: ConvStack, fb: FilterBank, scale_filter=None) -> None:
    with open(path, "wb") as fh:
        write_model(fh, stack, fb, scale_filter)


def load_model(path) -> tuple[ConvStack, FilterBank, ScaleFilter | None]:
    with open(path, "rb") as fh:
        return read_model(fh)


def save_tracker(path, tracker: Tracker) -> None:
    """Full tracker snapshot: model plus config, target state and history."""
    with open(path, "wb") as fh:
        write_model(fh, tracker.stack, tracker.fb, tracker.scale_filter)
        fh.write(struct.pack("<B", 1))
        blob = json.dumps(tracker.cfg.to_dict(), sort_keys=True).encode("utf-8")
        _w_u32(fh, len(blob))
        fh.write(blob)
        s = tracker.state
        fh.write(
            struct.pack(
                "<6d", s.center[0], s.center[1], s.size[0], s.size[1], s.score, s.pnr
            )
        )
        _w_u32(fh, len(tracker.history))
        _w_f64(fh, np.asarray(tracker.history.pnr_values))
        _w_f64(fh, np.asarray(tracker.history.rmax_values))


def load_tracker(path) -> Tracker:
    with open(path, "rb") as fh:
        stack, fb, scale_filter = read_model(fh)
        has_state = bool(struct.unpack("<B", fh.read(1))[0])
        if not has_state:
            raise SnapshotError("snapshot has no tracker state section")
        blob = fh.read(_r_u32(fh))
        cfg = config_from_dict(json.loads(blob.decode("utf-8")))
        cx, cy, w, h, score, p = struct.unpack("<6d", fh.read(48))
        t = _r_u32(fh)
        pnr_values = list(_r_f64(fh, (t,)))
        rmax_values = list(_r_f64(fh, (t,)))
    geom = response_geometry(cfg, stack)
    state = TargetState(center=(cx, cy), size=(w, h), score=score, pnr=p)
    history = UpdateHistory(
        pnr_values=[float(v) for v in pnr_values],
        rmax_values=[float(v) for v in rmax_values],
        window=cfg.history_window,
    )
    return Tracker(cfg, stack, geom, fb, scale_filter, state, history)
