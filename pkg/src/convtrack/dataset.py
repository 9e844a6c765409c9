"""Sequence ingestion and the synthetic test-bed generator.

Directory layout follows the common benchmark convention:
``<seq>/img/<numbered frames>`` plus ``<seq>/groundtruth_rect.txt`` with one
``x,y,w,h`` box per line (1-based top-left on disk, converted to 0-based
internally). Synthetic sequences are textured rectangles over textured
backgrounds with exact real-valued ground truth, deterministic under seed.
"""

from __future__ import annotations

import os
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .densemap import DenseMap

Box = tuple[float, float, float, float]  # x, y, w, h (top-left, 0-based)


class DataError(ValueError):
    pass


@dataclass
class Sequence:
    name: str
    frames: list  # paths or in-memory DenseMaps
    annotations: list[Box]

    def __post_init__(self):
        if not self.frames:
            raise DataError(f"sequence {self.name!r} has no frames")
        if not self.annotations:
            raise DataError(f"sequence {self.name!r} has no annotations")
        if len(self.annotations) > len(self.frames):
            raise DataError(f"sequence {self.name!r} has more boxes than frames")
        for i, (x, y, w, h) in enumerate(self.annotations):
            if w <= 0 or h <= 0:
                raise DataError(f"non-positive box size at frame {i}: {(x, y, w, h)}")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> DenseMap:
        f = self.frames[i]
        if isinstance(f, DenseMap):
            return f
        return load_image(f)


@dataclass
class SynthSpec:
    """Recipe for a deterministic synthetic sequence."""

    canvas: tuple[int, int] = (96, 128)  # (height, width)
    object_size: tuple[float, float] = (24.0, 24.0)  # (w, h)
    start: tuple[float, float] | None = None  # center (x, y); canvas center if None
    velocity: tuple[float, float] = (0.0, 0.0)  # px / frame
    zoom: float = 1.0  # size multiplier / frame
    occlusion: tuple[int, int] | None = None  # inclusive frame interval
    occluder_opacity: float = 1.0
    seed: int = 0
    frames: int = 30

    def __post_init__(self):
        if self.frames < 1:
            raise DataError(f"frame count must be >= 1, got {self.frames}")
        if self.zoom <= 0:
            raise DataError(f"zoom must be positive, got {self.zoom}")


def parse_groundtruth(text: str) -> list[Box]:
    """Parse one box per line; commas, tabs or spaces all separate fields."""
    if not text.strip():
        raise DataError("empty ground-truth text")
    boxes: list[Box] = []
    errors: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\t ]+", line) if p]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            errors.append(f"line {lineno}: unparseable {line!r}")
            continue
        if len(vals) != 4:
            errors.append(f"line {lineno}: expected 4 values, got {len(vals)}")
            continue
        x, y, w, h = vals
        if w <= 0 or h <= 0:
            errors.append(f"line {lineno}: non-positive size {w}x{h}")
            continue
        boxes.append((x, y, w, h))
    if errors:
        raise DataError("; ".join(errors))
    if not boxes:
        raise DataError("no parseable boxes")
    return boxes


def format_groundtruth(boxes: list[Box]) -> str:
    return "\n".join(",".join(repr(v) for v in box) for box in boxes) + "\n"


def _to_internal(box: Box) -> Box:
    x, y, w, h = box
    return (x - 1.0, y - 1.0, w, h)


def _to_external(box: Box) -> Box:
    x, y, w, h = box
    return (x + 1.0, y + 1.0, w, h)


def load_image(path: str) -> DenseMap:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable frame {path}: {exc}") from exc
    if arr.ndim == 2:
        return DenseMap(arr[np.newaxis])
    return DenseMap(np.moveaxis(arr, 2, 0))


def _numeric_key(name: str):
    m = re.findall(r"\d+", name)
    return (int(m[-1]) if m else -1, name)


def load_sequence(directory: str) -> Sequence:
    """Load ``<dir>/img`` frames + ``groundtruth_rect.txt`` boxes."""
    img_dir = os.path.join(directory, "img")
    if not os.path.isdir(img_dir):
        raise DataError(f"missing image subfolder {img_dir}")
    gt_path = os.path.join(directory, "groundtruth_rect.txt")
    if not os.path.isfile(gt_path):
        raise DataError(f"missing ground-truth file {gt_path}")
    names = sorted(os.listdir(img_dir), key=_numeric_key)
    frames = [os.path.join(img_dir, n) for n in names if not n.startswith(".")]
    if not frames:
        raise DataError(f"no frames in {img_dir}")
    with open(gt_path, "r", encoding="utf-8") as fh:
        boxes = [_to_internal(b) for b in parse_groundtruth(fh.read())]
    if len(boxes) < len(frames):
        warnings.warn(
            f"{directory}: {len(frames)} frames but {len(boxes)} boxes; "
            "trailing frames are unannotated"
        )
    boxes = boxes[: len(frames)]
    return Sequence(name=os.path.basename(os.path.abspath(directory)), frames=frames, annotations=boxes)


def export_sequence(seq: Sequence, directory: str) -> None:
    """Write a sequence in the on-disk layout (PGM frames, 1-based boxes)."""
    img_dir = os.path.join(directory, "img")
    os.makedirs(img_dir, exist_ok=True)
    for i in range(len(seq)):
        frame = seq.frame(i)
        gray = frame.data[0] if frame.channels == 1 else np.mean(frame.data, axis=0)
        img = Image.fromarray(np.clip(gray * 255.0, 0, 255).astype(np.uint8), mode="L")
        img.save(os.path.join(img_dir, f"img{i + 1:04d}.pgm"))
    with open(os.path.join(directory, "groundtruth_rect.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_groundtruth([_to_external(b) for b in seq.annotations]))


def _smooth_texture(rng: np.random.Generator, hw: tuple[int, int], cells: int = 6) -> np.ndarray:
    """Low-frequency texture in [0, 1]: coarse noise bilinearly upsampled."""
    h, w = hw
    coarse = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = coarse[y0[:, None], x0[None, :]]
    tr = coarse[y0[:, None], x0[None, :] + 1]
    bl = coarse[y0[:, None] + 1, x0[None, :]]
    br = coarse[y0[:, None] + 1, x0[None, :] + 1]
    return (tl * (1 - fx) + tr * fx) * (1 - fy) + (bl * (1 - fx) + br * fx) * fy


def _draw_rect(
    canvas: np.ndarray,
    center: tuple[float, float],
    size: tuple[float, float],
    texture: np.ndarray,
    opacity: float,
) -> None:
    """Alpha-blend a textured rectangle at a real-valued center, ~1px soft edge."""
    h, w = canvas.shape
    cx, cy = center
    bw, bh = size
    x0, x1 = cx - bw / 2.0, cx + bw / 2.0
    y0, y1 = cy - bh / 2.0, cy + bh / 2.0
    ix0, ix1 = max(0, int(np.floor(x0)) - 1), min(w, int(np.ceil(x1)) + 2)
    iy0, iy1 = max(0, int(np.floor(y0)) - 1), min(h, int(np.ceil(y1)) + 2)
    if ix0 >= ix1 or iy0 >= iy1:
        return
    xs = np.arange(ix0, ix1, dtype=np.float64)
    ys = np.arange(iy0, iy1, dtype=np.float64)
    ax = np.clip(np.minimum(xs - x0, x1 - xs) + 0.5, 0.0, 1.0)[None, :]
    ay = np.clip(np.minimum(ys - y0, y1 - ys) + 0.5, 0.0, 1.0)[:, None]
    alpha = ax * ay * opacity
    th, tw = texture.shape
    u = np.clip((ys - y0) / max(bh, 1e-9) * (th - 1), 0, th - 1)
    v = np.clip((xs - x0) / max(bw, 1e-9) * (tw - 1), 0, tw - 1)
    u0 = np.minimum(u.astype(int), th - 2)
    v0 = np.minimum(v.astype(int), tw - 2)
    fu = (u - u0)[:, None]
    fv = (v - v0)[None, :]
    t00 = texture[u0[:, None], v0[None, :]]
    t01 = texture[u0[:, None], v0[None, :] + 1]
    t10 = texture[u0[:, None] + 1, v0[None, :]]
    t11 = texture[u0[:, None] + 1, v0[None, :] + 1]
    tex = (t00 * (1 - fv) + t01 * fv) * (1 - fu) + (t10 * (1 - fv) + t11 * fv) * fu
    region = canvas[iy0:iy1, ix0:ix1]
    canvas[iy0:iy1, ix0:ix1] = region * (1 - alpha) + tex * alpha


def generate_synthetic(spec: SynthSpec) -> Sequence:
    """Render a synthetic sequence with exact ground truth.

    Stops early (with a warning) if the object would leave the canvas.
    """
    h, w = spec.canvas
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5E9]))
    background = 0.25 + 0.35 * _smooth_texture(rng, (h, w), cells=8)
    obj_tex = 0.55 + 0.45 * _smooth_texture(rng, (48, 48), cells=4)
    occ_tex = 0.45 * _smooth_texture(rng, (48, 48), cells=3)
    if spec.start is None:
        cx0, cy0 = (w - 1) / 2.0, (h - 1) / 2.0
    else:
        cx0, cy0 = spec.start
    frames: list[DenseMap] = []
    boxes: list[Box] = []
    for t in range(spec.frames):
        cx = cx0 + spec.velocity[0] * t
        cy = cy0 + spec.velocity[1] * t
        bw = spec.object_size[0] * spec.zoom**t
        bh = spec.object_size[1] * spec.zoom**t
        box = (cx - bw / 2.0, cy - bh / 2.0, bw, bh)
        if box[0] < 0 or box[1] < 0 or box[0] + bw > w or box[1] + bh > h:
            warnings.warn(
                f"object leaves canvas at frame {t}; sequence truncated to {t} frames"
            )
            break
        canvas = background.copy()
        _draw_rect(canvas, (cx, cy), (bw, bh), obj_tex, 1.0)
        if spec.occlusion is not None and spec.occlusion[0] <= t <= spec.occlusion[1]:
            _draw_rect(canvas, (cx, cy), (bw * 1.3, bh * 1.3), occ_tex, spec.occluder_opacity)
        frames.append(DenseMap(np.clip(canvas, 0.0, 1.0)[np.newaxis]))
        boxes.append(box)
    if not frames:
        raise DataError("object starts outside the canvas; nothing generated")
    return Sequence(name=f"synth_{spec.seed}", frames=frames, annotations=boxes)


def default_corpus_specs(master_seed: int, count: int = 32, frames: int = 40) -> list[SynthSpec]:
    """Randomized spec set for offline training (desk-scale corpus)."""
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0xC0]))
    specs = []
    for i in range(count):
        size = float(rng.uniform(16, 30))
        specs.append(
            SynthSpec(
                canvas=(96, 128),
                object_size=(size * float(rng.uniform(0.8, 1.25)), size),
                velocity=(float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.5, 1.5))),
                zoom=float(rng.uniform(0.995, 1.005)),
                seed=int(rng.integers(0, 2**31)),
                frames=frames,
            )
        )
    return specs


def corpus_from_specs(specs: list[SynthSpec]) -> list[tuple[DenseMap, Box]]:
    """Flatten synthetic sequences into (image, box) training pairs."""
    pairs = []
    for spec in specs:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            seq = generate_synthetic(spec)
        for i in range(len(seq.annotations)):
            pairs.append((seq.frame(i), seq.annotations[i]))
    return pairs
