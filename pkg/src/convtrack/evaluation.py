"""One-pass evaluation: precision/success curves, ablation variants, reports.

A tracker is initialized once on the first annotated frame and run without
resets. Precision counts frames whose predicted center is within a pixel
threshold (grid 0..50 step 1); success counts frames whose box overlap
strictly exceeds a threshold (grid 0..1 step 0.05); AUC is the mean of the
success grid. Aggregation pools frames across sequences.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import TrackerConfig
from .dataset import Box, Sequence
from .features import ConvStack
from .tracker import Tracker

SCHEMA_VERSION = "1"

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)

VARIANT_OVERRIDES: dict[str, dict] = {
    "full": {},
    "no_offline": {},
    "no_pnr": {"gate_mode": "rmax_only"},
    "no_scale": {"scale_mode": "none"},
    "mulres_scale": {"scale_mode": "multires"},
    "lite": {"feature_mode": "raw", "scale_mode": "none"},
}

VARIANT_NAMES = list(VARIANT_OVERRIDES)


@dataclass
class EvalCurves:
    precision: np.ndarray  # 51 points, thresholds 0..50 px
    success: np.ndarray  # 21 points, thresholds 0..1
    precision_at_20: float
    auc: float
    fps: float = 0.0

    def to_dict(self) -> dict:
        return {
            "precision": [float(v) for v in self.precision],
            "success": [float(v) for v in self.success],
            "precision_at_20": self.precision_at_20,
            "auc": self.auc,
        }


@dataclass
class FrameRecord:
    frame_index: int
    box: Box
    score: float
    pnr: float
    updated: bool


@dataclass
class VariantResult:
    name: str
    aggregate: EvalCurves
    per_sequence: dict[str, EvalCurves]
    records: dict[str, list[FrameRecord]]
    failures: dict[str, str] = field(default_factory=dict)


def center_error(pred: Box, gt: Box) -> float:
    px, py = pred[0] + pred[2] / 2.0, pred[1] + pred[3] / 2.0
    gx, gy = gt[0] + gt[2] / 2.0, gt[1] + gt[3] / 2.0
    return float(np.hypot(px - gx, py - gy))


def iou(pred: Box, gt: Box) -> float:
    ix = max(0.0, min(pred[0] + pred[2], gt[0] + gt[2]) - max(pred[0], gt[0]))
    iy = max(0.0, min(pred[1] + pred[3], gt[1] + gt[3]) - max(pred[1], gt[1]))
    inter = ix * iy
    union = pred[2] * pred[3] + gt[2] * gt[3] - inter
    if union <= 0:
        return 0.0
    return float(min(inter / union, 1.0))


def curves(errors: list[float], overlaps: list[float], fps: float = 0.0) -> EvalCurves:
    """Precision/success curves from pooled per-frame errors and overlaps."""
    if not errors or len(errors) != len(overlaps):
        raise ValueError("errors and overlaps must be equal-length non-empty lists")
    err = np.asarray(errors, dtype=np.float64)
    ovl = np.asarray(overlaps, dtype=np.float64)
    precision = np.array([np.mean(err <= t) for t in PRECISION_THRESHOLDS])
    success = np.array([np.mean(ovl > t) for t in SUCCESS_THRESHOLDS])
    result = EvalCurves(
        precision=precision,
        success=success,
        precision_at_20=float(precision[20]),
        auc=float(success.mean()),
        fps=fps,
    )
    assert np.all(np.diff(precision) >= 0), "precision curve must be non-decreasing"
    assert np.all(np.diff(success) <= 0), "success curve must be non-increasing"
    return result


def apply_variant(cfg: TrackerConfig, name: str) -> TrackerConfig:
    if name not in VARIANT_OVERRIDES:
        raise ValueError(f"unknown variant {name!r}; valid: {VARIANT_NAMES}")
    return cfg.replace(**VARIANT_OVERRIDES[name])


def track_sequence(
    seq: Sequence, cfg: TrackerConfig, stack: ConvStack | None = None
) -> tuple[list[FrameRecord], float]:
    """Run one tracker over a sequence; returns per-frame records and fps.

    Throughput uses CPU time, not wall time, so scheduler contention does
    not perturb the speed comparison between variants.
    """
    t0 = time.process_time()
    tracker = Tracker.init(seq.frame(0), seq.annotations[0], cfg, stack=stack)
    records = [
        FrameRecord(0, tuple(seq.annotations[0]), tracker.state.score, tracker.state.pnr, False)
    ]
    for i in range(1, len(seq)):
        state = tracker.step(seq.frame(i))
        records.append(
            FrameRecord(i, state.box(), state.score, state.pnr, state.updated)
        )
    elapsed = time.process_time() - t0
    fps = len(seq) / elapsed if elapsed > 0 else 0.0
    return records, fps


def _score_records(seq: Sequence, records: list[FrameRecord]) -> tuple[list, list]:
    errors, overlaps = [], []
    for rec in records:
        if rec.frame_index < len(seq.annotations):
            gt = seq.annotations[rec.frame_index]
            errors.append(center_error(rec.box, gt))
            overlaps.append(iou(rec.box, gt))
    return errors, overlaps


def _eval_one(args):
    seq, cfg, stack = args
    try:
        records, fps = track_sequence(seq, cfg, stack)
    except Exception as exc:  # failures are recorded, not fatal
        return seq.name, None, f"{type(exc).__name__}: {exc}"
    return seq.name, (records, fps), None


def run_ope(
    sequences: list[Sequence],
    cfg: TrackerConfig,
    seed: int,
    stack: ConvStack | None = None,
    workers: int = 1,
    name: str = "full",
) -> VariantResult:
    """One-pass evaluation over a sequence set; deterministic under seed."""
    if not sequences:
        raise ValueError("no sequences to evaluate")
    cfg = cfg.replace(seed=seed)
    ordered = sorted(sequences, key=lambda s: s.name)
    jobs = [(seq, cfg, stack) for seq in ordered]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_eval_one, jobs))
    else:
        outputs = [_eval_one(job) for job in jobs]

    per_sequence: dict[str, EvalCurves] = {}
    records: dict[str, list[FrameRecord]] = {}
    failures: dict[str, str] = {}
    pooled_err: list[float] = []
    pooled_ovl: list[float] = []
    total_frames = 0
    total_fps_time = 0.0
    by_name = {seq.name: seq for seq in ordered}
    for seq_name, payload, error in outputs:
        if error is not None:
            failures[seq_name] = error
            continue
        recs, fps = payload
        seq = by_name[seq_name]
        errors, overlaps = _score_records(seq, recs)
        per_sequence[seq_name] = curves(errors, overlaps, fps)
        records[seq_name] = recs
        pooled_err.extend(errors)
        pooled_ovl.extend(overlaps)
        total_frames += len(recs)
        total_fps_time += len(recs) / fps if fps > 0 else 0.0
    if not pooled_err:
        raise RuntimeError(f"all sequences failed: {failures}")
    agg_fps = total_frames / total_fps_time if total_fps_time > 0 else 0.0
    aggregate = curves(pooled_err, pooled_ovl, agg_fps)
    return VariantResult(name, aggregate, per_sequence, records, failures)


def run_ablation(
    sequences: list[Sequence],
    base_cfg: TrackerConfig,
    seed: int,
    pretrained_stack: ConvStack | None,
    workers: int = 1,
    variants: list[str] | None = None,
) -> dict[str, VariantResult]:
    """Evaluate every ablation variant; no_offline skips the pretrained stack."""
    results = {}
    for name in variants or VARIANT_NAMES:
        cfg = apply_variant(base_cfg, name)
        stack = None
        if name != "no_offline" and cfg.feature_mode == "stack":
            stack = pretrained_stack
        results[name] = run_ope(sequences, cfg, seed, stack=stack, workers=workers, name=name)
    return results


# --------------------------------------------------------------------- report


def record_lines(records: list[FrameRecord]) -> list[str]:
    """Per-frame record lines: index, 1-based top-left box, score, pnr, flag."""
    lines = []
    for r in records:
        x, y, w, h = r.box
        lines.append(
            f"{r.frame_index},{x + 1.0!r},{y + 1.0!r},{w!r},{h!r},"
            f"{r.score!r},{r.pnr!r},{int(r.updated)}"
        )
    return lines


def _svg_plot(
    path: str,
    series: dict[str, tuple[np.ndarray, np.ndarray]],
    title: str,
    xlabel: str,
    ylabel: str,
) -> None:
    """Minimal deterministic SVG line plot: one polyline per series."""
    width, height, margin = 640, 440, 60
    palette = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    xmin = min(float(x.min()) for x, _ in series.values())
    xmax = max(float(x.max()) for x, _ in series.values())
    span = xmax - xmin or 1.0

    def sx(v):
        return margin + (v - xmin) / span * (width - 2 * margin)

    def sy(v):
        return height - margin - v * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{height / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {height / 2})">{ylabel}</text>',
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
        f'height="{height - 2 * margin}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        v = k / 4.0
        parts.append(
            f'<text x="{margin - 8}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.2f}</text>'
        )
        xv = xmin + span * k / 4.0
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{height - margin + 16}" text-anchor="middle" '
            f'font-size="10">{xv:g}</text>'
        )
    for idx, (label, (xs, ys)) in enumerate(sorted(series.items())):
        color = palette[idx % len(palette)]
        points = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 16 * idx + 12}" '
            f'font-size="10" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def emit_report(results: dict[str, VariantResult], outdir: str) -> None:
    """Write results.json, per-frame record files, SVG curves and a timing log.

    Wall-clock throughput lives only in the sidecar timing.log so result
    files are byte-reproducible under a fixed seed.
    """
    if not results:
        raise ValueError("no results to report")
    os.makedirs(outdir, exist_ok=True)
    payload = {"schema_version": SCHEMA_VERSION, "variants": {}}
    for name, res in sorted(results.items()):
        payload["variants"][name] = {
            "aggregate": res.aggregate.to_dict(),
            "per_sequence": {k: v.to_dict() for k, v in sorted(res.per_sequence.items())},
            "failures": dict(sorted(res.failures.items())),
        }
    with open(os.path.join(outdir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, res in sorted(results.items()):
        rec_dir = os.path.join(outdir, "records", name)
        os.makedirs(rec_dir, exist_ok=True)
        for seq_name, recs in sorted(res.records.items()):
            with open(os.path.join(rec_dir, f"{seq_name}.txt"), "w", encoding="utf-8") as fh:
                fh.write("\n".join(record_lines(recs)) + "\n")
    _svg_plot(
        os.path.join(outdir, "precision.svg"),
        {
            name: (PRECISION_THRESHOLDS, res.aggregate.precision)
            for name, res in results.items()
        },
        "Precision",
        "center error threshold (px)",
        "fraction of frames",
    )
    _svg_plot(
        os.path.join(outdir, "success.svg"),
        {name: (SUCCESS_THRESHOLDS, res.aggregate.success) for name, res in results.items()},
        "Success",
        "overlap threshold",
        "fraction of frames",
    )
    with open(os.path.join(outdir, "timing.log"), "w", encoding="utf-8") as fh:
        fh.write(f"written_at: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        for name, res in sorted(results.items()):
            fh.write(f"{name}: fps={res.aggregate.fps:.2f}\n")


def load_report(outdir: str) -> dict:
    with open(os.path.join(outdir, "results.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)
