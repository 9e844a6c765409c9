"""Command-line front end: synth, pretrain, track, eval, ablate, gradcheck.

Every subcommand takes a YAML config (--config) plus dotted-key overrides
(--set key=value), honors --seed, and echoes the effective config into the
output directory. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import evaluation
from .config import ConfigError, TrackerConfig, load_config, save_config
from .dataset import (
    DataError,
    SynthSpec,
    corpus_from_specs,
    default_corpus_specs,
    export_sequence,
    generate_synthetic,
    load_sequence,
)
from .densemap import DenseMap
from .features import default_stack
from .geometry import response_geometry
from .regression import FilterBank, TrainingDiverged, init_filters, offline_train
from .snapshot import load_model, save_model
from .tracker import build_extractor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic sequences")
    _add_common(p)
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--occlude", type=int, default=0,
                   help="give this many sequences an occlusion interval")

    p = sub.add_parser("pretrain", help="offline-train extractor + filters")
    _add_common(p)
    p.add_argument("--corpus-count", type=int, default=32)
    p.add_argument("--corpus-frames", type=int, default=40)

    p = sub.add_parser("track", help="track one sequence")
    _add_common(p)
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--model", default=None, help="model snapshot from pretrain")
    p.add_argument("--annotate", action="store_true",
                   help="also write frames with the predicted box burned in")

    p = sub.add_parser("eval", help="one-pass evaluation of one variant")
    _add_common(p)
    p.add_argument("--data", default=None, help="directory of sequence subdirectories")
    p.add_argument("--variant", default="full", choices=evaluation.VARIANT_NAMES)
    p.add_argument("--model", default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("ablate", help="evaluate all ablation variants")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--corpus-count", type=int, default=8)
    p.add_argument("--corpus-frames", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    _add_common(p)
    p.add_argument("--trials", type=int, default=50)
    return parser


def _effective_config(args) -> TrackerConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _echo_config(cfg: TrackerConfig, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    save_config(cfg, os.path.join(outdir, "config_echo.yaml"))


def eval_suite_specs(seed: int, count: int = 12, frames: int = 40,
                     occlude: int = 0) -> list[SynthSpec]:
    """Varied synthetic evaluation suite: mixed motion, zoom, some occlusion."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    specs = []
    for i in range(count):
        size = float(rng.uniform(18, 28))
        occ = (frames // 3, frames // 3 + max(4, frames // 8)) if i < occlude else None
        specs.append(
            SynthSpec(
                canvas=(96, 128),
                object_size=(size, size * float(rng.uniform(0.85, 1.2))),
                velocity=(float(rng.uniform(-1.2, 1.2)), float(rng.uniform(-1.2, 1.2))),
                zoom=float(rng.uniform(0.995, 1.012)) if i % 2 else 1.0,
                occlusion=occ,
                seed=int(rng.integers(0, 2**31)),
                frames=frames,
            )
        )
    return specs


def _load_sequences(args, cfg: TrackerConfig):
    if args.data:
        dirs = sorted(
            os.path.join(args.data, d)
            for d in os.listdir(args.data)
            if os.path.isdir(os.path.join(args.data, d))
        )
        if not dirs:
            raise DataError(f"no sequence directories under {args.data}")
        return [load_sequence(d) for d in dirs]
    specs = eval_suite_specs(cfg.seed, occlude=3)
    return [generate_synthetic(s) for s in specs]


def _pretrain(cfg: TrackerConfig, count: int, frames: int, outdir: str | None):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0FF]))
    stack = build_extractor(cfg, rng)
    geom = response_geometry(cfg, stack)
    corpus = corpus_from_specs(default_corpus_specs(cfg.seed, count, frames))
    fb = init_filters(
        (geom.channels, *geom.filter_hw), cfg.filter_init_std, rng
    )
    stack, fb, losses = offline_train(corpus, stack, fb, cfg, geom, rng)
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        save_model(os.path.join(outdir, "model.snap"), stack, fb)
        with open(os.path.join(outdir, "epoch_losses.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(repr(v) for v in losses) + "\n")
    return stack, fb, losses


def _burn_box(frame: DenseMap, box) -> DenseMap:
    arr = frame.data.copy()
    x, y, w, h = (int(round(v)) for v in box)
    h_img, w_img = arr.shape[1:]
    x0, x1 = np.clip([x, x + w], 0, w_img - 1)
    y0, y1 = np.clip([y, y + h], 0, h_img - 1)
    arr[:, y0, x0:x1 + 1] = 1.0
    arr[:, y1, x0:x1 + 1] = 1.0
    arr[:, y0:y1 + 1, x0] = 1.0
    arr[:, y0:y1 + 1, x1] = 1.0
    return DenseMap(arr)


def cmd_synth(args) -> int:
    cfg = _effective_config(args)
    _echo_config(cfg, args.out)
    for i, spec in enumerate(
        eval_suite_specs(cfg.seed, args.count, args.frames, args.occlude)
    ):
        seq = generate_synthetic(spec)
        export_sequence(seq, os.path.join(args.out, f"seq{i:03d}"))
    print(f"wrote {args.count} sequences to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _effective_config(args)
    _echo_config(cfg, args.out)
    _, _, losses = _pretrain(cfg, args.corpus_count, args.corpus_frames, args.out)
    print(f"epoch losses: first={losses[0]:.4g} last={losses[-1]:.4g}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _effective_config(args)
    _echo_config(cfg, args.out)
    seq = load_sequence(args.seq)
    stack = None
    if args.model:
        stack, _, _ = load_model(args.model)
    records, fps = evaluation.track_sequence(seq, cfg, stack)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, f"{seq.name}.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(evaluation.record_lines(records)) + "\n")
    with open(os.path.join(args.out, "timing.log"), "w", encoding="utf-8") as fh:
        fh.write(f"written_at: {time.strftime('%Y-%m-%dT%H:%M:%S')}\nfps={fps:.2f}\n")
    if args.annotate:
        from PIL import Image

        ann_dir = os.path.join(args.out, "annotated")
        os.makedirs(ann_dir, exist_ok=True)
        for rec in records:
            frame = _burn_box(seq.frame(rec.frame_index), rec.box)
            gray = frame.data[0] if frame.channels == 1 else frame.data.mean(axis=0)
            Image.fromarray(
                np.clip(gray * 255, 0, 255).astype(np.uint8), mode="L"
            ).save(os.path.join(ann_dir, f"img{rec.frame_index + 1:04d}.pgm"))
    print(f"tracked {len(records)} frames at {fps:.1f} fps")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _effective_config(args)
    _echo_config(cfg, args.out)
    sequences = _load_sequences(args, cfg)
    cfg_v = evaluation.apply_variant(cfg, args.variant)
    stack = None
    if args.model and args.variant != "no_offline" and cfg_v.feature_mode == "stack":
        stack, _, _ = load_model(args.model)
    result = evaluation.run_ope(
        sequences, cfg_v, cfg.seed, stack=stack, workers=args.workers, name=args.variant
    )
    evaluation.emit_report({args.variant: result}, args.out)
    agg = result.aggregate
    print(f"{args.variant}: auc={agg.auc:.4f} precision20={agg.precision_at_20:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _effective_config(args)
    _echo_config(cfg, args.out)
    sequences = _load_sequences(args, cfg)
    if args.model:
        stack, _, _ = load_model(args.model)
    else:
        stack, _, _ = _pretrain(cfg, args.corpus_count, args.corpus_frames, None)
    results = evaluation.run_ablation(sequences, cfg, cfg.seed, stack, workers=args.workers)
    evaluation.emit_report(results, args.out)
    lines = ["variant,auc,precision_at_20"]
    for name in evaluation.VARIANT_NAMES:
        agg = results[name].aggregate
        lines.append(f"{name},{agg.auc!r},{agg.precision_at_20!r}")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "ablation_table.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    cfg = _effective_config(args)
    _echo_config(cfg, args.out)
    errors = run_all(cfg.seed, args.trials)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name}: max relative error {err:.3e}")
    print(f"overall max relative error {worst:.3e}")
    return EXIT_OK if worst < 1e-4 else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "track": cmd_track,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
