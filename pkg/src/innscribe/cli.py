"""Command-line surface for the whole pipeline.

Subcommands: gen-data, train, transcribe, invert, sample, probe, eval,
grad-check, roundtrip. Every run is re-runnable: identical inputs and seeds
produce byte-identical outputs, and nothing is written outside --out.

Exit codes are stable for scripting: 0 success, 1 usage or configuration
error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint
from .config import ConfigError, load_run_config
from .datagen import (FramesFile, generate_corpus, load_pieces, read_frames,
                      read_labels_csv, write_frames, write_labels_csv)
from .errors import DimensionError, FormatError, NonFiniteError
from .evaluation import concept_probe, denoise, framewise_prf, roundtrip_report, write_pgm
from .numerics import RngState
from .training import GradCheckConfig, grad_check, train

log = logging.getLogger("innscribe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p, *names):
    if "config" in names:
        p.add_argument("--config", type=Path, help="JSON run configuration")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="seed override")
    if "out" in names:
        p.add_argument("--out", type=Path, required=True, help="output directory")
    if "checkpoint" in names:
        p.add_argument("--checkpoint", type=Path, required=True, help="INNCKPT1 model")
    if "frames" in names:
        p.add_argument("--frames", type=Path, required=True, help="FRM1 file or directory")
    if "labels" in names:
        p.add_argument("--labels", type=Path, required=True, help="label CSV")
    if "threshold" in names:
        p.add_argument("--threshold", type=float, default=None, help="denoise threshold")
    if "key" in names:
        p.add_argument("--key", type=int, default=None, help="piano key index 0..87")
    if "n-samples" in names:
        p.add_argument("--n-samples", type=int, default=30, dest="n_samples")


def build_parser() -> _Parser:
    parser = _Parser(prog="innscribe", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus (train/valid/test/probe)")
    _add_common(p, "config", "seed", "out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus root")
    _add_common(p, "config", "seed", "out", "frames")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", help="forward pass to label CSVs, optional denoise")
    _add_common(p, "checkpoint", "frames", "threshold", "out")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("invert", help="controlled inversion from an edited label CSV")
    _add_common(p, "checkpoint", "labels", "seed", "out")
    p.add_argument("--frames", type=Path, default=None,
                   help="optional source frames: reuse their predicted nuisance variables")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("sample", help="generative sampling conditioned on groundtruth labels")
    _add_common(p, "checkpoint", "frames", "seed", "out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("probe", help="single-note concept probe against references")
    _add_common(p, "checkpoint", "frames", "key", "n-samples", "seed", "out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="framewise precision/recall/F1 on labeled frames")
    _add_common(p, "checkpoint", "frames", "threshold", "out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="verify analytic gradients against central differences")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("roundtrip", help="max |x - x_hat| through forward then inverse")
    _add_common(p, "checkpoint", "frames")
    p.set_defaults(func=cmd_roundtrip)
    return parser


def _write_resolved_config(cfg, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    resolved["kernel_backend"] = kernels.backend_name()
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    _write_resolved_config(cfg, args.out)
    manifest = generate_corpus(cfg.corpus, args.out, cfg.seed)
    for split, paths in manifest.items():
        print(f"{split}: {len(paths)} file(s) under {paths[0].parent}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    train_dir = args.frames / "train"
    valid_dir = args.frames / "valid"
    if not train_dir.is_dir() or not valid_dir.is_dir():
        raise FormatError(f"{args.frames} is not a corpus root (needs train/ and valid/)")
    _write_resolved_config(cfg, args.out)
    final = train(cfg.train_config(), train_dir, valid_dir, args.out)
    print(f"final checkpoint: {final}")
    print(f"best checkpoint:  {args.out / 'best.ckpt'}")
    return 0


def _forward_labels(model, x: np.ndarray) -> np.ndarray:
    _, _, y_hat = model.forward(x, model.pad_for_inference(x))
    return y_hat


def cmd_transcribe(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    args.out.mkdir(parents=True, exist_ok=True)
    paths = sorted(args.frames.glob("*.frm")) if args.frames.is_dir() else [args.frames]
    for path in paths:
        ff = read_frames(path)
        y_hat = _forward_labels(model, ff.x.astype(np.float64))
        if args.threshold is not None:
            y_hat = denoise(y_hat, args.threshold)
        out_path = args.out / (Path(path).stem + "_labels.csv")
        write_labels_csv(out_path, y_hat, fps=ff.fps, instrument=ff.instrument)
        print(f"wrote {out_path}")
    return 0


def cmd_invert(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    y, meta = read_labels_csv(args.labels)
    n = y.shape[0]
    sp = model.spec
    if args.frames is not None:
        ff = read_frames(args.frames)
        if ff.n_frames != n:
            raise DimensionError(f"frames ({ff.n_frames}) and labels ({n}) lengths differ")
        z, _, _ = model.forward(ff.x.astype(np.float64),
                                model.pad_for_inference(ff.x.astype(np.float64)))
    else:
        rng = RngState(args.seed if args.seed is not None else 0)
        z = rng.normal((n, sp.d_z))
    x_hat, _ = model.inverse(z, np.zeros((n, sp.d_yzpad)), y)
    args.out.mkdir(parents=True, exist_ok=True)
    out_frm = args.out / "inverted.frm"
    write_frames(out_frm, FramesFile(x=x_hat.astype(np.float32), y=y.astype(np.float32),
                                     fps=meta.get("fps", 25),
                                     instrument=meta.get("instrument", 0),
                                     seed=args.seed or 0))
    write_pgm(args.out / "inverted.pgm", x_hat.T[::-1])
    print(f"wrote {out_frm}")
    return 0


def cmd_sample(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    ff = read_frames(args.frames)
    rng = RngState(args.seed if args.seed is not None else 0)
    x_sam = model.sample(ff.y.astype(np.float64), rng)
    args.out.mkdir(parents=True, exist_ok=True)
    out_frm = args.out / "sampled.frm"
    write_frames(out_frm, FramesFile(x=x_sam.astype(np.float32), y=ff.y, fps=ff.fps,
                                     instrument=ff.instrument, seed=args.seed or 0))
    write_pgm(args.out / "sampled.pgm", x_sam.T[::-1])
    print(f"wrote {out_frm}")
    return 0


def cmd_probe(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    args.out.mkdir(parents=True, exist_ok=True)
    rng = RngState(args.seed if args.seed is not None else 0)
    if args.frames.is_dir():
        refs = {}
        for path in sorted(args.frames.glob("key_*.frm")):
            key = int(path.stem.split("_")[1])
            refs[key] = path
        if args.key is not None:
            refs = {args.key: refs[args.key]}
    else:
        if args.key is None:
            raise UsageError("--key is required when --frames is a single reference file")
        refs = {args.key: args.frames}

    summary_path = args.out / "probe_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "q05", "q25", "q50", "q75", "q95"])
        for key, path in sorted(refs.items()):
            report = concept_probe(model, key, read_frames(path),
                                   n_samples=args.n_samples, rng=rng)
            writer.writerow([key, *[repr(v) for v in report.pooled]])
            per_frame_path = args.out / f"probe_key_{key:02d}.csv"
            with open(per_frame_path, "w", newline="") as pf:
                pw = csv.writer(pf)
                pw.writerow(["frame", "q05", "q25", "q50", "q75", "q95"])
                for t in range(report.per_frame.shape[1]):
                    pw.writerow([t, *[repr(v) for v in report.per_frame[:, t]]])
            write_pgm(args.out / f"probe_key_{key:02d}.pgm", report.distances)
    print(f"wrote {summary_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    pieces = load_pieces(args.frames)
    theta = args.threshold if args.threshold is not None else 0.5
    y_hat, y_true = [], []
    for piece in pieces:
        y_hat.append(_forward_labels(model, piece.x.astype(np.float64)))
        y_true.append(piece.y.astype(np.float64))
    report = framewise_prf(y_hat, y_true, theta_active=theta)
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "eval.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["piece", "precision", "recall", "f1"])
        for i, (p, r, f1) in enumerate(report.pieces):
            writer.writerow([i, repr(p), repr(r), repr(f1)])
        writer.writerow(["mean", repr(report.precision), repr(report.recall), repr(report.f1)])
    print(f"P={report.precision:.4f} R={report.recall:.4f} F1={report.f1:.4f}")
    print(f"wrote {out_path}")
    return 0


def cmd_grad_check(args) -> int:
    report = grad_check(GradCheckConfig())
    print(report.format())
    return 0 if report.passed else 3


def cmd_roundtrip(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    worst = 0.0
    for piece in load_pieces(args.frames):
        worst = max(worst, roundtrip_report(model, piece))
    print(f"max |x - x_hat| = {worst:.3e}")
    if not np.isfinite(worst):
        raise NonFiniteError("round trip produced non-finite values")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, DimensionError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, UsageError, ValueError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
