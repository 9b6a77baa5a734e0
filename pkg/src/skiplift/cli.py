"""Command-line interface.

Subcommands: gen-data, train, eval, flops, dump-attention, sweep. Every
failure prints a single stderr line of the form ``error[kind]: message``
and maps to a stable exit code: 0 ok, 2 usage, 3 data error, 4 config
error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from skiplift.analysis import analytic_skt, cost_report, export_attention
from skiplift.config import ModelConfig, min_decoder_layers
from skiplift.data import (
    DataFormatError,
    load_dataset,
    save_dataset,
    synth_generate,
    write_manifest,
)
from skiplift.model import PoseLifter, load_checkpoint, save_checkpoint
from skiplift.temporal import ConfigError
from skiplift.tensor import ShapeError
from skiplift.train import (
    ClipSampler,
    NumericError,
    TrainSettings,
    evaluate,
    train_model,
)


class _Parser(argparse.ArgumentParser):
    """Argparse with single-line usage errors (exit code 2)."""

    def error(self, message):
        print(f"error[usage]: {message}", file=sys.stderr)
        raise SystemExit(2)


def _fail(code: int, kind: str, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    print(f"error[{kind}]: {message}", file=sys.stderr)
    return code


def _force_sequential() -> None:
    """Pin the math libraries to one thread for bit-stable reductions.

    Takes effect for BLAS pools that honor the environment at use time and
    for any worker subprocesses; the pure-Python pipeline itself is already
    sequential and deterministic.
    """
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = "1"


def _load_config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    with open(path) as fh:
        return ModelConfig.from_json(fh.read())


def _load_pair(ckpt_path: str, data_path: str):
    model = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_path)
    if dataset.joints != model.config.joints:
        raise ConfigError(
            f"checkpoint expects {model.config.joints} joints but the dataset "
            f"has {dataset.joints}"
        )
    return model, dataset


def _settings_from(args) -> TrainSettings:
    return TrainSettings(
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        batch_size=args.batch_size,
        lr=args.lr,
        lr_decay=args.lr_decay,
        seed=args.seed,
        test_fraction=args.test_fraction,
        eval_stride=args.eval_stride,
    )


def _add_train_settings(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--steps-per-epoch", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--eval-stride", type=int, default=1)


# ----------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    dataset = synth_generate(
        seed=args.seed,
        count=args.count,
        length=args.frames,
        joints=args.joints,
        noise=args.noise,
        fps=args.fps,
    )
    save_dataset(dataset, args.out)
    manifest = args.manifest or f"{args.out}.json"
    write_manifest(dataset, args.out, manifest)
    print(f"wrote {args.count} sequences of {args.frames} frames to {args.out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.print_config:
        print(config.to_json())
        return 0
    dataset = load_dataset(args.data)
    if dataset.joints != config.joints:
        raise ConfigError(
            f"config expects {config.joints} joints but the dataset has "
            f"{dataset.joints}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = PoseLifter(config, seed=args.seed)
    manifest = train_model(
        model,
        dataset,
        _settings_from(args),
        dataset_path=args.data,
        log=None if args.quiet else print,
    )
    ckpt = out / "model.gsf"
    save_checkpoint(model, ckpt)
    run_path = out / "run.json"
    with open(run_path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")
    print(f"checkpoint: {ckpt}")
    print(f"manifest: {run_path}")
    print(f"MPJPE {manifest.final['mpjpe_mm']:.2f} mm")
    print(f"P-MPJPE {manifest.final['p_mpjpe_mm']:.2f} mm")
    return 0


def cmd_eval(args) -> int:
    model, dataset = _load_pair(args.ckpt, args.data)
    seq_ids = (
        [int(s) for s in args.seqs.split(",")]
        if args.seqs
        else list(range(len(dataset.sequences)))
    )
    err, perr = evaluate(model, dataset, seq_ids, stride=args.stride)
    if not (np.isfinite(err) and np.isfinite(perr)):
        raise NumericError("evaluation produced a non-finite metric")
    print(f"MPJPE {err:.2f} mm")
    print(f"P-MPJPE {perr:.2f} mm")
    return 0


def cmd_flops(args) -> int:
    config = _load_config(args.config)
    if args.print_config:
        print(config.to_json())
        return 0
    report = cost_report(config, kernel=args.kernel, stride=args.stride, seed=args.seed)
    print(report.to_json())
    return 0


def cmd_dump_attention(args) -> int:
    model, dataset = _load_pair(args.ckpt, args.data)
    if not 0 <= args.index < len(dataset.sequences):
        raise DataFormatError(
            f"sequence index {args.index} out of range for "
            f"{len(dataset.sequences)} sequences"
        )
    seq = dataset.sequences[args.index]
    frame = args.frame if args.frame is not None else seq.length // 2
    if not 0 <= frame < seq.length:
        raise DataFormatError(
            f"frame {frame} out of range for a {seq.length}-frame sequence"
        )
    sampler = ClipSampler(dataset, [args.index], model.config)
    clips, _, _, _ = sampler.collect([(args.index, frame)])
    index = export_attention(model, clips[0], args.out)
    n_files = len(index["spatial"]) + sum(
        len(e["files"]) + 1 for e in index["temporal"]
    )
    print(f"wrote {n_files} matrices to {args.out}")
    return 0


def _sweep_config(base: ModelConfig, param: str, raw: str) -> tuple[ModelConfig, float]:
    if param == "m":
        m = int(raw)
        if m == 1:
            # interval 1 cannot shrink the decoder; fall back to the
            # vanilla-attention conv baseline, which it equals anyway
            cfg = base.with_overrides(skip=1, temporal_mode="vt_conv")
        else:
            cfg = base.with_overrides(
                skip=m, dec_layers=min_decoder_layers(base.frames, m)
            )
        return cfg, float(m)
    if param == "R":
        r = int(raw)
        return base.with_overrides(completion="roll", roll_threshold=r), float(r)
    if param == "lambda":
        lam = float(raw)
        return base.with_overrides(loss_balance=lam), lam
    raise ConfigError(f"unknown sweep parameter {param!r}")


def cmd_sweep(args) -> int:
    base = _load_config(args.config)
    if args.print_config:
        print(base.to_json())
        return 0
    dataset = load_dataset(args.data)
    if dataset.joints != base.joints:
        raise ConfigError(
            f"config expects {base.joints} joints but the dataset has "
            f"{dataset.joints}"
        )
    settings = _settings_from(args)
    rows = []
    for raw in args.values.split(","):
        cfg, value = _sweep_config(base, args.param, raw.strip())
        model = PoseLifter(cfg, seed=settings.seed)
        manifest = train_model(model, dataset, settings, dataset_path=args.data)
        macs = float(analytic_skt(cfg.frames, cfg.dim, cfg.skip))
        rows.append((value, manifest.final["mpjpe_mm"], macs))
        print(f"{args.param}={value:g} mpjpe={rows[-1][1]:.2f}mm macs={macs:.0f}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["value", "mpjpe_mm", "macs_per_block"])
        writer.writerows(rows)
    print(f"sweep table: {args.out}")
    return 0


# ----------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="skiplift", description=__doc__)
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="pin math libraries to one thread for bit-stable reductions",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic motion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--frames", type=int, default=100, help="frames per sequence")
    p.add_argument("--joints", type=int, default=17)
    p.add_argument("--noise", type=float, default=2.0, help="2D noise sigma in px")
    p.add_argument("--fps", type=float, default=50.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + manifest")
    p.add_argument("--config", default=None, help="model config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--print-config", action="store_true")
    p.add_argument("--quiet", action="store_true")
    _add_train_settings(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seqs", default=None, help="comma-separated sequence indices")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="print the analytic/empirical cost report")
    p.add_argument("--config", default=None)
    p.add_argument("--print-config", action="store_true")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("dump-attention", help="export attention maps as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="sequence index")
    p.add_argument("--frame", type=int, default=None, help="target frame (default middle)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("sweep", help="train across a parameter range, write CSV")
    p.add_argument("--param", required=True, choices=["m", "R", "lambda"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--print-config", action="store_true")
    _add_train_settings(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.deterministic:
        _force_sequential()
    try:
        return args.func(args)
    except DataFormatError as exc:
        return _fail(3, "data", exc)
    except (ConfigError, ShapeError) as exc:
        return _fail(4, "config", exc)
    except NumericError as exc:
        return _fail(5, "numeric", exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(3, "data", exc)
    except ValueError as exc:
        return _fail(4, "config", exc)
    except OSError as exc:
        return _fail(3, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
