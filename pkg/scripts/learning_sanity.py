"""Train a small lifter on synthetic motion and compare it to the two
reference predictors (mean pose, single-frame linear regression).

The defaults finish in a couple of minutes; raise --count/--epochs for a
stronger result.

    python3 scripts/learning_sanity.py --count 400 --epochs 8
"""

from __future__ import annotations

import argparse
import sys

from skiplift.config import ModelConfig
from skiplift.data import synth_generate
from skiplift.model import PoseLifter
from skiplift.train import TrainSettings, baseline_errors, split_dataset, train_model


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--count", type=int, default=400, help="training sequences")
    parser.add_argument("--length", type=int, default=100, help="frames per sequence")
    parser.add_argument("--noise", type=float, default=2.0, help="2D noise sigma, px")
    parser.add_argument("--frames", type=int, default=27, help="model input window")
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--channels", type=int, default=32)
    parser.add_argument("--heads", type=int, default=8)
    parser.add_argument("--enc-layers", type=int, default=2)
    parser.add_argument("--dec-layers", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--steps-per-epoch", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=7)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    print(f"generating {args.count} sequences of {args.length} frames ...")
    dataset = synth_generate(
        seed=args.seed, count=args.count, length=args.length, noise=args.noise
    )

    settings = TrainSettings(
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    train_ids, test_ids = split_dataset(dataset, settings.test_fraction, settings.seed)
    mean_err, lin_err = baseline_errors(dataset, train_ids, test_ids)
    print(f"mean-pose baseline : {mean_err:8.2f} mm")
    print(f"linear lifter      : {lin_err:8.2f} mm")

    config = ModelConfig(
        frames=args.frames,
        skip=3,
        channels=args.channels,
        dim=args.dim,
        heads=args.heads,
        enc_layers=args.enc_layers,
        dec_layers=args.dec_layers,
    )
    model = PoseLifter(config, seed=args.seed)
    manifest = train_model(model, dataset, settings, log=print)

    err = manifest.final["mpjpe_mm"]
    perr = manifest.final["p_mpjpe_mm"]
    print(f"model              : {err:8.2f} mm MPJPE, {perr:8.2f} mm P-MPJPE")
    print(f"vs mean pose       : {100.0 * (1.0 - err / mean_err):+8.1f} %")
    print(f"vs linear lifter   : {100.0 * (1.0 - err / lin_err):+8.1f} %")
    return 0


if __name__ == "__main__":
    sys.exit(main())
