"""Compare boundary-completion strategies on boundary targets only.

Trains one model per completion mode on identical data and seeds, then
evaluates each on exactly the targets whose windows stick out of the video
(the only place the strategies differ).

    python3 scripts/completion_comparison.py --count 300 --epochs 5
"""

from __future__ import annotations

import argparse
import sys

from skiplift.config import ModelConfig, min_decoder_layers
from skiplift.data import synth_generate
from skiplift.model import PoseLifter
from skiplift.train import TrainSettings, evaluate, split_dataset, train_model


def boundary_items(dataset, seq_ids, frames: int):
    """(sequence, target) pairs whose centered window is incomplete."""
    center = (frames - 1) // 2
    items = []
    for i in seq_ids:
        length = dataset.sequences[i].length
        for t in range(length):
            if t < center or t > length - 1 - center:
                items.append((i, t))
    return items


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--count", type=int, default=300)
    parser.add_argument("--length", type=int, default=100)
    parser.add_argument("--noise", type=float, default=2.0)
    parser.add_argument("--frames", type=int, default=27)
    parser.add_argument("--modes", default="roll,edge,expand")
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--steps-per-epoch", type=int, default=80)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=7)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    print(f"generating {args.count} sequences ...")
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
    _, test_ids = split_dataset(dataset, settings.test_fraction, settings.seed)
    items = boundary_items(dataset, test_ids, args.frames)
    print(f"{len(items)} boundary targets in the test split")

    results = {}
    for mode in args.modes.split(","):
        config = ModelConfig(
            frames=args.frames,
            skip=3,
            channels=32,
            dim=64,
            heads=8,
            enc_layers=2,
            dec_layers=min_decoder_layers(args.frames, 3),
            completion=mode,
        )
        model = PoseLifter(config, seed=args.seed)
        print(f"training with completion={mode} ...")
        train_model(model, dataset, settings)
        err, perr = evaluate(model, dataset, test_ids, items=items)
        results[mode] = (err, perr)
        print(f"  boundary MPJPE {err:.2f} mm, P-MPJPE {perr:.2f} mm")

    print()
    print(f"{'mode':>8} {'MPJPE (mm)':>12} {'P-MPJPE (mm)':>13}")
    for mode, (err, perr) in results.items():
        print(f"{mode:>8} {err:>12.2f} {perr:>13.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
