"""Complexity accounting and attention-map export.

Closed-form MAC counts for the temporal block families are kept as exact
fractions so the headline ratios (1/m attention compression, the skipped
block costing under 60% of the strided-conv block) never hinge on float
rounding. Empirical numbers come from running the real forward pass under
the instrumented kernel; every matmul is attributed to the innermost scope
label, so the analytic attention terms and the measured "*.attention"
scopes are directly comparable.

Per block, for T frames of width D with skip interval m:

    attention only      2*T^2*D / m
    skipped block       2*T^2*D / m + (1 + 4/m)*T*D^2
    strided-conv block  2*T^2*D + 2*(k/s + 1)*T*D^2

Attention-map export writes plain CSV matrices plus a JSON index; the
heads-combined file is the mean over heads so its rows still sum to one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from skiplift.config import ModelConfig
from skiplift.model import AttentionRecorder, PoseLifter, param_count
from skiplift.temporal import encoder_block, init_block_params
from skiplift.tensor import FlopCounter, Tensor, counting


def _check_positive(**values):
    for name, v in values.items():
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")


def analytic_ssa(frames: int, dim: int, interval: int) -> Fraction:
    """MACs of the two score/apply products of one skipped attention layer."""
    _check_positive(frames=frames, dim=dim, interval=interval)
    return Fraction(2 * frames * frames * dim, interval)


def analytic_vanilla(frames: int, dim: int) -> Fraction:
    return analytic_ssa(frames, dim, 1)


def analytic_skt(frames: int, dim: int, interval: int) -> Fraction:
    """MACs of one skipped temporal block: attention plus the linear and
    feed-forward terms, which shrink with the interval as well."""
    _check_positive(frames=frames, dim=dim, interval=interval)
    linear = (1 + Fraction(4, interval)) * frames * dim * dim
    return analytic_ssa(frames, dim, interval) + linear


def analytic_stt(frames: int, dim: int, kernel: int, stride: int) -> Fraction:
    """MACs of one full-attention block with a strided-conv feed-forward."""
    _check_positive(frames=frames, dim=dim, kernel=kernel, stride=stride)
    linear = 2 * (Fraction(kernel, stride) + 1) * frames * dim * dim
    return 2 * frames * frames * dim + linear


def ssa_over_vanilla(interval: int) -> Fraction:
    _check_positive(interval=interval)
    return Fraction(1, interval)


def skt_over_stt(
    frames: int, dim: int, interval: int, kernel: int = 3, stride: int = 3
) -> Fraction:
    return analytic_skt(frames, dim, interval) / analytic_stt(
        frames, dim, kernel, stride
    )


# ----------------------------------------------------------------------
# empirical measurement


def empirical_cost(config: ModelConfig, seed: int = 0) -> tuple[dict, float]:
    """Per-scope MAC totals of one full forward pass on a random clip.

    Returns (scope -> MACs, wall seconds). Wall time is informational only;
    cost claims rest on the MAC counts.
    """
    model = PoseLifter(config, seed=seed)
    rng = np.random.default_rng(seed)
    clip = rng.normal(size=(config.frames, config.joints, 2))
    counter = FlopCounter()
    start = time.perf_counter()
    with counting(counter):
        model.forward(clip)
    elapsed = time.perf_counter() - start
    return dict(sorted(counter.macs.items())), elapsed


def empirical_attention_macs(
    frames: int, dim: int, interval: int, heads: int = 8, seed: int = 0
) -> int:
    """Measured MACs of the attention scope of one encoder block."""
    rng = np.random.default_rng(seed)
    params = init_block_params(rng, dim, heads)
    x = Tensor(rng.normal(size=(1, frames, dim)))
    counter = FlopCounter()
    with counting(counter):
        encoder_block(x, params, interval)
    return counter.total_macs("encoder.attention")


def empirical_attention_ratio(
    frames: int, dim: int, interval: int, heads: int = 8
) -> float:
    """Measured attention-MAC compression of interval m against m=1."""
    skipped = empirical_attention_macs(frames, dim, interval, heads)
    vanilla = empirical_attention_macs(frames, dim, 1, heads)
    return skipped / vanilla


# ----------------------------------------------------------------------
# report


def _json_number(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


@dataclass
class CostReport:
    """Analytic per-block MACs next to measured per-scope totals."""

    frames: int
    dim: int
    interval: int
    kernel: int
    stride: int
    analytic_ssa: Fraction
    analytic_vanilla: Fraction
    analytic_skt: Fraction
    analytic_stt: Fraction
    ssa_over_vanilla: Fraction
    skt_over_stt: Fraction
    params: int
    empirical: dict = field(default_factory=dict)
    empirical_total: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "dim": self.dim,
            "interval": self.interval,
            "kernel": self.kernel,
            "stride": self.stride,
            "analytic": {
                "ssa": _json_number(self.analytic_ssa),
                "vanilla_attention": _json_number(self.analytic_vanilla),
                "skipped_block": _json_number(self.analytic_skt),
                "strided_block": _json_number(self.analytic_stt),
                "ssa_over_vanilla": float(self.ssa_over_vanilla),
                "skipped_over_strided": float(self.skt_over_stt),
            },
            "params": self.params,
            "empirical_macs": self.empirical,
            "empirical_total_macs": self.empirical_total,
            "wall_time_s": self.wall_time_s,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def cost_report(
    config: ModelConfig, kernel: int = 3, stride: int = 3, seed: int = 0
) -> CostReport:
    scopes, elapsed = empirical_cost(config, seed=seed)
    f, d, m = config.frames, config.dim, config.skip
    return CostReport(
        frames=f,
        dim=d,
        interval=m,
        kernel=kernel,
        stride=stride,
        analytic_ssa=analytic_ssa(f, d, m),
        analytic_vanilla=analytic_vanilla(f, d),
        analytic_skt=analytic_skt(f, d, m),
        analytic_stt=analytic_stt(f, d, kernel, stride),
        ssa_over_vanilla=ssa_over_vanilla(m),
        skt_over_stt=skt_over_stt(f, d, m, kernel, stride),
        params=param_count(config),
        empirical=scopes,
        empirical_total=sum(scopes.values()),
        wall_time_s=elapsed,
    )


# ----------------------------------------------------------------------
# attention export


def _write_csv(path: Path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.8e")


def export_attention(model: PoseLifter, clip: np.ndarray, out_dir) -> dict:
    """Dump every attention map of one forward pass as CSV files.

    Writes, under ``out_dir``:
      - spatial_alpha.csv: the part adjacency summed over frames (N_p x N_p)
      - {stage}_L{layer}_S{set}_H{head}.csv: one temporal map per head
      - {stage}_L{layer}_S{set}_Hmean.csv: mean over heads (rows sum to 1)
      - index.json describing all of the above
    Returns the index dictionary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = AttentionRecorder()
    model.forward(np.asarray(clip), record=rec)

    index: dict = {"spatial": [], "temporal": []}
    for i, alpha in enumerate(rec.spatial):
        summed = alpha.reshape(-1, alpha.shape[-2], alpha.shape[-1]).sum(axis=0)
        name = "spatial_alpha.csv" if len(rec.spatial) == 1 else f"spatial_alpha_{i}.csv"
        _write_csv(out / name, summed)
        index["spatial"].append(
            {"file": name, "parts": summed.shape[0], "frames_summed": int(alpha.size // summed.size)}
        )

    for entry in rec.temporal:
        weights = entry["weights"]  # (B * sets, heads, n, n)
        sets = entry["sets"]
        heads, n = weights.shape[1], weights.shape[2]
        batch = weights.shape[0] // sets
        per_set = weights.reshape(batch, sets, heads, n, n).mean(axis=0)
        for s in range(sets):
            set_id = entry["set_index"] if sets == 1 else s
            stem = f"{entry['stage']}_L{entry['layer']}_S{set_id}"
            files = []
            for h in range(heads):
                fname = f"{stem}_H{h}.csv"
                _write_csv(out / fname, per_set[s, h])
                files.append(fname)
            mean_name = f"{stem}_Hmean.csv"
            _write_csv(out / mean_name, per_set[s].mean(axis=0))
            index["temporal"].append(
                {
                    "stage": entry["stage"],
                    "layer": entry["layer"],
                    "set": set_id,
                    "tokens": n,
                    "heads": heads,
                    "files": files,
                    "heads_mean": mean_name,
                }
            )

    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=2)
    return index


def load_exported_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
