"""Training and evaluation loops.

An epoch is ``steps_per_epoch`` mini-batches drawn from the pool of
(sequence, target-frame) windows, not a sweep over every window; at typical
video counts the full pool is far larger than useful for desk-scale runs.

Off-center windows (rolling completion): the decoder structurally emits the
center token, so when a rolled window leaves the target at offset o the
target loss splits evenly between the sequence-head row at o and a second
decoder pass over the circularly shifted clip that re-centers the target.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from skiplift.config import ModelConfig
from skiplift.data import (
    CompletionPolicy,
    PoseDataset,
    extract_clip,
    normalize_screen_coords,
)
from skiplift.model import (
    PoseLifter,
    joint_distance,
    loss_full,
    loss_target,
    loss_total,
    mpjpe,
    p_mpjpe,
)
from skiplift.tensor import Tape, backward, reshape, take, tmean


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class Adam:
    """Adaptive-moment optimizer over (name, tensor) pairs.

    ``step`` consumes and clears accumulated gradients; parameters without a
    gradient are skipped.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(t.data) for _, t in self.params]
        self._v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self) -> None:
        self.steps += 1
        bc1 = 1.0 - self.beta1**self.steps
        bc2 = 1.0 - self.beta2**self.steps
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self._m[i] / bc1) / (np.sqrt(self._v[i] / bc2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainSettings:
    epochs: int = 20
    steps_per_epoch: int = 150
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.95
    seed: int = 0
    test_fraction: float = 0.1
    eval_stride: int = 1  # evaluate every k-th target frame


@dataclass
class RunManifest:
    config: dict
    settings: dict
    seed: int
    dataset_path: str
    history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "settings": self.settings,
            "seed": self.seed,
            "dataset_path": self.dataset_path,
            "history": self.history,
            "final": self.final,
            "wall_time_s": self.wall_time_s,
        }


def split_dataset(dataset: PoseDataset, test_fraction: float, seed: int):
    """Deterministic sequence-level split; returns (train_ids, test_ids)."""
    n = len(dataset.sequences)
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def _normalized_2d(dataset: PoseDataset, idx: int) -> np.ndarray:
    s = dataset.sequences[idx]
    return normalize_screen_coords(s.pose2d, dataset.image_width, dataset.image_height)


class ClipSampler:
    """Assembles training batches of completed windows with aligned 3D truth."""

    def __init__(self, dataset: PoseDataset, seq_ids, config: ModelConfig):
        self.dataset = dataset
        self.seq_ids = list(seq_ids)
        self.config = config
        self.policy = CompletionPolicy(
            config.completion, config.effective_roll_threshold
        )
        self._video2d = {i: _normalized_2d(dataset, i) for i in self.seq_ids}
        self.pool = [
            (i, t)
            for i in self.seq_ids
            for t in range(dataset.sequences[i].length)
        ]

    def sample(self, rng: np.random.Generator, count: int):
        picks = rng.integers(0, len(self.pool), size=count)
        return self.collect([self.pool[k] for k in picks])

    def collect(self, items):
        """Returns (clips, gt_seq, gt_target, offsets) for (seq, t) pairs."""
        cfg = self.config
        clips = np.empty((len(items), cfg.frames, cfg.joints, 2))
        gt_seq = np.empty((len(items), cfg.frames, cfg.joints, 3))
        gt_tgt = np.empty((len(items), cfg.joints, 3))
        offsets = np.empty(len(items), dtype=np.intp)
        for b, (i, t) in enumerate(items):
            seq = self.dataset.sequences[i]
            clip2d, offset, _ = extract_clip(
                self._video2d[i], t, cfg.frames, self.policy
            )
            clip3d, offset3, _ = extract_clip(
                np.asarray(seq.pose3d, dtype=np.float64), t, cfg.frames, self.policy
            )
            assert offset3 == offset
            clips[b] = clip2d
            gt_seq[b] = clip3d
            gt_tgt[b] = seq.pose3d[t]
            offsets[b] = offset
        return clips, gt_seq, gt_tgt, offsets


def _rotate_to_center(clips: np.ndarray, offsets: np.ndarray, center: int):
    """Circularly shift each clip so its target row lands at the center."""
    out = np.empty_like(clips)
    for b in range(clips.shape[0]):
        out[b] = np.roll(clips[b], center - int(offsets[b]), axis=0)
    return out


def batch_loss(model: PoseLifter, clips, gt_seq, gt_tgt, offsets):
    """Total loss over one batch.

    Windows are forwarded in their natural frame order, so the sequence loss
    always supervises temporally contiguous rows. A centered target takes its
    target loss from the decoder output; an off-center (rolled) target splits
    it evenly between the sequence-head row at the target offset and a second
    decoder pass over the circularly shifted clip that re-centers the target,
    the view evaluation feeds the model.
    """
    cfg = model.config
    full, target = model.forward(clips)
    return loss_total(
        _target_term(model, full, target, clips, gt_tgt, offsets),
        loss_full(full, gt_seq),
        cfg.loss_balance,
    )


def _target_term(model: PoseLifter, full, target, clips, gt_tgt, offsets):
    cfg = model.config
    off = offsets != cfg.center
    if not off.any():
        return loss_target(target, gt_tgt)
    ids = np.flatnonzero(off)
    cen = np.flatnonzero(~off)
    count = offsets.shape[0]
    rows = take(
        reshape(full, (-1, cfg.joints, 3)), ids * cfg.frames + offsets[ids]
    )
    _, target_rot = model.forward(
        _rotate_to_center(clips[ids], offsets[ids], cfg.center)
    )
    rolled = tmean(joint_distance(rows, gt_tgt[ids])) + tmean(
        joint_distance(target_rot, gt_tgt[ids])
    )
    term = rolled * (0.5 * ids.size / count)
    if cen.size:
        centered = loss_target(take(target, cen), gt_tgt[cen])
        term = term + centered * (cen.size / count)
    return term


def train_model(
    model: PoseLifter,
    dataset: PoseDataset,
    settings: TrainSettings,
    dataset_path: str = "",
    log=None,
) -> RunManifest:
    start = time.monotonic()
    train_ids, test_ids = split_dataset(dataset, settings.test_fraction, settings.seed)
    sampler = ClipSampler(dataset, train_ids, model.config)
    rng = np.random.default_rng(settings.seed + 1)
    opt = Adam(model.named_parameters(), lr=settings.lr)

    manifest = RunManifest(
        config=model.config.to_dict(),
        settings={
            "epochs": settings.epochs,
            "steps_per_epoch": settings.steps_per_epoch,
            "batch_size": settings.batch_size,
            "lr": settings.lr,
            "lr_decay": settings.lr_decay,
            "test_fraction": settings.test_fraction,
        },
        seed=settings.seed,
        dataset_path=str(dataset_path),
    )

    for epoch in range(settings.epochs):
        opt.lr = settings.lr * settings.lr_decay**epoch
        losses = []
        for _ in range(settings.steps_per_epoch):
            batch = sampler.sample(rng, settings.batch_size)
            with Tape():
                breakdown = batch_loss(model, *batch)
            value = float(breakdown.total.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {len(losses)}"
                )
            backward(breakdown.total)
            opt.step()
            losses.append(value)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "lr": opt.lr,
        }
        manifest.history.append(entry)
        if log:
            log(f"epoch {epoch:3d}  loss {entry['train_loss']:8.2f}  lr {opt.lr:.2e}")

    err, perr = evaluate(model, dataset, test_ids, stride=settings.eval_stride)
    manifest.final = {"mpjpe_mm": err, "p_mpjpe_mm": perr, "test_sequences": test_ids}
    manifest.wall_time_s = time.monotonic() - start
    return manifest


def evaluate(
    model: PoseLifter,
    dataset: PoseDataset,
    seq_ids,
    stride: int = 1,
    batch_size: int = 64,
    items=None,
) -> tuple[float, float]:
    """Test MPJPE / P-MPJPE over every stride-th target index of each
    sequence (stride 1 covers each target exactly once). ``items`` replaces
    the stride enumeration with explicit (sequence, target) pairs; their
    sequence ids must come from ``seq_ids``.

    Off-center windows are re-centered by circular shift before the decoder
    pass, matching the training convention.
    """
    cfg = model.config
    sampler = ClipSampler(dataset, seq_ids, cfg)
    if items is None:
        items = [
            (i, t)
            for i in seq_ids
            for t in range(0, dataset.sequences[i].length, stride)
        ]
    preds = np.empty((len(items), cfg.joints, 3))
    gts = np.empty((len(items), cfg.joints, 3))
    pos = 0
    for lo in range(0, len(items), batch_size):
        chunk = items[lo : lo + batch_size]
        clips, _, gt_tgt, offsets = sampler.collect(chunk)
        off_center = offsets != cfg.center
        if off_center.any():
            clips = np.where(
                off_center[:, None, None, None],
                _rotate_to_center(clips, offsets, cfg.center),
                clips,
            )
        _, target = model.forward(clips)
        preds[pos : pos + len(chunk)] = target.data
        gts[pos : pos + len(chunk)] = gt_tgt
        pos += len(chunk)
    return mpjpe(preds, gts), p_mpjpe(preds, gts)


# ----------------------------------------------------------------------
# reference predictors


def mean_pose_baseline(dataset: PoseDataset, train_ids) -> np.ndarray:
    """Constant predictor: the average training pose (J, 3)."""
    total = np.zeros((dataset.joints, 3))
    count = 0
    for i in train_ids:
        p = np.asarray(dataset.sequences[i].pose3d, dtype=np.float64)
        total += p.sum(axis=0)
        count += p.shape[0]
    return total / count


def linear_lifter_fit(dataset: PoseDataset, train_ids, max_frames: int = 50000):
    """Least-squares single-frame lifter: normalized 2D (+bias) -> 3D mm."""
    xs, ys = [], []
    for i in train_ids:
        s = dataset.sequences[i]
        xs.append(_normalized_2d(dataset, i).reshape(s.length, -1))
        ys.append(np.asarray(s.pose3d, dtype=np.float64).reshape(s.length, -1))
    x = np.concatenate(xs)[:max_frames]
    y = np.concatenate(ys)[:max_frames]
    x1 = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    w, *_ = np.linalg.lstsq(x1, y, rcond=None)
    return w


def linear_lifter_predict(w: np.ndarray, frames2d: np.ndarray) -> np.ndarray:
    flat = frames2d.reshape(frames2d.shape[0], -1)
    x1 = np.concatenate([flat, np.ones((flat.shape[0], 1))], axis=1)
    out = x1 @ w
    return out.reshape(frames2d.shape[0], -1, 3)


def baseline_errors(dataset: PoseDataset, train_ids, test_ids, stride: int = 1):
    """MPJPE of the mean-pose and linear-lifter references on test targets."""
    mean_pose = mean_pose_baseline(dataset, train_ids)
    w = linear_lifter_fit(dataset, train_ids)
    gts, lin = [], []
    for i in test_ids:
        s = dataset.sequences[i]
        sel = np.arange(0, s.length, stride)
        gts.append(np.asarray(s.pose3d, dtype=np.float64)[sel])
        lin.append(linear_lifter_predict(w, _normalized_2d(dataset, i)[sel]))
    gt = np.concatenate(gts)
    lin_pred = np.concatenate(lin)
    mean_pred = np.broadcast_to(mean_pose, gt.shape)
    return mpjpe(mean_pred, gt), mpjpe(lin_pred, gt)
