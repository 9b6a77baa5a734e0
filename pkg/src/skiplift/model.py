"""End-to-end pose lifter and its evaluation kit.

Assembly: per-frame spatial encoder -> temporal encoder (full-length output
for the sequence head) -> temporal decoder (single token for the target
head). Regression heads work in meters and are scaled to millimeters so the
parameters keep O(1) magnitudes.

Also here: the conv-FFN ablation block families (vanilla attention with a
same-padded conv FFN, and its strided variant that shrinks the sequence),
losses, MPJPE / Procrustes-aligned MPJPE, parameter counting, and binary
checkpoints.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from skiplift.config import ModelConfig
from skiplift.data import DataFormatError
from skiplift.spatial import init_spatial_params, spatial_forward
from skiplift.temporal import (
    ConfigError,
    decoder_block,
    decoder_forward,
    encoder_block,
    encoder_forward,
    init_block_params,
    pad_to_multiple,
    ssa_attend,
)
from skiplift.tensor import (
    ShapeError,
    Tensor,
    concat,
    flop_scope,
    gelu,
    layer_norm,
    matmul,
    reshape,
    sqrt,
    square,
    take,
    tmean,
    tsum,
    uniform_param,
    zeros_param,
)

OUTPUT_SCALE_MM = 1000.0

CKPT_MAGIC = b"GSF1"


class AttentionRecorder:
    """Collects attention maps during a forward pass for later export.

    Spatial entries are part-adjacency arrays (..., N_p, N_p); temporal
    entries carry softmax maps plus their (stage, layer, set) position.
    Decoder blocks fold their m sets into the batch axis, so a decoder
    entry's weights have shape (B*m, h, n, n) with ``sets`` = m.
    """

    def __init__(self):
        self.spatial: list[np.ndarray] = []
        self.temporal: list[dict] = []

    def add_spatial(self, alpha: np.ndarray) -> None:
        self.spatial.append(np.array(alpha, copy=True))

    def add_temporal(
        self,
        weights: np.ndarray,
        stage: str = "encoder",
        layer: int = 0,
        set_index: int = 0,
        sets: int = 1,
    ) -> None:
        self.temporal.append(
            {
                "stage": stage,
                "layer": layer,
                "set_index": set_index,
                "sets": sets,
                "weights": np.array(weights, copy=True),
            }
        )


# ----------------------------------------------------------------------
# conv-FFN baseline blocks


@dataclass
class ConvBlockParams:
    """Vanilla-attention block whose FFN is a temporal convolution pair.

    Kernel/stride describe the first conv; the second is same-padded when
    stride is 1 and pointwise when the first conv strides.
    """

    heads: int
    kernel: int
    stride: int
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor

    def named_parameters(self, prefix: str):
        for field in (
            "ln1_g", "ln1_b", "wq", "bq", "wk", "wv", "bv", "wo", "bo",
            "ln2_g", "ln2_b", "conv1_w", "conv1_b", "conv2_w", "conv2_b",
        ):
            yield f"{prefix}.{field}", getattr(self, field)


def init_conv_block_params(
    rng: np.random.Generator, dim: int, heads: int, kernel: int = 3, stride: int = 1
) -> ConvBlockParams:
    if dim % heads != 0:
        raise ConfigError(f"model width {dim} not divisible by {heads} heads")
    hidden = 4 * dim
    k2 = 1 if stride > 1 else kernel
    return ConvBlockParams(
        heads=heads,
        kernel=kernel,
        stride=stride,
        ln1_g=Tensor(np.ones(dim), requires_grad=True),
        ln1_b=zeros_param((dim,)),
        wq=uniform_param(rng, (dim, dim)),
        bq=zeros_param((dim,)),
        wk=uniform_param(rng, (dim, dim)),
        wv=uniform_param(rng, (dim, dim)),
        bv=zeros_param((dim,)),
        wo=uniform_param(rng, (dim, dim)),
        bo=zeros_param((dim,)),
        ln2_g=Tensor(np.ones(dim), requires_grad=True),
        ln2_b=zeros_param((dim,)),
        conv1_w=uniform_param(rng, (kernel * dim, hidden)),
        conv1_b=zeros_param((hidden,)),
        conv2_w=uniform_param(rng, (k2 * hidden, dim)),
        conv2_b=zeros_param((dim,)),
    )


def temporal_conv(
    x: Tensor, w: Tensor, b: Tensor, kernel: int, stride: int
) -> Tensor:
    """1D convolution along the time axis, written as gather + matmul.

    Stride 1 uses zero 'same' padding (odd kernel); stride == kernel tiles
    non-overlapping windows (repeating the last row when the length is not
    a multiple, matching the decoder padding rule).
    """
    bsz, tlen, dim = x.shape
    if kernel == 1 and stride == 1:
        return matmul(x, w) + b
    if stride == 1:
        if kernel % 2 == 0:
            raise ConfigError(f"same-padded conv needs an odd kernel, got {kernel}")
        pad = (kernel - 1) // 2
        zeros = Tensor(np.zeros((bsz, pad, dim)))
        xp = concat([zeros, x, zeros], axis=1)
        idx = [t + j for t in range(tlen) for j in range(kernel)]
        win = reshape(take(xp, idx, axis=1), (bsz, tlen, kernel * dim))
        return matmul(win, w) + b
    if stride == kernel:
        xp = pad_to_multiple(x, stride)
        n = xp.shape[1] // stride
        win = reshape(xp, (bsz, n, kernel * dim))
        return matmul(win, w) + b
    raise ConfigError(f"unsupported conv kernel {kernel} with stride {stride}")


def _promote3(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def vt_conv_block(
    x: Tensor,
    params: ConvBlockParams,
    record=None,
    layer: int = 0,
    stage: str = "encoder",
) -> Tensor:
    """Full-sequence attention plus a same-padded convolutional FFN."""
    x, squeeze = _promote3(x)
    meta = {"stage": stage, "layer": layer, "set_index": 0, "sets": 1}
    a = x + ssa_attend(
        layer_norm(x, params.ln1_g, params.ln1_b), params, record, meta, stage
    )
    h = layer_norm(a, params.ln2_g, params.ln2_b)
    with flop_scope(f"{stage}.ffn"):
        y = gelu(temporal_conv(h, params.conv1_w, params.conv1_b, params.kernel, 1))
        y = temporal_conv(y, params.conv2_w, params.conv2_b, params.kernel, 1)
    out = a + y
    return reshape(out, out.shape[1:]) if squeeze else out


def vt_strided_block(
    x: Tensor, params: ConvBlockParams, record=None, layer: int = 0
) -> Tensor:
    """Full-length attention, then a strided conv FFN that shrinks time by
    the stride factor. No FFN residual: the length changes."""
    x, squeeze = _promote3(x)
    meta = {"stage": "decoder", "layer": layer, "set_index": 0, "sets": 1}
    a = x + ssa_attend(
        layer_norm(x, params.ln1_g, params.ln1_b), params, record, meta, "decoder"
    )
    h = layer_norm(a, params.ln2_g, params.ln2_b)
    with flop_scope("decoder.ffn"):
        y = gelu(
            temporal_conv(h, params.conv1_w, params.conv1_b, params.kernel, params.stride)
        )
        y = temporal_conv(y, params.conv2_w, params.conv2_b, 1, 1)
    return reshape(y, y.shape[1:]) if squeeze else y


@dataclass(frozen=True)
class TemporalBlocks:
    """Uniform interface over the temporal block families.

    ``encoder``/``decoder`` take (x, params, interval, record, layer); the
    init functions take (rng, dim, heads, interval).
    """

    init_encoder: Callable
    init_decoder: Callable
    encoder: Callable
    decoder: Callable


def baseline_block(temporal_mode: str) -> TemporalBlocks:
    if temporal_mode == "skipped":
        return TemporalBlocks(
            init_encoder=lambda rng, d, h, m: init_block_params(rng, d, h),
            init_decoder=lambda rng, d, h, m: init_block_params(rng, d, h, merge_sets=m),
            encoder=encoder_block,
            decoder=decoder_block,
        )
    if temporal_mode == "vt_conv":
        return TemporalBlocks(
            init_encoder=lambda rng, d, h, m: init_conv_block_params(rng, d, h, 3, 1),
            init_decoder=lambda rng, d, h, m: init_conv_block_params(rng, d, h, 3, 1),
            encoder=lambda x, p, m, record=None, layer=0: vt_conv_block(
                x, p, record, layer, "encoder"
            ),
            decoder=lambda x, p, m, record=None, layer=0: vt_conv_block(
                x, p, record, layer, "decoder"
            ),
        )
    if temporal_mode == "vt_strided":
        return TemporalBlocks(
            init_encoder=lambda rng, d, h, m: init_conv_block_params(rng, d, h, 3, 1),
            init_decoder=lambda rng, d, h, m: init_conv_block_params(rng, d, h, 3, 3),
            encoder=lambda x, p, m, record=None, layer=0: vt_conv_block(
                x, p, record, layer, "encoder"
            ),
            decoder=lambda x, p, m, record=None, layer=0: vt_strided_block(
                x, p, record, layer
            ),
        )
    raise ConfigError(f"unknown temporal mode {temporal_mode!r}")


# ----------------------------------------------------------------------
# model


class PoseLifter:
    """Lifts a (T, J, 2) clip to (T, J, 3) plus the target frame (J, 3)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.grouping = config.part_grouping()
        self.spatial_attention = config.spatial_mode != "mlp"
        self.spatial = init_spatial_params(
            rng,
            self.grouping,
            config.joints,
            config.channels,
            config.dim,
            use_attention=self.spatial_attention,
        )
        self.pos = (
            uniform_param(rng, (config.frames, config.dim), fan_in=config.dim)
            if config.pos_embedding
            else None
        )
        self._blocks = baseline_block(config.temporal_mode)
        self.encoder = [
            self._blocks.init_encoder(rng, config.dim, config.heads, config.skip)
            for _ in range(config.enc_layers)
        ]
        self.decoder = [
            self._blocks.init_decoder(rng, config.dim, config.heads, config.skip)
            for _ in range(config.dec_layers)
        ]
        out_width = config.joints * 3
        self.full_w = uniform_param(rng, (config.dim, out_width))
        self.full_b = zeros_param((out_width,))
        self.target_w = uniform_param(rng, (config.dim, out_width))
        self.target_b = zeros_param((out_width,))

    def named_parameters(self):
        yield from self.spatial.named_parameters("spatial")
        if self.pos is not None:
            yield "temporal.pos", self.pos
        for i, p in enumerate(self.encoder):
            yield from p.named_parameters(f"encoder.{i}")
        for i, p in enumerate(self.decoder):
            yield from p.named_parameters(f"decoder.{i}")
        yield "head.full_w", self.full_w
        yield "head.full_b", self.full_b
        yield "head.target_w", self.target_w
        yield "head.target_b", self.target_b

    def forward(self, clip: np.ndarray, record=None) -> tuple[Tensor, Tensor]:
        """Returns (sequence prediction, target prediction) in millimeters.

        Accepts (T, J, 2) or (B, T, J, 2); outputs match the batching.
        """
        clip = np.asarray(clip, dtype=np.float64)
        squeeze = clip.ndim == 3
        if squeeze:
            clip = clip[None]
        cfg = self.config
        if clip.shape[1:] != (cfg.frames, cfg.joints, 2):
            raise ShapeError(
                f"expected clips shaped ({cfg.frames}, {cfg.joints}, 2), "
                f"got {clip.shape[1:]}"
            )
        bsz = clip.shape[0]

        x = spatial_forward(
            clip,
            self.spatial,
            self.grouping,
            use_attention=self.spatial_attention,
            activation=cfg.activation,
            record=record,
        )
        enc = [
            self._make_block(self._blocks.encoder, p, record, i)
            for i, p in enumerate(self.encoder)
        ]
        z = encoder_forward(x, enc, cfg.variant, self.pos)

        with flop_scope("heads"):
            full = (matmul(z, self.full_w) + self.full_b) * OUTPUT_SCALE_MM
        full = reshape(full, (bsz, cfg.frames, cfg.joints, 3))

        zd = self._decode(z, record)
        with flop_scope("heads"):
            target = (matmul(zd, self.target_w) + self.target_b) * OUTPUT_SCALE_MM
        target = reshape(target, (bsz, cfg.joints, 3))

        if squeeze:
            return reshape(full, full.shape[1:]), reshape(target, (cfg.joints, 3))
        return full, target

    def _make_block(self, fn, params, record, layer):
        return lambda t: fn(t, params, self.config.skip, record, layer)

    def _decode(self, z: Tensor, record) -> Tensor:
        cfg = self.config
        blocks = [
            self._make_block(self._blocks.decoder, p, record, i)
            for i, p in enumerate(self.decoder)
        ]
        if cfg.temporal_mode == "vt_conv":
            h = z
            for block in blocks:
                h = block(h)
            return take(h, [cfg.center], axis=1)
        return decoder_forward(z, blocks)

    def __call__(self, clip, record=None):
        return self.forward(clip, record)


def param_count(config: ModelConfig) -> int:
    model = PoseLifter(config, seed=0)
    return sum(t.data.size for _, t in model.named_parameters())


# ----------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    total: Tensor
    target_term: Tensor
    full_term: Tensor


def joint_distance(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Per-joint Euclidean distance, shape (..., J)."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeError(f"prediction {pred.shape} does not match target {gt.shape}")
    diff = pred - Tensor(gt)
    return sqrt(tsum(square(diff), axis=-1))


def loss_target(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean per-joint distance for target poses (..., J, 3)."""
    return tmean(joint_distance(pred, gt))


def loss_full(pred_seq: Tensor, gt_seq: np.ndarray) -> Tensor:
    """Mean per-joint distance over all frames of a sequence."""
    return tmean(joint_distance(pred_seq, gt_seq))


def loss_total(target_term: Tensor, full_term: Tensor, balance: float) -> LossBreakdown:
    if balance < 0:
        raise ValueError("loss balance must be non-negative")
    return LossBreakdown(
        total=target_term + full_term * float(balance),
        target_term=target_term,
        full_term=full_term,
    )


# ----------------------------------------------------------------------
# metrics


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint position error in the input's units."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeError(f"prediction {pred.shape} does not match target {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray | None:
    """Best similarity transform (proper rotation, scale, translation) of
    ``pred`` onto ``gt`` in the least-squares sense; None when a cloud is
    degenerate (all points coincident, or non-finite values present)."""
    if not (np.isfinite(pred).all() and np.isfinite(gt).all()):
        return None
    mu_gt = gt.mean(axis=0)
    mu_pred = pred.mean(axis=0)
    x0 = gt - mu_gt
    y0 = pred - mu_pred
    norm_x = np.linalg.norm(x0)
    norm_y = np.linalg.norm(y0)
    if norm_x < 1e-12 or norm_y < 1e-12:
        return None
    m = (y0 / norm_y).T @ (x0 / norm_x)
    u, s, vt = np.linalg.svd(m)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1.0
        s[-1] *= -1.0
        rot = u @ vt
    scale = s.sum() * norm_x / norm_y
    return scale * (y0 @ rot) + mu_gt


def p_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """MPJPE after per-frame Procrustes alignment of prediction to truth.

    Degenerate frames (a coincident point cloud) fall back to the unaligned
    error and raise a RuntimeWarning.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeError(f"prediction {pred.shape} does not match target {gt.shape}")
    frames_p = pred.reshape(-1, pred.shape[-2], 3)
    frames_g = gt.reshape(-1, gt.shape[-2], 3)
    total = 0.0
    degenerate = 0
    for p, g in zip(frames_p, frames_g):
        aligned = procrustes_align(p, g)
        if aligned is None:
            degenerate += 1
            aligned = p
        total += float(np.mean(np.linalg.norm(aligned - g, axis=-1)))
    if degenerate:
        warnings.warn(
            f"{degenerate} degenerate frame(s): alignment skipped, "
            "unaligned error used",
            RuntimeWarning,
            stacklevel=2,
        )
    return total / len(frames_p)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: PoseLifter, path) -> None:
    """Binary checkpoint: magic, length-prefixed config JSON, then each
    parameter as (name length, name, rank, extents, float64 LE data)."""
    cfg = model.config.to_json(indent=None).encode()
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path, seed: int = 0) -> PoseLifter:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise DataFormatError(
                f"bad magic {magic!r}: not a {CKPT_MAGIC.decode()} checkpoint"
            )
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = ModelConfig.from_json(_read_exact(fh, cfg_len).decode())
        model = PoseLifter(config, seed=seed)
        expected = dict(model.named_parameters())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            data = np.frombuffer(
                _read_exact(fh, 8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8"
            ).reshape(shape)
            if name not in expected:
                raise ConfigError(f"checkpoint parameter {name!r} not in the model")
            t = expected.pop(name)
            if t.data.shape != data.shape:
                raise ConfigError(
                    f"checkpoint parameter {name!r} has shape {data.shape}, "
                    f"model expects {t.data.shape}"
                )
            t.data[...] = data
        if expected:
            missing = ", ".join(sorted(expected))
            raise ConfigError(f"checkpoint is missing parameters: {missing}")
        if fh.read(1):
            raise DataFormatError("trailing bytes after the last parameter")
    return model
