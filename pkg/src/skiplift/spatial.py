"""Per-frame spatial encoder: body parts with a learned dense adjacency.

Joints are grouped into parts (trunk plus four limbs by default). A shared
two-layer perceptron encodes each zero-padded part coordinate vector, a
learned positional embedding distinguishes the parts, and pairwise additive
attention over the part features produces a data-driven adjacency:

    e_ij = < w, |f_i + f_j| >        alpha_ij = sigmoid(e_ij)

Each part feature is then updated with the attention-weighted sum of all
part features, concatenated with its original self, flattened across parts,
and projected to the model width. A joint-level linear path on the raw 2D
coordinates is added as a residual, so the graph runs per frame and never
mixes information across time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from skiplift.tensor import (
    Tensor,
    concat,
    flop_scope,
    gelu,
    matmul,
    relu,
    reshape,
    sigmoid,
    tabs,
    uniform_param,
    zeros_param,
)

# H36M-style 17-joint order: 0 pelvis, 1-3 right leg, 4-6 left leg,
# 7 spine, 8 thorax, 9 neck, 10 head, 11-13 left arm, 14-16 right arm.
_DEFAULT_PARTS_17 = (
    (0, 7, 8, 9, 10),  # trunk
    (4, 5, 6),  # left leg
    (1, 2, 3),  # right leg
    (11, 12, 13),  # left arm
    (14, 15, 16),  # right arm
)

_ACTIVATIONS = {"gelu": gelu, "relu": relu}


@dataclass(frozen=True)
class PartGrouping:
    """Disjoint joint-index groups; every joint must appear exactly once."""

    parts: tuple[tuple[int, ...], ...]

    @classmethod
    def default_17(cls) -> "PartGrouping":
        return cls(_DEFAULT_PARTS_17)

    @classmethod
    def jointwise(cls, joints: int) -> "PartGrouping":
        """One node per joint (graph baseline with J nodes)."""
        return cls(tuple((j,) for j in range(joints)))

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def max_size(self) -> int:
        return max(len(p) for p in self.parts)

    @property
    def pad_width(self) -> int:
        return 2 * self.max_size

    def validate(self, joints: int) -> None:
        seen: list[int] = []
        for part in self.parts:
            if not part:
                raise ValueError("empty part in grouping")
            for j in part:
                if not 0 <= j < joints:
                    raise ValueError(f"joint index {j} out of range for J={joints}")
                seen.append(j)
        if len(seen) != len(set(seen)):
            raise ValueError("grouping assigns a joint to more than one part")
        if len(seen) != joints:
            missing = sorted(set(range(joints)) - set(seen))
            raise ValueError(f"grouping does not cover joints {missing}")

    def to_lists(self) -> list[list[int]]:
        return [list(p) for p in self.parts]

    @classmethod
    def from_lists(cls, lists) -> "PartGrouping":
        return cls(tuple(tuple(int(j) for j in p) for p in lists))


def group_joints(pose: np.ndarray, grouping: PartGrouping) -> list[np.ndarray]:
    """Split one (J, 2) pose into per-part coordinate vectors, flattened in
    listed joint order. No padding here; see :func:`padded_parts`."""
    pose = np.asarray(pose)
    if pose.ndim != 2 or pose.shape[1] != 2:
        raise ValueError(f"expected a (J, 2) pose, got {pose.shape}")
    grouping.validate(pose.shape[0])
    return [pose[list(part)].reshape(-1) for part in grouping.parts]


def padded_parts(seq: np.ndarray, grouping: PartGrouping) -> np.ndarray:
    """Stack part vectors for a (..., J, 2) array, zero-padded to equal width."""
    seq = np.asarray(seq, dtype=np.float64)
    lead = seq.shape[:-2]
    out = np.zeros(lead + (grouping.n_parts, grouping.pad_width))
    for p, part in enumerate(grouping.parts):
        flat = seq[..., list(part), :].reshape(lead + (-1,))
        out[..., p, : flat.shape[-1]] = flat
    return out


@dataclass
class SpatialParams:
    """Learnable state of the spatial encoder.

    mlp_* is the shared part encoder (pad_width -> C -> C), e_pos the per-part
    positional embedding (N_p x C), attn_w the C -> 1 scoring vector of the
    additive attention, proj the flattened-parts projection to D, and res the
    joint-coordinate residual (2J -> D).
    """

    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    e_pos: Tensor
    attn_w: Tensor
    proj_w: Tensor
    proj_b: Tensor
    res_w: Tensor
    res_b: Tensor

    def named_parameters(self, prefix: str = "spatial"):
        for field in (
            "mlp_w1",
            "mlp_b1",
            "mlp_w2",
            "mlp_b2",
            "e_pos",
            "attn_w",
            "proj_w",
            "proj_b",
            "res_w",
            "res_b",
        ):
            yield f"{prefix}.{field}", getattr(self, field)


def init_spatial_params(
    rng: np.random.Generator,
    grouping: PartGrouping,
    joints: int,
    channels: int,
    dim: int,
    use_attention: bool = True,
) -> SpatialParams:
    w = grouping.pad_width
    node_width = 2 * channels if use_attention else channels
    return SpatialParams(
        mlp_w1=uniform_param(rng, (w, channels)),
        mlp_b1=zeros_param((channels,)),
        mlp_w2=uniform_param(rng, (channels, channels)),
        mlp_b2=zeros_param((channels,)),
        e_pos=uniform_param(rng, (grouping.n_parts, channels), fan_in=channels),
        attn_w=uniform_param(rng, (channels, 1)),
        proj_w=uniform_param(rng, (grouping.n_parts * node_width, dim)),
        proj_b=zeros_param((dim,)),
        res_w=uniform_param(rng, (2 * joints, dim)),
        res_b=zeros_param((dim,)),
    )


def encode_parts(
    parts: np.ndarray, params: SpatialParams, activation: str = "gelu"
) -> Tensor:
    """Shared MLP over padded part vectors plus the part positional embedding.

    ``parts`` has shape (..., N_p, pad_width); the result is (..., N_p, C).
    """
    act = _ACTIVATIONS[activation]
    parts = np.asarray(parts, dtype=np.float64)
    lead = parts.shape[:-1]
    x = Tensor(parts.reshape(-1, parts.shape[-1]))
    h = act(matmul(x, params.mlp_w1) + params.mlp_b1)
    h = matmul(h, params.mlp_w2) + params.mlp_b2
    h = reshape(h, lead + (h.shape[-1],))
    return h + params.e_pos


def part_attention(f: Tensor, attn_w: Tensor) -> Tensor:
    """Dense sigmoid adjacency over part features.

    Scores are the inner product of a learned vector with the elementwise
    absolute value of each feature-pair sum, which makes the matrix symmetric.
    """
    lead = f.shape[:-2]
    n, c = f.shape[-2], f.shape[-1]
    fi = reshape(f, lead + (n, 1, c))
    fj = reshape(f, lead + (1, n, c))
    s = tabs(fi + fj)
    e = matmul(reshape(s, (-1, c)), attn_w)
    return sigmoid(reshape(e, lead + (n, n)))


def aggregate_update(f: Tensor, alpha: Tensor, activation: str = "gelu") -> Tensor:
    """Attention-weighted aggregation concatenated with the original features:
    (..., N_p, C) -> (..., N_p, 2C)."""
    act = _ACTIVATIONS[activation]
    agg = act(matmul(alpha, f))
    return concat([agg, f], axis=-1)


def spatial_forward(
    seq: np.ndarray,
    params: SpatialParams,
    grouping: PartGrouping,
    use_attention: bool = True,
    activation: str = "gelu",
    record=None,
) -> Tensor:
    """Encode a (T, J, 2) or (B, T, J, 2) sequence to (T, D) / (B, T, D)."""
    seq = np.asarray(seq, dtype=np.float64)
    squeeze = seq.ndim == 3
    if squeeze:
        seq = seq[None]
    if seq.ndim != 4 or seq.shape[-1] != 2:
        raise ValueError(f"expected (B, T, J, 2) input, got {seq.shape}")
    bsz, tlen, joints, _ = seq.shape

    with flop_scope("spatial"):
        parts = padded_parts(seq, grouping)
        f = encode_parts(parts, params, activation)
        if use_attention:
            alpha = part_attention(f, params.attn_w)
            if record is not None:
                record.add_spatial(alpha.data)
            nodes = aggregate_update(f, alpha, activation)
        else:
            nodes = f
        flat = reshape(nodes, (bsz, tlen, -1))
        out = matmul(flat, params.proj_w) + params.proj_b
        res_in = Tensor(seq.reshape(bsz, tlen, joints * 2))
        out = out + (matmul(res_in, params.res_w) + params.res_b)

    return reshape(out, (tlen, out.shape[-1])) if squeeze else out
