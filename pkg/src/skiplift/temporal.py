"""Temporal encoder/decoder built on skipped self-attention.

The sequence axis is partitioned into m residue classes (positions i, i+m,
i+2m, ...). Multi-head attention runs inside each class only, which divides
the quadratic attention cost by m. Encoder blocks scatter the attended rows
back to their original positions, so length is preserved; decoder blocks
instead concatenate the m classes channelwise, rank by rank, and merge with
a linear layer, shrinking the sequence by a factor of m per block until a
single token remains. When m does not divide the current length the last row
is repeated to pad up to the next multiple.

All blocks are pre-norm: x + Attn(LN(x)) followed by x + FFN(LN(x)) with a
hidden width of 4x the model width. Per-head attention scores are scaled by
sqrt(D/h).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from skiplift.tensor import (
    Tensor,
    concat,
    flop_scope,
    gelu,
    inverse_permutation,
    layer_norm,
    matmul,
    reshape,
    softmax,
    take,
    transpose,
    uniform_param,
    zeros_param,
)


class ConfigError(ValueError):
    """A configuration contradicts an architectural requirement."""


@dataclass(frozen=True)
class SkipPartition:
    """Residue classes of [0, T) modulo the skip interval m."""

    interval: int
    sets: tuple[tuple[int, ...], ...]


def skip_partition(length: int, interval: int) -> SkipPartition:
    if interval < 1:
        raise ValueError(f"skip interval must be >= 1, got {interval}")
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    sets = tuple(tuple(range(i, length, interval)) for i in range(interval))
    return SkipPartition(interval, sets)


@dataclass
class BlockParams:
    """One transformer block: pre-norm attention and FFN, optional merge.

    ``merge_w``/``merge_b`` are present only in decoder blocks, where the m
    attended sets are concatenated channelwise (m*D) and merged back to D.
    The key projection carries no bias: softmax is invariant to a constant
    shift of every key, so such a bias could never receive gradient.
    """

    heads: int
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
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    merge_w: Tensor | None = None
    merge_b: Tensor | None = None

    def named_parameters(self, prefix: str):
        for field in (
            "ln1_g", "ln1_b", "wq", "bq", "wk", "wv", "bv", "wo", "bo",
            "ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
            "merge_w", "merge_b",
        ):
            t = getattr(self, field)
            if t is not None:
                yield f"{prefix}.{field}", t


def init_block_params(
    rng: np.random.Generator, dim: int, heads: int, merge_sets: int | None = None
) -> BlockParams:
    if dim % heads != 0:
        raise ConfigError(f"model width {dim} not divisible by {heads} heads")
    hidden = 4 * dim
    merge_w = merge_b = None
    if merge_sets is not None:
        merge_w = uniform_param(rng, (merge_sets * dim, dim))
        merge_b = zeros_param((dim,))
    return BlockParams(
        heads=heads,
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
        ffn_w1=uniform_param(rng, (dim, hidden)),
        ffn_b1=zeros_param((hidden,)),
        ffn_w2=uniform_param(rng, (hidden, dim)),
        ffn_b2=zeros_param((dim,)),
        merge_w=merge_w,
        merge_b=merge_b,
    )


def _promote(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected a (T, D) or (B, T, D) tensor, got {x.shape}")
    return x, False


def ssa_attend(
    z: Tensor,
    params: BlockParams,
    record=None,
    record_meta=None,
    scope: str = "encoder",
) -> Tensor:
    """Multi-head attention over one already-gathered set of rows.

    Accepts (n, D) or (B, n, D); batching over sampling sets is done by the
    caller folding them into the leading axis.
    """
    z, squeeze = _promote(z)
    bsz, n, dim = z.shape
    h = params.heads
    dh = dim // h
    scale = 1.0 / math.sqrt(dh)

    with flop_scope(f"{scope}.proj"):
        q = matmul(z, params.wq) + params.bq
        k = matmul(z, params.wk)
        v = matmul(z, params.wv) + params.bv

    # (B, n, D) -> (B, h, n, dh)
    def split(t):
        return transpose(reshape(t, (bsz, n, h, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)

    with flop_scope(f"{scope}.attention"):
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
        attn = softmax(scores, axis=-1)
        if record is not None:
            record.add_temporal(attn.data, **(record_meta or {}))
        out = matmul(attn, v)

    out = reshape(transpose(out, (0, 2, 1, 3)), (bsz, n, dim))
    with flop_scope(f"{scope}.proj"):
        out = matmul(out, params.wo) + params.bo
    return reshape(out, (n, dim)) if squeeze else out


def _ffn(x: Tensor, params: BlockParams, scope: str) -> Tensor:
    with flop_scope(f"{scope}.ffn"):
        h = gelu(matmul(x, params.ffn_w1) + params.ffn_b1)
        return matmul(h, params.ffn_w2) + params.ffn_b2


def encoder_attention_stage(
    x: Tensor,
    params: BlockParams,
    interval: int,
    record=None,
    layer: int = 0,
) -> Tensor:
    """Residual skipped-attention half of an encoder block (pre-FFN value).

    Rows are gathered per residue class, attended within the class, and
    scattered back to their original positions before the residual add.
    """
    x, squeeze = _promote(x)
    tlen = x.shape[1]
    part = skip_partition(tlen, interval)
    xn = layer_norm(x, params.ln1_g, params.ln1_b)

    pieces = []
    order: list[int] = []
    for s, idx in enumerate(part.sets):
        if not idx:
            continue
        zi = take(xn, list(idx), axis=1)
        meta = {"stage": "encoder", "layer": layer, "set_index": s, "sets": 1}
        pieces.append(ssa_attend(zi, params, record, meta, scope="encoder"))
        order.extend(idx)
    cat = pieces[0] if len(pieces) == 1 else concat(pieces, axis=1)
    scattered = take(cat, inverse_permutation(order), axis=1)
    out = x + scattered
    return reshape(out, out.shape[1:]) if squeeze else out


def encoder_block(
    x: Tensor,
    params: BlockParams,
    interval: int,
    record=None,
    layer: int = 0,
) -> Tensor:
    a = encoder_attention_stage(x, params, interval, record, layer)
    return a + _ffn(layer_norm(a, params.ln2_g, params.ln2_b), params, "encoder")


def vanilla_encoder_block(
    x: Tensor, params: BlockParams, record=None, layer: int = 0
) -> Tensor:
    """Plain full-sequence transformer block; the straight-line reference that
    a skipped block with interval 1 must reproduce."""
    x, squeeze = _promote(x)
    meta = {"stage": "encoder", "layer": layer, "set_index": 0, "sets": 1}
    a = x + ssa_attend(
        layer_norm(x, params.ln1_g, params.ln1_b), params, record, meta, "encoder"
    )
    out = a + _ffn(layer_norm(a, params.ln2_g, params.ln2_b), params, "encoder")
    return reshape(out, out.shape[1:]) if squeeze else out


def encoder_forward(
    x: Tensor,
    blocks,
    variant: str = "S",
    pos_embedding: Tensor | None = None,
) -> Tensor:
    """Apply encoder blocks in sequence; ``blocks`` are callables on tensors.

    Variant L additionally adds each block's input to its output (a residual
    connection across layers); other variants chain the blocks directly.
    """
    if pos_embedding is not None:
        x = x + pos_embedding
    for block in blocks:
        y = block(x)
        x = x + y if variant == "L" else y
    return x


def pad_to_multiple(x: Tensor, interval: int) -> Tensor:
    """Repeat the final row along the time axis up to the next multiple."""
    tlen = x.shape[1]
    short = (-tlen) % interval
    if short == 0:
        return x
    idx = list(range(tlen)) + [tlen - 1] * short
    return take(x, idx, axis=1)


def decoder_block(
    x: Tensor,
    params: BlockParams,
    interval: int,
    record=None,
    layer: int = 0,
    attend=None,
) -> Tensor:
    """Shrink (B, T, D) to (B, ceil(T/m), D).

    Each residue class is attended independently, then row r of the output
    merges the rank-r rows of all m classes (i.e. original positions
    r*m .. r*m+m-1) by channel concatenation and a linear map, followed by a
    pre-norm residual FFN. ``attend`` can be injected to probe the wiring.
    """
    if params.merge_w is None:
        raise ConfigError("decoder block requires merge parameters")
    x, squeeze = _promote(x)
    x = pad_to_multiple(x, interval)
    bsz, tlen, dim = x.shape
    n = tlen // interval

    xn = layer_norm(x, params.ln1_g, params.ln1_b)
    # (B, T, D) -> (B, n, m, D) -> (B, m, n, D) -> (B*m, n, D): row r of set i
    # is original position r*m + i, a residue class laid out contiguously.
    sets = reshape(
        transpose(reshape(xn, (bsz, n, interval, dim)), (0, 2, 1, 3)),
        (bsz * interval, n, dim),
    )
    if attend is None:
        meta = {"stage": "decoder", "layer": layer, "set_index": 0, "sets": interval}
        att = ssa_attend(sets, params, record, meta, scope="decoder")
    else:
        att = attend(sets)

    # back to (B, n, m*D): output rank r concatenates the m classes' rank-r rows
    aligned = reshape(
        transpose(reshape(att, (bsz, interval, n, dim)), (0, 2, 1, 3)),
        (bsz, n, interval * dim),
    )
    with flop_scope("decoder.merge"):
        t = matmul(aligned, params.merge_w) + params.merge_b
    out = t + _ffn(layer_norm(t, params.ln2_g, params.ln2_b), params, "decoder")
    return reshape(out, out.shape[1:]) if squeeze else out


def decoder_chain(length: int, interval: int, layers: int) -> list[int]:
    """Sequence lengths after each decoder block, starting from ``length``."""
    chain = [length]
    for _ in range(layers):
        chain.append(math.ceil(chain[-1] / interval))
    return chain


def decoder_forward(x: Tensor, blocks) -> Tensor:
    """Apply decoder blocks and require collapse to a single token."""
    for block in blocks:
        x = block(x)
    tlen = x.shape[-2]
    if tlen != 1:
        raise ConfigError(
            f"decoder ended with {tlen} tokens instead of 1; "
            "adjust decoder layer count or skip interval"
        )
    return x
