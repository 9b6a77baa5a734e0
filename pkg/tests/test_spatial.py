"""Spatial part-graph encoder: grouping, attention, aggregation, locality."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skiplift.spatial import (
    PartGrouping,
    aggregate_update,
    encode_parts,
    group_joints,
    init_spatial_params,
    padded_parts,
    part_attention,
    spatial_forward,
)
from skiplift.tensor import Tape, Tensor, backward, tsum

from helpers import check_grads

RNG = np.random.default_rng(3)


def _params(grouping, joints=17, channels=8, dim=12, seed=0, use_attention=True):
    return init_spatial_params(
        np.random.default_rng(seed), grouping, joints, channels, dim, use_attention
    )


def _zero(params):
    for _, t in params.named_parameters():
        t.data[...] = 0.0
    return params


# ---------------------------------------------------------------------------
# grouping


def test_default_grouping_part_sizes():
    g = PartGrouping.default_17()
    assert [len(p) for p in g.parts] == [5, 3, 3, 3, 3]
    g.validate(17)
    assert g.pad_width == 10


def test_group_joints_vector_lengths_and_order():
    g = PartGrouping.default_17()
    pose = np.arange(34.0).reshape(17, 2)
    vecs = group_joints(pose, g)
    assert [v.size for v in vecs] == [10, 6, 6, 6, 6]
    # first part starts with the pelvis coordinates, in listed order
    np.testing.assert_array_equal(vecs[0][:2], pose[0])
    np.testing.assert_array_equal(vecs[0][2:4], pose[7])


def test_group_joints_permuted_parts_permutes_output():
    pose = RNG.normal(size=(17, 2))
    g = PartGrouping.default_17()
    swapped = PartGrouping((g.parts[1], g.parts[0]) + g.parts[2:])
    a = group_joints(pose, g)
    b = group_joints(pose, swapped)
    np.testing.assert_array_equal(a[0], b[1])
    np.testing.assert_array_equal(a[1], b[0])


def test_group_joints_zero_pose():
    for v in group_joints(np.zeros((17, 2)), PartGrouping.default_17()):
        assert not v.any()


def test_grouping_validation_errors():
    with pytest.raises(ValueError):
        PartGrouping(((0, 1, 99),)).validate(17)
    with pytest.raises(ValueError):
        PartGrouping(((0, 1), (1, 2))).validate(3)  # overlap
    with pytest.raises(ValueError):
        PartGrouping(((0, 1),)).validate(3)  # joint 2 uncovered


def test_padded_parts_zero_fill():
    g = PartGrouping.default_17()
    seq = RNG.normal(size=(4, 17, 2))
    padded = padded_parts(seq, g)
    assert padded.shape == (4, 5, 10)
    # limbs have 3 joints -> 6 live slots, rest zero
    assert not padded[:, 1:, 6:].any()
    np.testing.assert_array_equal(padded[:, 0, :2], seq[:, 0, :])


# ---------------------------------------------------------------------------
# part encoder


def test_encode_parts_zero_mlp_yields_positional_embedding():
    g = PartGrouping.default_17()
    p = _params(g)
    for name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
        getattr(p, name).data[...] = 0.0
    parts = padded_parts(RNG.normal(size=(3, 17, 2)), g)
    f = encode_parts(parts, p).data
    np.testing.assert_allclose(f, np.broadcast_to(p.e_pos.data, f.shape), atol=1e-15)


def test_encode_parts_identical_frames_identical_rows():
    g = PartGrouping.default_17()
    p = _params(g)
    frame = RNG.normal(size=(17, 2))
    parts = padded_parts(np.stack([frame, frame, frame]), g)
    f = encode_parts(parts, p).data
    np.testing.assert_array_equal(f[0], f[1])
    np.testing.assert_array_equal(f[1], f[2])


# ---------------------------------------------------------------------------
# adjacency


def test_zero_scoring_vector_gives_half_everywhere():
    f = Tensor(RNG.normal(size=(4, 5, 8)))
    alpha = part_attention(f, Tensor(np.zeros((8, 1)))).data
    np.testing.assert_allclose(alpha, np.full((4, 5, 5), 0.5), atol=1e-15)


def test_known_score_gives_three_quarters():
    # single channel, both features ln(3)/2: score = |f_i + f_j| = ln 3
    f = Tensor(np.full((1, 2, 1), math.log(3.0) / 2.0))
    alpha = part_attention(f, Tensor(np.ones((1, 1)))).data
    np.testing.assert_allclose(alpha, np.full((1, 2, 2), 0.75), atol=1e-12)


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**31))
def test_adjacency_symmetric_and_bounded(n, seed):
    rng = np.random.default_rng(seed)
    f = Tensor(rng.normal(size=(n, 4)))
    alpha = part_attention(f, Tensor(rng.normal(size=(4, 1)))).data
    np.testing.assert_allclose(alpha, alpha.T, atol=1e-12)
    assert np.all((alpha > 0.0) & (alpha < 1.0))


def test_adjacency_matches_loop_oracle():
    rng = np.random.default_rng(11)
    f = rng.normal(size=(5, 6))
    w = rng.normal(size=(6, 1))
    expected = np.empty((5, 5))
    for i in range(5):
        for j in range(5):
            e = float(np.abs(f[i] + f[j]) @ w[:, 0])
            expected[i, j] = 1.0 / (1.0 + math.exp(-e))
    got = part_attention(Tensor(f[None]), Tensor(w)).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_zero_alpha_keeps_original_only():
    f = Tensor(RNG.normal(size=(3, 4, 8)))
    out = aggregate_update(f, Tensor(np.zeros((3, 4, 4)))).data
    np.testing.assert_array_equal(out[..., :8], np.zeros((3, 4, 8)))  # gelu(0) = 0
    np.testing.assert_array_equal(out[..., 8:], f.data)


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(4, 3))
    alpha = rng.uniform(0.1, 0.9, size=(4, 4))
    out = aggregate_update(Tensor(f[None]), Tensor(alpha[None])).data[0]
    from scipy.special import erf

    for i in range(4):
        s = sum(alpha[i, j] * f[j] for j in range(4))
        g = s * 0.5 * (1.0 + erf(s / math.sqrt(2.0)))
        np.testing.assert_allclose(out[i, :3], g, atol=1e-12)
        np.testing.assert_allclose(out[i, 3:], f[i], atol=1e-15)


# ---------------------------------------------------------------------------
# full spatial pass


def test_forward_shape_batched_and_unbatched():
    g = PartGrouping.default_17()
    p = _params(g)
    seq = RNG.normal(size=(7, 17, 2))
    out = spatial_forward(seq, p, g)
    assert out.shape == (7, 12)
    out_b = spatial_forward(np.stack([seq, seq]), p, g)
    assert out_b.shape == (2, 7, 12)
    np.testing.assert_array_equal(out_b.data[0], out_b.data[1])
    np.testing.assert_array_equal(out_b.data[0], out.data)


def test_forward_is_frame_local():
    g = PartGrouping.default_17()
    p = _params(g)
    seq = RNG.normal(size=(6, 17, 2))
    base = spatial_forward(seq, p, g).data
    bumped = seq.copy()
    bumped[3] += 0.25
    out = spatial_forward(bumped, p, g).data
    assert not np.allclose(out[3], base[3])
    mask = np.ones(6, dtype=bool)
    mask[3] = False
    np.testing.assert_array_equal(out[mask], base[mask])


def test_forward_frame_permutation_equivariance():
    g = PartGrouping.default_17()
    p = _params(g)
    seq = RNG.normal(size=(5, 17, 2))
    perm = np.array([4, 2, 0, 1, 3])
    np.testing.assert_allclose(
        spatial_forward(seq[perm], p, g).data,
        spatial_forward(seq, p, g).data[perm],
        atol=1e-12,
    )


def test_forward_zero_graph_leaves_joint_residual():
    g = PartGrouping.default_17()
    p = _params(g)
    for name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "e_pos", "attn_w", "proj_w", "proj_b"):
        getattr(p, name).data[...] = 0.0
    seq = RNG.normal(size=(4, 17, 2))
    expect = seq.reshape(4, 34) @ p.res_w.data + p.res_b.data
    np.testing.assert_allclose(spatial_forward(seq, p, g).data, expect, atol=1e-12)


def test_forward_zero_residual_leaves_graph_path():
    g = PartGrouping.default_17()
    p = _params(g)
    p.res_w.data[...] = 0.0
    p.res_b.data[...] = 0.0
    seq = RNG.normal(size=(4, 17, 2))
    f = encode_parts(padded_parts(seq, g), p)
    nodes = aggregate_update(f, part_attention(f, p.attn_w))
    expect = nodes.data.reshape(4, -1) @ p.proj_w.data + p.proj_b.data
    np.testing.assert_allclose(spatial_forward(seq, p, g).data, expect, atol=1e-12)


def test_jointwise_grouping_runs_with_j_nodes():
    g = PartGrouping.jointwise(5)
    p = _params(g, joints=5, channels=4, dim=6)
    seq = RNG.normal(size=(3, 5, 2))
    f = encode_parts(padded_parts(seq, g), p)
    alpha = part_attention(f, p.attn_w)
    assert alpha.shape == (3, 5, 5)
    assert spatial_forward(seq, p, g).shape == (3, 6)


def test_mlp_mode_skips_attention():
    g = PartGrouping.default_17()
    p = _params(g, use_attention=False)

    class Probe:
        called = False

        def add_spatial(self, arr):
            self.called = True

    probe = Probe()
    out = spatial_forward(
        RNG.normal(size=(3, 17, 2)), p, g, use_attention=False, record=probe
    )
    assert out.shape == (3, 12)
    assert not probe.called
    assert p.proj_w.shape[0] == 5 * 8  # N_p * C, not N_p * 2C


def test_spatial_gradcheck():
    g = PartGrouping.jointwise(4)
    p = _params(g, joints=4, channels=3, dim=5, seed=2)
    seq = np.random.default_rng(8).normal(size=(3, 4, 2))
    w = np.random.default_rng(9).normal(size=(3, 5))
    params = [t for _, t in p.named_parameters()]
    check_grads(lambda: tsum(spatial_forward(seq, p, g) * w), params)
