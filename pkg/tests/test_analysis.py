"""Analytic cost formulas, the instrumented counter, and attention export."""

import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skiplift.analysis import (
    CostReport,
    analytic_skt,
    analytic_ssa,
    analytic_stt,
    analytic_vanilla,
    cost_report,
    empirical_attention_macs,
    empirical_attention_ratio,
    empirical_cost,
    export_attention,
    load_exported_matrix,
    skt_over_stt,
    ssa_over_vanilla,
)
from skiplift.config import ModelConfig
from skiplift.model import PoseLifter

# frozen reference values, computed by hand from the closed forms:
#   2 * 243^2 * 256 / 3                     = 10,077,696
#   + (1 + 4/3) * 243 * 256^2               = 10,077,696 + 37,158,912 = 47,236,608
#   2 * 243^2 * 256 + 2*(3/3+1)*243*256^2   = 30,233,088 + 63,700,992 = 93,934,080
SSA_243 = 10_077_696
SKT_243 = 47_236_608
STT_243 = 93_934_080


def test_analytic_reference_values():
    assert analytic_ssa(243, 256, 3) == SSA_243
    assert analytic_skt(243, 256, 3) == SKT_243
    assert analytic_stt(243, 256, 3, 3) == STT_243
    assert isinstance(analytic_ssa(243, 256, 3), Fraction)


def test_analytic_degenerate_interval():
    assert analytic_ssa(100, 64, 1) == 2 * 100 * 100 * 64
    assert analytic_skt(100, 64, 1) == 2 * 100 * 100 * 64 + 5 * 100 * 64 * 64
    assert analytic_stt(100, 64, 3, 3) == 2 * 100 * 100 * 64 + 4 * 100 * 64 * 64
    assert analytic_vanilla(100, 64) == analytic_ssa(100, 64, 1)


@given(
    frames=st.integers(min_value=1, max_value=400),
    dim=st.integers(min_value=1, max_value=512),
    interval=st.integers(min_value=1, max_value=50),
)
@settings(max_examples=200, deadline=None)
def test_compression_identity_is_exact(frames, dim, interval):
    assert analytic_ssa(frames, dim, interval) * interval == analytic_ssa(frames, dim, 1)
    assert ssa_over_vanilla(interval) == Fraction(1, interval)


def test_skipped_block_cost_decreases_with_interval():
    values = [analytic_skt(243, 256, m) for m in range(1, 10)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_block_ratio_frozen_rational():
    ratio = skt_over_stt(243, 256, 3)
    assert ratio == Fraction(SKT_243, STT_243)
    assert ratio < Fraction(60, 100)
    assert 0.50 < float(ratio) < 0.51


def test_analytic_rejects_nonpositive_sizes():
    with pytest.raises(ValueError):
        analytic_ssa(0, 64, 1)
    with pytest.raises(ValueError):
        analytic_stt(27, 64, 3, 0)


# ----------------------------------------------------------------------
# instrumented counts


@pytest.mark.parametrize("frames,interval", [(27, 3), (81, 3), (243, 3), (28, 1)])
def test_measured_attention_equals_formula_when_divisible(frames, interval):
    measured = empirical_attention_macs(frames, 64, interval, heads=8)
    expected = analytic_ssa(frames, 64, interval)
    if frames % interval == 0:
        assert measured == expected
    else:
        assert abs(measured - expected) / expected < 0.15


def test_measured_attention_ratio_is_one_third():
    for frames in (27, 81):
        assert empirical_attention_ratio(frames, 64, 3) == pytest.approx(1 / 3)


def test_padding_keeps_measured_cost_near_formula():
    measured = empirical_attention_macs(28, 64, 3, heads=4)
    expected = analytic_ssa(28, 64, 3)
    assert abs(measured - expected) / expected < 0.15


def _cfg(**kw):
    base = dict(
        frames=9,
        joints=17,
        skip=3,
        channels=4,
        dim=16,
        heads=2,
        enc_layers=1,
        dec_layers=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def test_full_model_scopes_present():
    scopes, elapsed = empirical_cost(_cfg())
    assert set(scopes) == {
        "spatial",
        "encoder.proj",
        "encoder.attention",
        "encoder.ffn",
        "decoder.proj",
        "decoder.attention",
        "decoder.ffn",
        "decoder.merge",
        "heads",
    }
    assert all(v > 0 for v in scopes.values())
    assert elapsed > 0


def test_doubling_width_quadruples_ffn_cost():
    narrow, _ = empirical_cost(_cfg(dim=16))
    wide, _ = empirical_cost(_cfg(dim=32))
    ratio = wide["encoder.ffn"] / narrow["encoder.ffn"]
    assert abs(ratio - 4.0) < 0.04


def test_zero_layer_model_only_spends_on_spatial_and_heads():
    cfg = _cfg(enc_layers=0, dec_layers=0, temporal_mode="vt_conv")
    scopes, _ = empirical_cost(cfg)
    assert set(scopes) == {"spatial", "heads"}


def test_cost_report_contents_and_json():
    report = cost_report(_cfg(frames=27, dec_layers=3, dim=32, heads=4))
    assert isinstance(report, CostReport)
    assert report.analytic_ssa == analytic_ssa(27, 32, 3)
    assert report.ssa_over_vanilla == Fraction(1, 3)
    assert report.empirical_total == sum(report.empirical.values())
    assert report.params > 0
    data = json.loads(report.to_json())
    assert data["analytic"]["ssa"] == int(analytic_ssa(27, 32, 3))
    assert data["analytic"]["skipped_over_strided"] < 0.60
    assert data["empirical_total_macs"] == report.empirical_total


# ----------------------------------------------------------------------
# attention export


def test_export_attention_files_and_row_sums(tmp_path):
    cfg = _cfg(frames=27, dec_layers=3, enc_layers=2)
    model = PoseLifter(cfg, seed=0)
    clip = np.random.default_rng(0).normal(size=(27, 17, 2))
    index = export_attention(model, clip, tmp_path)

    with open(tmp_path / "index.json") as fh:
        assert json.load(fh) == index

    assert len(index["spatial"]) == 1
    alpha = load_exported_matrix(tmp_path / index["spatial"][0]["file"])
    assert alpha.shape == (5, 5)
    assert np.allclose(alpha, alpha.T, atol=1e-6)

    # encoder: 2 layers x 3 residue sets; decoder: 3 layers x 3 folded sets
    enc = [e for e in index["temporal"] if e["stage"] == "encoder"]
    dec = [e for e in index["temporal"] if e["stage"] == "decoder"]
    assert len(enc) == 6
    assert len(dec) == 9
    assert sorted({e["set"] for e in dec}) == [0, 1, 2]

    for entry in index["temporal"]:
        for fname in entry["files"] + [entry["heads_mean"]]:
            mat = load_exported_matrix(tmp_path / fname)
            assert mat.shape == (entry["tokens"], entry["tokens"])
            assert np.allclose(mat.sum(axis=1), 1.0, atol=1e-9)


def test_export_roundtrip_precision(tmp_path):
    cfg = _cfg()
    model = PoseLifter(cfg, seed=1)
    clip = np.random.default_rng(1).normal(size=(9, 17, 2))

    from skiplift.model import AttentionRecorder

    rec = AttentionRecorder()
    model.forward(clip, record=rec)
    export_attention(model, clip, tmp_path)

    entry = rec.temporal[0]
    original = entry["weights"][0, 0]
    reloaded = load_exported_matrix(
        tmp_path / f"{entry['stage']}_L{entry['layer']}_S{entry['set_index']}_H0.csv"
    )
    assert np.allclose(reloaded, original, rtol=1e-6, atol=1e-9)


def test_export_handles_single_token_maps(tmp_path):
    cfg = _cfg()  # final decoder layer attends over a single token
    model = PoseLifter(cfg, seed=2)
    index = export_attention(model, np.zeros((9, 17, 2)), tmp_path)
    last = [
        e
        for e in index["temporal"]
        if e["stage"] == "decoder" and e["layer"] == cfg.dec_layers - 1
    ]
    assert last and all(e["tokens"] == 1 for e in last)
    mat = load_exported_matrix(tmp_path / last[0]["files"][0])
    assert mat.shape == (1, 1)
    assert mat[0, 0] == 1.0
