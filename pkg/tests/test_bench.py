import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aum.bench import (
    CSV_FIELDS,
    AttentionWeights,
    ScalingReport,
    ScalingRow,
    attention_block_forward,
    fit_exponent,
    measure,
    read_csv,
    summary,
    write_csv,
    write_gnuplot,
)
from aum.numerics import Tensor


def _ln(x, g, b, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _np_attention(x, w, attend):
    D, H = x.shape[1], w.heads
    dh = D // H
    qkv = _ln(x, w.ln1_gamma.data, w.ln1_beta.data) @ w.qkv_W.data + w.qkv_b.data
    q, k, v = qkv[:, :D], qkv[:, D : 2 * D], qkv[:, 2 * D :]
    o = np.concatenate([attend(q[:, h * dh : (h + 1) * dh], k[:, h * dh : (h + 1) * dh],
                               v[:, h * dh : (h + 1) * dh]) for h in range(H)], axis=1)
    x = x + o @ w.out_W.data + w.out_b.data
    h = _gelu(_ln(x, w.ln2_gamma.data, w.ln2_beta.data) @ w.mlp_W1.data + w.mlp_b1.data)
    return x + h @ w.mlp_W2.data + w.mlp_b2.data


def _weights(D=4, H=2, seed=0):
    w = AttentionWeights.init(D, H, np.random.default_rng(seed), np.float64)
    for t in (w.qkv_b, w.out_b, w.mlp_b1, w.mlp_b2, w.ln1_beta, w.ln2_beta):
        t.data[...] = np.random.default_rng(seed + 1).standard_normal(t.shape)
    return w


def test_single_token_attends_to_itself():
    w = _weights()
    x = np.random.default_rng(2).standard_normal((1, 4))
    ref = _np_attention(x, w, lambda q, k, v: v)
    np.testing.assert_allclose(attention_block_forward(Tensor(x), w).data, ref, rtol=1e-12)


def test_equal_scores_average_the_values():
    w = _weights()
    w.qkv_W.data[:, :4] = 0.0  # queries constant -> identical scores per row
    w.qkv_b.data[:4] = 0.0
    x = np.random.default_rng(3).standard_normal((5, 4))
    ref = _np_attention(x, w, lambda q, k, v: np.tile(v.mean(0), (len(v), 1)))
    np.testing.assert_allclose(attention_block_forward(Tensor(x), w).data, ref, rtol=1e-12)


def test_three_token_hand_softmax():
    w = _weights(seed=4)
    x = np.random.default_rng(5).standard_normal((3, 4))

    def attend(q, k, v):
        out = np.zeros_like(v)
        for i in range(3):
            s = [sum(q[i, d] * k[j, d] for d in range(q.shape[1])) / math.sqrt(q.shape[1]) for j in range(3)]
            e = [math.exp(v_) for v_ in s]
            out[i] = sum(e[j] / sum(e) * v[j] for j in range(3))
        return out

    ref = _np_attention(x, w, attend)
    np.testing.assert_allclose(attention_block_forward(Tensor(x), w).data, ref, rtol=1e-11)


def test_indivisible_heads():
    with pytest.raises(ValueError):
        AttentionWeights.init(10, 3, np.random.default_rng(0))


# ------------------------------------------------------------------ fitting

def _rows(times, tokens=(256, 512, 1024, 2048)):
    return [ScalingRow("m", n, t, t, 0) for n, t in zip(tokens, times)]


def test_linear_times_give_slope_one():
    assert math.isclose(fit_exponent(_rows([3.0 * n for n in (256, 512, 1024, 2048)])), 1.0, rel_tol=1e-12)


def test_quadratic_times_give_slope_two():
    assert math.isclose(fit_exponent(_rows([0.5 * n * n for n in (256, 512, 1024, 2048)])), 2.0, rel_tol=1e-12)


@given(c=st.floats(1e-3, 1e3), p=st.floats(0.5, 2.5))
def test_slope_is_scale_invariant(c, p):
    base = [n**p for n in (256, 512, 1024, 2048)]
    assert math.isclose(fit_exponent(_rows(base)), fit_exponent(_rows([c * t for t in base])), rel_tol=1e-9)


def test_fit_needs_three_points():
    rows = _rows([1.0, 2.0, 3.0])
    rows[2].status = "DNF"
    with pytest.raises(ValueError):
        fit_exponent(rows)


# -------------------------------------------------------------- measurement

def test_one_token_count_gives_one_row_per_model():
    rep = measure(["aum-s", "attn-s"], [256], reps=3, warmup=1)
    assert [(r.model, r.tokens, r.status) for r in rep.rows] == [("AuM-S", 256, "ok"), ("Attn-S", 256, "ok")]
    assert all(r.fwd_ms > 0 and r.fwdbwd_ms > 0 and r.peak_bytes > 0 for r in rep.rows)
    assert "threads=1" in rep.environment


def test_dnf_is_monotone_in_token_count():
    rep = measure(["attn-s"], [64, 1024, 2048], reps=3, warmup=0, memory_limit=60 * 1024**2)
    assert [r.status for r in rep.rows] == ["ok", "DNF", "DNF"]
    assert math.isnan(rep.rows[1].fwd_ms)


def test_measure_validates_inputs():
    with pytest.raises(ValueError):
        measure(["aum-s"], [512, 256])
    with pytest.raises(ValueError):
        measure(["aum-s"], [256], reps=1)


# ------------------------------------------------------------------- output

def test_csv_round_trip_and_summary(tmp_path):
    rows = _rows([1.0, 2.0, 4.1, 8.3]) + [ScalingRow("m", 4096, math.nan, math.nan, 0, "DNF")]
    rep = ScalingReport(rows, "env")
    write_csv(rep, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    back = read_csv(tmp_path / "b.csv")
    assert len(back) == 5 and back[-1].status == "DNF" and math.isnan(back[-1].fwd_ms)
    assert back[1].fwd_ms == 2.0
    text = summary(rep)
    assert "m fwd_ms slope=" in text and "# env" in text
    write_gnuplot(rep, tmp_path / "b.dat")
    data = [ln for ln in (tmp_path / "b.dat").read_text().splitlines() if ln and not ln.startswith("#")]
    assert len(data) == 4
