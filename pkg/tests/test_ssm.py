import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import aum.numerics as nx
from aum.numerics import Tape, Tensor, finite_difference_check
from aum.ssm import (
    ScanDirection,
    SsmParams,
    StepParams,
    continuous_A,
    discretize,
    scan,
    scan_naive,
    selective_scan,
    selectivize,
    ssm_forward,
)


def random_instance(r, L, Di, N, dtype=np.float64):
    x = r.standard_normal((L, Di))
    delta = r.uniform(0.05, 0.5, (L, Di))
    A = -r.uniform(0.5, 2.0, (Di, N))
    B = r.standard_normal((L, N))
    C = r.standard_normal((L, N))
    D = r.standard_normal(Di)
    return [np.asarray(v, dtype=dtype) for v in (x, delta, A, B, C, D)]


# ------------------------------------------------------------ discretization

def test_discretize_half_life():
    Abar, _ = discretize(-1.0, 1.0, math.log(2))
    assert math.isclose(float(Abar), 0.5, rel_tol=1e-15)


def test_discretize_small_step_limit():
    Abar, Bbar = discretize(-3.0, 2.0, 1e-12)
    assert math.isclose(float(Abar), 1.0, abs_tol=1e-11)
    assert abs(float(Bbar)) < 1e-11


def test_discretize_scalar_case():
    Abar, Bbar = discretize(-2.0, 3.0, 0.1)
    assert math.isclose(float(Abar), math.exp(-0.2), rel_tol=1e-15)
    assert math.isclose(float(Abar), 0.818731, abs_tol=1e-6)
    assert math.isclose(float(Bbar), 0.3, rel_tol=1e-15)


def test_discretize_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        discretize(-1.0, 1.0, 0.0)


@given(a=st.floats(0.01, 50), d=st.floats(1e-4, 10))
def test_discretized_decay_in_unit_interval(a, d):
    Abar, _ = discretize(-a, 1.0, d)
    assert 0.0 < float(Abar) < 1.0


# ------------------------------------------------------------------- scans

def test_single_step():
    r = np.random.default_rng(0)
    x, delta, A, B, C, D = random_instance(r, 1, 3, 2)
    steps = StepParams.from_selective(delta, A, B, C)
    h = steps.Bbar[0] * x[0][:, None]
    expect = h @ C[0] + D * x[0]
    np.testing.assert_allclose(scan_naive(x, steps, D)[0], expect, rtol=1e-14)
    np.testing.assert_allclose(scan(x, steps, D)[0], expect, rtol=1e-14)


def test_zero_input_gives_zero_output():
    r = np.random.default_rng(1)
    x, delta, A, B, C, D = random_instance(r, 6, 3, 4)
    steps = StepParams.from_selective(delta, A, B, C)
    assert np.all(scan_naive(np.zeros_like(x), steps, D) == 0.0)
    assert np.all(scan(np.zeros_like(x), steps, D) == 0.0)


def test_frozen_golden_values():
    # generated once from scan_naive in float64 with this seed and layout
    r = np.random.default_rng(42)
    x, delta, A, B, C, D = random_instance(r, 4, 2, 2)
    golden = np.array([
        [-0.04684766223721766, 0.9708867184526891],
        [0.349057483210393, 0.39666661002745673],
        [-0.14663939358295197, 0.6692751564755188],
        [0.3806458741402099, 0.6536758459568375],
    ])
    steps = StepParams.from_selective(delta, A, B, C)
    np.testing.assert_allclose(scan_naive(x, steps, D), golden, rtol=0, atol=1e-15)
    np.testing.assert_allclose(scan(x, steps, D), golden, rtol=0, atol=1e-13)


def test_scan_matches_oracle_at_length_64():
    r = np.random.default_rng(2)
    x, delta, A, B, C, D = random_instance(r, 64, 8, 16, np.float32)
    steps = StepParams.from_selective(delta, A, B, C)
    assert np.max(np.abs(scan(x, steps, D) - scan_naive(x, steps, D))) < 1e-5


def test_backward_scan_of_palindrome_is_reversed_forward():
    r = np.random.default_rng(3)
    x, delta, A, B, C, D = random_instance(r, 5, 2, 3)
    # mirror everything around the centre step
    pal = lambda a: np.concatenate([a[:3], a[:2][::-1]])  # noqa: E731
    x, delta, B, C = pal(x), pal(delta), pal(B), pal(C)
    steps = StepParams.from_selective(delta, A, B, C)
    fwd = scan(x, steps, D, ScanDirection.FORWARD)
    bwd = scan(x, steps, D, ScanDirection.BACKWARD)
    np.testing.assert_allclose(bwd, fwd[::-1], rtol=1e-13)


def test_backward_is_reverse_forward_reverse():
    r = np.random.default_rng(4)
    x, delta, A, B, C, D = random_instance(r, 9, 3, 4)
    steps = StepParams.from_selective(delta, A, B, C)
    bwd = scan(x, steps, D, ScanDirection.BACKWARD)
    ref = scan_naive(x[::-1], steps.reversed(), D)[::-1]
    np.testing.assert_allclose(bwd, ref, rtol=1e-12, atol=1e-14)


def test_vanishing_step_leaves_only_skip_path():
    r = np.random.default_rng(5)
    x, _, A, B, C, D = random_instance(r, 7, 3, 4)
    steps = StepParams.from_selective(np.full((7, 3), 1e-14), A, B, C)
    np.testing.assert_allclose(scan(x, steps, D), D * x, atol=1e-12)


def test_state_stays_bounded_on_long_sequences():
    r = np.random.default_rng(6)
    L, Di, N = 4096, 2, 4
    x = np.clip(r.standard_normal((L, Di)), -3, 3)
    delta = r.uniform(0.01, 1.0, (L, Di))
    A = -r.uniform(0.1, 2.0, (Di, N))
    B = np.clip(r.standard_normal((L, N)), -3, 3)
    steps = StepParams.from_selective(delta, A, B, np.ones((L, N)))
    h = np.zeros((Di, N))
    worst = 0.0
    for t in range(L):
        h = steps.Abar[t] * h + steps.Bbar[t] * x[t][:, None]
        worst = max(worst, float(np.abs(h).max()))
    # |h| <= max|Bbar x| / (1 - max Abar)
    bound = np.abs(steps.Bbar * x[:, :, None]).max() / (1 - steps.Abar.max())
    assert worst <= bound


@given(L=st.integers(1, 20), Di=st.integers(1, 4), N=st.integers(1, 6), seed=st.integers(0, 2**31))
@settings(max_examples=40)
def test_vectorized_scan_agrees_with_oracle(L, Di, N, seed):
    r = np.random.default_rng(seed)
    x, delta, A, B, C, D = random_instance(r, L, Di, N)
    steps = StepParams.from_selective(delta, A, B, C)
    for direction in ScanDirection:
        ref = scan_naive(x, steps, D) if direction is ScanDirection.FORWARD else \
            scan_naive(x[::-1], steps.reversed(), D)[::-1]
        assert np.max(np.abs(scan(x, steps, D, direction) - ref)) < 1e-12


# ------------------------------------------------------- fused primitive

@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("L,chunk", [(1, 64), (7, 3), (64, 64), (130, 64)])
def test_fused_scan_matches_vectorized_scan(reverse, L, chunk):
    r = np.random.default_rng(L)
    x, delta, A, B, C, D = random_instance(r, L, 3, 4)
    y = selective_scan(*(Tensor(v) for v in (x, delta, A, B, C, D)), reverse=reverse, chunk=chunk)
    steps = StepParams.from_selective(delta, A, B, C)
    ref = scan(x, steps, D, ScanDirection.BACKWARD if reverse else ScanDirection.FORWARD)
    np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-13)


def test_fused_scan_batches_independently():
    r = np.random.default_rng(7)
    a = random_instance(r, 10, 2, 3)
    b = random_instance(r, 10, 2, 3)
    stacked = [np.stack([u, v]) if i in (0, 1, 3, 4) else u for i, (u, v) in enumerate(zip(a, b))]
    stacked[2], stacked[5] = a[2], a[5]  # A and D are shared
    y = selective_scan(*(Tensor(v) for v in stacked)).data
    for k, inst in enumerate([a, b]):
        x, delta, _, B, C, _ = inst
        ref = scan(x, StepParams.from_selective(delta, a[2], B, C), a[5])
        np.testing.assert_allclose(y[k], ref, rtol=1e-12)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_scan_gradients_small(reverse):
    r = np.random.default_rng(8)
    x, delta, A, B, C, D = random_instance(r, 4, 1, 2)
    ts = [Tensor(v, requires_grad=True) for v in (x, delta, A, B, C, D)]
    w = Tensor(r.standard_normal((4, 1)))
    rep = finite_difference_check(lambda: nx.sum_all(nx.mul(selective_scan(*ts, reverse=reverse), w)), ts, eps=1e-6)
    assert rep.max_rel_err < 1e-4, str(rep)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_scan_gradients_across_chunks(reverse):
    r = np.random.default_rng(9)
    x, delta, A, B, C, D = random_instance(r, 11, 2, 3)
    ts = [Tensor(v, requires_grad=True) for v in (x, delta, A, B, C, D)]
    w = Tensor(r.standard_normal((11, 2)))
    rep = finite_difference_check(
        lambda: nx.sum_all(nx.mul(selective_scan(*ts, reverse=reverse, chunk=4), w)), ts, eps=1e-6)
    assert rep.max_rel_err < 1e-4, str(rep)


def _input_jacobian(reverse, L=8):
    r = np.random.default_rng(10)
    x, delta, A, B, C, D = random_instance(r, L, 2, 3)
    xt = Tensor(x, requires_grad=True)
    rest = [Tensor(v) for v in (delta, A, B, C, D)]
    with Tape() as tape:
        y = selective_scan(xt, *rest, reverse=reverse, chunk=3)
    J = np.zeros((L, L))
    for t in range(L):
        xt.grad = None
        seed = np.zeros((L, 2))
        seed[t] = 1.0
        tape.backward(y, seed=seed)
        J[t] = np.abs(xt.grad).sum(-1)
    return J


def test_forward_scan_is_causal():
    J = _input_jacobian(reverse=False)
    assert np.all(np.triu(J, k=1) == 0.0)
    assert np.all(np.diag(J) > 0.0)


def test_backward_scan_is_anticausal():
    J = _input_jacobian(reverse=True)
    assert np.all(np.tril(J, k=-1) == 0.0)
    assert np.all(np.diag(J) > 0.0)


def test_no_checkpoints_without_tape():
    r = np.random.default_rng(11)
    x, delta, A, B, C, D = random_instance(r, 200, 4, 4)
    ts = [Tensor(v, requires_grad=True) for v in (x, delta, A, B, C, D)]
    with nx.peak_tracking() as peak:
        selective_scan(*ts)
    # output only: no boundary states are kept when nothing is recorded
    assert peak["peak"] <= x.nbytes * 2


# ----------------------------------------------------------- selectivity

def _params(Di=4, N=3, seed=0, dtype=np.float64):
    return SsmParams.init(Di, N, np.random.default_rng(seed), dtype)


def test_init_conventions():
    p = _params(Di=20, N=5)
    A = continuous_A(p).data
    np.testing.assert_allclose(A, -np.tile(np.arange(1, 6), (20, 1)), rtol=1e-12)
    assert p.dt_down.shape == (20, 2)  # rank ceil(20/16)
    dt = np.logaddexp(0.0, p.dt_bias.data)
    assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))
    np.testing.assert_array_equal(p.D_skip.data, 1.0)


def test_zero_input_zero_bias_gives_ln2_step():
    p = _params()
    p.dt_bias.data[...] = 0.0
    delta, B, C = selectivize(Tensor(np.zeros((5, 4))), p)
    np.testing.assert_allclose(delta.data, math.log(2), rtol=1e-14)
    assert np.all(B.data == 0.0) and np.all(C.data == 0.0)


def test_identical_steps_give_identical_parameters():
    p = _params()
    row = np.random.default_rng(1).standard_normal(4)
    delta, B, C = selectivize(Tensor(np.stack([row, row])), p)
    for a in (delta, B, C):
        np.testing.assert_array_equal(a.data[0], a.data[1])


def test_selectivize_is_rowwise():
    p = _params()
    x = np.random.default_rng(2).standard_normal((3, 4))
    delta, B, C = selectivize(Tensor(x), p)
    for t in range(3):
        low = x[t] @ p.dt_down.data
        d_ref = np.logaddexp(0.0, low @ p.dt_up.data + p.dt_bias.data)
        np.testing.assert_allclose(delta.data[t], d_ref, rtol=1e-13)
        np.testing.assert_allclose(B.data[t], x[t] @ p.B_proj.data, rtol=1e-13)
        np.testing.assert_allclose(C.data[t], x[t] @ p.C_proj.data, rtol=1e-13)


@pytest.mark.parametrize("direction", list(ScanDirection))
def test_ssm_forward_gradients(direction):
    p = _params(Di=3, N=2, seed=3)
    u = Tensor(np.random.default_rng(4).standard_normal((5, 3)), requires_grad=True)
    params = {"u": u, **p.tensors()}
    rep = finite_difference_check(lambda: nx.sum_all(nx.mul(ssm_forward(u, p, direction), u)), params)
    assert rep.max_rel_err < 1e-4, str(rep)


def test_ssm_forward_matches_oracle():
    p = _params(Di=3, N=4, seed=5)
    u = np.random.default_rng(6).standard_normal((9, 3))
    delta, B, C = selectivize(Tensor(u), p)
    steps = StepParams.from_selective(delta.data, continuous_A(p).data, B.data, C.data)
    y = ssm_forward(Tensor(u), p, ScanDirection.FORWARD).data
    np.testing.assert_allclose(y, scan_naive(u, steps, p.D_skip.data), rtol=1e-11, atol=1e-13)
