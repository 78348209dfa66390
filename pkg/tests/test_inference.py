import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from qpi.errors import Stage3Timeout
from qpi.hankel import assemble, assemble_exact, slice_blocks
from qpi.inference import (FitOptions, all_phis, buffered_weight, eigenvalue_penalty,
                           eigenvalue_penalty_terms, final_fit, fit_shift, infer, phi_b,
                           psi_objective, stage2_initial_model, stage3_progressive_fit,
                           t_objective, weighted_low_rank)
from qpi.model import Model, matrix_power, predict_many, random_model
from qpi.schedule import ScheduleParams, build_schedule, rho
from qpi.simulators import model_truth, sample_counts

SCHED = build_schedule(ScheduleParams(l=2, a_bar=4, b_bar=4))


def sampled(model, seed, sched=SCHED, shots=10_000):
    return sample_counts(model_truth(model, max(sched.T_set)), sched, shots, seed)


def exact_arrangement(model, sched=SCHED):
    arr = assemble(sampled(model, 0, sched))
    return dataclasses.replace(arr, H=assemble_exact(model, sched),
                               Hs=assemble_exact(model, sched, shift=1))


def true_factors(model, sched=SCHED):
    """A with rows (a, k1, i) and B with columns (k2, m) of the generating model."""
    l = sched.l
    A = np.vstack([model.S @ matrix_power(model.T, rho(a) + k1)
                   for a in range(sched.a_bar + 1) for k1 in range(l + 1)])
    B = np.hstack([matrix_power(model.T, k2) @ model.P for k2 in range(l + 1)])
    return A, B


def finite_difference_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# stage 2 --------------------------------------------------------------------

def test_low_rank_exact_under_uniform_weights():
    H = assemble_exact(random_model(3, 2, 3, seed=1), SCHED)
    L, R, obj, _ = weighted_low_rank(H, np.ones_like(H), 3)
    assert obj < 1e-20
    assert np.abs(L @ R - H).max() < 1e-10


def test_stage2_exact_data_reproduces_predictions():
    m = random_model(3, 2, 3, seed=2)
    s2 = stage2_initial_model(exact_arrangement(m), 3)
    est = Model(s2.L[:2], s2.T, s2.R[:, :3])
    ts = np.array(SCHED.T_set)
    assert np.abs(predict_many(est, ts) - predict_many(m, ts)).max() < 1e-8


def test_shift_fit_matches_pseudoinverse_formula():
    m = random_model(4, 2, 3, seed=3)
    arr = exact_arrangement(m)
    L, R, _, _ = weighted_low_rank(arr.H, np.ones_like(arr.H), 4)
    rng = np.random.default_rng(0)
    Hs = arr.Hs + 1e-3 * rng.normal(size=arr.Hs.shape)
    T, _ = fit_shift(L, R, Hs, np.ones_like(Hs))
    assert_allclose(T, np.linalg.pinv(L) @ Hs @ np.linalg.pinv(R), atol=1e-10)


# stage 3 --------------------------------------------------------------------

def test_phi_zero_for_perfect_model():
    m = random_model(3, 2, 3, seed=4)
    blocks = slice_blocks(exact_arrangement(m))
    A, B = true_factors(m)
    assert phi_b(A, m.T, B, blocks, len(blocks) - 1) < 1e-25


def test_phi_linear_in_weights():
    m = random_model(3, 2, 3, seed=4)
    blocks = slice_blocks(assemble(sampled(m, 1)))
    doubled = [dataclasses.replace(b, W=2 * b.W) for b in blocks]
    A, B = true_factors(m)
    for b in range(len(blocks)):
        assert phi_b(A, m.T, B, doubled, b) == pytest.approx(2 * phi_b(A, m.T, B, blocks, b))
    assert all_phis(A, m.T, B, blocks)[-1] == pytest.approx(phi_b(A, m.T, B, blocks, 4))


def test_phi_near_one_under_true_model():
    m = random_model(4, 2, 3, seed=0)
    A, B = true_factors(m)
    values = [phi_b(A, m.T, B, slice_blocks(assemble(sampled(m, s))), SCHED.b_bar)
              for s in range(50)]
    assert 0.7 < np.mean(values) < 1.3


def test_stage3_exact_data_converges_immediately():
    m = random_model(3, 2, 3, seed=5)
    arr = exact_arrangement(m)
    fit = stage3_progressive_fit(stage2_initial_model(arr, 3), slice_blocks(arr))
    assert fit.success
    assert fit.history[0]["phi_bbar"] < 1e-6
    assert fit.passes <= 2
    assert fit.phi_final < 1e-6


def test_stage3_sampled_data_success_rate():
    m = random_model(4, 2, 3, seed=0)
    good = 0
    for seed in range(50):
        arr = assemble(sampled(m, seed))
        try:
            fit = stage3_progressive_fit(stage2_initial_model(arr, 4), slice_blocks(arr))
        except Stage3Timeout:
            continue
        good += fit.success and 0.5 < fit.phi_final < 1.5
    assert good >= 45


def test_stage3_undersized_dimension_signals_increase():
    m = random_model(4, 2, 3, seed=0)
    arr = assemble(sampled(m, 0))
    try:
        fit = stage3_progressive_fit(stage2_initial_model(arr, 2), slice_blocks(arr))
    except Stage3Timeout as exc:
        fit = exc.best
    assert not fit.success
    assert fit.phi_final > 1.5


def test_stage3_objective_gradient_matches_finite_differences():
    m = random_model(3, 2, 3, seed=6)
    blocks = slice_blocks(assemble(sampled(m, 2)))
    A, B = true_factors(m)
    objective, evaluate = t_objective(A, B, blocks, 4)
    x = (m.T + 0.01 * np.random.default_rng(1).normal(size=m.T.shape)).ravel()
    _, g, _ = evaluate(x)
    fd = finite_difference_gradient(objective, x)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-5


# stage 4 --------------------------------------------------------------------

def test_eigenvalue_penalty_formula():
    T = np.diag([1.1, 0.5, -0.3])
    assert eigenvalue_penalty(T) == pytest.approx(0.01)
    assert eigenvalue_penalty(np.diag([0.9, -1.0])) == 0


def test_buffered_weight_example():
    assert buffered_weight(0.0, 1e-4) == pytest.approx(5000.0)


@settings(max_examples=200, deadline=None)
@given(V=st.floats(0, 1), beta=st.floats(1e-12, 1))
def test_buffered_weight_positive_and_bounded(V, beta):
    w = float(buffered_weight(V, beta))
    assert np.isfinite(w) and w > 0
    assert w <= 1 / (2 * beta) * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(V=st.floats(1e-6, 1), beta=st.floats(1e-8, 1))
def test_buffered_weight_continuous(V, beta):
    h = 1e-9 * V
    a, b = buffered_weight(V, beta), buffered_weight(V + h, beta)
    assert abs(a - b) <= 1e-6 * a


@settings(max_examples=100, deadline=None)
@given(V=st.floats(1e-6, 1))
def test_buffered_weight_small_beta_limit(V):
    assert buffered_weight(V, 1e-12 * V) == pytest.approx(1 / (2 * V), rel=1e-9)


def test_buffered_weight_negative_variance_is_finite():
    w = buffered_weight(np.array([-1e-3, -1.0]), 1e-4)
    assert np.all(np.isfinite(w)) and np.all(w > 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_eigenvalue_penalty_gradient(seed):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(4, 4)) * 0.8
    res, grads = eigenvalue_penalty_terms(T)
    analytic = 2 * res @ grads
    fd = finite_difference_gradient(lambda x: eigenvalue_penalty(x.reshape(4, 4)), T.ravel())
    assert res.max() > 0
    assert np.abs(analytic - fd).max() / np.abs(fd).max() < 1e-5


def test_psi_gradient_matches_finite_differences():
    m = random_model(3, 2, 3, seed=7)
    ds = sampled(m, 3)
    ts, N, Y = ds.arrays()
    x = np.concatenate([m.S.ravel(), 1.08 * m.T.ravel(), m.P.ravel()])
    x = x + 1e-3 * np.random.default_rng(0).normal(size=x.size)
    objective, evaluate, parts = psi_objective((2, 3, 3), ts, Y / N, N.astype(float),
                                               1.0 / N)
    _, g, _ = evaluate(x)
    assert parts(x)[1] > 0
    fd = finite_difference_gradient(objective, x, h=1e-7)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-5


def test_final_fit_stationary_at_truth():
    m = random_model(3, 2, 3, seed=8)
    ts = np.array(SCHED.T_set)
    F = predict_many(m, ts).transpose(1, 0, 2)
    N = np.full(F.shape, 10_000.0)
    state = final_fit(m, ts, F, N)
    assert state.penalty == 0
    for a, b in ((state.model.S, m.S), (state.model.T, m.T), (state.model.P, m.P)):
        assert np.abs(a - b).max() < 1e-8


def test_final_fit_does_not_increase_psi():
    m = random_model(3, 2, 3, seed=9)
    ds = sampled(m, 4)
    ts, N, Y = ds.arrays()
    start = Model(m.S, 0.98 * m.T, m.P)
    state = final_fit(start, ts, Y / N, N.astype(float))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(state.history, state.history[1:]))


# driver ---------------------------------------------------------------------

def test_fit_options_from_mapping():
    opts = FitOptions.from_mapping({"phi_accept": "1.2", "max_passes": "7"})
    assert opts.phi_accept == 1.2 and opts.max_passes == 7
    with pytest.raises(KeyError):
        FitOptions.from_mapping({"nope": 1})


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_infer_recovers_random_model(seed):
    m = random_model(3, 2, 3, seed=seed)
    res = infer(sampled(m, seed))
    ts = np.arange(2 * max(SCHED.T_set) + 1)
    assert res.d == 3
    assert np.abs(predict_many(res.model, ts) - predict_many(m, ts)).max() < 5e-2
    assert [e["stage"] for e in res.log][0] == 1 and res.log[-1]["stage"] == 4


def test_pipeline_recovery_rate():
    """Held-out predictions of random models with d <= 6 over many seeds."""
    hits = 0
    seeds = range(20)
    for seed in seeds:
        m = random_model(2 + seed % 5, 2, 3, seed=100 + seed)
        res = infer(sampled(m, seed))
        ts = np.arange(2 * max(SCHED.T_set) + 1)
        hits += np.abs(predict_many(res.model, ts) - predict_many(m, ts)).max() <= 5e-2
    assert hits >= 0.9 * len(seeds)
