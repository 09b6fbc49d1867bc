import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aapcd.delays import DelaySchedule, EpsilonSpec
from aapcd.errors import ConfigError, DivergenceError, ScheduleExhaustedError
from aapcd.model import (Dataset, ProblemSpec, Regularizer, block_gradient, full_gradient,
                         full_objective, make_classification, make_regression)
from aapcd.solver import (SolverConfig, make_state, momentum_bound_bounded,
                          momentum_cap_deterministic, resolve_config, run_deterministic,
                          run_stochastic, step, stepsize_bounded, stepsize_deterministic,
                          stepsize_unbounded_stochastic)

from oracles import scalar_aapcd, sync_pcd_lasso

A2 = np.array([[1.0, 1.0], [0.0, 1.0]])
B2 = np.array([1.0, 2.0])


def _toy():
    return ProblemSpec("quadratic", Regularizer("l1", 0.1), Dataset.from_matrix(A2, B2))


def _collect(store):
    return lambda k, y: store.append(y.copy())


# frozen output of the scalar reference on the 5-step toy run
FROZEN = [
    ("v", 2.3876125, [0.135, 0.0]),
    ("x", 1.6698624999999998, [0.135, 0.29000000000000004]),
    ("x", 1.6364511249999998, [0.21150000000000002, 0.29000000000000004]),
    ("x", 1.1299031250000002, [0.21150000000000002, 0.5665]),
    ("v", 1.12783797, [0.2298, 0.5665]),
]


def test_five_step_trace_matches_hand_values():
    cfg = SolverConfig(eta=0.1, beta=0.5, beta_neg=-0.2, T1=0, iters=5, strict=False)
    ys = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_deterministic(_toy(), cfg, DelaySchedule.scripted([0, 1, 1, 2, 0]),
                                callback=_collect(ys))
    tr = res.trace
    assert list(tr.j_k) == [0, 1, 0, 1, 0]
    assert list(tr.d_k) == [0, 1, 1, 2, 0]
    assert list(tr.beta_k) == [0.5, -0.2, -0.2, -0.2, 0.5]
    ref = scalar_aapcd(A2, B2, 0.1, 0.1, 0.5, -0.2, 0, [0, 1, 1, 2, 0], [0, 1, 0, 1, 0])
    for k, (branch, F, y) in enumerate(FROZEN):
        assert tr.branch[k] == branch == ref[k]["branch"]
        assert tr.F[k] == pytest.approx(F, abs=1e-12)
        assert ref[k]["F"] == pytest.approx(F, abs=1e-12)
        assert np.allclose(ys[k], y, rtol=0, atol=1e-12)
        assert tr.F_x[k] == pytest.approx(ref[k]["F_x"], abs=1e-12)
        assert tr.F_v[k] == pytest.approx(ref[k]["F_v"], abs=1e-12)
        assert tr.step_sq[k] == pytest.approx(ref[k]["step_sq"], abs=1e-12)


def test_first_step_by_hand():
    # gradient at 0 on coordinate 0 is -1; soft(0.1, 0.01) = 0.09; v = 0.09 + 0.5 * 0.09
    Fv = 0.5 * ((0.135 - 1.0) ** 2 + 4.0) + 0.1 * 0.135
    assert FROZEN[0][1] == pytest.approx(Fv, abs=1e-15)


def test_zero_momentum_zero_reg_is_coordinate_gradient_descent():
    ds = make_regression(15, 6, seed=1)
    pb = ProblemSpec("quadratic", Regularizer(), ds)
    state = make_state(pb)
    x = np.random.default_rng(0).standard_normal(6)
    state = make_state(pb, x)
    cfg = SolverConfig(eta=0.01, beta=0.0, beta_neg=0.0, T1=0)
    for j in [0, 3, 5, 3]:
        before = state.y.copy()
        g = full_gradient(pb, before)[j]
        step(state, cfg, j)
        expect = before.copy()
        expect[j] -= 0.01 * g
        assert np.allclose(state.y, expect, rtol=0, atol=1e-14)


def test_fixed_point_step_leaves_state():
    pb = ProblemSpec("quadratic", Regularizer("l1", 100.0), make_regression(10, 4, seed=2))
    state = make_state(pb)
    F0 = state.F
    rec = step(state, SolverConfig(eta=0.01, T1=0), 2)
    assert np.array_equal(state.y, np.zeros(4)) and rec.F == F0 and rec.step_sq == 0.0


def test_state_F_tracks_full_objective():
    pb = ProblemSpec("logistic", Regularizer("capped_l1", 0.01, 0.05),
                     make_classification(50, 12, density=0.3, seed=1))
    cfg = SolverConfig(iters=600, T1=1, seed=4, strict=False)
    ys = []
    res = run_stochastic(pb, cfg, DelaySchedule.bounded(3, seed=1), callback=_collect(ys))
    for k in range(0, 600, 97):
        assert res.trace.F[k] == pytest.approx(full_objective(pb, ys[k]), rel=1e-11)
    assert res.F == pytest.approx(full_objective(pb, res.x), rel=1e-12)


def test_sign_rule_and_branch_rule():
    pb = ProblemSpec("logistic", Regularizer("l1", 0.001), make_classification(40, 10, seed=3))
    cfg = SolverConfig(iters=2000, T1=2, seed=1)
    tr = run_stochastic(pb, cfg, DelaySchedule.bounded(5, seed=2)).trace
    pos = tr.d_k <= 2
    assert np.all(tr.beta_k[pos] == 0.8) and np.all(tr.beta_k[~pos] == -0.08)
    assert np.all(tr.F == np.minimum(tr.F_x, tr.F_v))
    assert np.all((tr.branch == "v") == (tr.F_v < tr.F_x))


def test_off_block_coordinates_untouched():
    pb = ProblemSpec("logistic", Regularizer("l1", 0.001), make_classification(30, 9, seed=5))
    blocks = [np.arange(0, 3), np.arange(3, 4), np.arange(4, 9)]
    cfg = SolverConfig(iters=300, T1=1, blocks=blocks, seed=2)
    ys = [np.zeros(9)]
    res = run_stochastic(pb, cfg, DelaySchedule.bounded(2, seed=3), callback=_collect(ys))
    for k, j in enumerate(res.trace.j_k):
        off = np.setdiff1d(np.arange(9), blocks[j])
        assert np.array_equal(ys[k + 1][off], ys[k][off])


def test_round_robin_selection():
    pb = _toy()
    cfg = SolverConfig(eta=0.1, T1=0, beta=0.0, beta_neg=0.0, iters=4)
    tr = run_deterministic(pb, cfg, DelaySchedule.bounded(0)).trace
    assert list(tr.j_k) == [0, 1, 0, 1]
    pb = ProblemSpec("logistic", Regularizer(), make_classification(20, 7, seed=1))
    tr = run_deterministic(pb, SolverConfig(iters=100, T1=1), DelaySchedule.bounded(2, seed=1)).trace
    for s in range(len(tr) - 7 + 1):
        assert set(tr.j_k[s:s + 7]) == set(range(7))


def test_zero_iterations_returns_start():
    pb = _toy()
    res = run_stochastic(pb, SolverConfig(eta=0.1, T1=0, beta=0.0, beta_neg=0.0, iters=0),
                         DelaySchedule.bounded(0))
    assert len(res.trace) == 0
    assert np.array_equal(res.x, [0.0, 0.0]) and res.F == full_objective(pb, np.zeros(2))


def test_same_seed_bit_identical():
    pb = ProblemSpec("sigmoid", Regularizer("l1", 0.01), make_classification(40, 10, seed=3))
    cfg = SolverConfig(iters=500, T1=2, seed=9)
    a = run_stochastic(pb, cfg, DelaySchedule.bounded(4, seed=1))
    b = run_stochastic(pb, cfg, DelaySchedule.bounded(4, seed=1))
    assert a.trace.to_csv() == b.trace.to_csv()
    assert np.array_equal(a.x, b.x)


def test_tau_zero_matches_synchronous_reference():
    ds = make_regression(20, 8, seed=3)
    pb = ProblemSpec("quadratic", Regularizer("l1", 0.05), ds)
    eta = 0.5 / pb.L
    cfg = SolverConfig(eta=eta, beta=0.0, beta_neg=0.0, T1=0, iters=400, seed=5)
    ys = []
    res = run_stochastic(pb, cfg, DelaySchedule.bounded(0), callback=_collect(ys))
    ref = sync_pcd_lasso(ds.csr.toarray(), ds.labels, 0.05, eta, list(res.trace.j_k))
    assert np.max(np.abs(np.array(ys) - ref)) <= 1e-12


def test_inconsistent_reads_run_and_differ():
    pb = ProblemSpec("logistic", Regularizer("l1", 0.001), make_classification(40, 10, seed=3))
    cfg = SolverConfig(iters=500, T1=2, seed=1)
    a = run_stochastic(pb, cfg, DelaySchedule.bounded(5, seed=2))
    b = run_stochastic(pb, SolverConfig(iters=500, T1=2, seed=1, read_policy="inconsistent"),
                       DelaySchedule.bounded(5, seed=2))
    assert not np.array_equal(a.x, b.x)
    assert np.all(b.trace.F == np.minimum(b.trace.F_x, b.trace.F_v))


def test_divergence_is_reported():
    pb = ProblemSpec("quadratic", Regularizer(), make_regression(20, 5, seed=1))
    cfg = SolverConfig(eta=50.0 / pb.L, beta=0.0, beta_neg=0.0, T1=0, iters=2000, strict=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(DivergenceError) as info:
            run_deterministic(pb, cfg, DelaySchedule.bounded(0))
    assert info.value.result is not None and len(info.value.result.trace) > 0


def test_scripted_schedule_too_short():
    with pytest.raises(ScheduleExhaustedError):
        run_deterministic(_toy(), SolverConfig(eta=0.1, T1=0, beta=0.0, beta_neg=0.0, iters=3),
                          DelaySchedule.scripted([0, 0]))


def test_unbounded_regimes_run():
    pb = ProblemSpec("logistic", Regularizer("l1", 0.001), make_classification(40, 10, seed=3))
    res = run_stochastic(pb, SolverConfig(iters=300, T1=2, regime="stochastic_unbounded",
                                          strict=False),
                         DelaySchedule.power_law(5.0, seed=1))
    assert np.isfinite(res.F) and np.all(np.isfinite(res.trace.G))
    eps = EpsilonSpec(rho=0.5)
    res = run_deterministic(pb, SolverConfig(iters=300, T1=2, regime="deterministic_unbounded",
                                             epsilon=eps, strict=False),
                            DelaySchedule.epsilon_sequence(eps, 6))
    assert np.isfinite(res.F) and np.all(np.isfinite(res.trace.G))


def test_real_mode_invariants():
    pb = ProblemSpec("logistic", Regularizer("l1", 0.001), make_classification(60, 12, seed=3))
    cfg = SolverConfig(iters=400, T1=1, seed=1, mode="real", workers=3, strict=False)
    res = run_stochastic(pb, cfg, DelaySchedule.measured())
    tr = res.trace
    assert len(tr) == 400 and list(tr.k) == list(range(400))
    assert not tr.simulated
    assert np.all(tr.d_k >= 0)
    assert np.all(tr.F == np.minimum(tr.F_x, tr.F_v))
    assert np.all((tr.beta_k == 0.8) == (tr.d_k <= 1))
    assert res.F == pytest.approx(full_objective(pb, res.x), rel=1e-12)


def test_deterministic_rejects_real_mode():
    with pytest.raises(ConfigError):
        run_deterministic(_toy(), SolverConfig(mode="real", T1=0), DelaySchedule.bounded(0))


# ---------------------------------------------------------------------------
# calculators


def test_stepsize_bounded_examples():
    assert stepsize_bounded(1.0, 0, 0.5, 1.0) == 1.0
    assert stepsize_bounded(1.0, 2, 0.5, 1.0) == pytest.approx(1 / 7, rel=1e-15)
    assert stepsize_bounded(2.0, 2, 0.5) == pytest.approx(stepsize_bounded(1.0, 2, 0.5) / 2, rel=1e-15)
    with pytest.raises(ConfigError):
        stepsize_bounded(1.0, 1, 0.5, 0.0)
    with pytest.raises(ConfigError):
        stepsize_bounded(0.0, 1, 0.5)


def test_momentum_bound_examples():
    assert momentum_bound_bounded(1 / 13, 1.0, 4) == pytest.approx(0.5, rel=1e-14)
    assert momentum_bound_bounded(1e-9, 1.0, 4) > 1e7
    with pytest.raises(ConfigError, match="infeasible"):
        momentum_bound_bounded(1.0, 1.0, 1)


def test_stepsize_unbounded_examples():
    assert stepsize_unbounded_stochastic(1.0, 0.0, 0.5, 0.9).eta == pytest.approx(0.9)
    assert stepsize_unbounded_stochastic(1.0, 4.0, 0.5, 1.0).eta == pytest.approx(1 / 7, rel=1e-15)
    r = stepsize_unbounded_stochastic(1.0, 0.01, 0.5, 0.95, c0=4.0)
    assert "T1" in r.flags


def test_stepsize_deterministic_examples():
    assert stepsize_deterministic(1.0, 0.0, 3.0, 0.5, 0.5).eta == pytest.approx(0.5)
    assert stepsize_deterministic(1.0, 2.0, 2.0, 1.0, 0.5).eta == pytest.approx(0.5 / 9, rel=1e-15)
    with pytest.raises(ConfigError):
        stepsize_deterministic(1.0, 2.0, 2.0, 1.0, 1.0)
    assert momentum_cap_deterministic(4.0, 4.0, 0.5, 0.0) == pytest.approx(1.0)


def test_resolve_config_strictness():
    pb = _toy()
    cfg = SolverConfig(eta=10.0, T1=1)
    with pytest.raises(ConfigError):
        resolve_config(pb, cfg, DelaySchedule.bounded(2))
    _, notes = resolve_config(pb, SolverConfig(eta=10.0, T1=1, strict=False), DelaySchedule.bounded(2))
    assert notes
    resolved, notes = resolve_config(pb, SolverConfig(), DelaySchedule.bounded(4))
    assert not notes and resolved.T1 == 2 and resolved.eta > 0


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigError):
        SolverConfig(beta=-0.1)
    with pytest.raises(ConfigError):
        SolverConfig(beta_neg=-1.0)
    with pytest.raises(ConfigError):
        SolverConfig(regime="other")
    with pytest.raises(ConfigError):
        SolverConfig(eta=-1.0)
    cfg = SolverConfig(eta=0.1, blocks=[(0,), (1,)], epsilon=EpsilonSpec(rho=0.3), T1=2)
    assert SolverConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_bad_blocks_rejected():
    pb = _toy()
    with pytest.raises(ConfigError):
        make_state(pb, blocks=[[0]])
    with pytest.raises(ConfigError):
        make_state(pb, blocks=[[0, 1], [1]])
    with pytest.raises(ConfigError):
        make_state(pb, x0=np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**20),
       st.sampled_from(["consistent", "inconsistent"]))
def test_branch_and_sign_invariant_property(tau, T1, seed, policy):
    pb = ProblemSpec("logistic", Regularizer("capped_l1", 0.01, 0.1),
                     make_classification(20, 6, density=0.6, seed=seed % 7))
    cfg = SolverConfig(iters=150, T1=T1, seed=seed, read_policy=policy, strict=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tr = run_stochastic(pb, cfg, DelaySchedule.bounded(tau, seed=seed)).trace
    assert np.all(tr.F == np.minimum(tr.F_x, tr.F_v))
    assert np.all((tr.beta_k == cfg.beta) == (tr.d_k <= T1))
    assert np.all(tr.d_k <= np.minimum(tau, tr.k))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**20))
def test_block_gradient_used_by_step_matches_model(m, seed):
    pb = ProblemSpec("sigmoid", Regularizer(), make_classification(12, m, seed=seed % 5))
    x = np.random.default_rng(seed).standard_normal(m)
    state = make_state(pb, x)
    j = seed % m
    cfg = SolverConfig(eta=0.1, beta=0.0, beta_neg=0.0, T1=0)
    g = block_gradient(pb, x, [j])[0]
    step(state, cfg, j)
    assert state.last_grad[j] == pytest.approx(g, rel=1e-12, abs=1e-15)
