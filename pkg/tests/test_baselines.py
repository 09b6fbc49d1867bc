import numpy as np
import pytest

from aapcd.baselines import BaselineConfig, run_ascd, run_dspg
from aapcd.delays import DelaySchedule
from aapcd.errors import ConfigError
from aapcd.model import ProblemSpec, Regularizer, full_gradient, make_classification, make_regression
from aapcd.solver import SolverConfig, run_stochastic

from oracles import fista_lasso, ista, sync_pcd_lasso


def _lasso(lam=0.05, n=30, m=10, seed=1):
    return ProblemSpec("quadratic", Regularizer("l1", lam), make_regression(n, m, seed=seed))


def test_ascd_tau_zero_matches_synchronous_reference():
    pb = _lasso()
    eta = 0.9 / pb.L
    ys = []
    res = run_ascd(pb, BaselineConfig(eta=eta, iters=300, seed=3, T1=0), DelaySchedule.bounded(0),
                   callback=lambda k, y: ys.append(y.copy()))
    A = pb.dataset.csr.toarray()
    ref = sync_pcd_lasso(A, pb.dataset.labels, 0.05, eta, list(res.trace.j_k))
    assert np.max(np.abs(np.array(ys) - ref)) <= 1e-12
    assert np.all(res.trace.beta_k == 0.0)


def test_ascd_equals_zero_momentum_solver():
    pb = ProblemSpec("logistic", Regularizer("l1", 0.01), make_classification(40, 8, seed=2))
    cfg = SolverConfig(eta=0.5, beta=0.0, beta_neg=0.0, T1=1, iters=400, seed=5, strict=False)
    a = run_ascd(pb, SolverConfig(eta=0.5, beta=0.7, T1=1, iters=400, seed=5, strict=False),
                 DelaySchedule.bounded(3, seed=1))
    b = run_stochastic(pb, cfg, DelaySchedule.bounded(3, seed=1))
    assert a.trace.to_csv() == b.trace.to_csv()


def test_ascd_and_aapcd_reach_same_value():
    pb = _lasso(n=40, m=12, seed=3)
    sched = lambda: DelaySchedule.bounded(2, seed=4)
    a = run_ascd(pb, BaselineConfig(eta=0.5 / pb.L, iters=20000, seed=1, T1=1), sched())
    b = run_stochastic(pb, SolverConfig(iters=20000, seed=1), sched())
    _, F_star = fista_lasso(pb.dataset.csr.toarray(), pb.dataset.labels, 0.05)
    assert abs(a.F - b.F) <= 1e-4 and abs(b.F - F_star) <= 1e-4


def test_dspg_full_batch_zero_reg_is_gradient_descent():
    pb = ProblemSpec("logistic", Regularizer(), make_classification(30, 6, seed=1))
    res = run_dspg(pb, BaselineConfig("dspg", eta=0.5, batch_size=30, iters=1))
    assert np.allclose(res.x, -0.5 * full_gradient(pb, np.zeros(6)), rtol=0, atol=1e-15)


def test_dspg_full_batch_l1_is_ista():
    pb = _lasso()
    eta = 1.0 / pb.L
    res = run_dspg(pb, BaselineConfig("dspg", eta=eta, batch_size=10**6, iters=50))
    ref = ista(pb.dataset.csr.toarray(), pb.dataset.labels, 0.05, eta, 50, scale=pb.scale)
    assert np.max(np.abs(res.x - ref[-1])) <= 1e-12
    assert np.all(np.diff(np.concatenate([[res.trace.F0], res.trace.F])) <= 1e-12)


def test_dspg_seeded_reproducibility():
    pb = ProblemSpec("logistic", Regularizer("l1", 0.01), make_classification(80, 6, seed=1))
    cfg = BaselineConfig("dspg", eta=0.5, batch_size=10, iters=100, seed=3)
    a, b = run_dspg(pb, cfg), run_dspg(pb, cfg)
    assert a.trace.to_csv() == b.trace.to_csv()
    c = run_dspg(pb, BaselineConfig("dspg", eta=0.5, batch_size=10, iters=100, seed=4))
    assert not np.array_equal(a.x, c.x)
    assert np.all(a.trace.j_k == -1) and np.array_equal(a.trace.G, a.trace.F)


def test_dspg_zero_iterations_and_validation():
    pb = _lasso()
    res = run_dspg(pb, BaselineConfig("dspg", iters=0))
    assert len(res.trace) == 0 and np.array_equal(res.x, np.zeros(pb.m))
    with pytest.raises(ConfigError):
        BaselineConfig("sgd")
    with pytest.raises(ConfigError):
        BaselineConfig("dspg", batch_size=0)
