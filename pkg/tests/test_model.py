import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from aapcd.errors import ConfigError, DimensionError, LipschitzError
from aapcd.model import (Dataset, ProblemSpec, Regularizer, ResidualCache, block_gradient,
                         full_gradient, full_objective, lipschitz_estimate, load_libsvm,
                         make_classification, make_regression, smooth_objective,
                         update_residual, SIGMOID_CURVATURE_BOUND)

from oracles import central_difference, naive_loss, naive_penalty


def _problem(loss="logistic", reg=None, n=30, m=8, seed=0, density=1.0):
    if loss == "quadratic":
        ds = make_regression(n, m, seed=seed)
    else:
        ds = make_classification(n, m, density=density, seed=seed)
    return ProblemSpec(loss, reg or Regularizer(), ds)


def test_logistic_at_zero_is_log2():
    pb = _problem("logistic")
    assert full_objective(pb, np.zeros(pb.m)) == pytest.approx(math.log(2), abs=1e-15)


def test_sigmoid_at_zero_is_half():
    pb = _problem("sigmoid")
    assert full_objective(pb, np.zeros(pb.m)) == pytest.approx(0.5, abs=1e-15)


def test_capped_l1_objective_matches_naive_evaluator():
    reg = Regularizer("capped_l1", 1e-4, 1e-5)
    pb = _problem("logistic", reg, n=40, m=10)
    rng = np.random.default_rng(3)
    A = pb.dataset.csr.toarray()
    for _ in range(5):
        x = rng.standard_normal(10) * rng.choice([1e-6, 1e-3, 1.0])
        ref = naive_loss("logistic", A, pb.dataset.labels, x) + naive_penalty("capped_l1", x, 1e-4, 1e-5)
        assert full_objective(pb, x) == pytest.approx(ref, rel=1e-13)


def test_objective_with_cache_agrees():
    pb = _problem("sigmoid", Regularizer("l1", 0.01))
    x = np.random.default_rng(1).standard_normal(pb.m)
    cache = ResidualCache(pb.dataset, x)
    assert full_objective(pb, x, cache) == pytest.approx(full_objective(pb, x), rel=1e-10)


def test_objective_dimension_mismatch():
    pb = _problem()
    with pytest.raises(DimensionError):
        full_objective(pb, np.zeros(pb.m + 1))


def test_quadratic_identity_gradient():
    ds = Dataset.from_matrix(np.eye(4), np.zeros(4))
    pb = ProblemSpec("quadratic", Regularizer(), ds)
    x = np.array([0.5, -1.0, 2.0, 3.0])
    for j in range(4):
        assert block_gradient(pb, x, [j])[0] == x[j]
    assert smooth_objective(pb, x) == pytest.approx(0.5 * x @ x)


@pytest.mark.parametrize("loss", ["logistic", "sigmoid", "quadratic"])
def test_block_gradient_matches_finite_differences(loss):
    pb = _problem(loss, n=25, m=6, seed=4)
    A = pb.dataset.csr.toarray()
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.standard_normal(pb.m)
        block = rng.choice(pb.m, size=3, replace=False)
        g = block_gradient(pb, x, block)
        fd = central_difference(lambda v: naive_loss(loss, A, pb.dataset.labels, v), x, block)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_block_gradients_concatenate_to_full_gradient():
    pb = _problem("logistic", n=20, m=9, density=0.4)
    x = np.random.default_rng(2).standard_normal(pb.m)
    parts = [np.arange(0, 4), np.arange(4, 5), np.arange(5, 9)]
    g = np.concatenate([block_gradient(pb, x, b) for b in parts])
    assert np.allclose(g, full_gradient(pb, x), rtol=0, atol=1e-15)


def test_block_gradient_errors():
    pb = _problem()
    with pytest.raises(ValueError):
        block_gradient(pb, np.zeros(pb.m), [])
    with pytest.raises(DimensionError):
        block_gradient(pb, np.zeros(pb.m), [pb.m])


def test_update_residual_cases():
    A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]]))
    ds = Dataset.from_matrix(A, np.ones(3))
    cache = ResidualCache(ds, np.zeros(2))
    update_residual(cache, ds, 0, 0.0)
    assert np.array_equal(cache.z, np.zeros(3))
    update_residual(cache, ds, 1, 0.5)
    assert np.array_equal(cache.z, [0.0, 1.0, 0.0])
    with pytest.raises(IndexError):
        update_residual(cache, ds, 2, 1.0)


def test_update_residual_many_updates_matches_recompute():
    ds = make_classification(60, 15, density=0.3, seed=7)
    x = np.zeros(15)
    cache = ResidualCache(ds, x)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        j = int(rng.integers(15))
        delta = float(rng.standard_normal())
        x[j] += delta
        update_residual(cache, ds, j, delta)
    assert cache.drift(x) <= 1e-10


def test_residual_cache_resyncs_with_owner():
    ds = make_classification(10, 3, seed=1)
    x = np.zeros(3)
    cache = ResidualCache(ds, owner=x, resync_every=5)
    for t in range(5):
        x[t % 3] += 1.0
        update_residual(cache, ds, t % 3, 1.0)
    assert cache._since_sync == 0
    assert np.allclose(cache.z, ds.matvec(x))


def test_lipschitz_identity_logistic():
    n = 6
    pb = ProblemSpec("logistic", Regularizer(), Dataset.from_matrix(np.eye(n), np.ones(n)))
    assert lipschitz_estimate(pb) == pytest.approx(1.0 / (4 * n), rel=1e-12)


def test_lipschitz_matches_dense_svd():
    rng = np.random.default_rng(11)
    A = rng.standard_normal((5, 3))
    ds = Dataset.from_matrix(A, np.array([1, -1, 1, 1, -1.0]))
    s = np.linalg.svd(A, compute_uv=False)[0]
    for loss, ref in [("logistic", s * s / 20), ("sigmoid", SIGMOID_CURVATURE_BOUND * s * s / 5),
                      ("quadratic", s * s)]:
        pb = ProblemSpec(loss, Regularizer(), ds)
        assert lipschitz_estimate(pb) == pytest.approx(ref, rel=1e-6)


def test_lipschitz_zero_matrix_raises():
    ds = Dataset.from_matrix(sp.csr_matrix((4, 3)), np.ones(4))
    with pytest.raises(LipschitzError):
        lipschitz_estimate(ProblemSpec("logistic", Regularizer(), ds))


def test_lipschitz_nonconvergence_raises():
    pb = _problem(n=30, m=8)
    with pytest.raises(LipschitzError):
        lipschitz_estimate(pb, tolerance=1e-300, max_iters=3)


def test_sigmoid_curvature_bound_is_the_maximum():
    z = np.linspace(-10, 10, 200001)
    s = 1.0 / (1.0 + np.exp(z))
    second = s * (1 - s) * (1 - 2 * s)
    assert np.max(np.abs(second)) == pytest.approx(SIGMOID_CURVATURE_BOUND, rel=1e-8)


@pytest.mark.parametrize("loss", ["logistic", "sigmoid"])
def test_gradient_lipschitz_sampled(loss):
    pb = _problem(loss, n=40, m=6, seed=2)
    L = pb.L
    rng = np.random.default_rng(9)
    for _ in range(100):
        x, y = rng.standard_normal((2, pb.m)) * 3
        lhs = np.linalg.norm(full_gradient(pb, x) - full_gradient(pb, y))
        assert lhs <= L * np.linalg.norm(x - y) * (1 + 1e-9)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.array([0, 2]), np.array([1, 1]), np.ones(2), np.ones(1), 3)
    with pytest.raises(ValueError):
        Dataset(np.array([0, 1]), np.array([5]), np.ones(1), np.ones(1), 3)
    with pytest.raises(DimensionError):
        Dataset(np.array([0, 1]), np.array([0]), np.ones(1), np.ones(2), 3)


def test_classification_losses_need_pm1_labels():
    ds = Dataset.from_matrix(np.eye(2), np.array([0.0, 1.0]))
    with pytest.raises(ConfigError):
        ProblemSpec("logistic", Regularizer(), ds)
    ProblemSpec("quadratic", Regularizer(), ds)


def test_regularizer_validation():
    with pytest.raises(ConfigError):
        Regularizer("l1", -1.0)
    with pytest.raises(ConfigError):
        Regularizer("capped_l1", 1.0, 0.0)
    with pytest.raises(ConfigError):
        Regularizer("scad", 1.0)


def test_block_norm_value_and_prox():
    reg = Regularizer("block_norm", 2.0, group_size=2)
    x = np.array([3.0, 4.0, 0.0, 0.0])
    assert reg.value(x) == pytest.approx(10.0)
    p = reg.prox(x, 0.5)
    assert np.allclose(p, [3.0 * 0.8, 4.0 * 0.8, 0.0, 0.0])


def test_load_libsvm(tmp_path):
    path = tmp_path / "d.svm"
    path.write_text("1 1:0.5 3:1.0\n0 2:2.0\n2 1:-1\n")
    ds = load_libsvm(path)
    assert ds.shape == (3, 3)
    assert list(ds.labels) == [1.0, -1.0, 1.0]
    assert np.allclose(ds.csr.toarray(), [[0.5, 0, 1.0], [0, 2.0, 0], [-1.0, 0, 0]])


def test_load_libsvm_rejects_duplicates(tmp_path):
    path = tmp_path / "bad.svm"
    path.write_text("1 1:0.5 1:1.0\n")
    with pytest.raises(ValueError):
        load_libsvm(path)


def test_content_hash_tracks_data():
    a = make_classification(10, 4, seed=1)
    b = make_classification(10, 4, seed=1)
    c = make_classification(10, 4, seed=2)
    assert a.content_hash() == b.content_hash() != c.content_hash()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_cache_and_direct_objective_agree(values):
    pb = _problem("logistic", Regularizer("capped_l1", 0.1, 0.5), n=12, m=4, seed=3)
    x = np.array(values)
    cache = ResidualCache(pb.dataset, x)
    assert full_objective(pb, x, cache) == pytest.approx(full_objective(pb, x), rel=1e-10)
