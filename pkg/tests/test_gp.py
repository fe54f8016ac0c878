import math

import numpy as np
import pytest

from gpcbf.errors import BudgetExhausted, ContractViolation
from gpcbf.gp import Dataset, GpModel, beta_value, fit_hyperparameters, log_marginal_likelihood
from gpcbf.kernels import CompositeKernel, SeKernelParams, composite_eval, gram_matrix


def make_model(n=2, m=1, noise=0.1, sf=1.0, ell=1.0, **kw):
    k = CompositeKernel(SeKernelParams(sf, ell), tuple(SeKernelParams(sf, ell) for _ in range(m)))
    return GpModel([k] * n, n, m, noise, 1.0, **kw)


def dense_posterior(k, X, U, y, noise, x, u):
    K = gram_matrix(k, X, U) + noise**2 * np.eye(len(X))
    ks = np.array([composite_eval(k, xi, ui, x, u) for xi, ui in zip(X, U)])
    Ki = np.linalg.inv(K)
    return ks @ Ki @ y, composite_eval(k, x, u, x, u) - ks @ Ki @ ks


def test_prior_only():
    gm = GpModel([CompositeKernel(SeKernelParams(2.0, 1.0), (SeKernelParams(0.5, 1.0),))] * 2, 2, 1, 0.1, 1.0,
                 prior_drift=lambda x: np.array([1.0, -1.0]), prior_input=lambda x: np.array([[2.0], [0.0]]))
    ps = gm.posterior([0.3, 0.1], [2.0])
    assert np.allclose(ps.mean, [5.0, -1.0])
    assert np.allclose(ps.variance, 2.0 + 4 * 0.5)


def test_dense_oracle_and_interpolation():
    rng = np.random.default_rng(1)
    gm = make_model(n=1, m=2, noise=0.2, sf=1.3, ell=0.8)
    X, U, Y = rng.standard_normal((2, 1)), rng.standard_normal((2, 2)), rng.standard_normal((2, 1))
    gm.set_data(X, U, Y)
    x, u = rng.standard_normal(1), rng.standard_normal(2)
    mu, var = dense_posterior(gm.kernels[0], X, U, Y[:, 0], 0.2, x, u)
    ps = gm.posterior(x, u)
    assert ps.mean[0] == pytest.approx(mu, abs=1e-10)
    assert ps.variance[0] == pytest.approx(var, abs=1e-10)

    tiny = make_model(n=1, m=2, noise=1e-8)
    tiny.set_data(X, U, Y)
    assert tiny.posterior(X[0], U[0]).mean[0] == pytest.approx(Y[0, 0], abs=1e-4)


def test_add_measurement_contracts():
    gm = make_model(n=1, m=1, noise=0.05)
    x, u = np.array([0.3]), np.array([1.0])
    v0 = gm.posterior(x, u).variance[0]
    gm.add_measurement(x, u, [2.0])
    ps = gm.posterior(x, u)
    assert ps.variance[0] < v0
    assert abs(ps.mean[0] - 2.0) < 2.0
    capped = make_model(n=1, m=1, capacity=1)
    capped.add_measurement(x, u, [0.0])
    with pytest.raises(BudgetExhausted):
        capped.add_measurement(x, u, [0.0])


def test_sequential_matches_batch():
    rng = np.random.default_rng(2)
    X, U, Y = rng.standard_normal((10, 2)), rng.standard_normal((10, 1)), rng.standard_normal((10, 2))
    seq = make_model(noise=0.1)
    for a, b, c in zip(X, U, Y):
        seq.add_measurement(a, b, c)
    bat = make_model(noise=0.1).set_data(X, U, Y)
    for _ in range(10):
        x, u = rng.standard_normal(2), rng.standard_normal(1)
        p, q = seq.posterior(x, u), bat.posterior(x, u)
        assert np.allclose(p.mean, q.mean, atol=1e-9) and np.allclose(p.variance, q.variance, atol=1e-9)
    assert seq.info_gain(0) == pytest.approx(bat.info_gain(0), abs=1e-9)


def test_refactor_cadence_is_transparent():
    rng = np.random.default_rng(5)
    X, U, Y = rng.standard_normal((40, 2)), rng.standard_normal((40, 1)), rng.standard_normal((40, 2))
    a, b = make_model(refactor_every=7), make_model(refactor_every=10_000)
    for r in zip(X, U, Y):
        a.add_measurement(*r)
        b.add_measurement(*r)
    x, u = rng.standard_normal(2), rng.standard_normal(1)
    assert np.allclose(a.posterior(x, u).mean, b.posterior(x, u).mean, atol=1e-9)


def test_contraction_at_samples():
    rng = np.random.default_rng(4)
    gm = make_model(noise=0.3)
    X, U, Y = rng.standard_normal((8, 2)), rng.standard_normal((8, 1)), rng.standard_normal((8, 2))
    gm.set_data(X, U, Y)
    for x, u in zip(X, U):
        prior = composite_eval(gm.kernels[0], x, u, x, u)
        assert np.all(gm.posterior(x, u).variance <= prior + 1e-12)


def test_beta():
    assert beta_value(1.0, 0.1, 0.0, 1, math.exp(-1)) == pytest.approx(1.2)
    ref = 2.0 + 0.5 * math.sqrt(2 * (3.7 + 1 + math.log(2 / 0.05)))
    assert beta_value(2.0, 0.5, 3.7, 2, 0.05) == pytest.approx(ref, rel=1e-12)
    gs = np.linspace(0, 10, 11)
    assert np.all(np.diff([beta_value(1, 0.1, g, 2, 0.05) for g in gs]) > 0)
    gm = GpModel([CompositeKernel(SeKernelParams(), ())], 1, 0, 0.1, 1.0, delta=math.exp(-1))
    assert gm.beta(0) == pytest.approx(1.2)


def test_info_gain():
    gm = GpModel([CompositeKernel(SeKernelParams(1.0, 1.0), ())], 1, 0, 1.0, 1.0)
    assert gm.info_gain(0) == 0.0
    gm.add_measurement([0.0], [], [1.0])
    assert gm.info_gain(0) == pytest.approx(0.5 * math.log(2))
    rng = np.random.default_rng(0)
    gm = make_model(n=1, m=1, noise=0.4)
    X, U = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    gm.set_data(X, U, rng.standard_normal((5, 1)))
    ev = np.linalg.eigvalsh(gram_matrix(gm.kernels[0], X, U))
    assert gm.info_gain(0) == pytest.approx(0.5 * np.sum(np.log1p(ev / 0.4**2)), abs=1e-9)


def test_constructor_contracts():
    k = CompositeKernel(SeKernelParams(), (SeKernelParams(),))
    with pytest.raises(ContractViolation):
        GpModel([k], 2, 1, 0.1, 1.0)
    with pytest.raises(ContractViolation):
        GpModel([k], 1, 1, 0.0, 1.0)
    with pytest.raises(ContractViolation):
        GpModel([k], 1, 1, 0.1, 1.0, delta=1.5)


def test_dataset_csv_roundtrip(tmp_path):
    ds = Dataset(2, 1)
    ds.append([0.1, 0.2], [3.0], [1e-17, -4.5])
    ds.append([1.0, 2.0], [0.0], [0.0, 1.0])
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.U, ds.U) and np.array_equal(back.Y, ds.Y)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ContractViolation):
        Dataset.from_csv(tmp_path / "bad.csv")


def test_fit_recovers_lengthscale():
    rng = np.random.default_rng(7)
    true = CompositeKernel(SeKernelParams(1.0, 0.5), ())
    X = rng.uniform(-3, 3, (50, 1))
    K = gram_matrix(true, X, np.zeros((50, 0))) + 1e-8 * np.eye(50)
    y = np.linalg.cholesky(K) @ rng.standard_normal(50) + 0.05 * rng.standard_normal(50)
    gm = GpModel([CompositeKernel(SeKernelParams(1.0, 2.0), ())], 1, 0, 0.05, 1.0)
    ds = Dataset(1, 0)
    for x, t in zip(X, y):
        ds.append(x, [], [t])
    (k,) = fit_hyperparameters(gm, ds)
    assert 0.25 <= k.drift_kernel.lengthscale <= 1.0
    U0 = np.zeros((50, 0))
    assert log_marginal_likelihood(k, X, U0, y, 0.05) >= log_marginal_likelihood(gm.kernels[0], X, U0, y, 0.05)


def test_fit_degenerate_cases():
    gm = make_model(n=1, m=1)
    one = Dataset(1, 1)
    one.append([0.0], [1.0], [2.0])
    assert fit_hyperparameters(gm, one) == gm.kernels
    same = Dataset(1, 1)
    for _ in range(3):
        same.append([0.0], [1.0], [2.0])
    with pytest.warns(UserWarning):
        assert fit_hyperparameters(gm, same) == gm.kernels
