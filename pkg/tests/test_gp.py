import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpff.errors import ConditioningError, GpffError
from gpff.gp import (
    GpFitConfig,
    GpModel,
    SquaredExponential,
    TrainingSet,
    _factorize,
    fit_hyperparameters,
    kernel_eval,
    log_marginal_likelihood,
    posterior,
    sample_observations,
    save_grid_csv,
    with_training,
)


def random_training(rng, n, dim=1):
    p = rng.uniform(0, 1, (n, dim))
    return TrainingSet(p, np.sin(3 * p).sum(1) + 0.1 * rng.standard_normal(n))


def random_kernel(rng, dim=1):
    return SquaredExponential(10 ** rng.uniform(-1, 1), tuple(10 ** rng.uniform(-1.3, 0, dim)))


# -- kernel -----------------------------------------------------------------------


def test_kernel_examples():
    k = SquaredExponential(1.0, (1.0,))
    assert kernel_eval(k, 0.3, 0.3) == 1.0
    assert kernel_eval(k, 0.0, 1.0) == pytest.approx(0.6065306597, abs=1e-10)
    assert kernel_eval(k, 0.0, 100.0) < 1e-100
    k2 = SquaredExponential(2.0, (0.5, 2.0))
    assert kernel_eval(k2, [0.0, 0.0], [0.5, 2.0]) == pytest.approx(2.0 * math.exp(-1.0))


def test_kernel_symmetry_and_psd(rng):
    k = random_kernel(rng, 2)
    a = rng.uniform(0, 1, (30, 2))
    g = k(a)
    np.testing.assert_allclose(g, g.T, rtol=1e-14)
    np.testing.assert_allclose(k(a, a), g, rtol=1e-12, atol=1e-14)
    assert np.linalg.eigvalsh(g).min() > -1e-10 * k.signal_variance
    np.testing.assert_array_equal(np.diag(g), k.signal_variance)


def test_kernel_rejects_nonpositive():
    with pytest.raises(GpffError):
        SquaredExponential(0.0, (1.0,))
    with pytest.raises(GpffError):
        SquaredExponential(1.0, (1.0, -1.0))


# -- training set -------------------------------------------------------------------


def test_duplicates_are_merged_by_averaging():
    ts = TrainingSet.create([0.0, 0.5, 0.0, 0.5 + 1e-12], [1.0, 2.0, 3.0, 4.0])
    assert ts.n == 2
    np.testing.assert_allclose(ts.values, [2.0, 3.0])
    assert ts.counts == (2, 2)
    fit_hyperparameters(TrainingSet.create([0.0, 0.0, 0.5, 1.0], [1.0, 1.2, 2.0, 0.5]))


# -- posterior ---------------------------------------------------------------------


def test_two_point_hand_case():
    k = SquaredExponential(1.0, (1.0,))
    model = GpModel.condition(k, 0.1, TrainingSet([0.0, 1.0], [1.0, 2.0]))
    mean, cov = posterior(model, [0.5])
    # K_y = [[a, b], [b, a]] with a = 1.1, b = exp(-1/2); k_* = exp(-1/8) [1, 1]
    a, b, ks = 1.1, math.exp(-0.5), math.exp(-0.125)
    inv = np.array([[a, -b], [-b, a]]) / (a * a - b * b)
    kvec = np.array([ks, ks])
    assert mean[0] == pytest.approx(kvec @ inv @ [1.0, 2.0], rel=1e-12)
    assert cov[0, 0] == pytest.approx(1.0 - kvec @ inv @ kvec, rel=1e-12)


def test_noiseless_interpolation(rng):
    for _ in range(10):
        ts = random_training(rng, 8, dim=2)
        model = GpModel.condition(random_kernel(rng, 2), 0.0, ts, offset=ts.offset)
        mean, cov = posterior(model, ts.positions)
        np.testing.assert_allclose(mean, ts.values, atol=1e-8 * max(1.0, np.abs(ts.values).max()))
        assert np.abs(np.diag(cov)).max() < 1e-6 * model.kernel.signal_variance


def test_prior_reversion_far_away():
    ts = TrainingSet([0.0, 0.3, 0.6], [3.0, 4.0, 3.5])
    model = GpModel.condition(SquaredExponential(2.0, (0.2,)), 1e-3, ts, offset=3.5)
    mean, var = posterior(model, [[10.0]], full_cov=False)
    assert mean[0] == pytest.approx(3.5)
    assert var[0] == pytest.approx(2.0)


def test_alpha_solves_the_system(rng):
    ts = random_training(rng, 12)
    model = GpModel.condition(SquaredExponential(1.3, (0.2,)), 1e-2, ts, offset=0.4)
    ky = model.kernel(ts.positions) + 1e-2 * np.eye(12)
    resid = ky @ model.alpha - (ts.values - 0.4)
    assert np.linalg.norm(resid) <= 1e-8 * np.linalg.norm(ts.values - 0.4)


def test_conditioning_error_reports_estimate():
    with pytest.raises(ConditioningError) as info:
        _factorize(-np.eye(3))
    assert info.value.condition_estimate == pytest.approx(1.0)


def test_jitter_rescues_a_singular_gram():
    ts = TrainingSet([0.0, 0.0, 0.5], [1.0, 1.0, 2.0])
    model = GpModel.condition(SquaredExponential(1.0, (1.0,)), 0.0, ts)
    assert model.jitter > 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(2, 15), dim=st.integers(1, 2), m=st.integers(1, 40))
def test_posterior_invariants(seed, n, dim, m):
    rng = np.random.default_rng(seed)
    ts = random_training(rng, n, dim)
    k = random_kernel(rng, dim)
    nv = 10 ** rng.uniform(-6, -1)
    model = GpModel.condition(k, nv, ts, offset=ts.offset)
    q = rng.uniform(-0.5, 1.5, (m, dim))
    mean, cov = posterior(model, q)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(cov).min() >= -1e-8 * k.signal_variance
    assert np.diag(cov).max() <= k.signal_variance + 1e-10
    # one more observation never increases the variance
    extra = TrainingSet(np.vstack([ts.positions, rng.uniform(0, 1, (1, dim))]), np.append(ts.values, 0.3))
    _, var_more = posterior(with_training(model, extra), q, full_cov=False)
    assert np.all(var_more <= np.diag(cov) + 1e-9)


def test_extrapolation_is_less_certain_than_interpolation():
    ts = TrainingSet([0.05, 0.35, 0.65, 0.95], [0.6, 0.96, 0.96, 0.6])
    model = GpModel.condition(SquaredExponential(0.5, (0.4,)), 1e-6, ts)
    # same distance to the nearest training point, inside versus outside the hull
    _, var = posterior(model, [[0.9], [1.0]], full_cov=False)
    assert var[1] > var[0]


# -- marginal likelihood ---------------------------------------------------------------


def test_single_point_value():
    ts = TrainingSet([0.2], [0.0])
    value, _ = log_marginal_likelihood(SquaredExponential(1.0, (1.0,)), 0.0, ts)
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-12)


def test_permutation_invariance(rng):
    ts = random_training(rng, 9, 2)
    k = random_kernel(rng, 2)
    perm = rng.permutation(9)
    a, ga = log_marginal_likelihood(k, 1e-2, ts)
    b, gb = log_marginal_likelihood(k, 1e-2, TrainingSet(ts.positions[perm], ts.values[perm]))
    assert a == pytest.approx(b, rel=1e-12)
    np.testing.assert_allclose(ga, gb, rtol=1e-9, atol=1e-12)


def finite_difference_gradient(kernel, nv, ts, offset=0.0, h=1e-6):
    eta = np.concatenate([kernel.log_params(), [np.log(nv)]])
    grad = np.empty_like(eta)
    for i in range(len(eta)):
        up, dn = eta.copy(), eta.copy()
        up[i] += h
        dn[i] -= h
        f = lambda e: log_marginal_likelihood(  # noqa: E731
            SquaredExponential.from_log_params(e[:-1]), float(np.exp(e[-1])), ts, offset
        )[0]
        grad[i] = (f(up) - f(dn)) / (2 * h)
    return grad


def gradient_disagreement(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 3))
    ts = random_training(rng, 8, dim)
    kernel = random_kernel(rng, dim)
    nv = 10 ** rng.uniform(-3, -0.5)
    _, g = log_marginal_likelihood(kernel, nv, ts, offset=ts.offset)
    fd = finite_difference_gradient(kernel, nv, ts, ts.offset)
    return float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)))


def test_gradient_matches_finite_differences():
    worst = max(gradient_disagreement(s) for s in range(20))
    assert worst <= 1e-5


# -- fitting -------------------------------------------------------------------------


def test_recovers_lengthscale_of_a_gp_draw():
    truth = SquaredExponential(1.0, (0.3,))
    p = np.linspace(0, 1, 40)
    y = sample_observations(truth, p, 0.01, seed=5)
    model = fit_hyperparameters(TrainingSet(p, y), GpFitConfig(seed=1))
    assert 0.15 <= model.kernel.lengthscales[0] <= 0.6
    assert model.fit_info["converged"]


def test_constant_observations():
    p = np.linspace(0, 1, 6)
    model = fit_hyperparameters(TrainingSet(p, np.full(6, 2.5)))
    assert model.noise_variance < 1e-3 * 2.5**2
    mean, _ = posterior(model, np.linspace(0, 1, 25), full_cov=False)
    np.testing.assert_allclose(mean, 2.5, rtol=1e-3)


def test_single_point_warns_and_returns_prior_like_model():
    with pytest.warns(UserWarning):
        model = fit_hyperparameters(TrainingSet([0.5], [1.2]))
    mean, _ = posterior(model, [0.5], full_cov=False)
    assert mean[0] == pytest.approx(1.2, rel=1e-3)


def test_fit_is_deterministic_given_the_seed(rng):
    ts = random_training(rng, 10)
    a = fit_hyperparameters(ts, GpFitConfig(seed=4))
    b = fit_hyperparameters(ts, GpFitConfig(seed=4))
    assert a.kernel == b.kernel and a.noise_variance == b.noise_variance
    assert a.fit_info["gradient_norm"] <= 1e-3 or not a.fit_info["converged"]


def test_empirical_mean_option():
    ts = TrainingSet([0.0, 0.5, 1.0], [10.0, 10.5, 10.2])
    model = fit_hyperparameters(ts, GpFitConfig(mean="empirical"))
    assert model.offset == pytest.approx(ts.offset)
    with pytest.raises(GpffError):
        fit_hyperparameters(ts, GpFitConfig(mean="linear"))


# -- persistence -----------------------------------------------------------------------


def test_model_json_round_trip(tmp_path, rng):
    ts = random_training(rng, 7, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_hyperparameters(ts)
    model.save(tmp_path / "m.json")
    back = GpModel.load(tmp_path / "m.json")
    q = rng.uniform(0, 1, (5, 2))
    np.testing.assert_array_equal(posterior(model, q)[0], posterior(back, q)[0])
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["schema_version"] == 1
    d["schema_version"] = 99
    with pytest.raises(GpffError):
        GpModel.from_dict(d)


def test_grid_csv(tmp_path):
    save_grid_csv(tmp_path / "g.csv", np.array([0.0, 0.5]), [1.0, 2.0], [0.1, 0.2])
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "rho_0,mean,variance"
    assert lines[2] == "0.5,2.0,0.2"
