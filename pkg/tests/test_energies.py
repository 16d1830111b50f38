import numpy as np
import pytest
from scipy import stats

from conftest import central_diff, rel_err, small_models, small_path
from ctds.energies import (
    GaussianMixtureTarget,
    GaussianOracle,
    GaussianSource,
    PathSpec,
    oracle_exact_control,
    oracle_free_energy,
    oracle_models,
    path_energy,
    target_log_density,
    target_sample,
)
from ctds.tempering import TemperatureSchedule, beta_of_xi
from ctds.training import pinn_residual


def test_gmm40_layout():
    g = GaussianMixtureTarget.gmm40(seed=11)
    assert g.means.shape == (40, 2)
    assert np.all(np.abs(g.means) <= 40)
    assert g.weights.sum() == pytest.approx(1.0)
    assert g.std == 0.25


def test_log_density_at_isolated_mode():
    g = GaussianMixtureTarget.gmm40(seed=0)
    d = np.linalg.norm(g.means[:, None] - g.means[None], axis=-1) + np.eye(40) * 1e9
    k = int(np.argmax(d.min(axis=1)))
    lp, grad = g.log_density(g.means[k][None])
    expected = np.log(1 / 40) + np.log(1 / (2 * np.pi * 0.0625))
    assert expected == pytest.approx(-2.754, abs=1e-3)
    assert lp[0] == pytest.approx(expected, abs=1e-3)
    assert np.linalg.norm(grad) < 1e-3


def test_log_density_gradient_fd(rng):
    g = GaussianMixtureTarget.gmm40(seed=0, box=3.0, std=0.6)
    for _ in range(20):
        x = rng.uniform(-3, 3, size=2)
        fd = central_diff(lambda v: g.log_density(v[None])[0][0], x, 1e-6)
        assert rel_err(g.log_density(x[None])[1][0], fd) < 1e-6


def test_mixture_normalised():
    g = GaussianMixtureTarget.gmm40(seed=0, n_modes=5, box=2.0, std=0.5)
    grid = np.linspace(-6, 6, 601)
    X, Y = np.meshgrid(grid, grid)
    lp = target_log_density(g, np.stack([X.ravel(), Y.ravel()], 1))
    assert np.exp(lp).sum() * (grid[1] - grid[0]) ** 2 == pytest.approx(1.0, abs=1e-6)


def test_sample_counts_and_determinism():
    g = GaussianMixtureTarget.gmm40(seed=0)
    n = 200_000
    x = target_sample(g, n, seed=5)
    assert np.array_equal(x, target_sample(g, n, seed=5))
    nearest = np.argmin(((x[:, None] - g.means[None]) ** 2).sum(-1), axis=1)
    counts = np.bincount(nearest, minlength=40)
    sd = np.sqrt(n * (1 / 40) * (39 / 40))
    assert np.all(np.abs(counts - n / 40) < 4 * sd)


def test_sample_small_std_hits_means():
    g = GaussianMixtureTarget.gmm40(seed=0, std=1e-12)
    x = g.sample(100, 1)
    assert np.min(((x[:, None] - g.means[None]) ** 2).sum(-1), axis=1).max() < 1e-20


@pytest.mark.parametrize("kind", ["linear", "learned", "linear-continuum", "learned-continuum"])
def test_path_boundaries(kind, small_mixture, rng):
    models = small_models(continuum=kind.endswith("continuum"), learned=kind.startswith("learned"))
    path = small_path(models, small_mixture, kind)
    x = rng.normal(size=(20, 2))
    xi = rng.uniform(-3, 3, size=20) if path.continuum else None
    beta = beta_of_xi(path.schedule, xi)[0] if path.continuum else 1.0
    u0 = path.energy(x, 0.0, xi).value
    u1 = path.energy(x, 1.0, xi).value
    assert np.allclose(u0, beta * path.source.energy(x)[0], rtol=1e-14, atol=1e-14)
    assert np.allclose(u1, beta * small_mixture.energy(x)[0], rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("kind", ["linear", "learned", "linear-continuum", "learned-continuum"])
def test_path_partials_fd(kind, small_mixture, rng):
    models = small_models(continuum=kind.endswith("continuum"), learned=kind.startswith("learned"))
    path = small_path(models, small_mixture, kind)
    for _ in range(20):
        x, t, xi = rng.normal(size=2), rng.uniform(0.05, 0.95), rng.uniform(-2.8, 2.8)
        xiv = np.array([xi]) if path.continuum else None
        u, g, dt, dxi = path_energy(path, x[None], t, xiv)
        assert rel_err(g[0], central_diff(lambda v: path.energy(v[None], t, xiv).value[0], x)) < 1e-5
        assert rel_err(dt[0], central_diff(lambda v: path.energy(x[None], v[0], xiv).value[0], np.array([t]))) < 1e-5
        if path.continuum:
            fd = central_diff(lambda v: path.energy(x[None], t, v).value[0], np.array([xi]))
            assert rel_err(dxi[0], fd) < 1e-5


def test_continuum_requires_xi(oracle):
    with pytest.raises(ValueError):
        oracle.path("linear-continuum").energy(np.zeros((1, 2)), 0.5)


def test_learned_requires_correction(oracle):
    with pytest.raises(ValueError):
        PathSpec("learned", oracle.source, oracle.target)


def test_continuum_at_beta_one_equals_path(small_mixture, rng):
    m = small_models(continuum=True, learned=True)
    single = PathSpec("learned", m.free_energy.source, small_mixture, m.correction)
    cont = PathSpec("learned-continuum", m.free_energy.source, small_mixture, m.correction)
    x, t = rng.normal(size=(10, 2)), rng.uniform(size=10)
    a, b = single.energy(x, t), cont.energy(x, t, np.full(10, 0.1))
    assert np.array_equal(a.value, b.value) and np.array_equal(a.grad_x, b.grad_x)


def test_linear_path_affine_in_t(small_mixture, rng):
    path = PathSpec("linear", GaussianSource(5.0, 2), small_mixture)
    x = rng.normal(size=(10, 2))
    a, b = 0.2, 0.9
    mid = path.energy(x, (a + b) / 2).value
    assert np.allclose(mid, (path.energy(x, a).value + path.energy(x, b).value) / 2, rtol=1e-13)


def test_zero_correction_reduces_to_linear(small_mixture, rng):
    m = small_models(learned=True)
    m.correction.net.params[:] = 0.0
    learned = small_path(m, small_mixture, "learned")
    linear = PathSpec("linear", m.free_energy.source, small_mixture)
    x, t = rng.normal(size=(10, 2)), rng.uniform(size=10)
    assert np.array_equal(learned.energy(x, t).value, linear.energy(x, t).value)


def test_tempered_scaling(small_mixture, rng):
    path = PathSpec("linear-continuum", GaussianSource(5.0, 2), small_mixture)
    x, t, xi = rng.normal(size=(10, 2)), rng.uniform(size=10), rng.uniform(-3, 3, 10)
    beta = beta_of_xi(TemperatureSchedule(), xi)[0]
    one = PathSpec("linear", GaussianSource(5.0, 2), small_mixture)
    lhs = path.energy(x, t, xi).value - path.energy(np.zeros_like(x), t, xi).value
    rhs = beta * (one.energy(x, t).value - one.energy(np.zeros_like(x), t).value)
    assert np.allclose(lhs, rhs, rtol=1e-13)


def test_oracle_path_closed_form(oracle, rng):
    path = oracle.path()
    x, t = rng.normal(size=(30, 2)), rng.uniform(size=30)
    pe = path.energy(x, t)
    sq = np.sum(x**2, 1)
    s = oracle.sigma(t)
    assert np.allclose(pe.value, sq / (2 * s**2), rtol=1e-8)
    assert np.allclose(pe.dt, -sq * oracle.sigma_dot(t) / s**3, rtol=1e-8)


def test_oracle_residual_vanishes(oracle, rng):
    x, t = rng.normal(scale=2, size=(50, 2)), rng.uniform(size=50)
    assert np.abs(pinn_residual(oracle_models(oracle), oracle.path(), x, t)).max() < 1e-10


def test_oracle_static_path():
    o = GaussianOracle(1.5, 1.5, 2)
    mu, div = oracle_exact_control(o, np.ones((3, 2)), 0.4)
    assert np.all(mu == 0) and np.all(div == 0)
    f, df = oracle_free_energy(o, np.linspace(0, 1, 5))
    assert np.allclose(f, f[0]) and np.all(df == 0)


def test_oracle_partition_ratio(oracle):
    assert oracle.partition_ratio() == pytest.approx(4.0, rel=1e-14)
    assert oracle_free_energy(oracle, 0.0)[0] == pytest.approx(-np.log(2 * np.pi), rel=1e-14)
    t = np.linspace(0.01, 0.99, 7)
    fd = (oracle.free_energy(t + 1e-6) - oracle.free_energy(t - 1e-6)) / 2e-6
    assert np.allclose(oracle.free_energy_dt(t), fd, rtol=1e-7)


def test_source_sampling_matches_density():
    src = GaussianSource(5.0, 2)
    x = src.sample(50_000, np.random.default_rng(0))
    assert stats.kstest(x.ravel() / np.sqrt(5.0), "norm").pvalue > 0.01
    assert src.log_density(np.zeros((1, 2)))[0] == pytest.approx(-np.log(2 * np.pi * 5.0))
