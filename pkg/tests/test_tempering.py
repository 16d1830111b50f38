import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import central_diff, rel_err, small_models, small_path
from ctds.energies import oracle_models
from ctds.models import Models, AnchorFreeEnergy, ZeroControl
from ctds.tempering import (
    ConfiningPotential,
    KineticSpec,
    TemperatureSchedule,
    beta_of_xi,
    confining,
    joint_energy,
    kinetic,
    sample_pi_dagger,
    xi_grid,
    xi_marginal_t0,
)

SCHED = TemperatureSchedule()
CONF = ConfiningPotential()


def test_beta_spot_values():
    b, db = beta_of_xi(SCHED, 0.0)
    assert b == 1.0 and db == 0.0
    assert beta_of_xi(SCHED, 1.075)[0] == pytest.approx(0.6, abs=1e-12)
    b, db = beta_of_xi(SCHED, np.array([3.0, -3.0]))
    assert np.allclose(b, 0.2, rtol=0, atol=1e-15) and np.all(db == 0.0)


def test_beta_monotone_range_and_c1():
    xi = np.linspace(0, 5, 20001)
    b, db = beta_of_xi(SCHED, xi)
    assert np.all(np.diff(b) <= 0)
    assert b.min() == pytest.approx(0.2) and b.max() == 1.0
    pts = np.concatenate([np.linspace(-4, 4, 401), [0.25, 1.9, -0.25, -1.9]])
    fd = (beta_of_xi(SCHED, pts + 1e-7)[0] - beta_of_xi(SCHED, pts - 1e-7)[0]) / 2e-7
    assert np.max(np.abs(fd - beta_of_xi(SCHED, pts)[1])) < 1e-6


def test_schedule_validation():
    with pytest.raises(ValueError):
        TemperatureSchedule(beta_min=0.0)
    with pytest.raises(ValueError):
        TemperatureSchedule(delta=2.0, delta_prime=1.0)


def test_confining_values():
    assert confining(CONF, 1.0)[0] == 0.0
    psi, dpsi = confining(CONF, 2.5)
    assert psi == 2.5 and dpsi == 10.0


@given(st.floats(-10, 10))
def test_confining_even_nonnegative(xi):
    a, da = confining(CONF, xi)
    b, db = confining(CONF, -xi)
    assert a == b and a >= 0 and da == -db
    if abs(xi) <= 2.0:
        assert a == 0.0


def test_confining_c1_at_walls():
    for xi in (2.0, -2.0):
        fd = (confining(CONF, xi + 1e-7)[0] - confining(CONF, xi - 1e-7)[0]) / 2e-7
        assert abs(fd - confining(CONF, xi)[1]) < 1e-6


def test_kinetic_values():
    kin = KineticSpec()
    k, gp, gq, dxi = kinetic(kin, SCHED, np.array([0.0]), np.array([[3.0, 4.0]]), np.array([0.0]))
    assert k[0] == 12.5
    k, gp, gq, dxi = kinetic(kin, SCHED, np.array([1.0]), np.zeros((1, 2)), np.zeros(1))
    assert k[0] == 0 and np.all(gp == 0) and np.all(gq == 0) and np.all(dxi == 0)
    _, _, _, dxi = kinetic(kin, SCHED, np.array([0.1, 3.0]), np.ones((2, 2)), np.ones(2))
    assert np.all(dxi == 0)


def test_kinetic_partials_match_fd(rng):
    kin = KineticSpec(1.3, 0.7)
    for _ in range(20):
        xi, px, pxi = rng.uniform(-3, 3), rng.normal(size=2), rng.normal()
        _, gp, gq, dxi = kinetic(kin, SCHED, np.array([xi]), px[None], np.array([pxi]))
        f = lambda v: kinetic(kin, SCHED, np.array([v[0]]), v[1:3][None], np.array([v[3]]))[0][0]
        fd = central_diff(f, np.array([xi, *px, pxi]), 1e-6)
        assert rel_err([dxi[0], *gp[0], gq[0]], fd) < 1e-6


def test_joint_energy_requires_continuum(oracle):
    with pytest.raises(ValueError):
        joint_energy(oracle.path(), oracle_models(oracle), CONF, np.zeros((1, 2)), np.zeros(1), 0.5)


def test_joint_energy_partials_match_fd(small_mixture, rng):
    models = small_models(continuum=True, learned=True)
    path = small_path(models, small_mixture, "learned-continuum")
    kin = KineticSpec()
    for _ in range(20):
        x, xi, t = rng.normal(size=2), rng.uniform(-2.8, 2.8), rng.uniform(0.05, 0.95)
        px, pxi = rng.normal(size=2), rng.normal()
        je = joint_energy(path, models, CONF, x[None], np.array([xi]), t)
        f = lambda v: joint_energy(path, models, CONF, v[:2][None], np.array([v[2]]), v[3]).value[0]
        fd = central_diff(f, np.array([*x, xi, t]), 1e-5)
        assert rel_err(je.grad_x[0], fd[:2]) < 1e-5
        assert rel_err(je.dxi[0], fd[2]) < 1e-5
        assert rel_err(je.dt[0], fd[3]) < 1e-5
        # Hamiltonian decomposition
        h = lambda v: (joint_energy(path, models, CONF, x[None], np.array([v[0]]), t).value
                       + kinetic(kin, SCHED, np.array([v[0]]), px[None], np.array([pxi]))[0])[0]
        dk = kinetic(kin, SCHED, np.array([xi]), px[None], np.array([pxi]))[3][0]
        assert rel_err(je.dxi[0] + dk, central_diff(h, np.array([xi]), 1e-5)) < 1e-5


def _x_marginal_log(path, models, xi, t):
    """log of the x-integral of exp(-U~) by 2-D quadrature."""
    g = np.linspace(-32, 32, 1025)
    X, Y = np.meshgrid(g, g)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    je = joint_energy(path, models, CONF, pts, np.full(pts.shape[0], xi), t)
    m = -je.value
    return np.log(np.sum(np.exp(m - m.max()))) + m.max() + 2 * np.log(g[1] - g[0])


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0])
def test_perfect_free_energy_flattens_xi_marginal(oracle, t):
    """Exact F: integrating exp(-U~) over x leaves exp(-psi_conf(xi))."""
    path = oracle.path("linear-continuum")
    models = oracle_models(oracle, continuum=True)
    for xi in (0.0, 1.0, 1.5, 2.3, 2.6):
        expected = -confining(CONF, xi)[0]
        assert _x_marginal_log(path, models, xi, t) == pytest.approx(expected, abs=1e-6)


def test_anchor_only_at_t0_integrates_to_walls(oracle):
    path = oracle.path("linear-continuum")
    models = Models(ZeroControl(2, True), AnchorFreeEnergy(oracle.source, continuum=True))
    for xi in (-2.4, 0.3, 1.2):
        assert _x_marginal_log(path, models, xi, 0.0) == pytest.approx(-confining(CONF, xi)[0], abs=1e-6)


def test_pi_dagger_moments(oracle):
    path = oracle.path("linear-continuum")
    models = oracle_models(oracle, continuum=True)
    kin = KineticSpec(1.0, 1.5)
    n = 100_000
    s = sample_pi_dagger(path, models, CONF, kin, n, seed=4)
    v = s.pxi.var()
    assert abs(v - 1.5) < 3 * 1.5 * np.sqrt(2 / n)
    beta = beta_of_xi(SCHED, s.xi)[0]
    # conditionally Gaussian blocks, standardised by their beta-dependent scales
    zx = s.x * np.sqrt(beta)[:, None] / oracle.sigma0
    zp = s.px * np.sqrt(beta / kin.m_x)[:, None]
    for z in (zx.ravel(), zp.ravel()):
        assert abs(z.var() - 1) < 3 * np.sqrt(2 / z.size)
    assert s.t == 0.0 and np.all(s.work == 0)


def test_pi_dagger_xi_histogram_matches_grid(oracle):
    path = oracle.path("linear-continuum")
    models = oracle_models(oracle, continuum=True)
    n = 50_000
    s = sample_pi_dagger(path, models, CONF, KineticSpec(), n, seed=9)
    grid = xi_grid(CONF)
    dens = np.exp(xi_marginal_t0(path, models, CONF, grid))
    cdf = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
    cdf /= cdf[-1]
    edges = np.linspace(-3.2, 3.2, 33)
    probs = np.diff(np.interp(edges, grid, cdf))
    counts, _ = np.histogram(s.xi, edges)
    outside = n - counts.sum()
    obs = np.append(counts, outside)
    exp = np.append(probs, max(1 - probs.sum(), 0)) * n
    keep = exp > 5
    chi2 = np.sum((obs[keep] - exp[keep]) ** 2 / exp[keep])
    assert stats.chi2.sf(chi2, keep.sum() - 1) > 0.01


def test_pi_dagger_degenerate_schedule_is_source(oracle):
    sched = TemperatureSchedule(beta_min=1.0)
    path = oracle.path("linear-continuum", schedule=sched)
    models = Models(ZeroControl(2, True), AnchorFreeEnergy(oracle.source, sched, continuum=True))
    s = sample_pi_dagger(path, models, CONF, KineticSpec(), 20_000, seed=1)
    assert stats.kstest(s.x.ravel(), "norm").pvalue > 0.01


def test_pi_dagger_first_particles_independent_of_n(oracle):
    path = oracle.path("linear-continuum")
    models = oracle_models(oracle, continuum=True)
    a = sample_pi_dagger(path, models, CONF, KineticSpec(), 700, seed=2)
    b = sample_pi_dagger(path, models, CONF, KineticSpec(), 1500, seed=2)
    assert np.array_equal(a.x, b.x[:700]) and np.array_equal(a.xi, b.xi[:700])
