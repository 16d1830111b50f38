"""The temperature coordinate: beta(xi), confining walls, kinetic energy, joint density."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ctds.state import AugmentedState, ParticleStreams


@dataclass(frozen=True)
class TemperatureSchedule:
    beta_min: float = 0.2
    delta: float = 0.25
    delta_prime: float = 1.9

    def __post_init__(self):
        if not 0 < self.beta_min <= 1:
            raise ValueError("beta_min must lie in (0, 1]")
        if not 0 < self.delta < self.delta_prime:
            raise ValueError("need 0 < delta < delta_prime")


@dataclass(frozen=True)
class ConfiningPotential:
    eta: float = 10.0
    delta_tilde: float = 2.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")


@dataclass(frozen=True)
class KineticSpec:
    m_x: float = 1.0
    m_xi: float = 1.0

    def __post_init__(self):
        if self.m_x <= 0 or self.m_xi <= 0:
            raise ValueError("masses must be positive")


def beta_of_xi(sched: TemperatureSchedule, xi):
    """Inverse temperature and its derivative.

    ``beta = 1`` for ``|xi| < delta``, ``beta_min`` beyond ``delta_prime``,
    joined by a cubic smoothstep, so ``beta'`` vanishes on both plateaus.
    """
    xi = np.asarray(xi, dtype=np.float64)
    width = sched.delta_prime - sched.delta
    u = np.clip((np.abs(xi) - sched.delta) / width, 0.0, 1.0)
    drop = 1.0 - sched.beta_min
    beta = 1.0 - drop * (3.0 * u**2 - 2.0 * u**3)
    dbeta = -drop * 6.0 * u * (1.0 - u) / width * np.sign(xi) + 0.0  # no negative zeros
    return beta, dbeta


def confining(conf: ConfiningPotential, xi):
    """Quadratic walls outside ``[-delta_tilde, delta_tilde]``; zero inside."""
    xi = np.asarray(xi, dtype=np.float64)
    excess = np.sign(xi) * np.maximum(np.abs(xi) - conf.delta_tilde, 0.0)
    return conf.eta * excess**2, 2.0 * conf.eta * excess


def kinetic(kin: KineticSpec, sched: TemperatureSchedule, xi, px, pxi):
    """``K = beta(xi)|px|^2 / 2 M_x + pxi^2 / 2 M_xi`` and its partials.

    Returns ``(K, dK/dpx, dK/dpxi, dK/dxi)``.
    """
    beta, dbeta = beta_of_xi(sched, xi)
    px = np.asarray(px, dtype=np.float64)
    pxi = np.asarray(pxi, dtype=np.float64)
    sq = np.sum(px**2, axis=-1)
    k = beta * sq / (2.0 * kin.m_x) + pxi**2 / (2.0 * kin.m_xi)
    grad_px = beta[..., None] * px / kin.m_x
    grad_pxi = pxi / kin.m_xi
    dk_dxi = dbeta * sq / (2.0 * kin.m_x)
    return k, grad_px, grad_pxi, dk_dxi


@dataclass
class JointEnergy:
    value: np.ndarray
    grad_x: np.ndarray
    dxi: np.ndarray
    dt: np.ndarray


def joint_energy(path, models, conf: ConfiningPotential, x, xi, t):
    """Energy of the joint ``(x, xi)`` density at time ``t``.

    ``U~ = U_t^xi(x) - F_theta(t, xi) + psi_conf(xi)``: subtracting the learned
    free energy flattens the xi-marginal toward ``exp(-psi_conf)`` as the
    estimate improves, and the walls keep xi near the tempering range.
    """
    if not path.continuum:
        raise ValueError("joint energy needs a continuum path")
    pe = path.energy(x, t, xi)
    fe = models.free_energy.evaluate(t, xi, batch=np.shape(x)[0])
    psi, dpsi = confining(conf, xi)
    return JointEnergy(
        value=pe.value - fe.value + psi,
        grad_x=pe.grad_x,
        dxi=pe.dxi - fe.dxi + dpsi,
        dt=pe.dt - fe.dt,
    )


def xi_grid(conf: ConfiningPotential, size=4096, pad=2.0):
    lim = conf.delta_tilde + pad
    return np.linspace(-lim, lim, size)


def xi_marginal_t0(path, models, conf: ConfiningPotential, grid):
    """Unnormalised log xi-marginal of the joint density at ``t = 0``.

    Integrating ``exp(-U~_0)`` over x leaves ``exp(-F_0(xi) + F_theta(0, xi) - psi(xi))``.
    """
    beta, _ = beta_of_xi(path.schedule, grid)
    f0 = path.source.free_energy(beta)
    fe = models.free_energy.evaluate(0.0, grid, batch=grid.size)
    psi, _ = confining(conf, grid)
    return -f0 + fe.value - psi


def sample_pi_dagger(path, models, conf: ConfiningPotential, kin: KineticSpec, n, seed, grid_size=4096):
    """Draw ``n`` extended states ``(x, xi, px, pxi)`` at ``t = 0``.

    xi comes from the numerically normalised marginal by inverse CDF on a
    grid; x, px and pxi are then conditionally Gaussian.
    """
    grid = xi_grid(conf, grid_size)
    logm = xi_marginal_t0(path, models, conf, grid)
    dens = np.exp(logm - logm.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    if not np.all(np.isfinite(cdf)) or cdf[-1] <= 0:
        raise ValueError("xi marginal is not normalisable on the grid")
    # far-tail increments can vanish below float resolution; keep the strictly increasing knots
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    if keep.sum() < 2:
        raise ValueError("xi marginal CDF has no resolved mass; refine the grid")
    cdf, grid = cdf[keep] / cdf[-1], grid[keep]
    streams = ParticleStreams(seed, n, channels=("init_xi", "init_x", "init_px", "init_pxi"))
    xi = np.interp(streams.uniform("init_xi"), cdf, grid)
    beta, _ = beta_of_xi(path.schedule, xi)
    d = path.dim
    x = streams.normal("init_x", (d,)) * np.sqrt(path.source.sigma2 / beta)[:, None]
    px = streams.normal("init_px", (d,)) * np.sqrt(kin.m_x / beta)[:, None]
    pxi = streams.normal("init_pxi") * np.sqrt(kin.m_xi)
    return AugmentedState(x=x, t=0.0, xi=xi, px=px, pxi=pxi)
