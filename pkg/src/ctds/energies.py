"""Source and target densities, density paths and continuums, and the Gaussian oracle.

Energies follow ``U = -log(unnormalised density)`` and free energies
``F = -log Z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ctds.models import ControlEval, FreeEnergyEval, Models
from ctds.tempering import TemperatureSchedule, beta_of_xi

PATH_KINDS = ("linear", "learned", "linear-continuum", "learned-continuum")


@dataclass
class GaussianSource:
    """``N(0, sigma2 * I)``; tempered by beta its variance becomes ``sigma2 / beta``."""

    sigma2: float = 5.0
    dim: int = 2

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("source variance must be positive")

    def energy(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.sum(x**2, axis=-1) / (2.0 * self.sigma2), x / self.sigma2

    def free_energy(self, beta=1.0):
        return -0.5 * self.dim * np.log(2.0 * np.pi * self.sigma2 / np.asarray(beta, dtype=np.float64))

    def dfree_energy_dbeta(self, beta):
        return 0.5 * self.dim / np.asarray(beta, dtype=np.float64)

    def log_density(self, x, beta=1.0):
        u, _ = self.energy(x)
        return -beta * u + self.free_energy(beta)

    def sample(self, n, rng):
        return np.sqrt(self.sigma2) * rng.standard_normal((n, self.dim))


@dataclass
class GaussianEnergy:
    """Unnormalised isotropic Gaussian target ``exp(-|x|^2 / 2 sigma2)``."""

    sigma2: float
    dim: int = 2

    def energy(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.sum(x**2, axis=-1) / (2.0 * self.sigma2), x / self.sigma2

    def log_z(self):
        return 0.5 * self.dim * np.log(2.0 * np.pi * self.sigma2)

    def log_density(self, x):
        """Return ``(log pi(x), grad log pi(x))`` of the normalised density."""
        u, g = self.energy(x)
        return -u - self.log_z(), -g

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        return np.sqrt(self.sigma2) * rng.standard_normal((n, self.dim))


class GaussianMixtureTarget:
    """Equal-width isotropic Gaussian mixture, normalised (``log Z = 0``)."""

    def __init__(self, means, std=0.25, weights=None, mean_seed=None):
        self.means = np.asarray(means, dtype=np.float64)
        k, self.dim = self.means.shape
        self.std = float(std)
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if not np.isclose(w.sum(), 1.0) or np.any(w < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        self.weights = w
        self.mean_seed = mean_seed

    @classmethod
    def gmm40(cls, seed=0, n_modes=40, box=40.0, std=0.25, dim=2):
        """Means i.i.d. uniform on ``[-box, box]^dim`` drawn from ``seed``."""
        rng = np.random.default_rng(seed)
        means = rng.uniform(-box, box, size=(n_modes, dim))
        return cls(means, std=std, mean_seed=seed)

    def to_dict(self):
        return {"means": self.means.tolist(), "std": self.std, "weights": self.weights.tolist(),
                "mean_seed": self.mean_seed}

    def _log_components(self, x):
        diff = x[:, None, :] - self.means[None]
        sq = np.sum(diff**2, axis=-1)
        var = self.std**2
        log_norm = -0.5 * self.dim * np.log(2.0 * np.pi * var)
        return np.log(self.weights)[None] - sq / (2.0 * var) + log_norm, diff

    def log_density(self, x):
        """Return ``(log pi(x), grad log pi(x))``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logc, diff = self._log_components(x)
        lp = logsumexp(logc, axis=1)
        resp = np.exp(logc - lp[:, None])
        grad = -np.einsum("bk,bkd->bd", resp, diff) / self.std**2
        return lp, grad

    def energy(self, x):
        lp, g = self.log_density(x)
        return -lp, -g

    def log_z(self):
        return 0.0

    def sample(self, n, seed):
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.std * rng.standard_normal((n, self.dim))


def target_log_density(target, x):
    """Normalised log-density of ``target`` at ``x`` (values only)."""
    return target.log_density(x)[0]


def target_sample(target, n, seed):
    return target.sample(n, seed)


@dataclass
class PathEnergy:
    value: np.ndarray
    grad_x: np.ndarray
    dt: np.ndarray
    dxi: np.ndarray
    beta: np.ndarray
    t: np.ndarray
    correction: object = None


class PathSpec:
    """A density path (single temperature) or continuum (indexed by xi).

    Continuum energies are exactly ``beta(xi)`` times the ``beta = 1`` path
    energy, with the source at ``beta`` being ``N(0, sigma2 / beta I)``.
    """

    def __init__(self, kind, source, target, correction=None, schedule=None):
        if kind not in PATH_KINDS:
            raise ValueError(f"unknown path kind {kind!r}")
        if kind.startswith("learned") and correction is None:
            raise ValueError("learned paths need a correction network")
        self.kind = kind
        self.source = source
        self.target = target
        self.correction = correction if kind.startswith("learned") else None
        self.schedule = schedule or TemperatureSchedule()

    @property
    def continuum(self):
        return self.kind.endswith("continuum")

    @property
    def learned(self):
        return self.correction is not None

    @property
    def dim(self):
        return self.source.dim

    def energy(self, x, t, xi=None, record=False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        t = np.asarray(t, dtype=np.float64)
        t = np.full(n, float(t)) if t.ndim == 0 else t.reshape(n)
        if self.continuum:
            if xi is None:
                raise ValueError("continuum energy needs xi")
            xi = np.broadcast_to(np.asarray(xi, dtype=np.float64), (n,))
            beta, dbeta = beta_of_xi(self.schedule, xi)
        else:
            beta, dbeta = np.ones(n), np.zeros(n)
        u0, g0 = self.source.energy(x)
        u1, g1 = self.target.energy(x)
        u = (1.0 - t) * u0 + t * u1
        g = (1.0 - t)[:, None] * g0 + t[:, None] * g1
        dt = u1 - u0
        ce = None
        if self.correction is not None:
            ce = self.correction.evaluate(x, t, record=record)
            c = t * (1.0 - t)
            u = u + c * ce.value
            g = g + c[:, None] * ce.grad_x
            dt = dt + (1.0 - 2.0 * t) * ce.value + c * ce.dt
        return PathEnergy(beta * u, beta[:, None] * g, beta * dt, dbeta * u, beta, t, ce)

    def backward(self, pe: PathEnergy, g_value=None, g_grad_x=None, g_dt=None):
        """Gradient of a loss w.r.t. the correction parameters, given loss
        derivatives w.r.t. ``pe.value``, ``pe.grad_x`` and ``pe.dt``."""
        if pe.correction is None or pe.correction.tape is None:
            raise ValueError("path energy was not recorded with a correction network")
        n = pe.t.shape[0]
        t, beta = pe.t, pe.beta
        c = t * (1.0 - t)
        gv = np.zeros(n) if g_value is None else g_value
        gg = np.zeros((n, self.dim)) if g_grad_x is None else g_grad_x
        gd = np.zeros(n) if g_dt is None else g_dt
        return self.correction.backward(
            pe.correction,
            g_value=beta * (gv * c + gd * (1.0 - 2.0 * t)),
            g_grad_x=(beta * c)[:, None] * gg,
            g_dt=beta * c * gd,
        )


def path_energy(path: PathSpec, x, t, xi=None):
    """Return ``(U, grad_x U, dU/dt, dU/dxi)``."""
    pe = path.energy(x, t, xi)
    return pe.value, pe.grad_x, pe.dt, pe.dxi


class GaussianOracle:
    """Linear energy path between isotropic Gaussians, solvable in closed form.

    ``1 / sigma_t^2 = (1 - t) / sigma0^2 + t / sigma1^2``; the exact control is
    ``(dsigma_t/dt / sigma_t) x`` and the free energy ``-d/2 log(2 pi sigma_t^2 / beta)``.
    """

    def __init__(self, sigma0=1.0, sigma1=2.0, dim=2):
        self.sigma0, self.sigma1, self.dim = float(sigma0), float(sigma1), int(dim)
        if self.sigma0 <= 0 or self.sigma1 <= 0:
            raise ValueError("sigmas must be positive")
        self.source = GaussianSource(self.sigma0**2, self.dim)
        self.target = GaussianEnergy(self.sigma1**2, self.dim)

    def path(self, kind="linear", correction=None, schedule=None):
        return PathSpec(kind, self.source, self.target, correction, schedule)

    def sigma2(self, t):
        t = np.asarray(t, dtype=np.float64)
        return 1.0 / ((1.0 - t) / self.sigma0**2 + t / self.sigma1**2)

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))

    def sigma_dot(self, t):
        s = self.sigma(t)
        return -0.5 * s**3 * (1.0 / self.sigma1**2 - 1.0 / self.sigma0**2)

    def free_energy(self, t, beta=1.0):
        return -0.5 * self.dim * np.log(2.0 * np.pi * self.sigma2(t) / np.asarray(beta, dtype=np.float64))

    def free_energy_dt(self, t):
        return -self.dim * self.sigma_dot(t) / self.sigma(t)

    def partition_ratio(self, t0=0.0, t1=1.0):
        return float(np.exp(self.free_energy(t0) - self.free_energy(t1)))


def oracle_exact_control(oracle: GaussianOracle, x, t):
    """Return ``(mu*, div mu*)`` at ``(x, t)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    rate = np.broadcast_to(oracle.sigma_dot(t) / oracle.sigma(t), (x.shape[0],))
    return rate[:, None] * x, oracle.dim * rate


def oracle_free_energy(oracle: GaussianOracle, t):
    """Return ``(F_t, dF_t/dt)`` with ``F = -log Z``."""
    return oracle.free_energy(t), oracle.free_energy_dt(t)


class OracleControl:
    """Exact control of a :class:`GaussianOracle`, usable wherever a ControlNet is."""

    def __init__(self, oracle: GaussianOracle, continuum=False):
        self.oracle = oracle
        self.continuum = continuum

    def evaluate(self, x, t, xi=None, beta=None, record=False, time_derivative=False):
        mu, div = oracle_exact_control(self.oracle, x, t)
        d = self.oracle.dim
        jac = div[:, None, None] / d * np.eye(d)
        return ControlEval(mu, div, jac)

    def __call__(self, x, t, xi=None, beta=None):
        return oracle_exact_control(self.oracle, x, t)


class OracleFreeEnergy:
    """Exact (tempered) free energy of a :class:`GaussianOracle`."""

    def __init__(self, oracle: GaussianOracle, schedule=None, continuum=False):
        self.oracle = oracle
        self.schedule = schedule or TemperatureSchedule()
        self.continuum = continuum
        self.source = oracle.source

    def evaluate(self, t, xi=None, batch=None, record=False, xi_derivative=None):
        if batch is None:
            batch = np.size(xi) if xi is not None else np.size(t)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,)).copy()
        if self.continuum:
            beta, dbeta = beta_of_xi(self.schedule, np.broadcast_to(xi, (batch,)))
        else:
            beta, dbeta = np.ones(batch), np.zeros(batch)
        value = self.oracle.free_energy(t, beta)
        dt = self.oracle.free_energy_dt(t) * np.ones(batch)
        dxi = 0.5 * self.oracle.dim / beta * dbeta
        return FreeEnergyEval(value, dt, dxi, t)


def oracle_models(oracle: GaussianOracle, continuum=False, schedule=None):
    """Exact control and free energy packaged like trained :class:`Models`."""
    return Models(OracleControl(oracle, continuum), OracleFreeEnergy(oracle, schedule, continuum))
