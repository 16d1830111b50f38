"""Proposal dynamics: Euler(-Maruyama) integrators with work accumulation.

Four schemes share one state layout:

* ``baseline``     -- ``dx = mu dt``
* ``overdamped``   -- ``dx = (mu - eps grad U) dt + sqrt(2 eps) dW``
* ``underdamped``  -- position/momentum Langevin with control on x
* ``ctds``         -- underdamped Langevin on ``(x, xi)`` under the
  non-separable Hamiltonian ``U~(x, xi) + beta(xi)|p_x|^2/2M_x + p_xi^2/2M_xi``

Each step also adds the left-point work increment
``(div mu - dU/dt - mu . grad_x U) dt``, with ``U`` replaced by the joint
energy for ``ctds``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from ctds.state import AugmentedState, ParticleStreams
from ctds.tempering import (
    ConfiningPotential,
    KineticSpec,
    joint_energy,
    kinetic,
    sample_pi_dagger,
)

log = logging.getLogger(__name__)

SCHEMES = ("baseline", "overdamped", "underdamped", "ctds")


@dataclass
class IntegratorConfig:
    """Step size and coefficients.  ``epsilon`` is the overdamped noise scale
    or the underdamped damping, depending on ``scheme``."""

    scheme: str
    dt: float = 0.002
    epsilon: float = 50.0
    gamma: float = 50.0
    gamma_xi: float = 5.0
    epsilon_xi: float = 2.0
    mass_x: float = 1.0
    mass_xi: float = 1.0
    confining: ConfiningPotential = field(default_factory=ConfiningPotential)
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("epsilon", "gamma", "gamma_xi", "epsilon_xi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mass_x <= 0 or self.mass_xi <= 0:
            raise ValueError("masses must be positive")

    @classmethod
    def preset(cls, scheme, **kw):
        """Coefficients used for the 40-mode mixture proposals."""
        defaults = {
            "baseline": {},
            "overdamped": {"epsilon": 50.0},
            "underdamped": {"gamma": 50.0, "epsilon": 2.0},
            "ctds": {"gamma": 50.0, "epsilon": 2.0, "gamma_xi": 5.0, "epsilon_xi": 2.0},
        }[scheme]
        return cls(scheme, **{**defaults, **kw})

    @property
    def kinetic(self):
        return KineticSpec(self.mass_x, self.mass_xi)

    def n_steps(self, horizon):
        n = int(round(horizon / self.dt))
        if n < 1 or abs(n * self.dt - horizon) > 1e-9 * max(1.0, horizon):
            raise ValueError(f"horizon {horizon} is not a multiple of dt {self.dt}")
        return n


def _control(models, x, t, xi=None):
    ev = models.control.evaluate(x, t, xi) if models.control.continuum else models.control.evaluate(x, t)
    return ev.mu, ev.div


def _rowdot(a, b):
    return np.einsum("nd,nd->n", a, b)


def _work_increment(div, e_dt, mu, grad_x, dt):
    """``(div mu - dU/dt - mu . grad_x U) dt`` at the left point of a step."""
    return (div - e_dt - _rowdot(mu, grad_x)) * dt


def _new_state(state, dt, **changes):
    return replace(state, t=state.t + dt, **changes)


def step_baseline(state, path, models, dt, track_work=True):
    mu, div = _control(models, state.x, state.t, state.xi)
    work = state.work
    if track_work:
        pe = path.energy(state.x, state.t, state.xi)
        work = work + _work_increment(div, pe.dt, mu, pe.grad_x, dt)
    return _new_state(state, dt, x=state.x + mu * dt, work=work)


def step_overdamped(state, path, models, cfg: IntegratorConfig, rng: ParticleStreams, track_work=True):
    if path.continuum:
        raise ValueError("overdamped proposal runs on a single-temperature path")
    dt, eps = cfg.dt, cfg.epsilon
    mu, div = _control(models, state.x, state.t)
    pe = path.energy(state.x, state.t)
    z = rng.normal("x", (path.dim,))
    x = state.x + (mu + eps * -pe.grad_x) * dt + np.sqrt(2.0 * eps * dt) * z
    work = state.work
    if track_work:
        work = work + _work_increment(div, pe.dt, mu, pe.grad_x, dt)
    return _new_state(state, dt, x=x, work=work)


def step_underdamped(state, path, models, cfg: IntegratorConfig, rng: ParticleStreams, track_work=True):
    if path.continuum:
        raise ValueError("underdamped proposal runs on a single-temperature path")
    dt, gamma, eps = cfg.dt, cfg.gamma, cfg.epsilon
    mu, div = _control(models, state.x, state.t)
    pe = path.energy(state.x, state.t)
    v = state.px / cfg.mass_x
    z = rng.normal("x", (path.dim,))
    x = state.x + (mu + gamma * v) * dt
    px = state.px + gamma * (-pe.grad_x - eps * v) * dt + np.sqrt(2.0 * gamma * eps * dt) * z
    work = state.work
    if track_work:
        work = work + _work_increment(div, pe.dt, mu, pe.grad_x, dt)
    return _new_state(state, dt, x=x, px=px, work=work)


def step_ctds(state, path, models, cfg: IntegratorConfig, rng: ParticleStreams, track_work=True):
    if not path.continuum:
        raise ValueError("CTDS needs a continuum path")
    dt = cfg.dt
    gx, ex, gxi, exi = cfg.gamma, cfg.epsilon, cfg.gamma_xi, cfg.epsilon_xi
    mu, div = _control(models, state.x, state.t, state.xi)
    je = joint_energy(path, models, cfg.confining, state.x, state.xi, state.t)
    _, v, v_xi, dk_dxi = kinetic(cfg.kinetic, path.schedule, state.xi, state.px, state.pxi)
    zx = rng.normal("x", (path.dim,))
    zxi = rng.normal("xi")
    x = state.x + (mu + gx * v) * dt
    xi = state.xi + gxi * v_xi * dt
    px = state.px + gx * (-je.grad_x - ex * v) * dt + np.sqrt(2.0 * gx * ex * dt) * zx
    pxi = state.pxi + gxi * (-(je.dxi + dk_dxi) - exi * v_xi) * dt + np.sqrt(2.0 * gxi * exi * dt) * zxi
    work = state.work
    if track_work:
        work = work + _work_increment(div, je.dt, mu, je.grad_x, dt)
    return _new_state(state, dt, x=x, xi=xi, px=px, pxi=pxi, work=work)


def accumulate_work(state, path, models, dt, conf=None):
    """Left-point work increment at ``state`` (standalone form of what the steps add)."""
    mu, div = _control(models, state.x, state.t, state.xi)
    if path.continuum:
        e = joint_energy(path, models, conf or ConfiningPotential(), state.x, state.xi, state.t)
    else:
        e = path.energy(state.x, state.t)
    return _work_increment(div, e.dt, mu, e.grad_x, dt)


def step(state, path, models, cfg: IntegratorConfig, rng, track_work=True):
    if cfg.scheme == "baseline":
        return step_baseline(state, path, models, cfg.dt, track_work)
    fn = {"overdamped": step_overdamped, "underdamped": step_underdamped, "ctds": step_ctds}[cfg.scheme]
    return fn(state, path, models, cfg, rng, track_work)


def initial_state(cfg: IntegratorConfig, path, models, n, seed):
    """Particles at ``t = 0`` drawn from the (extended) source density."""
    if cfg.scheme == "ctds":
        return sample_pi_dagger(path, models, cfg.confining, cfg.kinetic, n, seed)
    streams = ParticleStreams(seed, n, channels=("init_x", "init_px"))
    x = streams.normal("init_x", (path.dim,)) * np.sqrt(path.source.sigma2)
    px = None
    if cfg.scheme == "underdamped":
        px = streams.normal("init_px", (path.dim,)) * np.sqrt(cfg.mass_x)
    return AugmentedState(x=x, t=0.0, px=px)


_FIELDS = ("x", "xi", "px", "pxi", "work")


def _quarantine(state):
    """Mark particles with non-finite entries dead and zero them out."""
    bad = ~np.isfinite(state.x).all(axis=1) | ~np.isfinite(state.work)
    for f in ("xi", "px", "pxi"):
        a = getattr(state, f)
        if a is not None:
            bad |= ~np.isfinite(a.reshape(state.n, -1)).all(axis=1)
    newly = bad & state.alive
    if bad.any():
        for f in _FIELDS:
            a = getattr(state, f)
            if a is not None:
                a[bad] = 0.0
        state.alive = state.alive & ~bad
    return int(newly.sum())


@dataclass
class TrajectoryBatch:
    """All snapshots of a proposal run: ``x[k]`` is the state at ``t[k]``."""

    t: np.ndarray
    x: np.ndarray
    work: np.ndarray
    alive: np.ndarray
    xi: np.ndarray | None = None
    final: AugmentedState | None = None

    @property
    def n_divergent(self):
        return int((~self.alive).sum())

    def snapshots(self):
        """Flattened columns ``(x, xi, t, work, particle_id)`` over surviving particles."""
        ids = np.flatnonzero(self.alive)
        s = self.t.size
        cols = {
            "x": self.x[:, ids].reshape(-1, self.x.shape[2]),
            "t": np.repeat(self.t, ids.size),
            "work": self.work[:, ids].reshape(-1),
            "particle_id": np.tile(ids, s),
        }
        cols["xi"] = None if self.xi is None else self.xi[:, ids].reshape(-1)
        return cols

    def save(self, path):
        cols = self.snapshots()
        arrays = {k: v for k, v in cols.items() if v is not None}
        np.savez(path, **arrays)

    @staticmethod
    def load_snapshots(path):
        with np.load(path) as f:
            out = {k: f[k] for k in f.files}
        out.setdefault("xi", None)
        return out


def run_proposal(cfg: IntegratorConfig, path, models, n_particles, horizon, state=None,
                 record=True, track_work=True):
    """Simulate ``n_particles`` independent particles from ``t = 0`` to ``horizon``.

    Particles whose state becomes non-finite are dropped and counted.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    n_steps = cfg.n_steps(horizon)
    init_seed, dyn_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    if state is None:
        state = initial_state(cfg, path, models, n_particles, init_seed)
    rng = ParticleStreams(dyn_seed, n_particles)
    ts = np.arange(n_steps + 1) * cfg.dt
    xs = xis = ws = None
    if record:
        xs = np.empty((n_steps + 1, n_particles, path.dim))
        ws = np.empty((n_steps + 1, n_particles))
        xis = np.empty((n_steps + 1, n_particles)) if state.xi is not None else None
    divergent = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps + 1):
            if k:
                state = step(state, path, models, cfg, rng, track_work)
                state.t = ts[k]
                divergent += _quarantine(state)
            if record:
                xs[k] = state.x
                ws[k] = state.work
                if xis is not None:
                    xis[k] = state.xi
    if divergent:
        log.warning("%d of %d particles diverged and were dropped", divergent, n_particles)
    if not record:
        xs = state.x[None]
        ws = state.work[None]
        xis = None if state.xi is None else state.xi[None]
        ts = ts[-1:]
    return TrajectoryBatch(ts, xs, ws, state.alive.copy(), xis, state)


def effective_sample_size(log_weights):
    lw = np.asarray(log_weights, dtype=np.float64)
    lw = lw[np.isfinite(lw)]
    if lw.size == 0:
        return 0.0
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def jarzynski_log_ratio(works):
    """Estimate ``log(Z_T / Z_0) = log E[exp(A_T)]`` from final works."""
    w = np.asarray(works, dtype=np.float64)
    return float(logsumexp(w) - np.log(w.size))
