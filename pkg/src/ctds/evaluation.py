"""Sampling from a trained control and scoring the samples.

Generation integrates the flow ``dx = mu(x, t) dt`` with Euler steps and
carries ``log pi(x_t)`` along via ``d log pi = -div mu dt``.  The reverse
direction inverts each Euler step exactly (fixed-point solve), so forward
and reverse evaluate one and the same discrete density model.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from ctds.energies import target_log_density
from ctds.tempering import ConfiningPotential, TemperatureSchedule, beta_of_xi, confining

log = logging.getLogger(__name__)


@dataclass
class WeightedSampleSet:
    points: np.ndarray
    log_density: np.ndarray
    seed: int | None = None
    n_dropped: int = 0

    def __post_init__(self):
        if self.points.shape[0] != self.log_density.shape[0]:
            raise ValueError("points and log-densities differ in count")

    @property
    def count(self):
        return self.points.shape[0]


def _deploy_control(models, x, t):
    ctrl = models.control
    ev = ctrl.evaluate(x, t, beta=1.0) if ctrl.continuum else ctrl.evaluate(x, t)
    return ev.mu, ev.div


def _n_steps(dt, horizon=1.0):
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-9:
        raise ValueError(f"dt {dt} does not divide the unit interval")
    return n


def _flow(models, x, logp, dt, n):
    alive = np.ones(x.shape[0], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            mu, div = _deploy_control(models, x, k * dt)
            x = x + mu * dt
            logp = logp - div * dt
            bad = ~(np.isfinite(x).all(axis=1) & np.isfinite(logp))
            if bad.any():
                alive &= ~bad
                x[bad] = 0.0
                logp[bad] = 0.0
    return x, logp, alive


def generate(models, source, n=2500, dt=0.004, seed=0, x0=None):
    """Push ``n`` source draws through the Euler flow; diverged samples are dropped."""
    if x0 is None:
        x0 = source.sample(n, np.random.default_rng(seed))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    logp0 = source.log_density(x0)
    x, logp, alive = _flow(models, x0.copy(), logp0, dt, _n_steps(dt))
    dropped = int((~alive).sum())
    if dropped:
        log.warning("generate: dropped %d of %d diverged samples", dropped, x0.shape[0])
    return WeightedSampleSet(x[alive], logp[alive], seed, dropped)


def _invert_step(models, y, t, dt, tol, max_iter):
    """Solve ``x + mu(x, t) dt = y`` for ``x`` by fixed-point iteration."""
    mu, _ = _deploy_control(models, y, t + dt)
    x = y - mu * dt
    for _ in range(max_iter):
        mu, div = _deploy_control(models, x, t)
        x_new = y - mu * dt
        err = np.max(np.abs(x_new - x), axis=1)
        x = x_new
        if np.all(~np.isfinite(err) | (err <= tol * (1.0 + np.max(np.abs(x), axis=1)))):
            break
    mu, div = _deploy_control(models, x, t)
    resid = np.max(np.abs(x + mu * dt - y), axis=1)
    ok = np.isfinite(resid) & (resid <= 1e3 * tol * (1.0 + np.max(np.abs(y), axis=1)))
    return x, div, ok


def reverse_log_density(models, source, x1, dt=0.004, method="inverse", tol=1e-13, max_iter=100):
    """Model log-density at ``x1`` by integrating the flow from ``t = 1`` back to 0.

    ``method="inverse"`` undoes the generator's Euler steps exactly;
    ``method="euler"`` takes explicit backward Euler steps instead.  Points
    whose backward solve fails come back as NaN.
    """
    if method not in ("inverse", "euler"):
        raise ValueError(f"unknown method {method!r}")
    x = np.atleast_2d(np.asarray(x1, dtype=np.float64)).copy()
    n = _n_steps(dt)
    acc = np.zeros(x.shape[0])
    ok = np.ones(x.shape[0], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n - 1, -1, -1):
            if method == "inverse":
                x, div, good = _invert_step(models, x, k * dt, dt, tol, max_iter)
                ok &= good
            else:
                mu, div = _deploy_control(models, x, (k + 1) * dt)
                x = x - mu * dt
            acc += div * dt
            bad = ~(np.isfinite(x).all(axis=1) & np.isfinite(acc))
            ok &= ~bad
            x[bad] = 0.0
            acc[bad] = 0.0
    out = source.log_density(x) - acc
    out[~ok] = np.nan
    if (~ok).any():
        log.warning("reverse_log_density: %d of %d points failed", int((~ok).sum()), ok.size)
    return out


def _mean_se(v):
    v = np.asarray(v, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def elbo(samples: WeightedSampleSet, target, return_se=False):
    """``E_model[log pi_1(x) - log pi_model(x)]`` over the generated samples."""
    if samples.count == 0:
        raise ValueError("no samples")
    m, se = _mean_se(target_log_density(target, samples.points) - samples.log_density)
    return (m, se) if return_se else m


def eubo(models, source, target, n=2500, dt=0.004, seed=0, return_se=False, method="inverse"):
    """``E_target[log pi_1(x) - log pi_model(x)]`` with exact target draws."""
    x = target.sample(n, seed)
    lq = reverse_log_density(models, source, x, dt, method=method)
    ok = np.isfinite(lq)
    if not ok.any():
        raise FloatingPointError("reverse integration failed for every target sample")
    m, se = _mean_se(target_log_density(target, x[ok]) - lq[ok])
    return (m, se) if return_se else m


def wasserstein2(a, b):
    """Exact 2-Wasserstein distance between equal-size uniform point clouds."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def temperature_histogram(xi, schedule: TemperatureSchedule | None = None, n_bins=10):
    """Counts of ``beta(xi)`` in ``n_bins`` equal bins spanning ``[beta_min, 1]``.

    Accepts raw ``xi`` values or a CTDS trajectory batch (its last snapshot
    over surviving particles is used).  Returns ``(edges, counts)``.
    """
    schedule = schedule or TemperatureSchedule()
    if hasattr(xi, "xi"):
        if xi.xi is None:
            raise ValueError("trajectory has no temperature coordinate")
        xi = xi.xi[-1][xi.alive]
    beta, _ = beta_of_xi(schedule, np.asarray(xi, dtype=np.float64).ravel())
    edges = np.linspace(schedule.beta_min, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(beta, schedule.beta_min, 1.0), bins=edges)
    return edges, counts


def extreme_bin_fraction(counts):
    counts = np.asarray(counts)
    return float((counts[0] + counts[-1]) / counts.sum())


def reference_beta_mass(schedule=None, conf=None, n_bins=10, dim=None, grid_size=400_001):
    """Bin masses of ``beta(xi)`` for a perfectly flattened temperature marginal.

    With the exact free energy the xi-marginal is ``exp(-psi_conf)``.  With
    ``dim`` given, the momentum factor ``beta^(-dim/2)`` of the CTDS
    Hamiltonian is included, which gives the invariant marginal of the
    dynamics.  The result is the best any trained run can reach.
    """
    schedule = schedule or TemperatureSchedule()
    conf = conf or ConfiningPotential()
    lim = conf.delta_tilde + 6.0 / np.sqrt(conf.eta)
    xi = np.linspace(-lim, lim, grid_size)
    beta, _ = beta_of_xi(schedule, xi)
    w = np.exp(-confining(conf, xi)[0])
    if dim:
        w = w * beta ** (-0.5 * dim)
    edges = np.linspace(schedule.beta_min, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, beta, side="right") - 1, 0, n_bins - 1)
    mass = np.bincount(idx, weights=w, minlength=n_bins)
    return edges, mass / mass.sum()


def histogram_csv(edges, counts):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "count"])
    for c, k in zip(0.5 * (edges[1:] + edges[:-1]), counts):
        w.writerow([f"{c:.6f}", int(k)])
    return buf.getvalue()


# --- reports -------------------------------------------------------------------

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricsReport",
    "type": "object",
    "required": ["w2_mean", "elbo_mean", "eubo_mean", "n", "trials", "seeds", "fingerprint"],
    "properties": {
        "w2_mean": {"type": "number"},
        "w2_std": {"type": "number", "minimum": 0},
        "elbo_mean": {"type": "number"},
        "elbo_std": {"type": "number", "minimum": 0},
        "eubo_mean": {"type": "number"},
        "eubo_std": {"type": "number", "minimum": 0},
        "n": {"type": "integer", "minimum": 1},
        "trials": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "fingerprint": {"type": "string"},
        "n_dropped": {"type": "integer", "minimum": 0},
        "elbo_le_eubo": {"type": "boolean"},
    },
}


@dataclass
class MetricsReport:
    w2: list
    elbo: list
    eubo: list
    n: int
    seeds: list
    fingerprint: str = ""
    n_dropped: int = 0
    elbo_se: list = field(default_factory=list)
    eubo_se: list = field(default_factory=list)

    def __post_init__(self):
        if not self.w2 or not (len(self.w2) == len(self.elbo) == len(self.eubo)):
            raise ValueError("need at least one trial with all three metrics")

    @property
    def trials(self):
        return len(self.w2)

    def sandwich_ok(self):
        """``ELBO <= EUBO`` within two combined standard errors, trial by trial."""
        for i in range(self.trials):
            se = np.hypot(self.elbo_se[i] if self.elbo_se else 0.0, self.eubo_se[i] if self.eubo_se else 0.0)
            if self.elbo[i] > self.eubo[i] + 2.0 * se:
                return False
        return True

    def to_dict(self):
        out = {}
        for name in ("w2", "elbo", "eubo"):
            v = np.asarray(getattr(self, name))
            out[f"{name}_mean"] = float(v.mean())
            if self.trials > 1:
                out[f"{name}_std"] = float(v.std(ddof=1))
        out.update(n=int(self.n), trials=self.trials, seeds=[int(s) for s in self.seeds],
                   fingerprint=self.fingerprint, n_dropped=int(self.n_dropped),
                   elbo_le_eubo=self.sandwich_ok())
        return out

    def validate(self):
        import jsonschema

        jsonschema.validate(self.to_dict(), METRICS_SCHEMA)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self):
        d = self.to_dict()
        cols = [c for c in ("w2_mean", "w2_std", "elbo_mean", "elbo_std", "eubo_mean", "eubo_std", "n",
                            "trials", "fingerprint") if c in d]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow([d[c] for c in cols])
        return buf.getvalue()

    def raw(self):
        return asdict(self)


def evaluate_models(models, source, target, n=2500, trials=10, dt=0.004, seed=0, fingerprint=""):
    """Run ``trials`` independent W2/ELBO/EUBO evaluations."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(trials)]
    w2s, elbos, eubos, elbo_se, eubo_se = [], [], [], [], []
    dropped = 0
    for s in seeds:
        ss = generate(models, source, n, dt, seed=s)
        dropped += ss.n_dropped
        ref = target.sample(ss.count, s + 1)
        w2s.append(wasserstein2(ss.points, ref))
        m, se = elbo(ss, target, return_se=True)
        elbos.append(m)
        elbo_se.append(se)
        m, se = eubo(models, source, target, n, dt, seed=s + 2, return_se=True)
        eubos.append(m)
        eubo_se.append(se)
    return MetricsReport(w2s, elbos, eubos, n, seeds, fingerprint, dropped, elbo_se, eubo_se)
