"""Self-checks against closed-form answers.

Each ``check_*`` returns a :class:`CheckResult` with the measured value and
the tolerance it was held to; :func:`run_all` collects them.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass

import numpy as np

from ctds.diffcore import Net, NetSpec, forward_augmented
from ctds.dynamics import IntegratorConfig, jarzynski_log_ratio, run_proposal
from ctds.energies import (
    GaussianMixtureTarget,
    GaussianOracle,
    GaussianSource,
    PathSpec,
    oracle_models,
)
from ctds.evaluation import wasserstein2
from ctds.models import AnchorFreeEnergy, Models, ZeroControl, build_models
from ctds.state import AugmentedState
from ctds.tempering import ConfiningPotential, TemperatureSchedule, beta_of_xi, confining
from ctds.training import Batch, Curriculum, LRSchedule, TrainConfig, loss_batch, pinn_residual, train


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: str
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{flag}] {self.name}: value={self.value:.6g} tolerance {self.tolerance} [{self.seconds:.1f}s]{extra}"

    def to_dict(self):
        d = asdict(self)
        d["value"] = float(d["value"])
        return d


def _timed(fn):
    def wrapper(*args, **kw):
        start = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - start
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_oracle_residual(n=1000, seed=0):
    """Exact control and free energy of the Gaussian oracle make the residual vanish."""
    oracle = GaussianOracle(1.0, 2.0, 2)
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=3.0, size=(n, 2))
    t = rng.uniform(size=n)
    r = pinn_residual(oracle_models(oracle), oracle.path(), x, t)
    err = float(np.abs(r).max())
    return CheckResult("oracle PINN residual", err < 1e-10, err, "< 1e-10")


@_timed
def check_jarzynski_overdamped(n=100_000, dt=1e-3, epsilon=10.0, seed=0):
    """Uncontrolled annealing plus Jarzynski recovers ``Z_1 / Z_0 = 4``."""
    oracle = GaussianOracle(1.0, 2.0, 2)
    models = Models(ZeroControl(2), AnchorFreeEnergy(oracle.source))
    cfg = IntegratorConfig("overdamped", dt=dt, epsilon=epsilon, seed=seed)
    tb = run_proposal(cfg, oracle.path(), models, n, 1.0, record=False)
    ratio = float(np.exp(jarzynski_log_ratio(tb.work[-1][tb.alive])))
    rel = abs(ratio / oracle.partition_ratio() - 1.0)
    return CheckResult("Jarzynski Z1/Z0 (overdamped)", rel < 0.05, ratio, "within 5% of 4",
                       detail=f"rel err {rel:.3%}")


@_timed
def check_jarzynski_ctds_frozen(n=100_000, dt=1e-3, gamma=10.0, epsilon=1.0, seed=0):
    """CTDS with xi pinned at 0 (beta = 1) and no xi-dynamics."""
    oracle = GaussianOracle(1.0, 2.0, 2)
    path = oracle.path("linear-continuum")
    models = Models(ZeroControl(2, continuum=True), AnchorFreeEnergy(oracle.source, continuum=True))
    rng = np.random.default_rng(seed)
    state = AugmentedState(x=rng.normal(size=(n, 2)), t=0.0, xi=np.zeros(n),
                           px=rng.normal(size=(n, 2)), pxi=np.zeros(n))
    cfg = IntegratorConfig("ctds", dt=dt, gamma=gamma, epsilon=epsilon, gamma_xi=0.0, seed=seed + 1)
    tb = run_proposal(cfg, path, models, n, 1.0, state=state, record=False)
    ratio = float(np.exp(jarzynski_log_ratio(tb.work[-1][tb.alive])))
    rel = abs(ratio / oracle.partition_ratio() - 1.0)
    ok = rel < 0.05 and np.all(tb.final.xi == 0.0)
    return CheckResult("Jarzynski Z1/Z0 (CTDS, frozen xi at beta=1)", bool(ok), ratio, "within 5% of 4",
                       detail=f"rel err {rel:.3%}")


def _reduction_pairs(n=64, n_steps=20, seed=0):
    oracle = GaussianOracle(1.0, 2.0, 2)
    om = oracle_models(oracle)
    # anchor free energy (dF/dt = 0) so the joint-energy work equals the plain one
    om_c = Models(oracle_models(oracle, continuum=True).control, AnchorFreeEnergy(oracle.source, continuum=True))
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(n, 2))
    p0 = rng.normal(size=(n, 2))
    horizon = n_steps * 0.01

    def run(cfg, path, models, **st):
        state = AugmentedState(x=x0.copy(), t=0.0, **st)
        return run_proposal(cfg, path, models, n, horizon, state=state)

    base = run(IntegratorConfig("baseline", dt=0.01, seed=seed), oracle.path(), om)
    od = run(IntegratorConfig("overdamped", dt=0.01, epsilon=0.0, seed=seed), oracle.path(), om)
    ud0 = run(IntegratorConfig("underdamped", dt=0.01, gamma=0.0, epsilon=3.0, seed=seed), oracle.path(), om,
              px=p0.copy())
    ud = run(IntegratorConfig("underdamped", dt=0.01, gamma=5.0, epsilon=1.0, seed=seed), oracle.path(), om,
             px=p0.copy())
    ct = run(IntegratorConfig("ctds", dt=0.01, gamma=5.0, epsilon=1.0, gamma_xi=0.0, epsilon_xi=2.0, seed=seed),
             oracle.path("linear-continuum"), om_c, px=p0.copy(), xi=np.zeros(n), pxi=rng.normal(size=n))
    return {"OD eps=0 vs baseline": (od, base), "UD gamma=0 vs baseline": (ud0, base),
            "CTDS gamma_xi=0, beta=1 vs UD": (ct, ud)}


@_timed
def check_reductions():
    """Degenerate coefficients reproduce simpler schemes bit for bit."""
    bad = []
    for name, (a, b) in _reduction_pairs().items():
        same = np.array_equal(a.x, b.x) and np.array_equal(a.work, b.work)
        if name.startswith("CTDS"):
            same = same and np.array_equal(a.final.px, b.final.px)
        if not same:
            bad.append(name)
    return CheckResult("scheme reductions (bitwise)", not bad, float(len(bad)), "0 mismatches",
                       detail="; ".join(bad))


@_timed
def check_spot_values():
    sched, conf = TemperatureSchedule(), ConfiningPotential()
    b1, _ = beta_of_xi(sched, 1.075)
    b3, _ = beta_of_xi(sched, np.array([3.0, -3.0]))
    psi, _ = confining(conf, 2.5)
    errs = [abs(float(b1) - 0.6), *np.abs(b3 - 0.2), abs(float(psi) - 2.5)]
    worst = float(max(errs))
    return CheckResult("beta(xi) and psi_conf spot values", worst < 1e-12, worst, "< 1e-12 (exact up to rounding)")


@_timed
def check_w2_bruteforce(instances=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        k = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        a, b = rng.normal(size=(k, d)), rng.normal(size=(k, d))
        best = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(k)))
        worst = max(worst, abs(wasserstein2(a, b) - np.sqrt(best)))
    return CheckResult("W2 vs brute-force assignment", worst < 1e-12, worst, "< 1e-12 on <= 6 points")


def _rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def _net_fd_errors(draws, seed):
    rng = np.random.default_rng(seed)
    spec = NetSpec(2, 16, 3, 2, True, {"x": (8, 0.5), "t": (4, 1.0), "temp": (4, 1.0)})
    net = Net.create(spec, seed)
    worst = 0.0
    h = 1e-5
    for _ in range(draws):
        x = rng.normal(size=(1, 2))
        t = rng.uniform(size=1)
        b = rng.uniform(0.2, 1.0, size=1)
        act, _ = forward_augmented(net, x, t, b)
        jac = np.zeros((2, 2))
        for c in range(2):
            e = np.zeros((1, 2))
            e[0, c] = h
            jac[:, c] = (net(x + e, t, b) - net(x - e, t, b))[0] / (2 * h)
        d_t = (net(x, t + h, b) - net(x, t - h, b))[0] / (2 * h)
        d_b = (net(x, t, b + h) - net(x, t, b - h))[0] / (2 * h)
        worst = max(worst, _rel(act.jac_x[0], jac), _rel(act.d_dt[0], d_t), _rel(act.d_dtemp[0], d_b))
    return worst


def _energy_fd_errors(draws, seed):
    rng = np.random.default_rng(seed)
    src = GaussianSource(5.0, 2)
    tgt = GaussianMixtureTarget.gmm40(0, n_modes=6, box=3.0, std=0.8)
    models = build_models(2, src, continuum=True, learned=True, width=16, depth=3,
                          features={"x": (8, 0.3), "t": (4, 1.0), "temp": (4, 1.0)}, seed=seed)
    path = PathSpec("learned-continuum", src, tgt, models.correction)
    worst = 0.0
    h = 1e-5
    for _ in range(draws):
        x = rng.normal(scale=2.0, size=(1, 2))
        t = float(rng.uniform(0.05, 0.95))
        xi = float(rng.uniform(-2.5, 2.5))
        pe = path.energy(x, t, xi)
        g = np.zeros(2)
        for c in range(2):
            e = np.zeros((1, 2))
            e[0, c] = h
            g[c] = (path.energy(x + e, t, xi).value - path.energy(x - e, t, xi).value)[0] / (2 * h)
        dt = (path.energy(x, t + h, xi).value - path.energy(x, t - h, xi).value)[0] / (2 * h)
        dxi = (path.energy(x, t, xi + h).value - path.energy(x, t, xi - h).value)[0] / (2 * h)
        fe = models.free_energy.evaluate(t, xi, batch=1)
        fdt = (models.free_energy.evaluate(t + h, xi, batch=1).value
               - models.free_energy.evaluate(t - h, xi, batch=1).value)[0] / (2 * h)
        fdxi = (models.free_energy.evaluate(t, xi + h, batch=1).value
                - models.free_energy.evaluate(t, xi - h, batch=1).value)[0] / (2 * h)
        worst = max(worst, _rel(pe.grad_x[0], g), _rel(pe.dt[0], dt), _rel(pe.dxi[0], dxi),
                    _rel(fe.dt[0], fdt), _rel(fe.dxi[0], fdxi))
    return worst


def _loss_grad_error(seed, n_coords=10):
    rng = np.random.default_rng(seed)
    src = GaussianSource(5.0, 2)
    tgt = GaussianMixtureTarget.gmm40(0, n_modes=6, box=3.0, std=0.8)
    models = build_models(2, src, continuum=True, learned=True, width=16, depth=3,
                          features={"x": (8, 0.3), "t": (4, 1.0), "temp": (4, 1.0)}, seed=seed)
    models.control.net.params += 0.05 * rng.standard_normal(models.control.net.size)
    path = PathSpec("learned-continuum", src, tgt, models.correction)
    n = 64
    batch = Batch(rng.normal(scale=2.0, size=(n, 2)), rng.uniform(size=n), rng.uniform(-2.5, 2.5, size=n))
    _, grads = loss_batch(models, path, batch)
    worst = 0.0
    h = 1e-6
    for name, net in models.nets().items():
        idx = rng.choice(net.size, n_coords, replace=False)
        fd = np.zeros(n_coords)
        for j, i in enumerate(idx):
            old = net.params[i]
            net.params[i] = old + h
            lp, _ = loss_batch(models, path, batch)
            net.params[i] = old - h
            lm, _ = loss_batch(models, path, batch)
            net.params[i] = old
            fd[j] = (lp - lm) / (2 * h)
        worst = max(worst, _rel(grads[name][idx], fd))
    return worst


@_timed
def check_derivatives(draws=100, seed=0):
    """Exact partials against central differences; loss gradients likewise."""
    partial = max(_net_fd_errors(draws, seed), _energy_fd_errors(draws, seed))
    grad = _loss_grad_error(seed)
    ok = partial < 1e-5 and grad < 1e-4
    return CheckResult("derivative exactness", ok, max(partial, grad),
                       "partials < 1e-5, loss gradient < 1e-4 (relative)",
                       detail=f"partials {partial:.2e}, loss gradient {grad:.2e}")


ORACLE_FEATURES = {"x": (32, 0.5), "t": (8, 1.0)}


def train_oracle(epochs=20, iters_per_epoch=100, seed=0):
    """Learn control and free energy on the Gaussian oracle's linear path.

    Returns ``(models, history)``.  Small networks and a short, fast-decaying
    learning rate keep this to about a minute on one core.
    """
    oracle = GaussianOracle(1.0, 2.0, 2)
    models = build_models(2, oracle.source, width=64, depth=3, features=ORACLE_FEATURES, seed=seed)
    cfg = TrainConfig(epochs=epochs, iters_per_epoch=iters_per_epoch, batch_size=512, n_particles=500,
                      curriculum=Curriculum.none(), lr=LRSchedule(3e-3, 0.5, 200, 1000),
                      checkpoint_every=0, seed=seed)
    integ = IntegratorConfig("overdamped", dt=0.01, epsilon=10.0, seed=seed)
    result = train(models, oracle.path(), integ, cfg)
    return models, result.history


def free_energy_grid_error(models, oracle=None, n_grid=101):
    oracle = oracle or GaussianOracle(1.0, 2.0, 2)
    t = np.linspace(0.0, 1.0, n_grid)
    fe = models.free_energy.evaluate(t, batch=n_grid).value
    return float(np.max(np.abs(fe - oracle.free_energy(t))))


@_timed
def check_oracle_convergence(iterations=2000, seed=0):
    """Training on the oracle drives the learned free energy to the exact one."""
    models, _ = train_oracle(epochs=iterations // 100, seed=seed)
    err = free_energy_grid_error(models)
    return CheckResult(f"oracle free energy after {iterations} iterations", err < 1e-2, err,
                       "max grid |F_theta - F| < 1e-2")


def run_all(quick=False):
    """All checks; ``quick`` shrinks the Jarzynski particle counts."""
    n = 20_000 if quick else 100_000
    return [
        check_oracle_residual(),
        check_jarzynski_overdamped(n=n),
        check_jarzynski_ctds_frozen(n=n),
        check_reductions(),
        check_spot_values(),
        check_w2_bruteforce(),
        check_derivatives(),
        *([] if quick else [check_oracle_convergence()]),
    ]

