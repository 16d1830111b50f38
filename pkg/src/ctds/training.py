"""PINN training: residuals, (reweighted) losses, replay buffer, curriculum, Adam."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ctds.diffcore import save_checkpoint
from ctds.dynamics import IntegratorConfig, effective_sample_size, run_proposal

log = logging.getLogger(__name__)


@dataclass
class Batch:
    x: np.ndarray
    t: np.ndarray
    xi: np.ndarray | None = None
    work: np.ndarray | None = None

    def __len__(self):
        return self.x.shape[0]


@dataclass
class ResidualTerms:
    r: np.ndarray
    control: object
    free_energy: object
    path: object


def _residual_terms(models, path, x, t, xi=None, record=False):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    if path.continuum:
        if xi is None:
            raise ValueError("continuum residual needs xi")
        ce = models.control.evaluate(x, t, xi, record=record)
    else:
        ce = models.control.evaluate(x, t, record=record)
    fe = models.free_energy.evaluate(t, xi if path.continuum else None, batch=n, record=record,
                                     xi_derivative=False)
    pe = path.energy(x, t, xi, record=record)
    r = fe.dt - pe.dt + ce.div - np.einsum("nd,nd->n", pe.grad_x, ce.mu)
    return ResidualTerms(r, ce, fe, pe)


def pinn_residual(models, path, x, t, xi=None):
    """``dF/dt - dU/dt + div mu - grad U . mu`` at each point."""
    return _residual_terms(models, path, x, t, xi).r


def jarzynski_weights(t, work, horizon, n_bins=50):
    """Self-normalised ``exp(work)`` weights within equal-width time bins.

    Each bin keeps its share of the batch, so equal works give uniform
    ``1/n`` weights.  Returns weights summing to one.
    """
    t = np.asarray(t, dtype=np.float64)
    work = np.asarray(work, dtype=np.float64)
    n = t.size
    edges = np.linspace(0.0, horizon, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, n_bins - 1)
    w = np.zeros(n)
    for b in np.unique(idx):
        sel = idx == b
        a = work[sel]
        ok = np.isfinite(a)
        if not ok.any():
            continue
        e = np.where(ok, np.exp(a - a[ok].max()), 0.0)
        w[sel] = e / e.sum() * (sel.sum() / n)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise FloatingPointError(f"degenerate importance weights (ESS={effective_sample_size(work):.3g})")
    return w / total


def loss_batch(models, path, batch: Batch, weights=None):
    """Weighted mean squared residual and its gradient for every trainable net.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``models.nets()``.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        s = w.sum()
        if not np.all(np.isfinite(w)) or s <= 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                ess = effective_sample_size(np.log(w))
            raise FloatingPointError(f"degenerate importance weights (ESS={ess:.3g})")
        w = w / s
    terms = _residual_terms(models, path, batch.x, batch.t, batch.xi, record=True)
    r = terms.r
    loss = float(np.sum(w * r**2))
    gr = 2.0 * w * r
    grads = {
        "control": models.control.backward(terms.control, -gr[:, None] * terms.path.grad_x, gr),
        "free_energy": models.free_energy.backward(terms.free_energy, g_dt=gr),
    }
    if path.learned:
        grads["correction"] = path.backward(terms.path, g_grad_x=-gr[:, None] * terms.control.mu, g_dt=-gr)
    return loss, grads


# --- schedules ---------------------------------------------------------------

DEFAULT_HORIZONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_BUDGETS = (1000, 1000, 1000, 1000, 2000, 2000, 2000, 3000, 3000)
DEFAULT_ITERATIONS = 125000


@dataclass(frozen=True)
class Curriculum:
    """Piecewise-constant horizon: ``budgets[i]`` iterations at ``horizons[i]``, then ``T = 1``."""

    horizons: tuple = DEFAULT_HORIZONS
    budgets: tuple = DEFAULT_BUDGETS

    def __post_init__(self):
        if len(self.horizons) != len(self.budgets):
            raise ValueError("horizons and budgets must pair up")
        if any(b <= 0 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ValueError("horizons must increase strictly")

    def horizon(self, iteration):
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        ends = np.cumsum(self.budgets)
        k = int(np.searchsorted(ends, iteration, side="right"))
        return self.horizons[k] if k < len(self.horizons) else 1.0

    def scaled(self, factor, quantum=1):
        """Budgets multiplied by ``factor`` and rounded to a multiple of ``quantum``."""
        budgets = tuple(max(quantum, int(round(b * factor / quantum)) * quantum) for b in self.budgets)
        return Curriculum(self.horizons, budgets)

    @classmethod
    def none(cls):
        return cls((), ())


def curriculum_horizon(iteration, curriculum: Curriculum | None = None):
    return (curriculum or Curriculum()).horizon(iteration)


@dataclass(frozen=True)
class LRSchedule:
    base: float = 1e-3
    decay: float = 0.97
    every: int = 1000
    burn_in: int = 15000

    def __call__(self, iteration):
        if iteration < self.burn_in:
            return self.base
        return self.base * self.decay ** ((iteration - self.burn_in) // self.every)


class Adam:
    """Adam over a dict of flat parameter vectors, with a step-indexed learning rate."""

    def __init__(self, schedule: LRSchedule | None = None, b1=0.9, b2=0.999, eps=1e-8):
        self.schedule = schedule or LRSchedule()
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {}
        self.v = {}
        self.step_count = 0

    def lr(self):
        return self.schedule(self.step_count)

    def step(self, params: dict, grads: dict):
        """Update ``params[name]`` in place for every name in ``grads``."""
        lr = self.lr()
        self.step_count += 1
        k = self.step_count
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**k)
            vhat = v / (1 - self.b2**k)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return lr


def optimizer_step(optim: Adam, params: dict, grads: dict):
    return optim.step(params, grads)


# --- replay buffer -------------------------------------------------------------


class ReplayBuffer:
    """Snapshots of one proposal run; refilled (by default wholesale) each epoch."""

    def __init__(self, retain_fraction=0.0):
        if not 0.0 <= retain_fraction < 1.0:
            raise ValueError("retain_fraction must lie in [0, 1)")
        self.retain_fraction = retain_fraction
        self.capacity = None
        self.x = self.t = self.xi = self.work = None
        self.horizon = None

    def __len__(self):
        return 0 if self.x is None else self.x.shape[0]

    def fill(self, traj, horizon):
        cols = traj.snapshots()
        if np.any(cols["t"] > horizon + 1e-12):
            raise ValueError("snapshot beyond the curriculum horizon")
        new = {k: cols[k] for k in ("x", "t", "xi", "work")}
        if self.capacity is None:
            self.capacity = new["x"].shape[0]
        if self.retain_fraction and len(self):
            rng = np.random.default_rng(len(self))
            keep = rng.choice(len(self), int(self.retain_fraction * len(self)), replace=False)
            for k in new:
                if new[k] is not None:
                    new[k] = np.concatenate([getattr(self, k)[keep], new[k]])[-self.capacity:]
        self.x, self.t, self.xi, self.work = new["x"], new["t"], new["xi"], new["work"]
        self.horizon = horizon

    def sample(self, n, rng):
        if not len(self):
            raise ValueError("buffer is empty")
        idx = rng.choice(len(self), size=n, replace=n > len(self))
        return Batch(self.x[idx], self.t[idx], None if self.xi is None else self.xi[idx], self.work[idx])


# --- training loop -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1250
    iters_per_epoch: int = 100
    batch_size: int = 6250
    n_particles: int = 2500
    reweight: bool = False
    n_time_bins: int = 50
    curriculum: Curriculum = field(default_factory=Curriculum)
    lr: LRSchedule = field(default_factory=LRSchedule)
    retain_fraction: float = 0.0
    checkpoint_every: int = 50
    seed: int = 0

    @property
    def total_iterations(self):
        return self.epochs * self.iters_per_epoch


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    models: object
    history: list
    checkpoint: str | None = None


def train(models, path, integrator: IntegratorConfig, cfg: TrainConfig, out_dir=None, meta=None,
          callback=None):
    """Alternate proposal simulation and PINN updates, one buffer refill per epoch.

    Writes ``train_log.jsonl`` and ``checkpoint.bin`` into ``out_dir`` when
    given.  A non-finite loss aborts with :class:`TrainingDiverged`, leaving
    the last good checkpoint in place.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    epoch_seeds = np.random.SeedSequence([cfg.seed, 2]).generate_state(cfg.epochs)
    optim = Adam(cfg.lr)
    buffer = ReplayBuffer(cfg.retain_fraction)
    nets = models.nets()
    params = {k: v.params for k, v in nets.items()}
    history = []
    ckpt = None
    logf = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "checkpoint.bin")
        logf = open(os.path.join(out_dir, "train_log.jsonl"), "w")
    start = time.perf_counter()

    def checkpoint(epoch):
        if ckpt is not None:
            save_checkpoint(ckpt, nets, {**(meta or {}), "epoch": epoch, "iteration": optim.step_count})

    try:
        for epoch in range(cfg.epochs):
            it0 = epoch * cfg.iters_per_epoch
            horizon = cfg.curriculum.horizon(it0)
            traj = run_proposal(replace(integrator, seed=int(epoch_seeds[epoch])), path, models,
                                cfg.n_particles, horizon)
            buffer.fill(traj, horizon)
            ess = effective_sample_size(traj.work[-1, traj.alive])
            for i in range(cfg.iters_per_epoch):
                batch = buffer.sample(cfg.batch_size, rng)
                weights = None
                try:
                    if cfg.reweight:
                        weights = jarzynski_weights(batch.t, batch.work, horizon, cfg.n_time_bins)
                    loss, grads = loss_batch(models, path, batch, weights)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"iteration {optim.step_count}: {exc}", ckpt) from exc
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDiverged(f"non-finite loss at iteration {optim.step_count}", ckpt)
                lr = optim.step(params, grads)
                rec = {"iter": optim.step_count - 1, "epoch": epoch, "T": horizon, "loss": loss,
                       "ess": ess, "lr": lr, "divergent": traj.n_divergent,
                       "wall_time": time.perf_counter() - start}
                history.append(rec)
                if logf is not None:
                    logf.write(json.dumps(rec) + "\n")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint(epoch)
            if callback is not None:
                callback(epoch, models, history)
        checkpoint(cfg.epochs - 1)
    finally:
        if logf is not None:
            logf.close()
    return TrainResult(models, history, ckpt)
