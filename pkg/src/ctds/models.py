"""The learnable objects: control, free energy and path correction.

Networks that see the temperature are fed ``beta(xi)`` rather than ``xi``,
so plateau values of xi (and +/- xi) are indistinguishable to them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ctds.diffcore import Net, NetSpec, backward_params, forward_augmented
from ctds.tempering import TemperatureSchedule, beta_of_xi

DEFAULT_FEATURES = {"x": (100, 0.1), "t": (20, 5.0), "temp": (20, 1.0)}


def _broadcast_t(t, batch):
    t = np.asarray(t, dtype=np.float64)
    return np.full(batch, float(t)) if t.ndim == 0 else t.reshape(batch)


@dataclass
class ControlEval:
    mu: np.ndarray
    div: np.ndarray
    jac_x: np.ndarray
    dt: np.ndarray | None = None
    tape: object = None


class ControlNet:
    """Vector field ``mu(x, t[, beta(xi)])`` with values in R^d."""

    def __init__(self, net: Net, schedule: TemperatureSchedule | None = None):
        if net.spec.output_dim != net.spec.x_dim:
            raise ValueError("control output dimension must equal the spatial dimension")
        self.net = net
        self.schedule = schedule or TemperatureSchedule()

    @property
    def continuum(self):
        return self.net.spec.temperature

    def _temp(self, xi, beta, batch):
        if not self.continuum:
            return None
        if beta is None:
            if xi is None:
                raise ValueError("continuum control needs xi (or an explicit beta)")
            beta, _ = beta_of_xi(self.schedule, xi)
        return _broadcast_t(beta, batch)

    def evaluate(self, x, t, xi=None, beta=None, record=False, time_derivative=False):
        """``beta`` overrides ``xi``; ``beta=1`` gives the deployment control."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        batch = x.shape[0]
        temp = self._temp(xi, beta, batch)
        wrt = ("x", "t") if time_derivative else ("x",)
        act, tape = forward_augmented(self.net, x, _broadcast_t(t, batch), temp, wrt=wrt)
        return ControlEval(act.value, act.div_x, act.jac_x, act.d_dt, tape if record else None)

    def __call__(self, x, t, xi=None, beta=None):
        ev = self.evaluate(x, t, xi, beta)
        return ev.mu, ev.div

    def backward(self, ev: ControlEval, g_mu, g_div):
        d = self.net.spec.x_dim
        g_jac = np.asarray(g_div)[:, None, None] * np.eye(d)
        return backward_params(ev.tape, g_value=g_mu, g_jac_x=g_jac)


def control_eval(net: ControlNet, x, t, xi=None):
    """Return ``(mu, div_x mu, d mu / dt)``."""
    ev = net.evaluate(x, t, xi, time_derivative=True)
    return ev.mu, ev.div, ev.dt


@dataclass
class FreeEnergyEval:
    value: np.ndarray
    dt: np.ndarray
    dxi: np.ndarray
    t: np.ndarray
    tape: object = None


class FreeEnergyNet:
    """``F(t, xi) = F_0(xi) + t * G(t, beta(xi))``.

    The anchor ``F_0`` is the exact free energy of the (tempered) Gaussian
    source, so ``F(0, xi) = F_0(xi)`` holds for any parameters.
    """

    def __init__(self, net: Net, source, schedule: TemperatureSchedule | None = None):
        if net.spec.output_dim != 1 or net.spec.x_dim != 0:
            raise ValueError("free-energy network maps (t[, beta]) to a scalar")
        self.net = net
        self.source = source
        self.schedule = schedule or TemperatureSchedule()

    @property
    def continuum(self):
        return self.net.spec.temperature

    def evaluate(self, t, xi=None, batch=None, record=False, xi_derivative=None):
        if batch is None:
            batch = np.size(xi) if xi is not None else np.size(t)
        t = _broadcast_t(t, batch)
        if self.continuum:
            if xi is None:
                raise ValueError("continuum free energy needs xi")
            beta, dbeta = beta_of_xi(self.schedule, _broadcast_t(xi, batch))
        else:
            beta, dbeta = np.ones(batch), np.zeros(batch)
        if xi_derivative is None:
            xi_derivative = self.continuum
        wrt = ("t", "temp") if (xi_derivative and self.continuum) else ("t",)
        act, tape = forward_augmented(self.net, None, t, beta if self.continuum else None, wrt=wrt)
        g, dg_dt = act.value[:, 0], act.d_dt[:, 0]
        value = self.source.free_energy(beta) + t * g
        dt = g + t * dg_dt
        dxi = np.zeros(batch)
        if self.continuum and act.d_dtemp is not None:
            dxi = (self.source.dfree_energy_dbeta(beta) + t * act.d_dtemp[:, 0]) * dbeta
        return FreeEnergyEval(value, dt, dxi, t, tape if record else None)

    def __call__(self, t, xi=None):
        ev = self.evaluate(t, xi)
        return ev.value, ev.dt

    def backward(self, ev: FreeEnergyEval, g_value=None, g_dt=None):
        n = ev.t.shape[0]
        gv = np.zeros(n) if g_value is None else np.asarray(g_value)
        gd = np.zeros(n) if g_dt is None else np.asarray(g_dt)
        return backward_params(ev.tape, g_value=(gv * ev.t + gd)[:, None], g_dt=(gd * ev.t)[:, None])


def free_energy_eval(net: FreeEnergyNet, t, xi=None):
    """Return ``(F, dF/dt)``."""
    return net(t, xi)


@dataclass
class CorrectionEval:
    value: np.ndarray
    grad_x: np.ndarray
    dt: np.ndarray
    tape: object = None


class PathCorrectionNet:
    """Scalar ``U_theta(x, t)`` added to the path through a ``t(1 - t)`` factor."""

    def __init__(self, net: Net):
        if net.spec.output_dim != 1 or net.spec.temperature:
            raise ValueError("path correction maps (x, t) to a scalar")
        self.net = net

    def evaluate(self, x, t, record=False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        act, tape = forward_augmented(self.net, x, _broadcast_t(t, x.shape[0]), wrt=("x", "t"))
        return CorrectionEval(act.value[:, 0], act.jac_x[:, 0], act.d_dt[:, 0], tape if record else None)

    def __call__(self, x, t):
        ev = self.evaluate(x, t)
        return ev.value, ev.grad_x, ev.dt

    def backward(self, ev: CorrectionEval, g_value, g_grad_x, g_dt):
        return backward_params(
            ev.tape, g_value=np.asarray(g_value)[:, None], g_jac_x=np.asarray(g_grad_x)[:, None, :],
            g_dt=np.asarray(g_dt)[:, None],
        )


def path_correction_eval(net: PathCorrectionNet, x, t):
    """Return ``(U_theta, grad_x U_theta, dU_theta/dt)``."""
    return net(x, t)


class ZeroControl:
    """``mu = 0``: the uncontrolled process, without the cost of a network."""

    def __init__(self, dim, continuum=False):
        self.dim = dim
        self.continuum = continuum

    def evaluate(self, x, t, xi=None, beta=None, record=False, time_derivative=False):
        n = np.shape(x)[0]
        z = np.zeros((n, self.dim))
        return ControlEval(z, np.zeros(n), np.zeros((n, self.dim, self.dim)), z if time_derivative else None)

    def __call__(self, x, t, xi=None, beta=None):
        ev = self.evaluate(x, t)
        return ev.mu, ev.div


class AnchorFreeEnergy:
    """The free energy estimate with ``G = 0``: ``F(t, xi) = F_0(xi)`` for all t."""

    def __init__(self, source, schedule=None, continuum=False):
        self.source = source
        self.schedule = schedule or TemperatureSchedule()
        self.continuum = continuum

    def evaluate(self, t, xi=None, batch=None, record=False, xi_derivative=None):
        if batch is None:
            batch = np.size(xi) if xi is not None else np.size(t)
        if self.continuum:
            beta, dbeta = beta_of_xi(self.schedule, _broadcast_t(xi, batch))
        else:
            beta, dbeta = np.ones(batch), np.zeros(batch)
        value = self.source.free_energy(beta) * np.ones(batch)
        return FreeEnergyEval(value, np.zeros(batch), self.source.dfree_energy_dbeta(beta) * dbeta,
                              _broadcast_t(t, batch))


@dataclass
class Models:
    control: ControlNet
    free_energy: FreeEnergyNet
    correction: PathCorrectionNet | None = None

    @property
    def continuum(self):
        return self.control.continuum

    def nets(self):
        out = {"control": self.control.net, "free_energy": self.free_energy.net}
        if self.correction is not None:
            out["correction"] = self.correction.net
        return out

    def copy(self):
        return Models(
            ControlNet(self.control.net.copy(), self.control.schedule),
            FreeEnergyNet(self.free_energy.net.copy(), self.free_energy.source, self.free_energy.schedule),
            None if self.correction is None else PathCorrectionNet(self.correction.net.copy()),
        )


def build_models(dim, source, continuum=False, learned=False, width=256, depth=3,
                 features=None, seed=0, schedule=None):
    """Fresh networks.  The control's last layer starts at zero (``mu = 0``)."""
    features = DEFAULT_FEATURES if features is None else features
    schedule = schedule or TemperatureSchedule()
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(3)]

    def feats(groups):
        return {g: features[g] for g in groups if g in features}

    groups = ("x", "t", "temp") if continuum else ("x", "t")
    control = Net.create(
        NetSpec(dim, width, depth, dim, continuum, feats(groups)), seeds[0], zero_last=True)
    fgroups = ("t", "temp") if continuum else ("t",)
    free = Net.create(NetSpec(0, width, depth, 1, continuum, feats(fgroups)), seeds[1])
    corr = None
    if learned:
        corr = PathCorrectionNet(Net.create(NetSpec(dim, width, depth, 1, False, feats(("x", "t"))), seeds[2]))
    return Models(ControlNet(control, schedule), FreeEnergyNet(free, source, schedule), corr)


def models_from_nets(nets: dict, source, schedule=None):
    schedule = schedule or TemperatureSchedule()
    corr = nets.get("correction")
    return Models(
        ControlNet(nets["control"], schedule),
        FreeEnergyNet(nets["free_energy"], source, schedule),
        None if corr is None else PathCorrectionNet(corr),
    )
