"""Particle state and per-particle random streams."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

BLOCK = 512


class ParticleStreams:
    """Normal draws whose value for particle ``i`` does not depend on ``n``.

    Particles are grouped in fixed blocks of ``BLOCK``; each block owns an
    independent generator per named channel, and always draws a full block so
    that stream positions never depend on how many particles are live.
    """

    def __init__(self, seed, n, channels=("x", "xi"), block=BLOCK):
        self.n = n
        self.block = block
        n_blocks = -(-n // block)
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._gens = {}
        for c, ss in zip(channels, root.spawn(len(channels))):
            self._gens[c] = [np.random.default_rng(s) for s in ss.spawn(n_blocks)]

    def normal(self, channel, shape=()):
        gens = self._gens[channel]
        out = np.concatenate([g.standard_normal((self.block,) + tuple(shape)) for g in gens])
        return out[: self.n]

    def uniform(self, channel):
        gens = self._gens[channel]
        return np.concatenate([g.random(self.block) for g in gens])[: self.n]


@dataclass
class AugmentedState:
    """Snapshot of ``n`` particles at a common time ``t``.

    ``xi``/``pxi`` are ``None`` outside continuum schemes and ``px`` is
    ``None`` for first-order schemes.  ``work`` is the accumulated log-weight.
    """

    x: np.ndarray
    t: float = 0.0
    xi: np.ndarray | None = None
    px: np.ndarray | None = None
    pxi: np.ndarray | None = None
    work: np.ndarray | None = None
    alive: np.ndarray | None = None

    def __post_init__(self):
        n = self.x.shape[0]
        if self.work is None:
            self.work = np.zeros(n)
        if self.alive is None:
            self.alive = np.ones(n, dtype=bool)

    @property
    def n(self):
        return self.x.shape[0]

    def copy(self):
        return replace(
            self,
            **{
                k: (None if getattr(self, k) is None else getattr(self, k).copy())
                for k in ("x", "xi", "px", "pxi", "work", "alive")
            },
        )
