"""
The temperature coordinate
==========================

beta(xi) is a plateaued smoothstep: beta = 1 for |xi| < 0.25 and
beta = 0.2 beyond 1.9, with confining walls past |xi| = 2.  With the exact
free energy the xi-marginal is flat between the walls, so the histogram of
beta pools at the two plateaus.
"""

import numpy as np

from ctds.energies import GaussianOracle, oracle_models
from ctds.evaluation import extreme_bin_fraction, reference_beta_mass, temperature_histogram
from ctds.tempering import ConfiningPotential, KineticSpec, TemperatureSchedule, beta_of_xi, confining, sample_pi_dagger

sched, conf = TemperatureSchedule(), ConfiningPotential()
for xi in (0.0, 0.25, 1.075, 1.9, 2.5, 3.0):
    b, db = beta_of_xi(sched, xi)
    print(f"xi={xi:5.3f}  beta={float(b):.3f}  beta'={float(db):+.3f}  psi={float(confining(conf, xi)[0]):.2f}")

oracle = GaussianOracle(1.0, 2.0, 2)
s = sample_pi_dagger(oracle.path("linear-continuum"), oracle_models(oracle, continuum=True), conf, KineticSpec(),
                     50_000, seed=0)
edges, counts = temperature_histogram(s.xi, sched, n_bins=10)
print("beta histogram of exact initial samples:", counts.tolist())
print(f"extreme-bin mass {extreme_bin_fraction(counts):.1%}; flat reference "
      f"{extreme_bin_fraction(reference_beta_mass(sched, conf, 10)[1]):.1%}; "
      f"CTDS invariant {extreme_bin_fraction(reference_beta_mass(sched, conf, 10, dim=2)[1]):.1%}")
