"""Multi-seed preset comparison on the 40-mode mixture.

Trains and evaluates each preset for several seeds through the same entry
points the command line uses, then checks the expected ordering: the
continuously tempered variants should beat both the baseline and the
reweighted overdamped proposal on median W2 and median ELBO.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ctds.cli import HIST_CSV, cmd_eval, cmd_train, read_csv
from ctds.evaluation import extreme_bin_fraction

BENCH_PRESETS = ("gmm40-baseline", "gmm40-od", "gmm40-ctds-nojar", "gmm40-ctds")
CTDS_PRESETS = ("gmm40-ctds-nojar", "gmm40-ctds")
REFERENCE_PRESETS = ("gmm40-baseline", "gmm40-od")


def run_benchmark(out_root, profile="reduced", presets=BENCH_PRESETS, seeds=(0, 1, 2), trials=None):
    """Train and evaluate every ``preset`` x ``seed``; returns ``{preset: [metrics dict]}``."""
    results = {}
    for preset in presets:
        for seed in seeds:
            run_dir = os.path.join(out_root, f"{preset}-s{seed}")
            overrides = [f"seeds.network={seed}", f"seeds.train={seed}"]
            if not os.path.exists(os.path.join(run_dir, "checkpoint.bin")):
                cmd_train(preset=preset, profile=profile, overrides=overrides, output_dir=run_dir)
            if not os.path.exists(os.path.join(run_dir, "metrics.json")):
                cmd_eval(run_dir, trials=trials)
            with open(os.path.join(run_dir, "metrics.json")) as f:
                m = json.load(f)
            m["run_dir"] = run_dir
            results.setdefault(preset, []).append(m)
    return results


def medians(results):
    return {p: {"w2": float(np.median([r["w2_mean"] for r in rs])),
                "elbo": float(np.median([r["elbo_mean"] for r in rs]))} for p, rs in results.items()}


def ordering_holds(results):
    """``(passed, detail)`` for the qualitative benchmark ordering."""
    med = medians(results)
    fails = []
    for c in CTDS_PRESETS:
        for r in REFERENCE_PRESETS:
            if not med[c]["w2"] < med[r]["w2"]:
                fails.append(f"W2 {c} {med[c]['w2']:.3g} !< {r} {med[r]['w2']:.3g}")
            if not med[c]["elbo"] > med[r]["elbo"]:
                fails.append(f"ELBO {c} {med[c]['elbo']:.3g} !> {r} {med[r]['elbo']:.3g}")
        if not med[c]["elbo"] > -0.8:
            fails.append(f"ELBO {c} {med[c]['elbo']:.3g} !> -0.8")
    if not med["gmm40-baseline"]["elbo"] < -1.5:
        fails.append(f"baseline ELBO {med['gmm40-baseline']['elbo']:.3g} !< -1.5")
    detail = "; ".join(f"{p}: W2 {m['w2']:.3g}, ELBO {m['elbo']:.3g}" for p, m in med.items())
    return not fails, (detail + (" | " + "; ".join(fails) if fails else ""))


def trained_extreme_fraction(run_dir):
    header, rows = read_csv(os.path.join(run_dir, HIST_CSV))
    return extreme_bin_fraction(rows[:, 1])
