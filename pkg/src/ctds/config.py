"""Run configuration: defaults, presets, profiles, validation and manifests.

A config is a nested key-value tree (YAML or JSON on disk).  Unknown keys
and missing required fields are rejected by name.  Every default is the
value used for the 40-mode mixture experiments, so ``preset: gmm40-ctds``
alone describes the full reference run.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import subprocess

import numpy as np
import yaml

from ctds import __version__


class ConfigError(ValueError):
    pass


class _Required:
    """Placeholder for fields with no default; survives ``deepcopy`` as itself."""

    def __deepcopy__(self, memo):
        return self

    def __repr__(self):
        return "REQUIRED"


REQUIRED = _Required()

DEFAULTS = {
    "preset": None,
    "profile": "full",
    "output_dir": "runs/default",
    "target": {"kind": REQUIRED, "mean_seed": 0, "n_modes": 40, "box": 40.0, "std": 0.25,
               "sigma0": 1.0, "sigma1": 2.0, "dim": 2},
    "source": {"sigma2": 5.0},
    "path": REQUIRED,
    "proposal": {"scheme": REQUIRED, "dt": 0.002, "epsilon": 0.0, "gamma": 0.0, "gamma_xi": 0.0,
                 "epsilon_xi": 0.0, "mass_x": 1.0, "mass_xi": 1.0},
    "tempering": {"beta_min": 0.2, "delta": 0.25, "delta_prime": 1.9, "eta": 10.0, "delta_tilde": 2.0},
    "network": {"width": 256, "depth": 3,
                "features": {"x": [100, 0.1], "t": [20, 5.0], "temp": [20, 1.0]}},
    "training": {
        "epochs": 1250, "iters_per_epoch": 100, "batch_size": 6250, "n_particles": 2500,
        "reweight": False, "n_time_bins": 50, "retain_fraction": 0.0, "checkpoint_every": 50,
        "curriculum": {"horizons": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
                       "budgets": [1000, 1000, 1000, 1000, 2000, 2000, 2000, 3000, 3000]},
        "optimizer": {"lr": 1e-3, "decay": 0.97, "every": 1000, "burn_in": 15000},
    },
    "seeds": {"network": 0, "train": 0, "eval": 0},
    "evaluation": {"n": 2500, "trials": 10, "dt": 0.004, "hist_bins": 10},
}

_GMM = {"target": {"kind": "gmm40"}}
PRESETS = {
    "gmm40-baseline": {**_GMM, "path": "learned", "proposal": {"scheme": "baseline"}},
    "gmm40-od-nojar": {**_GMM, "path": "learned", "proposal": {"scheme": "overdamped", "epsilon": 50.0}},
    "gmm40-od": {**_GMM, "path": "learned", "proposal": {"scheme": "overdamped", "epsilon": 50.0},
                 "training": {"reweight": True}},
    "gmm40-ud-nojar": {**_GMM, "path": "learned",
                       "proposal": {"scheme": "underdamped", "gamma": 50.0, "epsilon": 2.0}},
    "gmm40-ud": {**_GMM, "path": "learned", "proposal": {"scheme": "underdamped", "gamma": 50.0, "epsilon": 2.0},
                 "training": {"reweight": True}},
    "gmm40-ctds-nojar": {**_GMM, "path": "learned-continuum",
                         "proposal": {"scheme": "ctds", "gamma": 50.0, "epsilon": 2.0,
                                      "gamma_xi": 5.0, "epsilon_xi": 2.0}},
    "gmm40-ctds": {**_GMM, "path": "learned-continuum",
                   "proposal": {"scheme": "ctds", "gamma": 50.0, "epsilon": 2.0, "gamma_xi": 5.0, "epsilon_xi": 2.0},
                   "training": {"reweight": True}},
}

# Profiles shrink the run; they are applied before user overrides.
PROFILES = {
    "full": {},
    "reduced": {"training": {"epochs": 250, "n_particles": 1000,
                             "curriculum": {"budgets": [200, 200, 200, 200, 400, 400, 400, 600, 600]},
                             "optimizer": {"every": 200, "burn_in": 3000}}},
    "smoke": {"training": {"epochs": 2, "iters_per_epoch": 10, "batch_size": 512, "n_particles": 256,
                           "checkpoint_every": 1,
                           "curriculum": {"horizons": [0.1], "budgets": [10]}},
              "network": {"width": 64},
              "evaluation": {"n": 256, "trials": 2}},
}

ENV_OUTPUT_DIR = "CTDS_OUTPUT_DIR"
ENV_THREADS = "CTDS_THREADS"


def deep_merge(base, over, where=""):
    """Copy of ``base`` with ``over`` applied; unknown keys raise ``ConfigError``."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        name = f"{where}.{k}" if where else k
        if k not in base:
            raise ConfigError(f"unknown config field '{name}'")
        if isinstance(base[k], dict) and k != "features":
            if not isinstance(v, dict):
                raise ConfigError(f"config field '{name}' must be a mapping")
            out[k] = deep_merge(base[k], v, name)
        else:
            out[k] = _coerce(base[k], v, name)
    return out


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(default, v, name):
    """Match numeric fields to their default's type.

    YAML 1.1 reads ``1e-3`` (no dot) as a string, so numeric-looking
    strings are converted; anything else non-numeric is rejected.
    """
    if not _is_number(default):
        return copy.deepcopy(v)
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError:
            raise ConfigError(f"config field '{name}' must be a number, got '{v}'") from None
    if not _is_number(v):
        raise ConfigError(f"config field '{name}' must be a number")
    if isinstance(default, int) and float(v).is_integer():
        return int(v)
    return float(v) if isinstance(default, float) else v


def _missing(tree, where=""):
    for k, v in tree.items():
        name = f"{where}.{k}" if where else k
        if v is REQUIRED:
            yield name
        elif isinstance(v, dict):
            yield from _missing(v, name)


def resolve(user: dict | None = None, env=None) -> dict:
    """Defaults, then preset, then profile, then ``user``; validated."""
    user = copy.deepcopy(user or {})
    env = os.environ if env is None else env
    preset = user.get("preset")
    profile = user.get("profile", "full")
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(sorted(PRESETS))})")
        cfg = deep_merge(cfg, PRESETS[preset])
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}' (choose from {', '.join(PROFILES)})")
    cfg = deep_merge(cfg, PROFILES[profile])
    cfg = deep_merge(cfg, user)
    if env.get(ENV_OUTPUT_DIR):
        cfg["output_dir"] = env[ENV_OUTPUT_DIR]
    missing = list(_missing(cfg))
    if missing:
        raise ConfigError(f"missing required field '{missing[0]}'")
    validate(cfg)
    return cfg


def validate(cfg):
    from ctds.dynamics import SCHEMES
    from ctds.energies import PATH_KINDS

    def need(cond, field, msg):
        if not cond:
            raise ConfigError(f"invalid field '{field}': {msg}")

    need(cfg["target"]["kind"] in ("gmm40", "gaussian"), "target.kind", "expected gmm40 or gaussian")
    need(cfg["path"] in PATH_KINDS, "path", f"expected one of {PATH_KINDS}")
    scheme = cfg["proposal"]["scheme"]
    need(scheme in SCHEMES, "proposal.scheme", f"expected one of {SCHEMES}")
    need((scheme == "ctds") == cfg["path"].endswith("continuum"), "path",
         "continuum paths go with the ctds scheme and only with it")
    need(cfg["proposal"]["dt"] > 0, "proposal.dt", "must be positive")
    tr = cfg["training"]
    for k in ("epochs", "iters_per_epoch", "batch_size", "n_particles"):
        need(isinstance(tr[k], int) and tr[k] >= 1, f"training.{k}", "must be a positive integer")
    cur = tr["curriculum"]
    need(len(cur["horizons"]) == len(cur["budgets"]), "training.curriculum", "horizons and budgets must pair up")
    for h in cur["horizons"]:
        n = round(h / cfg["proposal"]["dt"])
        need(abs(n * cfg["proposal"]["dt"] - h) < 1e-9, "training.curriculum.horizons",
             f"horizon {h} is not a multiple of proposal.dt")
    need(cfg["network"]["width"] >= 1 and cfg["network"]["depth"] >= 1, "network", "width and depth must be >= 1")
    ev = cfg["evaluation"]
    need(ev["n"] >= 1 and ev["trials"] >= 1, "evaluation", "n and trials must be >= 1")


def load_file(path):
    with open(path) as f:
        text = f.read()
    try:
        data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at top level")
    return data


def load(path=None, preset=None, profile=None, overrides=None, env=None):
    user = load_file(path) if path else {}
    if preset:
        user["preset"] = preset
    if profile:
        user["profile"] = profile
    if overrides:
        user = deep_merge_loose(user, overrides)
    return resolve(user, env)


def deep_merge_loose(a, b):
    out = copy.deepcopy(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge_loose(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text):
    """``a.b.c=value`` into a nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like key.path=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def config_hash(cfg):
    """SHA-256 of the canonical JSON of everything except the output location."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def code_version():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def manifest(cfg):
    return {"config": cfg, "config_hash": config_hash(cfg), "code_version": code_version(),
            "seeds": cfg["seeds"]}


# --- building objects from a config ----------------------------------------------


def build_run(cfg, with_models=True):
    """Instantiate ``(source, target, schedule, conf, integrator, models, path)`` for ``cfg``."""
    from ctds.dynamics import IntegratorConfig
    from ctds.energies import GaussianEnergy, GaussianMixtureTarget, GaussianSource, PathSpec
    from ctds.models import build_models
    from ctds.tempering import ConfiningPotential, TemperatureSchedule

    tg = cfg["target"]
    if tg["kind"] == "gmm40":
        target = GaussianMixtureTarget.gmm40(tg["mean_seed"], tg["n_modes"], tg["box"], tg["std"], tg["dim"])
        source = GaussianSource(cfg["source"]["sigma2"], tg["dim"])
    else:
        target = GaussianEnergy(tg["sigma1"] ** 2, tg["dim"])
        source = GaussianSource(tg["sigma0"] ** 2, tg["dim"])
    te = cfg["tempering"]
    schedule = TemperatureSchedule(te["beta_min"], te["delta"], te["delta_prime"])
    conf = ConfiningPotential(te["eta"], te["delta_tilde"])
    pr = cfg["proposal"]
    integ = IntegratorConfig(pr["scheme"], dt=pr["dt"], epsilon=pr["epsilon"], gamma=pr["gamma"],
                             gamma_xi=pr["gamma_xi"], epsilon_xi=pr["epsilon_xi"], mass_x=pr["mass_x"],
                             mass_xi=pr["mass_xi"], confining=conf, seed=cfg["seeds"]["train"])
    models = path = None
    if with_models:
        net = cfg["network"]
        feats = {g: tuple(v) for g, v in net["features"].items()}
        models = build_models(source.dim, source, continuum=cfg["path"].endswith("continuum"),
                              learned=cfg["path"].startswith("learned"), width=net["width"],
                              depth=net["depth"], features=feats, seed=cfg["seeds"]["network"],
                              schedule=schedule)
        path = PathSpec(cfg["path"], source, target, models.correction, schedule)
    return source, target, schedule, conf, integ, models, path


def train_config(cfg):
    from ctds.training import Curriculum, LRSchedule, TrainConfig

    tr = cfg["training"]
    cur = tr["curriculum"]
    opt = tr["optimizer"]
    return TrainConfig(
        epochs=tr["epochs"], iters_per_epoch=tr["iters_per_epoch"], batch_size=tr["batch_size"],
        n_particles=tr["n_particles"], reweight=bool(tr["reweight"]), n_time_bins=tr["n_time_bins"],
        curriculum=Curriculum(tuple(cur["horizons"]), tuple(cur["budgets"])),
        lr=LRSchedule(opt["lr"], opt["decay"], opt["every"], opt["burn_in"]),
        retain_fraction=tr["retain_fraction"], checkpoint_every=tr["checkpoint_every"], seed=cfg["seeds"]["train"],
    )


def fingerprint(cfg):
    return config_hash(cfg)[:16]


def as_jsonable(obj):
    if isinstance(obj, dict):
        return {k: as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
