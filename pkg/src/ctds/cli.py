"""Command line: ``train``, ``eval``, ``verify`` and ``plot``.

Exit codes: 0 success, 1 invalid input (config, files, mismatched
artifacts), 2 numerical failure (divergence, failed self-check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from ctds import config as C
from ctds.diffcore import load_checkpoint
from ctds.dynamics import run_proposal
from ctds.evaluation import evaluate_models, generate, histogram_csv, temperature_histogram
from ctds.models import models_from_nets
from ctds.training import TrainingDiverged, train

log = logging.getLogger("ctds")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

SAMPLES_CSV = "samples.csv"
HIST_CSV = "beta_hist.csv"
HIST_PRE_CSV = "beta_hist_pre.csv"


class InvalidInput(Exception):
    pass


def _limit_threads():
    n = os.environ.get(C.ENV_THREADS)
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("%s is set but threadpoolctl is not installed; ignoring", C.ENV_THREADS)
        return None
    return threadpool_limits(int(n))


def _write_csv(path, header, rows, manifest_hash):
    with open(path, "w", newline="") as f:
        f.write(f"# manifest {manifest_hash}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path):
    """Return ``(header, rows as float array)``; ``#`` lines are skipped."""
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#") and ln.strip()]
    if not lines:
        raise InvalidInput(f"{path} is empty")
    header = lines[0].strip().split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, len(header))
    return header, rows


def _hist_rows(edges, counts):
    text = histogram_csv(edges, counts).splitlines()[1:]
    return [ln.split(",") for ln in text]


def _beta_histogram(cfg, models, path, integ, n, seed):
    from dataclasses import replace

    tb = run_proposal(replace(integ, seed=seed), path, models, n, 1.0, record=False)
    sched = path.schedule
    return temperature_histogram(tb, sched, cfg["evaluation"]["hist_bins"])


# --- train ---------------------------------------------------------------------


def cmd_train(config_path=None, preset=None, profile=None, overrides=None, output_dir=None):
    """Resolve the config, train, and write manifest, log and checkpoint."""
    user_over = {}
    for o in overrides or []:
        user_over = C.deep_merge_loose(user_over, C.parse_override(o))
    if output_dir:
        user_over["output_dir"] = output_dir
    cfg = C.load(config_path, preset, profile, user_over)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    man = C.manifest(cfg)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(man, f, indent=2, sort_keys=True)
    source, target, schedule, conf, integ, models, path = C.build_run(cfg)
    h = man["config_hash"]
    if integ.scheme == "ctds":
        edges, counts = _beta_histogram(cfg, models, path, integ, cfg["training"]["n_particles"],
                                        cfg["seeds"]["eval"])
        _write_csv(os.path.join(out, HIST_PRE_CSV), ["beta", "count"], _hist_rows(edges, counts), h)
    meta = {"config_hash": h, "path": cfg["path"], "scheme": integ.scheme}
    result = train(models, path, integ, C.train_config(cfg), out_dir=out, meta=meta)
    last = result.history[-1]
    log.info("trained %d iterations; final loss %.4g", last["iter"] + 1, last["loss"])
    return result


# --- eval ----------------------------------------------------------------------


def _load_run(run_dir=None, checkpoint=None, config_path=None):
    if run_dir:
        checkpoint = checkpoint or os.path.join(run_dir, "checkpoint.bin")
        if config_path is None:
            mpath = os.path.join(run_dir, "manifest.json")
            if not os.path.exists(mpath):
                raise InvalidInput(f"no manifest.json in {run_dir}")
            with open(mpath) as f:
                cfg = C.resolve(json.load(f)["config"])
        else:
            cfg = C.load(config_path)
    else:
        if not (checkpoint and config_path):
            raise InvalidInput("give a run directory, or both --checkpoint and --config")
        cfg = C.load(config_path)
    if not os.path.exists(checkpoint):
        raise InvalidInput(f"checkpoint {checkpoint} not found")
    nets, meta = load_checkpoint(checkpoint)
    want = C.config_hash(cfg)
    if meta.get("config_hash") != want:
        raise InvalidInput(f"checkpoint was trained with config {meta.get('config_hash', '?')[:12]}, "
                           f"not {want[:12]}")
    return cfg, nets, meta


def cmd_eval(run_dir=None, checkpoint=None, config_path=None, n=None, trials=None, out_dir=None,
             histogram=True):
    cfg, nets, meta = _load_run(run_dir, checkpoint, config_path)
    source, target, schedule, conf, integ, _, _ = C.build_run(cfg, with_models=False)
    from ctds.energies import PathSpec

    models = models_from_nets(nets, source, schedule)
    path = PathSpec(cfg["path"], source, target, models.correction, schedule)
    ev = cfg["evaluation"]
    n = n or ev["n"]
    trials = trials or ev["trials"]
    h = C.config_hash(cfg)
    report = evaluate_models(models, source, target, n, trials, ev["dt"], cfg["seeds"]["eval"], h)
    report.validate()
    out = out_dir or run_dir or os.path.dirname(os.path.abspath(checkpoint))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "metrics.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(out, "metrics.csv"), "w") as f:
        f.write(report.csv_row())
    ss = generate(models, source, n, ev["dt"], seed=cfg["seeds"]["eval"])
    _write_csv(os.path.join(out, SAMPLES_CSV), [f"x{i}" for i in range(ss.points.shape[1])],
               [[f"{v:.8g}" for v in p] for p in ss.points], h)
    if histogram and models.continuum:
        edges, counts = _beta_histogram(cfg, models, path, integ, n, cfg["seeds"]["eval"])
        _write_csv(os.path.join(out, HIST_CSV), ["beta", "count"], _hist_rows(edges, counts), h)
    if not report.sandwich_ok():
        log.warning("ELBO exceeds EUBO by more than two standard errors")
    return report


# --- verify --------------------------------------------------------------------


def cmd_verify(quick=False):
    from ctds.verify import run_all

    return run_all(quick=quick)


# --- plot ----------------------------------------------------------------------


def _render_scatter(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ctds"
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(rows[:, 0], rows[:, 1], s=2, alpha=0.5, color="tab:blue", rasterized=False)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_aspect("equal")
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _render_hist(rows_by_label, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ctds"
    fig, ax = plt.subplots(figsize=(5, 3))
    for label, rows in rows_by_label.items():
        frac = rows[:, 1] / max(rows[:, 1].sum(), 1)
        width = (rows[1, 0] - rows[0, 0]) if len(rows) > 1 else 0.05
        ax.bar(rows[:, 0], frac, width=width * 0.9, alpha=0.5, label=label)
    ax.set_xlabel("beta")
    ax.set_ylabel("fraction")
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def cmd_plot(run_dir, render=True):
    """Check the CSV artifacts in ``run_dir`` and render them to SVG."""
    made = []
    spath = os.path.join(run_dir, SAMPLES_CSV)
    if not os.path.exists(spath):
        raise InvalidInput(f"{spath} not found; run eval first")
    header, rows = read_csv(spath)
    if header[:2] != ["x0", "x1"]:
        raise InvalidInput(f"{spath}: expected header x0,x1")
    if rows.shape[0] == 0:
        raise InvalidInput(f"{spath} holds no samples")
    if render:
        _render_scatter(rows, os.path.join(run_dir, "samples.svg"))
        made.append("samples.svg")
    hists = {}
    for label, name in (("before training", HIST_PRE_CSV), ("after training", HIST_CSV)):
        p = os.path.join(run_dir, name)
        if os.path.exists(p):
            header, hrows = read_csv(p)
            if header != ["beta", "count"]:
                raise InvalidInput(f"{p}: expected header beta,count")
            hists[label] = hrows
    if hists and render:
        _render_hist(hists, os.path.join(run_dir, "beta_hist.svg"))
        made.append("beta_hist.svg")
    return made


# --- entry point ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ctds", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a sampler")
    t.add_argument("--config", help="YAML or JSON config file")
    t.add_argument("--preset", choices=sorted(C.PRESETS))
    t.add_argument("--profile", choices=list(C.PROFILES))
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. training.epochs=10")
    t.add_argument("--output-dir")

    e = sub.add_parser("eval", help="evaluate a trained checkpoint")
    e.add_argument("run_dir", nargs="?")
    e.add_argument("--checkpoint")
    e.add_argument("--config")
    e.add_argument("--n", type=int)
    e.add_argument("--trials", type=int)
    e.add_argument("--output-dir")
    e.add_argument("--no-histogram", action="store_true")

    v = sub.add_parser("verify", help="run the closed-form self-checks")
    v.add_argument("--quick", action="store_true", help="fewer particles in the Jarzynski checks")
    v.add_argument("--json", action="store_true", help="machine-readable output")

    pl = sub.add_parser("plot", help="render scatter and temperature histograms")
    pl.add_argument("run_dir")
    pl.add_argument("--no-render", action="store_true", help="only validate the CSV files")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        if args.command == "train":
            res = cmd_train(args.config, args.preset, args.profile, args.overrides, args.output_dir)
            print(f"checkpoint: {res.checkpoint}")
        elif args.command == "eval":
            rep = cmd_eval(args.run_dir, args.checkpoint, args.config, args.n, args.trials, args.output_dir,
                           not args.no_histogram)
            print(rep.to_json())
        elif args.command == "verify":
            results = cmd_verify(args.quick)
            if args.json:
                print(json.dumps([r.to_dict() for r in results], indent=2))
            else:
                for r in results:
                    print(r.line())
            if not all(r.passed for r in results):
                return EXIT_NUMERIC
        elif args.command == "plot":
            for name in cmd_plot(args.run_dir, not args.no_render):
                print(name)
    except (C.ConfigError, InvalidInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
