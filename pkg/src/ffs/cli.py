"""``ffs`` command-line interface.

Exit codes: 0 success, 1 runtime or IO failure, 2 configuration error.
Every command writes its resolved configuration (``config.resolved`` or
``command.resolved``) into the output directory, including SHA-256 digests
of the input files it read.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datakit, evalkit, experiment, synthesis, trainer
from .config import RunConfig, load_config, parse_text, sha256_file, SCHEMA
from .errors import ConfigError, FFSError, InvalidArgument
from .numerics import SeededRng

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
GRID_KEYS = ("k", "s", "tau", "M", "H", "W", "alpha", "mode")


class UsageError(Exception):
    """Bad command-line arguments; maps to exit code 2."""


# -- helpers -------------------------------------------------------------------


def _config(args) -> RunConfig:
    rc = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", None)
        rc = parse_text(item, rc)
    return rc


def _out_dir(args, rc=None):
    out = args.out or (rc["out_dir"] if rc is not None else "out")
    os.makedirs(out, exist_ok=True)
    return out


def _plots(args, rc=None):
    if getattr(args, "no_plot", False):
        return False
    return rc["plots"] if rc is not None else True


def _write_command_echo(out, command, params: dict, inputs):
    lines = [f"# resolved arguments of 'ffs {command}'"]
    lines += [f"{k} = {v}" for k, v in params.items()]
    lines += [f"# input {p} sha256={sha256_file(p)}" for p in inputs if p]
    with open(os.path.join(out, "command.resolved"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return trainer.load_checkpoint(path)


def _read(path, K):
    if not os.path.exists(path):
        raise FileNotFoundError(f"data file not found: {path}")
    return datakit.read_any(path, K)


def _read_outliers(path, K):
    """Outlier features from a ``sample`` CSV or any labelled dataset file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"outlier file not found: {path}")
    if path.endswith(".csv"):
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        if first.startswith("log_lik"):
            return datakit.read_outliers_csv(path)[0]
    return datakit.read_any(path, K).features


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2) + "\n")


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    rc = _config(argparse.Namespace(config=args.spec, set=args.set))
    spec = rc.dataset_spec()
    out = _out_dir(args, rc)
    for name, data in zip(("train", "val", "ood"), datakit.generate(spec)):
        datakit.write_csv(data, os.path.join(out, f"{name}.csv"))
        datakit.write_bin(data, os.path.join(out, f"{name}.bin"))
        print(f"{name}: {len(data)} records")
    rc.write(os.path.join(out, "config.resolved"))
    return EXIT_OK


def cmd_train(args):
    rc = _config(args)
    cfg = rc.train_config()
    spec = rc.dataset_spec()
    out = _out_dir(args, rc)
    data = None
    if args.data:
        paths = [os.path.join(args.data, f"{n}.csv") for n in ("train", "val", "ood")]
        data = tuple(_read(p, spec.K) for p in paths)
        rc.inputs = {p: sha256_file(p) for p in paths}
    result = experiment.run(rc, data)
    experiment.write_outputs(result, rc, out, plots=_plots(args, rc))
    print(result.metrics.to_json(), end="")
    print(f"trained {cfg.total_iters} iterations in {result.seconds:.1f}s -> {out}")
    return EXIT_OK


def cmd_calibrate(args):
    state = _load_checkpoint(args.checkpoint)
    val = _read(args.val, state.bundle.head.K).inliers()
    e_id, _ = trainer.energies(state.bundle, val.features)
    xi = evalkit.calibrate_threshold(e_id)
    out = _out_dir(args)
    _write_json(os.path.join(out, "threshold.json"), {
        "threshold": xi, "n_id": len(e_id),
        "degenerate_threshold": evalkit.threshold_is_degenerate(e_id, xi)})
    _write_command_echo(out, "calibrate", {"checkpoint": args.checkpoint, "val": args.val},
                        [args.checkpoint, args.val])
    print(f"threshold = {xi!r}")
    return EXIT_OK


def cmd_eval(args):
    state = _load_checkpoint(args.checkpoint)
    K = state.bundle.head.K
    val, ood = _read(args.val, K), _read(args.ood, K)
    metrics = experiment.evaluate(state, val, ood)
    out = _out_dir(args)
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(metrics.to_json())
    _write_command_echo(out, "eval", {"checkpoint": args.checkpoint, "val": args.val,
                                      "ood": args.ood}, [args.checkpoint, args.val, args.ood])
    if _plots(args):
        from . import plotting

        e_id, _ = trainer.energies(state.bundle, val.inliers().features)
        e_ood, _ = trainer.energies(state.bundle, ood.features)
        plotting.energy_histogram(e_id, e_ood, metrics.threshold,
                                  os.path.join(out, "energies.png"))
    print(metrics.to_json(), end="")
    return EXIT_OK


def cmd_sample(args):
    if args.mode == "projection" and not args.val:
        raise UsageError("projection sampling needs --val as the source of delta")
    if args.mode in ("vos", "vos_plus") and not args.train:
        raise UsageError(f"{args.mode} sampling needs --train to fit class Gaussians")
    try:
        cfg = synthesis.SynthesisConfig(mode=args.mode, k=args.k, s=args.s, tau=args.tau,
                                        max_steps=args.max_steps)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    state = _load_checkpoint(args.checkpoint)
    K = state.bundle.head.K
    rng = SeededRng(args.seed, (6,))
    delta = gaussians = None
    if args.val:
        delta = synthesis.estimate_delta(state.flow, _read(args.val, K).inliers().features)
    if args.train:
        tr = _read(args.train, K).inliers()
        gaussians = synthesis.fit_class_gaussians(tr.features, tr.labels, n_classes=K)
    batch = synthesis.sample_outliers(state.flow, cfg, rng, delta=delta, gaussians=gaussians)
    out = _out_dir(args)
    feats = batch.features.reshape(len(batch), -1)
    datakit.write_outliers_csv(feats, batch.log_liks, os.path.join(out, "outliers.csv"))
    _write_command_echo(out, "sample", {
        "checkpoint": args.checkpoint, "mode": args.mode, "k": args.k, "s": args.s,
        "tau": args.tau, "max_steps": args.max_steps, "seed": args.seed,
        "val": args.val or "none", "train": args.train or "none"},
        [args.checkpoint, args.val, args.train])
    if batch.provenance.get("warning"):
        print(f"warning: {batch.provenance['warning']}", file=sys.stderr)
    print(f"{len(batch)} outliers -> {os.path.join(out, 'outliers.csv')}")
    return EXIT_OK


def cmd_export_hist(args):
    state = _load_checkpoint(args.checkpoint)
    K = state.bundle.head.K
    val = _read(args.val, K)
    if args.outliers:
        outliers = _read_outliers(args.outliers, K)
    else:
        outliers = experiment.synthetic_outliers(state.flow, args.n_outliers, seed=args.seed)
    out = _out_dir(args)
    rows, _ = evalkit.export_histograms(state.flow, val.inliers().features,
                                        val.background().features, outliers, args.bins,
                                        os.path.join(out, "histogram.csv"))
    _write_command_echo(out, "export-hist", {
        "checkpoint": args.checkpoint, "val": args.val, "outliers": args.outliers or "none",
        "n_outliers": args.n_outliers, "bins": args.bins, "seed": args.seed},
        [args.checkpoint, args.val, args.outliers])
    if _plots(args):
        from . import plotting

        plotting.likelihood_histogram(rows, os.path.join(out, "histogram.png"))
    print(f"{len(rows)} histogram rows -> {os.path.join(out, 'histogram.csv')}")
    return EXIT_OK


def cmd_export_pca(args):
    val = _read(args.val, args.K)
    inl = val.inliers() if args.K is not None else val.subset(val.labels >= 0)
    outliers = _read_outliers(args.outliers, args.K) if args.outliers else np.empty((0, val.d))
    out = _out_dir(args)
    rows, _ = evalkit.export_pca(inl.features, inl.labels, outliers, os.path.join(out, "pca.csv"))
    _write_command_echo(out, "export-pca", {"val": args.val, "outliers": args.outliers or "none",
                                            "K": args.K}, [args.val, args.outliers])
    if _plots(args):
        from . import plotting

        plotting.pca_scatter(rows, os.path.join(out, "pca.png"))
    print(f"{len(rows)} PCA rows -> {os.path.join(out, 'pca.csv')}")
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------


def parse_grid(text):
    """``key = v1, v2, ...`` lines; ``seeds`` lists the seeds (``a..b`` ranges allowed)."""
    grid, seeds = {}, None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"grid line {lineno}: expected 'key = v1, v2'", None)
        key, value = (p.strip() for p in line.split("=", 1))
        items = [v.strip() for v in value.split(",") if v.strip()]
        if key == "seeds":
            seeds = []
            for item in items:
                if ".." in item:
                    a, b = item.split("..")
                    seeds.extend(range(int(a), int(b) + 1))
                else:
                    seeds.append(int(item))
            continue
        if key not in GRID_KEYS:
            raise ConfigError(f"grid line {lineno}: key {key!r} cannot be swept", key)
        if not items:
            raise ConfigError(f"grid line {lineno}: no values for {key!r}", key)
        try:
            grid[key] = [(item, SCHEMA[key][1](item)) for item in items]
        except ValueError as exc:
            raise ConfigError(f"grid line {lineno}: bad value for {key!r} ({exc})", key) from None
    return grid, seeds


def _sweep_cell(job):
    rc, out_dir, plots = job
    result = experiment.run(rc)
    experiment.write_outputs(result, rc, out_dir, plots=plots)
    m = result.metrics
    return m.fpr95, m.auroc, m.inlier_accuracy


def worker_count():
    env = os.environ.get("FFS_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"FFS_THREADS must be an integer, got {env!r}", "FFS_THREADS") from None
        if n < 1:
            raise ConfigError("FFS_THREADS must be >= 1", "FFS_THREADS")
        return n
    return os.cpu_count() or 1


def cmd_sweep(args):
    rc = _config(args)
    with open(args.grid, encoding="utf-8") as fh:
        grid, seeds = parse_grid(fh.read())
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    seeds = seeds if seeds is not None else [rc["seed"]]
    out = _out_dir(args, rc)
    keys = list(grid)
    jobs, cells = [], []
    for ci, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        overrides = {k: v for k, (_, v) in zip(keys, combo)}
        for seed in seeds:
            cell_rc = rc.with_overrides(seed=seed, **overrides)
            cell_rc.validate()
            cell_dir = os.path.join(out, f"cell{ci:03d}_seed{seed}")
            jobs.append((cell_rc, cell_dir, _plots(args, rc)))
            cells.append(([text for text, _ in combo], seed))
    workers = min(worker_count(), len(jobs)) or 1
    if workers == 1:
        results = [_sweep_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    rows = []
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*keys, "seed", "fpr95", "auroc", "inlier_accuracy"])
        for (texts, seed), (fpr, auc, acc) in zip(cells, results):
            w.writerow([*texts, seed, repr(fpr), repr(auc), repr(acc)])
            rows.append({**dict(zip(keys, texts)), "seed": seed, "fpr95": fpr, "auroc": auc})
    rc.write(os.path.join(out, "config.resolved"))
    with open(args.grid, encoding="utf-8") as src, \
            open(os.path.join(out, "grid.resolved"), "w", encoding="utf-8") as dst:
        dst.write(src.read())
        dst.write(f"# seeds used: {', '.join(map(str, seeds))}\n")
    if _plots(args, rc) and keys:
        from . import plotting

        for key in keys:
            plotting.sweep_summary(rows, key, os.path.join(out, f"sweep_{key}.png"))
    print(f"{len(rows)} sweep rows -> {path}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ffs", description="Flow-based feature synthesis for OOD detection.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--no-plot", action="store_true", help="skip PNG figures")
        return sp

    sp = add("gen-data", cmd_gen_data, "generate train/val/ood feature files")
    sp.add_argument("--spec", help="run configuration file (dataset keys are used)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = add("train", cmd_train, "train flow and heads, write checkpoint and metrics")
    sp.add_argument("--config", help="run configuration file")
    sp.add_argument("--data", help="directory with train/val/ood CSV files from gen-data")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = add("calibrate", cmd_calibrate, "fix the energy threshold on validation inliers")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--val", required=True)

    sp = add("eval", cmd_eval, "write the metrics JSON")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--ood", required=True)

    sp = add("sample", cmd_sample, "synthesize outlier features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", default="rejection", choices=synthesis.MODES)
    sp.add_argument("--k", type=int, default=200)
    sp.add_argument("--s", type=int, default=1)
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--max-steps", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--val", help="validation file (delta source for projection)")
    sp.add_argument("--train", help="training file (class Gaussians for vos modes)")

    sp = add("export-hist", cmd_export_hist, "log-likelihood histograms of id/background/outliers")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--outliers", help="outlier CSV (default: rejection-sampled)")
    sp.add_argument("--n-outliers", type=int, default=200)
    sp.add_argument("--bins", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("export-pca", cmd_export_pca, "2-D PCA projection of inliers and outliers")
    sp.add_argument("--val", required=True)
    sp.add_argument("--outliers")
    sp.add_argument("--K", type=int, help="number of inlier classes (default: inferred)")
    sp.add_argument("--checkpoint", help="accepted for symmetry; unused")

    sp = add("sweep", cmd_sweep, "grid of training runs")
    sp.add_argument("--config", help="base run configuration file")
    sp.add_argument("--grid", required=True, help="grid file: 'key = v1, v2' lines")
    sp.add_argument("--seeds", help="comma separated seeds (overrides the grid file)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" [{exc.key}]" if getattr(exc, "key", None) else ""
        print(f"ffs: config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"ffs: usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FFSError, OSError) as exc:
        print(f"ffs: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
