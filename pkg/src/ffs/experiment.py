"""End-to-end runs: generate (or load) data, train, calibrate, evaluate.

Used by the ``train`` and ``sweep`` commands and by the acceptance suite.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from . import datakit, evalkit, synthesis, trainer
from .config import RunConfig
from .numerics import SeededRng


@dataclass
class RunResult:
    state: trainer.TrainState
    metrics: evalkit.Metrics
    train: datakit.FeatureSet
    val: datakit.FeatureSet
    ood: datakit.FeatureSet
    seconds: float


def evaluate(state: trainer.TrainState, val: datakit.FeatureSet, ood: datakit.FeatureSet):
    """Threshold from validation inliers; accuracy over validation inliers."""
    inl = val.inliers()
    e_id, logits = trainer.energies(state.bundle, inl.features)
    e_ood, _ = trainer.energies(state.bundle, ood.features)
    acc = evalkit.inlier_accuracy(logits, inl.labels)
    return evalkit.compute_metrics(e_id, e_ood, acc)


def run(rc: RunConfig, data=None, callback=None) -> RunResult:
    """Train and evaluate one configuration; ``data`` overrides generation."""
    train_set, val_set, ood_set = data if data is not None else datakit.generate(rc.dataset_spec())
    cfg = rc.train_config()
    t0 = time.perf_counter()
    state = trainer.train(train_set, cfg, callback=callback)
    seconds = time.perf_counter() - t0
    return RunResult(state, evaluate(state, val_set, ood_set), train_set, val_set, ood_set, seconds)


def synthetic_outliers(model, n: int, k: int = 200, s: int = 1, seed: int = 0):
    """``n`` rejection-sampled outliers drawn in batches of ``s`` out of ``k``."""
    rng = SeededRng(seed, (5,))
    cfg = synthesis.SynthesisConfig(k=k, s=s)
    parts = [synthesis.rejection_sample(model, cfg, rng).features for _ in range(-(-n // s))]
    return np.concatenate(parts)[:n]


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "det", "nll", "reg", "total"])
        for it, *vals in history:
            w.writerow([it, *(repr(float(v)) for v in vals)])


def write_outputs(result: RunResult, rc: RunConfig, out_dir, plots: bool = True):
    """Checkpoint, loss history, metrics JSON, resolved config and figures."""
    os.makedirs(out_dir, exist_ok=True)
    trainer.save_checkpoint(result.state, os.path.join(out_dir, "checkpoint.ffsc"))
    write_history(result.state.history, os.path.join(out_dir, "history.csv"))
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(result.metrics.to_json())
    rc.write(os.path.join(out_dir, "config.resolved"))
    if plots:
        from . import plotting

        plotting.loss_curves(result.state.history, rc.train_config().warmup_iters,
                             os.path.join(out_dir, "history.png"))
