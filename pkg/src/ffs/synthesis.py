"""Outlier synthesis in feature space.

Flow-based synthesis draws latent codes ``z ~ N(0, I)``, maps them back with
``g = f^-1(z)`` and either keeps the ``s`` least likely of ``k`` candidates
(rejection) or pushes ``s`` candidates down the log-likelihood surface until
their mean log-likelihood reaches the level ``delta`` of the least likely
inlier (projection).  The class-conditional Gaussian baseline (VOS) and its
cross-class rejection filter (VOS+) live here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import solve_triangular

from . import flow as flowlib
from .errors import InvalidArgument, NumericOverflow
from .numerics import LOG_2PI, SeededRng

MODES = ("rejection", "projection", "vos", "vos_plus")


@dataclass
class SynthesisConfig:
    mode: str = "rejection"
    k: int = 200
    s: int = 1
    tau: float = 0.5
    max_steps: int = 500
    noise_scale: float = 0.0
    freeze_delta: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown synthesis mode {self.mode!r}")
        if self.k < 1 or self.s < 1:
            raise InvalidArgument("k and s must be >= 1")
        if self.mode != "projection" and self.s > self.k:
            raise InvalidArgument(f"s={self.s} exceeds k={self.k}")
        if self.tau <= 0 or self.max_steps < 1:
            raise InvalidArgument("projection needs tau > 0 and max_steps >= 1")
        if self.noise_scale < 0:
            raise InvalidArgument("noise_scale must be >= 0")


@dataclass
class OutlierBatch:
    features: np.ndarray  # (s, d)
    log_liks: np.ndarray  # (s,)
    provenance: dict = field(default_factory=dict)
    latents: np.ndarray | None = None  # z with features == f^-1(z), flow modes only

    def __len__(self):
        return len(self.log_liks)


def generate_candidates(model, k: int, rng: SeededRng):
    """``k`` flow samples; returns ``(g, log_liks, z)``."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    z = rng.normal((k, model.d))
    try:
        g = flowlib.inverse(model, z)
    except NumericOverflow:
        for i in range(k):
            try:
                flowlib.inverse(model, z[i])
            except NumericOverflow:
                raise NumericOverflow(f"inverse overflowed for draw {i}", where=i) from None
        raise
    # scored by a forward pass so log_liks match log_prob(g) exactly
    log_liks = flowlib.log_prob(model, g)
    return g, log_liks, z


def select_lowest(log_liks, s):
    """Indices of the ``s`` smallest values, ties to the earlier index, ascending."""
    return np.argsort(np.asarray(log_liks), kind="stable")[:s]


def rejection_sample(model, cfg: SynthesisConfig, rng: SeededRng) -> OutlierBatch:
    if cfg.s > cfg.k:
        raise InvalidArgument(f"s={cfg.s} exceeds k={cfg.k}")
    g, ll, z = generate_candidates(model, cfg.k, rng)
    keep = select_lowest(ll, cfg.s)
    return OutlierBatch(
        g[keep], ll[keep],
        {"mode": "rejection", "config": asdict(cfg), "steps": 0, "capped": False},
        z[keep],
    )


def estimate_delta(model, inliers) -> float:
    inliers = np.asarray(inliers, dtype=np.float64)
    if inliers.size == 0:
        raise InvalidArgument("no inliers to estimate delta from")
    return float(np.min(flowlib.log_prob(model, np.atleast_2d(inliers))))


def projection_sample(model, cfg: SynthesisConfig, delta: float, rng: SeededRng,
                      init=None, record_path: bool = False) -> OutlierBatch:
    """Iterate ``o <- o - tau * dlog p(o)/do`` until ``mean log p(o) <= delta``.

    ``init`` overrides the starting points (otherwise ``s`` flow samples).
    Hitting ``max_steps`` is not an error; ``provenance['capped']`` is set.
    """
    if init is None:
        o, ll, _ = generate_candidates(model, cfg.s, rng)
    else:
        o = np.atleast_2d(np.asarray(init, dtype=np.float64)).copy()
        ll = flowlib.log_prob(model, o)
    path = [o.copy()] if record_path else None
    steps = 0
    noise = cfg.noise_scale * math.sqrt(2.0 * cfg.tau)
    while np.mean(ll) > delta and steps < cfg.max_steps:
        o = o - cfg.tau * flowlib.grad_input_logprob(model, o)
        if noise > 0:
            o = o + noise * rng.normal(o.shape)
        ll = flowlib.log_prob(model, o)
        steps += 1
        if record_path:
            path.append(o.copy())
    capped = bool(np.mean(ll) > delta)
    prov = {"mode": "projection", "config": asdict(cfg), "steps": steps,
            "capped": capped, "delta": float(delta)}
    if capped:
        prov["warning"] = f"mean log-likelihood still above delta after {steps} steps"
    if record_path:
        prov["path"] = path
    z, _ = flowlib.forward(model, o)
    return OutlierBatch(o, np.asarray(ll), prov, z)


# -- class-conditional Gaussian baseline ----------------------------------------


@dataclass
class ClassGaussians:
    means: np.ndarray  # (K, d)
    cov: np.ndarray  # (d, d), shared, ridged
    counts: np.ndarray  # (K,)
    ridge: float = 1e-3

    def __post_init__(self):
        self._chol = np.linalg.cholesky(self.cov)
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    @property
    def K(self):
        return len(self.means)

    def log_density(self, x, c: int):
        """Log N(x; mu_c, Sigma) for rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x - self.means[c]
        sol = solve_triangular(self._chol, diff.T, lower=True)
        maha = np.sum(sol * sol, axis=0)
        d = self.means.shape[1]
        return -0.5 * (maha + self._logdet + d * LOG_2PI)

    def all_log_densities(self, x):
        """(n, K) matrix of class log-densities."""
        return np.stack([self.log_density(x, c) for c in range(self.K)], axis=1)


def fit_class_gaussians(features, labels, ridge: float = 1e-3, n_classes: int | None = None):
    """Per-class means with a pooled (divide by N) covariance plus ``ridge * I``."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y[y >= 0].max()) + 1 if np.any(y >= 0) else 0
    if n_classes < 1:
        raise InvalidArgument("no inlier classes")
    means, counts = [], []
    scatter = np.zeros((x.shape[1], x.shape[1]))
    total = 0
    for c in range(n_classes):
        xc = x[y == c]
        if len(xc) < 2:
            raise InvalidArgument(f"class {c} has {len(xc)} samples; need at least 2")
        mu = xc.mean(axis=0)
        cen = xc - mu
        scatter += cen.T @ cen
        total += len(xc)
        means.append(mu)
        counts.append(len(xc))
    cov = scatter / total + ridge * np.eye(x.shape[1])
    return ClassGaussians(np.array(means), cov, np.array(counts), ridge)


def vos_sample(g: ClassGaussians, c: int, k: int, s: int, rng: SeededRng) -> OutlierBatch:
    if not 0 <= c < g.K:
        raise InvalidArgument(f"class index {c} outside [0, {g.K})")
    if s > k:
        raise InvalidArgument(f"s={s} exceeds k={k}")
    draws = g.means[c] + rng.normal((k, g.means.shape[1])) @ g._chol.T
    dens = g.log_density(draws, c)
    keep = select_lowest(dens, s)
    return OutlierBatch(draws[keep], dens[keep],
                        {"mode": "vos", "class": c, "k": k, "s": s})


def vos_plus_filter(g: ClassGaussians, batch: OutlierBatch, c: int | None = None) -> OutlierBatch:
    """Drop samples that some other class explains better than their generator class."""
    if g.K < 2:
        raise InvalidArgument("VOS+ needs at least two classes")
    c = batch.provenance.get("class") if c is None else c
    if c is None:
        raise InvalidArgument("generator class unknown")
    if len(batch) == 0:
        return batch
    dens = g.all_log_densities(batch.features)
    own = dens[:, c]
    others = np.delete(dens, c, axis=1)
    keep = np.all(others <= own[:, None], axis=1)
    prov = dict(batch.provenance, mode="vos_plus", rejected=int((~keep).sum()))
    return OutlierBatch(batch.features[keep], batch.log_liks[keep], prov)


def sample_outliers(model, cfg: SynthesisConfig, rng: SeededRng, *, delta=None,
                    gaussians: ClassGaussians | None = None) -> OutlierBatch:
    """Dispatch on ``cfg.mode``; VOS modes sample every class and concatenate."""
    if cfg.mode == "rejection":
        return rejection_sample(model, cfg, rng)
    if cfg.mode == "projection":
        if delta is None:
            raise InvalidArgument("projection sampling needs delta")
        return projection_sample(model, cfg, delta, rng)
    if gaussians is None:
        raise InvalidArgument(f"{cfg.mode} sampling needs fitted class Gaussians")
    parts = []
    for c in range(gaussians.K):
        b = vos_sample(gaussians, c, cfg.k, cfg.s, rng)
        if cfg.mode == "vos_plus":
            b = vos_plus_filter(gaussians, b, c)
        parts.append(b)
    d = gaussians.means.shape[1]
    feats = np.concatenate([b.features for b in parts]) if parts else np.empty((0, d))
    return OutlierBatch(feats, np.concatenate([b.log_liks for b in parts]),
                        {"mode": cfg.mode, "per_class": [len(b) for b in parts]})
