"""Desk-scale labelled feature datasets and their file formats.

Labels: ``0..K-1`` inlier classes, ``K`` background, ``-1`` OOD.

CSV: header ``label,f0,...,f{d-1}`` (optional on read), one record per
line, floats written in shortest round-trip form.

Binary (little endian)::

    b"FFSD" | u32 version=1 | u32 N | u32 d | N x (i32 label, d x f32)

The binary payload is float32; reading it back is lossy for values that
are not exactly representable in 32 bits.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidArgument, ParseError
from .numerics import SeededRng

GENERATORS = ("gaussian-mixture", "crescents", "rings")
OOD_LABEL = -1
TRAIN_FRACTION = 0.8

BIN_MAGIC = b"FFSD"
BIN_VERSION = 1
BIN_HEADER = struct.Struct("<4sIII")


@dataclass
class FeatureRecord:
    label: int
    feature: np.ndarray


@dataclass
class FeatureSet:
    """Column-oriented dataset: ``features`` (N, d) and integer ``labels`` (N,)."""

    features: np.ndarray
    labels: np.ndarray
    K: int | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        self.features = feats if feats.ndim == 2 else feats.reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def d(self):
        return self.features.shape[1]

    def records(self):
        for lab, f in zip(self.labels, self.features):
            yield FeatureRecord(int(lab), f)

    def subset(self, mask):
        return FeatureSet(self.features[mask], self.labels[mask], self.K)

    def n_classes(self):
        """K if known, else inferred as ``max label`` (background is the top label)."""
        if self.K is not None:
            return self.K
        return int(self.labels.max()) if len(self.labels) else 0

    def inliers(self):
        K = self.n_classes()
        return self.subset((self.labels >= 0) & (self.labels < K))

    def background(self):
        return self.subset(self.labels == self.n_classes())


@dataclass
class DatasetSpec:
    generator: str = "crescents"
    K: int = 3
    d: int = 2
    n_per_class: int = 750
    n_background: int = 250
    n_ood: int = 500
    radius: float = 1.0
    noise: float = 0.15
    margin: float = 0.1
    ood_center: tuple | None = None
    ood_std: float = 0.12
    seed: int = 0
    centers: tuple = field(default=())

    def validate(self):
        if self.generator not in GENERATORS:
            raise InvalidArgument(f"generator: unknown value {self.generator!r}")
        if self.K < 1:
            raise InvalidArgument("K: need at least one inlier class")
        if self.d < 2:
            raise InvalidArgument("d: geometric generators need d >= 2")
        if self.n_per_class < 2:
            raise InvalidArgument("n_per_class: need at least 2 samples per class")
        if self.n_background < 0 or self.n_ood < 0:
            raise InvalidArgument("n_background/n_ood: must be >= 0")
        if self.radius <= 0:
            raise InvalidArgument("radius: must be positive")
        if self.noise < 0 or self.ood_std < 0 or self.margin < 0:
            raise InvalidArgument("noise/ood_std/margin: must be >= 0")
        if self.ood_center is not None and len(self.ood_center) not in (2, self.d):
            raise InvalidArgument("ood_center: needs 2 or d coordinates")
        if self.centers and len(self.centers) != self.K:
            raise InvalidArgument("centers: need one center per class")


def _pad(points2d, d, scale, rng):
    n = len(points2d)
    if d == 2:
        return points2d
    return np.hstack([points2d, scale * rng.normal((n, d - 2))])


def crescent_centers(spec: DatasetSpec):
    """Circle centre and arc orientation (+1 upper, -1 lower) of each class."""
    r = spec.radius
    return [((c * r, 0.5 * r * (c % 2)), 1.0 if c % 2 == 0 else -1.0) for c in range(spec.K)]


def crescent_manifold(spec: DatasetSpec, c: int, n: int = 400):
    """Noise-free arc of class ``c`` (for geometry checks)."""
    (cx, cy), sign = crescent_centers(spec)[c]
    theta = np.linspace(0.0, math.pi, n)
    return np.stack([cx + spec.radius * np.cos(theta), cy + sign * spec.radius * np.sin(theta)], 1)


def _class_points(spec: DatasetSpec, c: int, rng: SeededRng):
    n = spec.n_per_class
    if spec.generator == "crescents":
        (cx, cy), sign = crescent_centers(spec)[c]
        theta = math.pi * rng.uniform(n)
        pts = np.stack([cx + spec.radius * np.cos(theta), cy + sign * spec.radius * np.sin(theta)], 1)
    elif spec.generator == "rings":
        theta = 2.0 * math.pi * rng.uniform(n)
        rad = spec.radius * (1 + c)
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta)], 1)
    else:
        pts = np.tile(_mixture_center(spec, c)[:2], (n, 1))
    pts = pts + spec.noise * rng.normal((n, 2))
    if spec.generator == "gaussian-mixture" and spec.d > 2:
        extra = _mixture_center(spec, c)[2:]
        return np.hstack([pts, extra + spec.noise * rng.normal((n, spec.d - 2))])
    return _pad(pts, spec.d, spec.noise, rng)


def _mixture_center(spec: DatasetSpec, c: int):
    if spec.centers:
        center = np.asarray(spec.centers[c], dtype=np.float64)
        if center.size != spec.d:
            raise InvalidArgument("centers: each center needs d coordinates")
        return center
    angle = 2.0 * math.pi * c / spec.K
    center = np.zeros(spec.d)
    center[:2] = 4.0 * spec.radius * np.array([math.cos(angle), math.sin(angle)])
    return center


def support_box(spec: DatasetSpec):
    """Noise-free bounding box of the inlier supports (first two coordinates) plus margin."""
    if spec.generator == "crescents":
        arcs = np.concatenate([crescent_manifold(spec, c) for c in range(spec.K)])
        lo, hi = arcs.min(axis=0), arcs.max(axis=0)
    elif spec.generator == "rings":
        hi = np.full(2, spec.radius * spec.K)
        lo = -hi
    else:
        centers = np.stack([_mixture_center(spec, c)[:2] for c in range(spec.K)])
        lo = centers.min(axis=0) - 3.0 * spec.noise
        hi = centers.max(axis=0) + 3.0 * spec.noise
    return lo - spec.margin, hi + spec.margin


def default_ood_center(spec: DatasetSpec):
    """Crescents: above the middle arc; rings and mixtures: the origin."""
    if spec.generator == "crescents":
        return (0.5 * spec.radius * (spec.K - 1), 1.15 * spec.radius)
    return (0.0, 0.0)


def generate(spec: DatasetSpec):
    """Returns ``(train, val, ood)``; inliers and background split 80/20 per group."""
    spec.validate()
    rng = SeededRng(spec.seed)
    groups = [(c, _class_points(spec, c, rng)) for c in range(spec.K)]
    lo, hi = support_box(spec)
    bg = lo + (hi - lo) * rng.uniform(2 * spec.n_background).reshape(-1, 2)
    groups.append((spec.K, _pad(bg, spec.d, spec.noise, rng)))

    center = np.zeros(spec.d)
    oc = default_ood_center(spec) if spec.ood_center is None else spec.ood_center
    center[:len(oc)] = oc
    ood = center + spec.ood_std * rng.normal((spec.n_ood, spec.d))

    train_parts, val_parts = [], []
    for label, pts in groups:
        perm = rng.permutation(len(pts))
        n_train = int(round(TRAIN_FRACTION * len(pts)))
        train_parts.append((label, pts[perm[:n_train]]))
        val_parts.append((label, pts[perm[n_train:]]))

    def assemble(parts):
        feats = np.concatenate([p for _, p in parts]) if parts else np.empty((0, spec.d))
        labels = np.concatenate([np.full(len(p), lab) for lab, p in parts])
        return FeatureSet(feats, labels, spec.K)

    return (assemble(train_parts), assemble(val_parts),
            FeatureSet(ood, np.full(spec.n_ood, OOD_LABEL), spec.K))


# -- CSV -----------------------------------------------------------------------


def write_csv(data: FeatureSet, path, header: bool = True):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(["label"] + [f"f{i}" for i in range(data.d)])
        for lab, f in zip(data.labels, data.features):
            w.writerow([int(lab)] + [repr(float(v)) for v in f])


def read_csv(path, K: int | None = None) -> FeatureSet:
    labels, rows, d = [], [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and row[0].strip() == "label":
                d = len(row) - 1
                continue
            if d is None:
                d = len(row) - 1
            if len(row) - 1 != d or d < 1:
                raise ParseError(f"expected {d} features, found {len(row) - 1}", lineno)
            try:
                labels.append(int(row[0]))
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite feature value", lineno)
            rows.append(vals)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d or 0)
    return FeatureSet(feats, np.array(labels, dtype=np.int64), K)


# -- binary --------------------------------------------------------------------


def write_bin(data: FeatureSet, path):
    n, d = len(data), data.d
    rec = np.dtype([("label", "<i4"), ("f", "<f4", (d,))])
    arr = np.empty(n, dtype=rec)
    arr["label"] = data.labels
    arr["f"] = data.features
    with open(path, "wb") as fh:
        fh.write(BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, n, d))
        fh.write(arr.tobytes())


def read_bin(path, K: int | None = None) -> FeatureSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < BIN_HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, version, n, d = BIN_HEADER.unpack_from(raw, 0)
    if magic != BIN_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != BIN_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    rec = np.dtype([("label", "<i4"), ("f", "<f4", (d,))])
    need = BIN_HEADER.size + n * rec.itemsize
    if len(raw) < need:
        whole = (len(raw) - BIN_HEADER.size) // rec.itemsize
        raise FormatError(f"truncated record {whole}", BIN_HEADER.size + whole * rec.itemsize)
    if len(raw) > need:
        raise FormatError("trailing bytes after last record", need)
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=BIN_HEADER.size)
    return FeatureSet(arr["f"].astype(np.float64).reshape(n, d), arr["label"].astype(np.int64), K)


def read_any(path, K: int | None = None) -> FeatureSet:
    return read_bin(path, K) if str(path).endswith(".bin") else read_csv(path, K)


# -- synthesized outliers ------------------------------------------------------


def write_outliers_csv(features, log_liks, path):
    """Outlier CSV: header ``log_lik,f0,...,f{d-1}``."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["log_lik"] + [f"f{i}" for i in range(features.shape[1])])
        for ll, f in zip(log_liks, features):
            w.writerow([repr(float(ll))] + [repr(float(v)) for v in f])


def read_outliers_csv(path):
    """Returns ``(features, log_liks)`` from a file written by ``write_outliers_csv``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip() != "log_lik":
        raise ParseError("expected header starting with 'log_lik'", 1)
    d = len(rows[0]) - 1
    vals = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) - 1 != d:
            raise ParseError(f"expected {d} features, found {len(row) - 1}", lineno)
        try:
            vals.append([float(v) for v in row])
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", lineno) from None
    arr = np.array(vals, dtype=np.float64).reshape(len(vals), d + 1)
    return arr[:, 1:], arr[:, 0]
