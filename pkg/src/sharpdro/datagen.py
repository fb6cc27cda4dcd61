"""Corrupted datasets whose severity frequencies follow a truncated Poisson law.

All randomness comes from the counter-based stream in :mod:`sharpdro.kernels`
keyed by ``(seed, tag, sample index)``, so datasets are identical whatever
the number of worker threads.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DomainError, IngestionError, PreconditionError

_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class SeverityDistribution:
    lam: float = 1.0
    max_severity: int = 5
    mode: str = "renormalize"

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError("Poisson rate must be positive")
        if self.max_severity < 0:
            raise DomainError("max_severity must be nonnegative")
        if self.mode not in ("clamp", "renormalize"):
            raise DomainError(f"unknown severity mode {self.mode!r}")

    def probs(self) -> np.ndarray:
        return severity_probs(self)


@dataclass(frozen=True)
class AdditiveGaussian:
    sigma_unit: float = 0.5

    def __post_init__(self):
        if not self.sigma_unit > 0:
            raise DomainError("sigma_unit must be positive")


@dataclass(frozen=True)
class Quantize:
    """Round to a grid of ``base_levels`` cells over ``span`` at severity 1.

    Each further severity halves the number of levels, i.e. doubles the step.
    """
    base_levels: int = 16
    span: float = 8.0

    def __post_init__(self):
        if self.base_levels < 2:
            raise DomainError("base_levels must be at least 2")
        if not self.span > 0:
            raise DomainError("span must be positive")

    def step(self, s: int) -> float:
        return self.span * 2.0 ** (s - 1) / self.base_levels


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    dim: int = 8
    class_separation: float = 3.0
    within_class_sigma: float = 1.0
    n_train: int = 2000
    n_test_per_severity: int = 500

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 1:
            raise PreconditionError("need num_classes >= 2 and dim >= 1")
        if self.n_train < 1 or self.n_test_per_severity < 1:
            raise PreconditionError("sample counts must be positive")
        if not self.class_separation > 0:
            raise PreconditionError("class_separation must be positive")
        if self.within_class_sigma < 0:
            raise PreconditionError("within_class_sigma must be nonnegative")


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CorruptedDataset:
    X: np.ndarray
    y: np.ndarray
    severity: np.ndarray
    num_classes: int
    max_severity: int
    seed: int = 0
    spec_hash: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        s = np.asarray(self.severity, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],) or s.shape != (X.shape[0],):
            raise PreconditionError("X, y and severity must share the sample count")
        if s.size and (s.min() < 0 or s.max() > self.max_severity):
            raise PreconditionError("severity values out of range")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise PreconditionError("labels out of range")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "severity", _readonly(s))

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx) -> "CorruptedDataset":
        return CorruptedDataset(self.X[idx], self.y[idx], self.severity[idx], self.num_classes,
                                self.max_severity, self.seed, self.spec_hash)

    def group(self, s: int) -> "CorruptedDataset":
        return self.subset(np.flatnonzero(self.severity == s))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.X, self.y, self.severity):
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        h.update(f"{self.num_classes}/{self.max_severity}/{self.seed}/{self.spec_hash}".encode())
        return h.hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, X=self.X, y=self.y, severity=self.severity,
                     meta=np.array(json.dumps({
                         "num_classes": self.num_classes, "max_severity": self.max_severity,
                         "seed": self.seed, "spec_hash": self.spec_hash})))

    @classmethod
    def load(cls, path) -> "CorruptedDataset":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            return cls(z["X"], z["y"], z["severity"], **meta)


# --------------------------------------------------------------------------
# Poisson severities


def poisson_pmf(s: int, lam: float) -> float:
    """``exp(-lam) * lam**s / s!``."""
    if not lam > 0:
        raise DomainError("Poisson rate must be positive")
    if s < 0 or int(s) != s:
        raise DomainError("severity must be a nonnegative integer")
    s = int(s)
    if s <= 170:
        return math.exp(-lam) * lam ** s / math.factorial(s)
    return math.exp(-lam + s * math.log(lam) - math.lgamma(s + 1))


def severity_probs(dist: SeverityDistribution) -> np.ndarray:
    S = dist.max_severity
    raw = np.array([poisson_pmf(s, dist.lam) for s in range(S + 1)])
    if dist.mode == "clamp":
        raw[S] = max(0.0, 1.0 - math.fsum(raw[:S]))
        return raw
    return raw / math.fsum(raw)


def sample_severities(n: int, dist: SeverityDistribution, seed: int, tag: str = "severity",
                      workers: int = 1) -> np.ndarray:
    """I.i.d. severities; draw ``i`` is a function of ``(seed, tag, i)`` only."""
    if n < 1:
        raise PreconditionError("n must be at least 1")
    cdf = np.cumsum(severity_probs(dist))
    u = kernels.counter_uniform(seed, tag, np.arange(n), 1, workers)[:, 0]
    return np.minimum(np.searchsorted(cdf, u, side="right"), dist.max_severity).astype(np.int64)


# --------------------------------------------------------------------------
# corruption


def _corrupt_rows(X, severity, kind, seed, tag, index, workers=1):
    X = np.array(X, dtype=np.float64, copy=True)
    severity = np.asarray(severity)
    hit = severity > 0
    if not hit.any():
        return X
    if isinstance(kind, AdditiveGaussian):
        rows = np.flatnonzero(hit)
        z = kernels.counter_normal(seed, tag, np.asarray(index)[rows], X.shape[1], workers)
        X[rows] = X[rows] + (severity[rows] * kind.sigma_unit)[:, None] * z
    elif isinstance(kind, Quantize):
        for s in np.unique(severity[hit]):
            rows = severity == s
            step = kind.step(int(s))
            X[rows] = np.round(X[rows] / step) * step
    else:
        raise DomainError(f"unknown corruption kind {kind!r}")
    return X


def apply_corruption(x_row, s: int, kind, seed: int, index: int, tag: str = "corrupt") -> np.ndarray:
    """Corrupt one feature vector at severity ``s``; ``s == 0`` returns it unchanged."""
    x = np.asarray(x_row, dtype=np.float64)
    if s == 0:
        return x.copy()
    return _corrupt_rows(x[None, :], np.array([s]), kind, seed, tag, np.array([index]))[0]


def corrupt(X, severity, kind, seed: int, tag: str = "corrupt", workers: int = 1) -> np.ndarray:
    """Vectorised ``apply_corruption`` with sample ``i`` keyed by its row index."""
    X = np.asarray(X, dtype=np.float64)
    return _corrupt_rows(X, severity, kind, seed, tag, np.arange(X.shape[0]), workers)


# --------------------------------------------------------------------------
# synthetic generator


def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex with pairwise distance ``separation``.

    Uses Helmert contrasts, which need ``dim >= num_classes - 1``. Otherwise
    classes sit on the coordinate axes at growing radii (``+e_j``, ``-e_j``,
    then ``+2e_j`` ...), which keeps every pair at least ``separation / sqrt 2`` apart.
    """
    c = num_classes
    means = np.zeros((c, dim))
    scale = separation / math.sqrt(2.0)
    if dim >= c - 1:
        for j in range(1, c):
            v = 1.0 / math.sqrt(j * (j + 1))
            means[:j, j - 1] = v
            means[j, j - 1] = -j * v
        return means * scale
    for k in range(c):
        axis = k % dim
        ring = k // dim
        sign = 1.0 if ring % 2 == 0 else -1.0
        means[k, axis] = sign * scale * (1 + ring // 2)
    return means


def _spec_hash(*parts) -> str:
    payload = []
    for p in parts:
        payload.append({"type": type(p).__name__, **asdict(p)})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def generate_synthetic(spec: SyntheticSpec, dist: SeverityDistribution, kind, seed: int,
                       workers: int = 1):
    """Gaussian class clusters with Poisson-severity training corruption.

    The test split holds exactly ``n_test_per_severity`` samples for every
    severity ``0..S`` with labels cycling through the classes.
    """
    c, d, S = spec.num_classes, spec.dim, dist.max_severity
    means = class_means(c, d, spec.class_separation)
    digest = _spec_hash(spec, dist, kind)

    n = spec.n_train
    idx = np.arange(n)
    y_tr = np.minimum((kernels.counter_uniform(seed, "train/label", idx, 1, workers)[:, 0] * c)
                      .astype(np.int64), c - 1)
    s_tr = sample_severities(n, dist, seed, "train/severity", workers)
    clean = means[y_tr] + spec.within_class_sigma * kernels.counter_normal(
        seed, "train/clean", idx, d, workers)
    X_tr = corrupt(clean, s_tr, kind, seed, "train/corrupt", workers)

    m = spec.n_test_per_severity
    n_te = m * (S + 1)
    idx = np.arange(n_te)
    s_te = np.repeat(np.arange(S + 1), m)
    y_te = np.tile(np.arange(m) % c, S + 1)
    clean = means[y_te] + spec.within_class_sigma * kernels.counter_normal(
        seed, "test/clean", idx, d, workers)
    X_te = corrupt(clean, s_te, kind, seed, "test/corrupt", workers)

    train = CorruptedDataset(X_tr, y_tr, s_tr, c, S, seed, digest)
    test = CorruptedDataset(X_te, y_te, s_te, c, S, seed, digest)
    return train, test


# --------------------------------------------------------------------------
# CSV ingestion


def read_table(path, label_column: str):
    """Parse a header-bearing comma-delimited numeric table.

    Returns ``(features, raw_labels, feature_names)``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError("empty file", row=1) from None
        if label_column not in header:
            raise IngestionError(f"label column {label_column!r} not in header", row=1)
        label_at = header.index(label_column)
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise IngestionError(f"expected {len(header)} fields, found {len(record)}", row=lineno)
            values = []
            for name, cell in zip(header, record):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise IngestionError(f"cannot parse {cell!r} as a number",
                                         row=lineno, column=name) from None
                if not math.isfinite(values[-1]):
                    raise IngestionError(f"non-finite value {cell!r}", row=lineno, column=name)
            label = values[label_at]
            if label != int(label):
                raise IngestionError(f"label {record[label_at]!r} is not an integer",
                                     row=lineno, column=label_column)
            rows.append(values)
    if not rows:
        raise IngestionError("table has no data rows")
    table = np.array(rows, dtype=np.float64)
    feature_cols = [j for j in range(len(header)) if j != label_at]
    return table[:, feature_cols], table[:, label_at].astype(np.int64), [header[j] for j in feature_cols]


def load_csv(path, label_column: str, dist: SeverityDistribution, kind, seed: int,
             test_fraction: float = 0.2, workers: int = 1):
    """Load a numeric table and build corrupted train/test splits.

    Held-out rows are replicated once per severity so the test split is
    balanced across ``0..S``. Features are standardised with training
    statistics before corruption.
    """
    feats, raw_labels, _ = read_table(path, label_column)
    classes = np.unique(raw_labels)
    if classes.size < 2:
        raise PreconditionError("label column holds a single class")
    y = np.searchsorted(classes, raw_labels)
    n = feats.shape[0]
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n - n_test < 1:
        raise PreconditionError("too few rows for a train/test split")
    order = np.argsort(kernels.counter_uniform(seed, "csv/split", np.arange(n))[:, 0], kind="stable")
    te_rows, tr_rows = np.sort(order[:n_test]), np.sort(order[n_test:])

    mean = feats[tr_rows].mean(axis=0)
    std = np.sqrt(np.maximum(feats[tr_rows].var(axis=0), _VAR_FLOOR))
    Z = (feats - mean) / std
    Z[:, feats[tr_rows].var(axis=0) < _VAR_FLOOR] = 0.0

    S = dist.max_severity
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16] + ":" + _spec_hash(dist, kind)
    s_tr = sample_severities(len(tr_rows), dist, seed, "train/severity", workers)
    X_tr = corrupt(Z[tr_rows], s_tr, kind, seed, "train/corrupt", workers)
    s_te = np.repeat(np.arange(S + 1), len(te_rows))
    X_te = corrupt(np.tile(Z[te_rows], (S + 1, 1)), s_te, kind, seed, "test/corrupt", workers)
    c = int(classes.size)
    train = CorruptedDataset(X_tr, y[tr_rows], s_tr, c, S, seed, digest)
    test = CorruptedDataset(X_te, np.tile(y[te_rows], S + 1), s_te, c, S, seed, digest)
    return train, test
