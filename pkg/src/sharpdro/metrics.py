"""Per-severity evaluation: accuracy, loss, sharpness, gradient norms,
OOD-score histograms and two-dimensional loss-surface slices.

Nothing here mutates its inputs; datasets are read-only and parameter
vectors are rebuilt rather than edited.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import methods
from .autodiff import ModelSpec, ParameterVector, forward, loss_and_grad, per_sample_losses
from .datagen import CorruptedDataset
from .errors import PreconditionError

EXHAUSTIVE_LIMIT = 20


def _groups(test: CorruptedDataset):
    for s in range(test.max_severity + 1):
        yield s, np.flatnonzero(test.severity == s)


def per_severity_accuracy(model: ModelSpec, theta: ParameterVector, test: CorruptedDataset) -> np.ndarray:
    """Argmax accuracy per severity; absent severities are NaN."""
    pred = forward(model, theta, test.X).probs.argmax(axis=1)
    correct = (pred == test.y).astype(np.float64)
    out = np.full(test.max_severity + 1, np.nan)
    for s, rows in _groups(test):
        if rows.size:
            out[s] = correct[rows].mean()
    return out


def per_severity_loss(model, theta, test) -> np.ndarray:
    losses = per_sample_losses(model, theta, test.X, test.y)
    out = np.full(test.max_severity + 1, np.nan)
    for s, rows in _groups(test):
        if rows.size:
            out[s] = losses[rows].mean()
    return out


def empirical_sharpness(model, theta, X, y, rule) -> float:
    """Sharpness of one group with the perturbation taken from its own gradient."""
    if len(y) == 0:
        return float("nan")
    return methods.sharpness_penalty(model, theta, X, y, None, rule)


def per_severity_sharpness(model, theta, test, rule) -> np.ndarray:
    out = np.full(test.max_severity + 1, np.nan)
    for s, rows in _groups(test):
        if rows.size:
            out[s] = empirical_sharpness(model, theta, test.X[rows], test.y[rows], rule)
    return out


def per_severity_grad_norm(model, theta, test, loss_scale: float = 1.0) -> np.ndarray:
    """l2 norm of the mean-loss gradient of each severity group."""
    out = np.full(test.max_severity + 1, np.nan)
    for s, rows in _groups(test):
        if rows.size:
            _, g = loss_and_grad(model, theta, test.X[rows], test.y[rows])
            out[s] = np.linalg.norm(loss_scale * g.values)
    return out


def evaluate(model, theta, test, rule) -> dict:
    return {
        "accuracy": per_severity_accuracy(model, theta, test),
        "loss": per_severity_loss(model, theta, test),
        "sharpness": per_severity_sharpness(model, theta, test, rule),
        "grad_norm": per_severity_grad_norm(model, theta, test),
    }


def sign_pattern_sharpness(model, theta, X, y, rho, weights=None):
    """Exhaustive max of ``L(theta + rho * p) - L(theta)`` over ``p in {-1, 1}^k``.

    Returns ``(value, best_pattern)``. Only for models with at most
    ``EXHAUSTIVE_LIMIT`` parameters.
    """
    k = len(theta)
    if k > EXHAUSTIVE_LIMIT:
        raise PreconditionError(f"exhaustive search needs <= {EXHAUSTIVE_LIMIT} parameters, got {k}")
    base, _ = loss_and_grad(model, theta, X, y, weights)
    best, best_p = -np.inf, None
    for bits in itertools.product((-1.0, 1.0), repeat=k):
        p = np.array(bits)
        val, _ = loss_and_grad(model, theta.with_values(theta.values + rho * p), X, y, weights)
        if val - base > best:
            best, best_p = val - base, p
    return best, best_p


# --------------------------------------------------------------------------
# OOD histograms


def ood_histogram(scores, severity, num_groups: int, bins: int = 20) -> dict:
    """Fixed-bin histograms of normalised scores over ``[0, max]`` per severity."""
    scores = np.asarray(scores, dtype=np.float64)
    severity = np.asarray(severity)
    top = float(scores.max()) if scores.size else 0.0
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    counts = np.zeros((num_groups, bins), dtype=np.int64)
    means = np.full(num_groups, np.nan)
    for s in range(num_groups):
        sel = scores[severity == s]
        if sel.size:
            counts[s], _ = np.histogram(sel, bins=edges)
            means[s] = sel.mean()
    return {"edges": edges, "counts": counts, "means": means}


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = ~(np.isnan(x) | np.isnan(y))
    if keep.sum() < 2:
        return float("nan")
    return float(spearmanr(x[keep], y[keep]).statistic)


# --------------------------------------------------------------------------
# loss surface


@dataclass(frozen=True)
class SurfaceSlice:
    directions: np.ndarray  # (2, k), orthonormal rows
    offsets: np.ndarray  # (resolution,)
    values: np.ndarray  # (num_groups, resolution, resolution), [s, i, j] at a_i * d0 + b_j * d1
    normalization: str = "unit-l2 random directions, Gram-Schmidt orthonormalised"


def random_directions(k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    q, r = np.linalg.qr(rng.normal(size=(k, 2)))
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q.T)


def loss_surface_slice(model, theta, test, grid_radius: float, resolution: int, seed: int,
                       directions=None) -> SurfaceSlice:
    """Per-severity loss on the plane ``theta + a d0 + b d1``; the centre is ``theta``."""
    if resolution < 1 or resolution % 2 == 0:
        raise PreconditionError("resolution must be odd")
    dirs = random_directions(len(theta), seed) if directions is None else np.asarray(directions, float)
    offsets = np.linspace(-grid_radius, grid_radius, resolution)
    if resolution == 1:
        offsets = np.zeros(1)
    offsets[resolution // 2] = 0.0
    G = test.max_severity + 1
    values = np.full((G, resolution, resolution), np.nan)
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            point = theta.with_values(theta.values + a * dirs[0] + b * dirs[1])
            values[:, i, j] = per_severity_loss(model, point, test)
    return SurfaceSlice(dirs, offsets, values)
