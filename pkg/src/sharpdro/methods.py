"""Training methods: ERM, GroupDRO, REx, SAM and the two SharpDRO variants.

Every method shares one loop (:func:`train`); they differ only in how a
minibatch step turns gradients into a parameter update. The perturbed
objective ``L + R`` with ``R = L(theta + eps) - L(theta)`` collapses to
``L(theta + eps)``, so the sharpness-aware methods all descend along the
(weighted) gradient taken at the perturbed point.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .autodiff import (ModelSpec, ParameterVector, apply_perturbation, forward, loss_and_grad,
                       per_sample_losses)
from .datagen import CorruptedDataset
from .errors import NumericError, PreconditionError

METHODS = ("ERM", "GroupDRO", "REx", "SAM", "SharpDROAware", "SharpDROAgnostic")
WEIGHTED_METHODS = ("GroupDRO", "SharpDROAware")
PERTURB_RULES = ("sign", "l2", "raw")
_SCORE_FLOOR = 1e-12


@dataclass(frozen=True)
class PerturbRule:
    """How the worst-case parameter perturbation is built from a gradient.

    ``sign``: ``rho * sign(g)``; ``l2``: ``rho * g / ||g||``; ``raw``: ``rho * g``.
    ``rho == 0`` is allowed so that the perturbed methods can collapse onto
    their unperturbed counterparts.
    """
    kind: str = "sign"
    rho: float = 0.05

    def __post_init__(self):
        if self.kind not in PERTURB_RULES:
            raise PreconditionError(f"unknown perturbation rule {self.kind!r}")
        if not self.rho >= 0:
            raise PreconditionError("rho must be nonnegative")


def epsilon_star(g: ParameterVector, rule: PerturbRule) -> ParameterVector:
    v = g.values
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite gradient")
    if rule.kind == "sign":
        eps = rule.rho * np.sign(v)
    elif rule.kind == "l2":
        norm = np.linalg.norm(v)
        eps = np.zeros_like(v) if norm == 0 else rule.rho * v / norm
    else:
        eps = rule.rho * v
    return g.with_values(eps)


def sharpness_penalty(model: ModelSpec, theta: ParameterVector, X, y, weights=None,
                      rule: PerturbRule = PerturbRule()) -> float:
    """``L_w(theta + eps*) - L_w(theta)`` with ``eps*`` from the weighted gradient."""
    loss, g = loss_and_grad(model, theta, X, y, weights)
    perturbed = apply_perturbation(theta, epsilon_star(g, rule))
    loss_hat, _ = loss_and_grad(model, perturbed, X, y, weights)
    return loss_hat - loss


# --------------------------------------------------------------------------
# group and sample weights


def group_losses(model: ModelSpec, theta: ParameterVector, X, y, severity, num_groups: int) -> np.ndarray:
    """Mean loss per severity group; groups absent from the batch are NaN."""
    losses = per_sample_losses(model, theta, X, y)
    return _group_means(losses, np.asarray(severity), num_groups)


def _group_means(values, severity, num_groups):
    counts = np.bincount(severity, minlength=num_groups)
    sums = np.bincount(severity, weights=values, minlength=num_groups)
    out = np.full(num_groups, np.nan)
    present = counts > 0
    out[present] = sums[present] / counts[present]
    return out


def project_simplex(v, mass: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{w >= 0, sum w = mass}``."""
    v = np.asarray(v, dtype=np.float64)
    if np.all(v >= 0) and np.sum(v) == mass:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - mass
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def weight_update(w, losses, eta_omega: float, mode: str = "exponentiated") -> np.ndarray:
    """One ascent step on the group simplex.

    NaN entries of ``losses`` mark groups missing from the batch; their
    weights are left untouched and the present groups keep their total mass.
    """
    w = np.asarray(w, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    present = ~np.isnan(losses)
    if not present.any():
        raise PreconditionError("no group present in the batch")
    out = w.copy()
    wp, lp = w[present], losses[present]
    mass = np.sum(wp)
    if mode == "exponentiated":
        # shifting by the max cancels in the normalisation and avoids overflow
        new = wp * np.exp(eta_omega * (lp - lp.max()))
        total = np.sum(new)
        out[present] = new * (mass / total) if total > 0 else wp
    elif mode == "additive":
        out[present] = project_simplex(wp + eta_omega * (lp - lp.mean()), mass)
    else:
        raise PreconditionError(f"unknown weight update {mode!r}")
    return out


def group_sample_weights(omega, severity) -> np.ndarray:
    """Per-sample weights realising ``sum_g omega_g * mean_loss_g``, with mean one."""
    severity = np.asarray(severity)
    counts = np.bincount(severity, minlength=len(omega)).astype(np.float64)
    present = counts > 0
    mass = np.sum(np.asarray(omega)[present])
    per_group = np.zeros(len(omega))
    per_group[present] = (np.asarray(omega)[present] / mass) * (severity.size / counts[present])
    return per_group[severity]


def ood_scores(p, p_hat) -> np.ndarray:
    """Drop in max-class confidence when the parameters are perturbed."""
    p = getattr(p, "probs", p)
    p_hat = getattr(p_hat, "probs", p_hat)
    if p.shape[0] != p_hat.shape[0]:
        raise PreconditionError("predictions must cover the same samples")
    return p.max(axis=1) - p_hat.max(axis=1)


def normalize_scores(raw) -> np.ndarray:
    """Clamp negatives and divide by the mean; uniform scores give all ones."""
    w = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    mean = w.mean()
    if mean < _SCORE_FLOOR or np.all(w == w[0]):
        return np.ones_like(w)
    return w / mean


# --------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ERM"
    eta_theta: float = 0.03
    eta_omega: float = 0.01
    perturb: PerturbRule = PerturbRule()
    rex_beta: float = 1.0
    batch_size: int = 64
    epochs: int = 30
    weight_update: str = "exponentiated"
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    reuse_epsilon: bool = False
    init_scale: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise PreconditionError(f"unknown method {self.method!r}")
        if not (self.eta_theta > 0 and self.eta_omega >= 0):
            raise PreconditionError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise PreconditionError("batch_size must be >= 1 and epochs >= 0")
        if self.weight_update not in ("exponentiated", "additive"):
            raise PreconditionError(f"unknown weight update {self.weight_update!r}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise PreconditionError("momentum and weight_decay must be nonnegative")


@dataclass
class TrainState:
    theta: ParameterVector
    omega: np.ndarray
    velocity: np.ndarray | None = None
    last_scores: np.ndarray | None = None
    last_loss: float = float("nan")


def init_state(model: ModelSpec, config: TrainConfig, num_groups: int) -> TrainState:
    rng = np.random.default_rng([config.seed, 0])
    return TrainState(theta=model.init(rng, config.init_scale),
                      omega=np.full(num_groups, 1.0 / num_groups))


def _descend(state: TrainState, g: ParameterVector, config: TrainConfig) -> ParameterVector:
    theta = state.theta
    if config.momentum == 0 and config.weight_decay == 0:
        return theta.with_values(theta.values - config.eta_theta * g.values)
    d = g.values + config.weight_decay * theta.values
    v = d if state.velocity is None else config.momentum * state.velocity + d
    state.velocity = v
    return theta.with_values(theta.values - config.eta_theta * v)


# --------------------------------------------------------------------------
# steps


def _step_erm(model, state, X, y, s, config):
    loss, g = loss_and_grad(model, state.theta, X, y)
    return loss, g


def _step_groupdro(model, state, X, y, s, config):
    state.omega = weight_update(state.omega, group_losses(model, state.theta, X, y, s, len(state.omega)),
                                config.eta_omega, config.weight_update)
    w = group_sample_weights(state.omega, s)
    return loss_and_grad(model, state.theta, X, y, w)


def _step_rex(model, state, X, y, s, config):
    groups = np.unique(s)
    losses, grads = [], []
    for gidx in groups:
        rows = s == gidx
        lg, gg = loss_and_grad(model, state.theta, X[rows], y[rows])
        losses.append(lg)
        grads.append(gg.values)
    losses = np.array(losses)
    G = len(groups)
    coef = 1.0 + 2.0 * config.rex_beta * (losses - losses.mean()) / G
    total = losses.sum() + config.rex_beta * losses.var()
    g = state.theta.with_values(np.tensordot(coef, np.array(grads), axes=1))
    return float(total), g


def _step_sam(model, state, X, y, s, config):
    _, g = loss_and_grad(model, state.theta, X, y)
    perturbed = apply_perturbation(state.theta, epsilon_star(g, config.perturb))
    return loss_and_grad(model, perturbed, X, y)


def _step_sharpdro_aware(model, state, X, y, s, config):
    state.omega = weight_update(state.omega, group_losses(model, state.theta, X, y, s, len(state.omega)),
                                config.eta_omega, config.weight_update)
    w = group_sample_weights(state.omega, s)
    _, g = loss_and_grad(model, state.theta, X, y, w)
    perturbed = apply_perturbation(state.theta, epsilon_star(g, config.perturb))
    return loss_and_grad(model, perturbed, X, y, w)


def _step_sharpdro_agnostic(model, state, X, y, s, config):
    # first pass: confidence and gradient at theta, confidence at theta + eps
    _, g = loss_and_grad(model, state.theta, X, y)
    eps = epsilon_star(g, config.perturb)
    p = forward(model, state.theta, X)
    p_hat = forward(model, apply_perturbation(state.theta, eps), X)
    w = normalize_scores(ood_scores(p, p_hat))
    state.last_scores = w
    # second pass: weighted sharpness step
    if not config.reuse_epsilon:
        _, gw = loss_and_grad(model, state.theta, X, y, w)
        eps = epsilon_star(gw, config.perturb)
    return loss_and_grad(model, apply_perturbation(state.theta, eps), X, y, w)


_STEPS = {
    "ERM": _step_erm,
    "GroupDRO": _step_groupdro,
    "REx": _step_rex,
    "SAM": _step_sam,
    "SharpDROAware": _step_sharpdro_aware,
    "SharpDROAgnostic": _step_sharpdro_agnostic,
}


def step(model: ModelSpec, state: TrainState, X, y, severity, config: TrainConfig) -> TrainState:
    """Apply one minibatch update in place and return ``state``."""
    if len(y) == 0:
        raise PreconditionError("empty batch")
    loss, g = _STEPS[config.method](model, state, X, y, np.asarray(severity), config)
    if not math.isfinite(loss):
        raise NumericError("non-finite training loss")
    state.theta = _descend(state, g, config)
    state.last_loss = loss
    return state


# --------------------------------------------------------------------------
# training loop


@dataclass
class RunRecord:
    method: str
    seed: int
    rows: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    status: str = "ok"
    diagnostic: str = ""
    theta: ParameterVector | None = None

    CSV_COLUMNS = ("method", "seed", "epoch", "severity", "accuracy", "loss",
                   "sharpness", "grad_norm", "omega_or_score_mean")

    def table(self):
        return [tuple(r[c] for c in self.CSV_COLUMNS) for r in self.rows]

    def rows_for(self, epoch=None, severity=None):
        return [r for r in self.rows
                if (epoch is None or r["epoch"] == epoch) and (severity is None or r["severity"] == severity)]

    @property
    def last_epoch(self):
        return max((r["epoch"] for r in self.rows), default=-1)


def _epoch_rows(model, theta, test, config, epoch, tracked):
    m = metrics.evaluate(model, theta, test, config.perturb)
    rows = []
    for s in range(test.max_severity + 1):
        rows.append({
            "method": config.method, "seed": config.seed, "epoch": epoch, "severity": s,
            "accuracy": m["accuracy"][s], "loss": m["loss"][s], "sharpness": m["sharpness"][s],
            "grad_norm": m["grad_norm"][s], "omega_or_score_mean": tracked[s],
        })
    return rows


def train(model: ModelSpec, config: TrainConfig, train_data: CorruptedDataset,
          test_data: CorruptedDataset, state: TrainState | None = None,
          score_log: dict | None = None) -> RunRecord:
    """Run ``config.epochs`` passes of shuffled minibatches.

    Row epoch 0 describes the initial parameters. ``score_log``, when given,
    receives ``{epoch: (severities, normalized_scores)}`` for the
    distribution-agnostic method.
    """
    num_groups = train_data.max_severity + 1
    state = state or init_state(model, config, num_groups)
    record = RunRecord(config.method, config.seed)
    n = len(train_data)
    M = config.batch_size

    def tracked_values(epoch_scores):
        if config.method in WEIGHTED_METHODS:
            return list(state.omega)
        if config.method == "SharpDROAgnostic" and epoch_scores is not None:
            sev, sc = epoch_scores
            return list(_group_means(sc, sev, num_groups))
        return [float("nan")] * num_groups

    record.rows.extend(_epoch_rows(model, state.theta, test_data, config, 0, tracked_values(None)))
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        losses, sev_seen, scores_seen = [], [], []
        try:
            for start in range(0, n, M):
                rows = order[start:start + M]
                step(model, state, train_data.X[rows], train_data.y[rows], train_data.severity[rows], config)
                losses.append(state.last_loss)
                if config.method == "SharpDROAgnostic":
                    sev_seen.append(train_data.severity[rows])
                    scores_seen.append(state.last_scores)
        except NumericError as exc:
            record.status = "aborted"
            record.diagnostic = f"epoch {epoch}, batch starting at {start}: {exc}"
            record.train_loss.append(float("nan"))
            break
        record.train_loss.append(float(np.mean(losses)))
        epoch_scores = None
        if sev_seen:
            epoch_scores = (np.concatenate(sev_seen), np.concatenate(scores_seen))
            if score_log is not None:
                score_log[epoch] = epoch_scores
        record.rows.extend(_epoch_rows(model, state.theta, test_data, config, epoch,
                                       tracked_values(epoch_scores)))
    record.theta = state.theta
    return record


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["perturb"] = asdict(config.perturb)
    return d


def with_method(config: TrainConfig, method: str, **changes) -> TrainConfig:
    return replace(config, method=method, **changes)
