"""Closed-form nonconvex / strongly-concave minimax testbed.

``L(theta, w) = 1/2 theta'H theta + a sum sin(theta_i) + theta'A w - mu/2 |w|^2``

Every quantity the convergence analysis talks about (``w*``, ``L*``,
``grad L*``, the smoothness and PL constants) has an exact expression here,
so the analysis' per-step inequalities and final rate bound can be audited
along simulated trajectories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DivergenceError, PreconditionError

ALPHA = 1.0 / 16.0
DESCENT_SLACK = 1e-9
RATE_SLACK = 1e-15  # absorbs rounding residue when the bound is exactly zero


@dataclass(frozen=True)
class QuadraticCoupledProblem:
    H: np.ndarray
    a: float
    A: np.ndarray
    mu: float
    sigma: float = 0.0

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        if H.shape[0] != H.shape[1] or not np.allclose(H, H.T, atol=0):
            raise PreconditionError("H must be square and symmetric")
        if A.shape[0] != H.shape[0]:
            raise PreconditionError("A must have one row per theta coordinate")
        if not self.mu > 0 or self.a < 0 or self.sigma < 0:
            raise PreconditionError("need mu > 0, a >= 0, sigma >= 0")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "A", A)

    @classmethod
    def default(cls) -> "QuadraticCoupledProblem":
        d = 4
        return cls(H=0.5 * np.eye(d), a=0.25, A=0.5 * np.eye(d), mu=1.0, sigma=0.1)

    @property
    def dim_theta(self):
        return self.H.shape[0]

    @property
    def dim_omega(self):
        return self.A.shape[1]

    @property
    def norm_A(self):
        return float(np.linalg.norm(self.A, 2))

    @property
    def l(self):
        """Conservative joint smoothness: ``max(|H| + a, mu) + |A|``."""
        return max(float(np.linalg.norm(self.H, 2)) + self.a, self.mu) + self.norm_A

    @property
    def kappa(self):
        return self.l / self.mu

    # -- oracles --------------------------------------------------------

    def loss(self, theta, omega):
        theta, omega = np.asarray(theta, float), np.asarray(omega, float)
        return (0.5 * theta @ self.H @ theta + self.a * np.sum(np.sin(theta))
                + theta @ self.A @ omega - 0.5 * self.mu * omega @ omega)

    def grad_theta(self, theta, omega):
        theta = np.asarray(theta, float)
        return self.H @ theta + self.A @ np.asarray(omega, float) + self.a * np.cos(theta)

    def grad_omega(self, theta, omega):
        return self.A.T @ np.asarray(theta, float) - self.mu * np.asarray(omega, float)


def omega_star(problem: QuadraticCoupledProblem, theta) -> np.ndarray:
    return problem.A.T @ np.asarray(theta, float) / problem.mu


def l_star(problem: QuadraticCoupledProblem, theta) -> float:
    theta = np.asarray(theta, float)
    At = problem.A.T @ theta
    return float(0.5 * theta @ problem.H @ theta + problem.a * np.sum(np.sin(theta))
                 + At @ At / (2.0 * problem.mu))


def grad_l_star(problem: QuadraticCoupledProblem, theta) -> np.ndarray:
    theta = np.asarray(theta, float)
    return (problem.H @ theta + problem.a * np.cos(theta)
            + problem.A @ problem.A.T @ theta / problem.mu)


def _batched(problem, thetas, omegas):
    """Vectorised ``(L, L*, |grad L*|^2, |grad_theta L|^2, gap)`` along a trajectory."""
    H, A, a, mu = problem.H, problem.A, problem.a, problem.mu
    Ht = thetas @ H.T
    At = thetas @ A
    L = (0.5 * np.einsum("ti,ti->t", thetas, Ht) + a * np.sin(thetas).sum(axis=1)
         + np.einsum("ti,ti->t", At, omegas) - 0.5 * mu * np.einsum("tj,tj->t", omegas, omegas))
    Ls = (0.5 * np.einsum("ti,ti->t", thetas, Ht) + a * np.sin(thetas).sum(axis=1)
          + np.einsum("tj,tj->t", At, At) / (2.0 * mu))
    gls = Ht + a * np.cos(thetas) + At @ A.T / mu
    gth = Ht + a * np.cos(thetas) + omegas @ A.T
    return L, Ls, np.einsum("ti,ti->t", gls, gls), np.einsum("ti,ti->t", gth, gth), gls, gth


# --------------------------------------------------------------------------
# stochastic gradients and trajectories


def noise_scale(problem: QuadraticCoupledProblem, M: int, dim: int) -> float:
    """Per-coordinate std such that ``E|noise|^2 = sigma^2 / M`` for one block."""
    return problem.sigma / math.sqrt(M * dim)


def stochastic_grads(problem: QuadraticCoupledProblem, theta, omega, M: int, rng: np.random.Generator):
    """Exact gradients plus unbiased Gaussian noise of total variance ``sigma^2 / M`` per block."""
    if M < 1:
        raise PreconditionError("M must be at least 1")
    gt = problem.grad_theta(theta, omega)
    gw = problem.grad_omega(theta, omega)
    if problem.sigma > 0:
        gt = gt + noise_scale(problem, M, gt.size) * rng.standard_normal(gt.size)
        gw = gw + noise_scale(problem, M, gw.size) * rng.standard_normal(gw.size)
    return gt, gw


@dataclass(frozen=True)
class RateParams:
    eta_theta: float = 0.001
    eta_omega: float = 0.05
    rho: float = 0.0003
    M: int = 1
    T: int = 10_000
    alpha: float = ALPHA


@dataclass
class Trajectory:
    thetas: np.ndarray
    omegas: np.ndarray
    L: np.ndarray
    L_star: np.ndarray
    grad_sq: np.ndarray
    V: np.ndarray
    seed: int = 0

    def __len__(self):
        return self.thetas.shape[0]

    def running_mean_grad_sq(self, T=None) -> float:
        T = len(self) - 1 if T is None else T
        return float(self.grad_sq[:T].mean())

    def rows(self, violations=None):
        """Report rows ``(iteration, L, L*, |grad L*|^2, V, violations)``."""
        viol = np.zeros(len(self), dtype=np.int64) if violations is None else violations
        return [(t, self.L[t], self.L_star[t], self.grad_sq[t], self.V[t], int(viol[t]))
                for t in range(len(self))]


def run_sgda_sam(problem: QuadraticCoupledProblem, rates: RateParams, seed: int = 0,
                 theta0=None, omega0=None, project_omega: bool = False,
                 limit: float = 1e9) -> Trajectory:
    """Stochastic GDA with a sharpness half-step.

    ``theta_half = theta + rho g_theta(theta, w)``,
    ``theta' = theta - eta_theta g_theta(theta_half, w)``,
    ``w' = w + eta_omega g_omega(theta, w)``; three independent noise draws per step.
    """
    d, k, T = problem.dim_theta, problem.dim_omega, rates.T
    theta0 = default_theta0(d) if theta0 is None else np.asarray(theta0, float)
    omega0 = np.zeros(k) if omega0 is None else np.asarray(omega0, float)
    if problem.sigma > 0:
        rng = np.random.default_rng([seed, 11])
        st, sw = noise_scale(problem, rates.M, d), noise_scale(problem, rates.M, k)
        noise_half = st * rng.standard_normal((T, d))
        noise_theta = st * rng.standard_normal((T, d))
        noise_omega = sw * rng.standard_normal((T, k))
    else:
        noise_half = noise_theta = np.zeros((T, d))
        noise_omega = np.zeros((T, k))
    thetas, omegas, status = kernels.sgda_sam_loop(
        problem.H, problem.a, problem.A, problem.mu, theta0, omega0,
        rates.eta_theta, rates.eta_omega, rates.rho, noise_half, noise_theta, noise_omega,
        project_omega, limit)
    if status >= 0:
        raise DivergenceError(f"|theta| exceeded {limit:g} at step {status}; "
                              f"last |theta| = {np.linalg.norm(thetas[-1]):.3e}")
    L, Ls, gsq, _, _, _ = _batched(problem, thetas, omegas)
    V = Ls + rates.alpha * (Ls - L)
    return Trajectory(thetas, omegas, L, Ls, gsq, V, seed)


def default_theta0(d: int) -> np.ndarray:
    base = np.array([2.0, -1.0, 1.5, -2.0])
    return np.resize(base, d)


# --------------------------------------------------------------------------
# rate constraints


@dataclass
class RateCheck:
    passed: bool
    violations: list = field(default_factory=list)
    values: dict = field(default_factory=dict)


def validate_rates(problem: QuadraticCoupledProblem, rates: RateParams, delta_l_star=None,
                   l=None, mu=None) -> RateCheck:
    """Check every step-size condition of the convergence theorem (boundaries inclusive).

    ``delta_l_star`` (``L*(theta0) - min L*``) enables the horizon-dependent
    bound on ``eta_theta``; it is skipped when ``sigma == 0``.
    """
    l = problem.l if l is None else l
    mu = problem.mu if mu is None else mu
    kappa = l / mu
    et, ew, rho = rates.eta_theta, rates.eta_omega, rates.rho
    checks = [
        ("alpha = 1/16", rates.alpha, ALPHA, "eq"),
        ("rho*l <= 1/16", rho * l, 1 / 16, "le"),
        ("eta_theta*(2*rho*l+1)^2*kappa*l <= 1/64", et * (2 * rho * l + 1) ** 2 * kappa * l, 1 / 64, "le"),
        ("kappa^2*eta_theta*l <= 1/128", kappa ** 2 * et * l, 1 / 128, "le"),
        ("rho <= eta_theta/(2l)", rho, et / (2 * l), "le"),
        ("eta_omega <= 64*kappa^2*eta_theta", ew, 64 * kappa ** 2 * et, "le"),
        ("eta_theta <= 1/(128*kappa^2*l)", et, 1 / (128 * kappa ** 2 * l), "le"),
    ]
    if problem.sigma > 0 and delta_l_star is not None:
        cap = math.sqrt(rates.M * max(delta_l_star, 0.0)
                        / (132 * rates.T * kappa ** 4 * l * problem.sigma ** 2))
        checks.append(("eta_theta <= sqrt(M*dL*/(132*T*kappa^4*l*sigma^2))", et, cap, "le"))
    violations, values = [], {}
    for name, lhs, rhs, op in checks:
        values[name] = (lhs, rhs)
        ok = lhs == rhs if op == "eq" else lhs <= rhs * (1 + 1e-12)
        if not ok:
            violations.append(name)
    return RateCheck(not violations, violations, values)


def potential_value(problem: QuadraticCoupledProblem, theta, omega, alpha: float = ALPHA) -> float:
    """``L*(theta) + alpha (L*(theta) - L(theta, w))``."""
    ls = l_star(problem, theta)
    return ls + alpha * (ls - float(problem.loss(theta, omega)))


# --------------------------------------------------------------------------
# audits


@dataclass
class DescentReport:
    lhs: np.ndarray
    rhs: np.ndarray
    violations: np.ndarray

    @property
    def num_violations(self):
        return int(self.violations.sum())


def check_descent(traj: Trajectory, problem: QuadraticCoupledProblem, rates: RateParams,
                  slack: float = DESCENT_SLACK) -> DescentReport:
    """Per-step deterministic descent inequality for ``L*`` (noise terms dropped)."""
    l, kappa, et, rho = problem.l, problem.kappa, rates.eta_theta, rates.rho
    Lsm = l + l * kappa / 2.0
    c_quad = 4 * rho ** 2 * l ** 2 + 2 * rho * l + 2
    c1 = 0.5 * et * (1 - 5 * rho * l - 2 * Lsm * et * c_quad)
    c2 = 0.5 * et * (1 + 0.5 * rho * l) + Lsm * et ** 2 * c_quad
    _, Ls, gsq, _, gls, gth = _batched(problem, traj.thetas, traj.omegas)
    gap = np.einsum("ti,ti->t", gls - gth, gls - gth)
    lhs = Ls[1:]
    rhs = Ls[:-1] - c1 * gsq[:-1] + c2 * gap[:-1]
    return DescentReport(lhs, rhs, lhs > rhs + slack)


@dataclass
class GradientBoundReport:
    passed: bool
    lhs: float
    rhs: float
    stderr: float


def check_gradient_bound(problem: QuadraticCoupledProblem, rates: RateParams, theta, omega,
                         n_samples: int = 100_000, seed: int = 0, tol: float = 0.05) -> GradientBoundReport:
    """Monte Carlo ``E|g_theta(theta_half, w)|^2`` against its closed-form bound."""
    if n_samples < 10_000:
        raise PreconditionError("need at least 1e4 samples")
    theta, omega = np.asarray(theta, float), np.asarray(omega, float)
    d, l, rho, M = problem.dim_theta, problem.l, rates.rho, rates.M
    rng = np.random.default_rng([seed, 13])
    s = noise_scale(problem, M, d)
    g0 = problem.grad_theta(theta, omega)
    first = g0 + s * rng.standard_normal((n_samples, d))
    half = theta + rho * first
    coupling = problem.A @ omega
    g_half = half @ problem.H.T + coupling + problem.a * np.cos(half) + s * rng.standard_normal((n_samples, d))
    sq = np.einsum("ni,ni->n", g_half, g_half)
    lhs = float(sq.mean())
    stderr = float(sq.std(ddof=1) / math.sqrt(n_samples))
    rhs = (4 * rho ** 2 * l ** 2 + 2 * rho * l + 2) * float(g0 @ g0) + (5 * rho ** 2 * l ** 2 + 2) * problem.sigma ** 2 / M
    return GradientBoundReport(lhs <= rhs * (1 + tol) + 1e-9, lhs, rhs, stderr)


def min_l_star(problem: QuadraticCoupledProblem, box, points_per_dim: int = 21, seed: int = 0):
    """Grid search over ``box = (lo, hi)`` then local polish; returns ``(value, argmin)``."""
    from scipy.optimize import minimize

    lo, hi = float(box[0]), float(box[1])
    d = problem.dim_theta
    if points_per_dim ** d <= 500_000:
        axes = [np.linspace(lo, hi, points_per_dim)] * d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    else:
        grid = np.random.default_rng([seed, 17]).uniform(lo, hi, size=(200_000, d))
    At = grid @ problem.A
    vals = (0.5 * np.einsum("ni,ij,nj->n", grid, problem.H, grid) + problem.a * np.sin(grid).sum(axis=1)
            + np.einsum("nj,nj->n", At, At) / (2 * problem.mu))
    best_val, best_x = np.inf, None
    for i in np.argsort(vals)[:5]:
        res = minimize(lambda x: l_star(problem, x), grid[i], jac=lambda x: grad_l_star(problem, x),
                       method="BFGS", options={"gtol": 1e-12})
        if res.fun < best_val:
            best_val, best_x = float(res.fun), res.x
    return min(best_val, float(vals.min())), best_x


@dataclass
class RateBoundReport:
    passed: bool
    lhs: float
    bound: float
    terms: dict
    box: tuple
    per_seed: np.ndarray


def rate_bound(problem: QuadraticCoupledProblem, rates: RateParams, l_star0: float, min_ls: float,
               delta0: float, T: int) -> tuple[float, dict]:
    kappa, l = problem.kappa, problem.l
    terms = {
        "initial_gap": 80.0 / (11.0 * rates.eta_theta * T) * (l_star0 - min_ls),
        "omega_gap": 5.0 / (11.0 * rates.eta_theta * T) * delta0,
        "noise": 960.0 * kappa ** 4 * l * rates.eta_theta * problem.sigma ** 2 / rates.M,
    }
    return sum(terms.values()), terms


def check_rate_bound(trajectories, problem: QuadraticCoupledProblem, rates: RateParams,
                     min_ls: float | None = None, box=None) -> RateBoundReport:
    """Ensemble mean of ``(1/T) sum |grad L*(theta_t)|^2`` against the theorem's bound."""
    trajectories = list(trajectories)
    T = len(trajectories[0]) - 1
    theta0, omega0 = trajectories[0].thetas[0], trajectories[0].omegas[0]
    if box is None:
        reach = max(float(np.abs(t.thetas).max()) for t in trajectories)
        box = (-reach - 1.0, reach + 1.0)
    if min_ls is None:
        min_ls, _ = min_l_star(problem, box)
    ls0 = l_star(problem, theta0)
    delta0 = ls0 - float(problem.loss(theta0, omega0))
    bound, terms = rate_bound(problem, rates, ls0, min_ls, delta0, T)
    per_seed = np.array([t.running_mean_grad_sq(T) for t in trajectories])
    lhs = float(per_seed.mean())
    terms["min_l_star"] = min_ls
    return RateBoundReport(lhs <= bound + RATE_SLACK, lhs, bound, terms, tuple(box), per_seed)
