"""Hot numeric loops, each with a numba and a pure-numpy implementation.

Two families live here:

* a counter-based random stream (SplitMix64 finalizer) so that every sample's
  draws depend only on ``(seed, tag, index)`` and never on evaluation order;
* the stochastic gradient descent-ascent recursion with a sharpness
  half-step used by the minimax testbed.

The public wrappers dispatch on :data:`sharpdro._jit.USING_NUMBA`.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ._jit import USING_NUMBA, njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53
_TWO_PI = 2.0 * math.pi
_MASK64 = (1 << 64) - 1


def tag_key(tag: str) -> int:
    """Stable 64-bit key for a purpose tag such as ``"severity"``."""
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


def seed_key(seed: int) -> int:
    return int(seed) & _MASK64


# --------------------------------------------------------------------------
# counter-based stream


@njit(nogil=True)
def _mix_nb(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(nogil=True)
def _uniform_nb(seed, tag, index, count):
    n = index.shape[0]
    out = np.empty((n, count), dtype=np.float64)
    base = _mix_nb(_mix_nb(seed) ^ tag)
    for r in range(n):
        key = _mix_nb(base ^ index[r])
        for j in range(count):
            u = _mix_nb(key + np.uint64(j))
            out[r, j] = np.float64(u >> _S11) * _INV53
    return out


@njit(nogil=True)
def _normal_nb(seed, tag, index, count):
    n = index.shape[0]
    out = np.empty((n, count), dtype=np.float64)
    base = _mix_nb(_mix_nb(seed) ^ tag)
    for r in range(n):
        key = _mix_nb(base ^ index[r])
        for j in range(count):
            u1 = np.float64(_mix_nb(key + np.uint64(2 * j)) >> _S11) * _INV53
            u2 = np.float64(_mix_nb(key + np.uint64(2 * j + 1)) >> _S11) * _INV53
            out[r, j] = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(_TWO_PI * u2)
    return out


def _mix_np(z):
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _stream_np(seed, tag, index, count, offset_mul, offset_add):
    base = _mix_np(_mix_np(np.array([seed], dtype=np.uint64)) ^ np.uint64(tag))
    key = _mix_np(base ^ index)[:, None]
    j = np.arange(count, dtype=np.uint64)[None, :] * np.uint64(offset_mul) + np.uint64(offset_add)
    with np.errstate(over="ignore"):
        bits = _mix_np(key + j)
    return (bits >> _S11).astype(np.float64) * _INV53


def _uniform_np(seed, tag, index, count):
    return _stream_np(seed, tag, index, count, 1, 0)


def _normal_np(seed, tag, index, count):
    u1 = _stream_np(seed, tag, index, count, 2, 0)
    u2 = _stream_np(seed, tag, index, count, 2, 1)
    return np.sqrt(-2.0 * np.log(1.0 - u1)) * np.cos(_TWO_PI * u2)


def _dispatch(nb_fn, np_fn, seed, tag, index, count, workers):
    index = np.ascontiguousarray(np.asarray(index, dtype=np.uint64).ravel())
    seed = np.uint64(seed_key(seed))
    tag = np.uint64(tag_key(tag) if isinstance(tag, str) else int(tag) & _MASK64)
    fn = nb_fn if USING_NUMBA else np_fn
    if workers <= 1 or index.shape[0] < 2 * workers:
        return fn(seed, tag, index, int(count))
    chunks = np.array_split(index, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: fn(seed, tag, c, int(count)), chunks))
    return np.concatenate(parts, axis=0)


def counter_uniform(seed, tag, index, count=1, workers=1):
    """Uniform [0, 1) draws of shape ``(len(index), count)``.

    Row ``r`` depends only on ``(seed, tag, index[r])``, so any partition of
    ``index`` across workers returns the same array.
    """
    return _dispatch(_uniform_nb, _uniform_np, seed, tag, index, count, workers)


def counter_normal(seed, tag, index, count=1, workers=1):
    """Standard normal draws (Box-Muller) with the same keying as ``counter_uniform``."""
    return _dispatch(_normal_nb, _normal_np, seed, tag, index, count, workers)


# --------------------------------------------------------------------------
# SGDA with a sharpness half-step


@njit(nogil=True)
def _sgda_sam_nb(H, a, A, mu, theta0, omega0, eta_t, eta_w, rho,
                 noise_half, noise_theta, noise_omega, project_omega, limit):
    T = noise_theta.shape[0]
    d = theta0.shape[0]
    k = omega0.shape[0]
    thetas = np.empty((T + 1, d))
    omegas = np.empty((T + 1, k))
    th = theta0.copy()
    om = omega0.copy()
    half = np.empty(d)
    g = np.empty(d)
    gw = np.empty(k)
    status = -1
    for t in range(T):
        if project_omega:
            for j in range(k):
                s = 0.0
                for i in range(d):
                    s += A[i, j] * th[i]
                om[j] = s / mu
        thetas[t] = th
        omegas[t] = om
        # g_theta at (theta_t, omega_t)
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += H[i, j] * th[j]
            for j in range(k):
                s += A[i, j] * om[j]
            g[i] = s + a * math.cos(th[i]) + noise_half[t, i]
        for i in range(d):
            half[i] = th[i] + rho * g[i]
        # g_omega at (theta_t, omega_t)
        for j in range(k):
            s = 0.0
            for i in range(d):
                s += A[i, j] * th[i]
            gw[j] = s - mu * om[j] + noise_omega[t, j]
        # g_theta at (theta_{t+1/2}, omega_t)
        norm2 = 0.0
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += H[i, j] * half[j]
            for j in range(k):
                s += A[i, j] * om[j]
            g[i] = s + a * math.cos(half[i]) + noise_theta[t, i]
        for i in range(d):
            th[i] = th[i] - eta_t * g[i]
            norm2 += th[i] * th[i]
        for j in range(k):
            om[j] = om[j] + eta_w * gw[j]
        if not (math.sqrt(norm2) <= limit):
            status = t + 1
            thetas[t + 1] = th
            omegas[t + 1] = om
            return thetas[: t + 2], omegas[: t + 2], status
    if project_omega:
        for j in range(k):
            s = 0.0
            for i in range(d):
                s += A[i, j] * th[i]
            om[j] = s / mu
    thetas[T] = th
    omegas[T] = om
    return thetas, omegas, status


def _sgda_sam_np(H, a, A, mu, theta0, omega0, eta_t, eta_w, rho,
                 noise_half, noise_theta, noise_omega, project_omega, limit):
    T = noise_theta.shape[0]
    thetas = np.empty((T + 1, theta0.shape[0]))
    omegas = np.empty((T + 1, omega0.shape[0]))
    th = theta0.copy()
    om = omega0.copy()
    for t in range(T):
        if project_omega:
            om = (A.T @ th) / mu
        thetas[t] = th
        omegas[t] = om
        coupling = A @ om
        g = H @ th + coupling + a * np.cos(th) + noise_half[t]
        half = th + rho * g
        gw = A.T @ th - mu * om + noise_omega[t]
        g = H @ half + coupling + a * np.cos(half) + noise_theta[t]
        th = th - eta_t * g
        om = om + eta_w * gw
        if not np.linalg.norm(th) <= limit:
            thetas[t + 1] = th
            omegas[t + 1] = om
            return thetas[: t + 2], omegas[: t + 2], t + 1
    if project_omega:
        om = (A.T @ th) / mu
    thetas[T] = th
    omegas[T] = om
    return thetas, omegas, -1


def sgda_sam_loop(H, a, A, mu, theta0, omega0, eta_theta, eta_omega, rho,
                  noise_half, noise_theta, noise_omega, project_omega=False, limit=1e9):
    """Run the recursion for ``len(noise_theta)`` steps.

    Returns ``(thetas, omegas, status)``; ``status`` is -1 on completion or
    the step index at which ``||theta||`` exceeded ``limit``.
    """
    args = (
        np.ascontiguousarray(H, dtype=np.float64), float(a),
        np.ascontiguousarray(A, dtype=np.float64), float(mu),
        np.array(theta0, dtype=np.float64), np.array(omega0, dtype=np.float64),
        float(eta_theta), float(eta_omega), float(rho),
        np.ascontiguousarray(noise_half, dtype=np.float64),
        np.ascontiguousarray(noise_theta, dtype=np.float64),
        np.ascontiguousarray(noise_omega, dtype=np.float64),
        bool(project_omega), float(limit),
    )
    fn = _sgda_sam_nb if USING_NUMBA else _sgda_sam_np
    thetas, omegas, status = fn(*args)
    return thetas, omegas, int(status)
