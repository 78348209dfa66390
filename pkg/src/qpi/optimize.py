"""Damped Gauss-Newton with backtracking line search, plus matrix-power derivatives."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericFailure

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_BACKTRACKS = 30


# matrix powers with derivatives --------------------------------------------
#
# A derivative tensor D has shape (d*d, d, d): D[j] = d(X) / d(T_uv) with
# j = u*d + v (row-major vec of T).

def _unit_directions(d: int) -> np.ndarray:
    E = np.zeros((d * d, d, d))
    E[np.arange(d * d), np.repeat(np.arange(d), d), np.tile(np.arange(d), d)] = 1.0
    return E


def _mul(x, y):
    X, DX = x
    Y, DY = y
    return X @ Y, DX @ Y + X @ DY


def power_with_derivative(T: np.ndarray, n: int):
    """(T^n, D) with D[j] = d(T^n)/d(T_j), by repeated squaring."""
    d = T.shape[0]
    result = (np.eye(d), np.zeros((d * d, d, d)))
    base = (np.array(T, dtype=float), _unit_directions(d))
    while n:
        if n & 1:
            result = _mul(result, base)
        n >>= 1
        if n:
            base = _mul(base, base)
    return result


def powers_with_derivatives(T: np.ndarray, ns) -> dict:
    """T^n and its derivative for each n in ``ns``.

    Sorted targets are reached by stepping from the previous one, so runs
    of consecutive n cost one product each.
    """
    out = {}
    d = T.shape[0]
    current = (np.eye(d), np.zeros((d * d, d, d)))
    at = 0
    cache = {}
    for n in sorted(set(int(v) for v in ns)):
        gap = n - at
        if gap:
            if gap not in cache:
                cache[gap] = power_with_derivative(T, gap)
            current = _mul(current, cache[gap])
            at = n
        out[n] = current
    return out


def directional_power_derivative(T: np.ndarray, E: np.ndarray, n: int) -> np.ndarray:
    """sum_{j<n} T^j E T^(n-1-j), accumulated directly (reference formula)."""
    d = T.shape[0]
    total = np.zeros((d, d))
    left = np.eye(d)
    pows = [np.eye(d)]
    for _ in range(n):
        pows.append(pows[-1] @ T)
    for j in range(n):
        total += left @ E @ pows[n - 1 - j]
        left = left @ T
    return total


# weighted bilinear least squares helpers ----------------------------------

def kron_gram(A: np.ndarray, B: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Gram matrix of X -> A X B under cell weights W, over row-major vec(X).

    G[(a,b),(a',b')] = sum_pq W_pq A_pa A_pa' B_bq B_b'q.
    """
    Z = np.einsum("pq,pa,pc->qac", W, A, A, optimize=True)
    G = np.einsum("qac,bq,dq->abcd", Z, B, B, optimize=True)
    da, db = A.shape[1], B.shape[0]
    return G.reshape(da * db, da * db)


def kron_rhs(A: np.ndarray, B: np.ndarray, W: np.ndarray, R: np.ndarray) -> np.ndarray:
    """vec(A^T (W * R) B^T)."""
    return (A.T @ (W * R) @ B.T).ravel()


def solve_psd(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of G x = rhs for symmetric PSD G."""
    return np.linalg.lstsq(G, rhs, rcond=1e-13)[0]


# Gauss-Newton ---------------------------------------------------------------

@dataclass
class GNResult:
    x: np.ndarray
    f: float
    iterations: int
    status: str       # "converged", "max_iter", "line_search"
    history: list


def gauss_newton_step(f: float, g: np.ndarray, H: np.ndarray, x: np.ndarray,
                      objective, mu: float):
    """One damped Gauss-Newton step with backtracking.

    Solves (H + mu I) p = -g, then halves the step until the Armijo
    condition f(x + a p) <= f + c a g.p holds. Returns (x_new, f_new,
    predicted_decrease) or None when no acceptable step exists.
    """
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        raise NumericFailure("non-finite gradient or Jacobian")
    n = len(x)
    try:
        p = np.linalg.solve(H + mu * np.eye(n), -g)
    except np.linalg.LinAlgError:
        p = solve_psd(H + mu * np.eye(n), -g)
    slope = float(g @ p)
    if not np.isfinite(slope) or slope >= 0:
        return None
    predicted = -(slope + 0.5 * float(p @ H @ p))
    alpha = 1.0
    for _ in range(MAX_BACKTRACKS + 1):
        x_new = x + alpha * p
        f_new = objective(x_new)
        if np.isfinite(f_new) and f_new <= f + ARMIJO * alpha * slope:
            return x_new, f_new, predicted
        alpha *= 0.5
    return None


def gauss_newton(evaluate, objective, x0, max_iter: int = 50, ftol: float | None = 1e-10,
                 mu0: float = 1e-8, after_step=None) -> GNResult:
    """Minimize a sum of squares given evaluate(x) -> (f, grad, gn_hessian).

    The Levenberg parameter starts at mu0 times the mean Hessian diagonal,
    grows 10x on a rejected step and shrinks 10x on an accepted one.
    ``after_step(x, f_old, f_new)`` may return True to stop early; with
    ``ftol=None`` it is the only convergence test.
    """
    x = np.array(x0, dtype=float)
    f, g, H = evaluate(x)
    scale = max(float(np.mean(np.diag(H))), 1e-300)
    mu = mu0 * scale
    history = [f]
    status = "max_iter"
    it = 0
    while it < max_iter:
        it += 1
        step = None
        for _ in range(12):
            step = gauss_newton_step(f, g, H, x, objective, mu)
            if step is not None:
                break
            mu *= 10.0
        if step is None:
            status = "line_search" if np.linalg.norm(g) > 0 else "converged"
            break
        x_new, f_new, _ = step
        mu = max(mu / 10.0, 1e-15 * scale)
        f_old = f
        x = x_new
        if after_step is not None and after_step(x, f_old, f_new):
            f, g, H = evaluate(x)
            history.append(f)
            status = "converged"
            break
        f, g, H = evaluate(x)
        history.append(f)
        if ftol is not None and f_old - f <= ftol * max(abs(f_old), 1e-300):
            status = "converged"
            break
    return GNResult(x, f, it, status, history)
