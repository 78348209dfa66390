"""Model dimension as the number of statistically significant singular values.

For a candidate rank r the residual energy chi_r = sum_{i>r} s_i^2 of the
noisy Hankel matrix is compared with its perturbative mean plus one
standard deviation. With P_U, P_V the projectors onto the trailing
singular subspaces and D_x the 0/1 cell indicator of experiment x,

    <chi_r>  = sum_x var_x <D_x, P_U D_x P_V>
    Var chi_r = 2 sum_{x,y} (sqrt(var_x var_y) <D_x, P_U D_y P_V>)^2

The experiment Gram matrix M_xy = <D_x, P_U D_y P_V> is accumulated one
singular vector at a time by expanding P = 1 - (leading projector).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hankel import HankelArrangement


@dataclass
class DimensionReport:
    singular_values: np.ndarray
    rows: list = field(default_factory=list)   # (r, chi, mean, std, accepted)
    d: int = 0
    saturated: bool = False
    note: str = ("singular values are taken in computed order; no reordering "
                 "correction for statistical swaps")

    @property
    def thresholds(self):
        return [mean + std for _, _, mean, std, _ in self.rows]

    def to_text(self) -> str:
        lines = [f"# dimension {self.d}" + (" (saturated)" if self.saturated else ""),
                 f"# {self.note}",
                 "r,chi,threshold,accepted"]
        lines += [f"{r},{chi!r},{mean + std!r},{int(acc)}"
                  for r, chi, mean, std, acc in self.rows]
        return "\n".join(lines) + "\n"


def residual_energy(singulars, r: int) -> float:
    s = np.asarray(singulars, dtype=float)
    if r > len(s):
        raise ValueError("r exceeds the number of singular values")
    return float(np.sum(s[r:] ** 2))


def _cells(arr: HankelArrangement):
    used = arr.in_hankel()
    compact = np.full(len(arr.experiments), -1)
    compact[used] = np.arange(len(used))
    p, q = np.indices(arr.H.shape)
    return used, compact[arr.cell_exp].ravel(), p.ravel(), q.ravel()


def estimate_dimension(arr: HankelArrangement, variances=None,
                       full: bool = False) -> DimensionReport:
    """Smallest r whose residual energy is consistent with noise.

    ``variances`` are per-experiment (indexed like ``arr.experiments``);
    the arrangement's own estimates are used when omitted. With
    ``full=True`` every r is tested instead of stopping at the first
    acceptance.
    """
    H = arr.H
    h1, h2 = H.shape
    h = min(h1, h2)
    var = arr.variances if variances is None else np.asarray(variances, dtype=float)
    used, x, p, q = _cells(arr)
    nx = len(used)
    w = np.sqrt(var[used])
    wc = w[x]

    U, s, Vt = np.linalg.svd(H, full_matrices=False)
    V = Vt.T
    M = np.diag(w ** 2 * arr.mult[used].astype(float))

    report = DimensionReport(singular_values=s)
    chosen = None
    for r in range(h + 1):
        chi = residual_energy(s, r)
        mean = float(np.trace(M))
        std = float(np.sqrt(2.0 * np.sum(M * M)))
        accepted = bool(chi <= mean + std)
        report.rows.append((r, chi, mean, std, accepted))
        if accepted and chosen is None:
            chosen = r
            if not full:
                break
        if r == h:
            break
        # fold singular pair r into the leading projectors
        fu = np.bincount(x * h2 + q, weights=U[p, r] * wc,
                         minlength=nx * h2).reshape(nx, h2)
        fv = np.bincount(x * h1 + p, weights=V[q, r] * wc,
                         minlength=nx * h1).reshape(nx, h1)
        cross = [U[p, r] * V[q, a] for a in range(r + 1)]
        cross += [U[p, a] * V[q, r] for a in range(r)]
        fuv = np.stack([np.bincount(x, weights=c * wc, minlength=nx) for c in cross], axis=1)
        M -= fu @ fu.T
        M -= fv @ fv.T
        M += fuv @ fuv.T
    report.d = h if chosen is None else chosen
    report.saturated = report.d == h
    return report
