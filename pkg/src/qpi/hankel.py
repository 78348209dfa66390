"""Ho-Kalman arrangement of experiment data and exact realization.

Rows of the big matrix are indexed by (a, k1, i) and columns by
(b, k2, m), outermost first. Cell ((a, k1, i), (b, k2, m)) holds the
frequency of experiment (i, rho(a) + rho(b) + k1 + k2, m). With this
ordering the first |I| rows are the t = 0 preparations, the first |M|
columns the t = 0 measurements, and each block b is a contiguous column
group.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datastore import Dataset, _variance
from .errors import AssemblyError, RankMismatch
from .model import Model
from .schedule import Schedule, rho

RANK_TOL = 1e-8
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class HankelArrangement:
    H: np.ndarray
    Hs: np.ndarray
    W: np.ndarray
    Ws: np.ndarray
    cell_exp: np.ndarray      # experiment index of each H cell
    cell_exp_s: np.ndarray    # experiment index of each shifted cell
    experiments: tuple        # (i, t, m) index triples
    freqs: np.ndarray         # per experiment
    variances: np.ndarray     # per experiment
    mult: np.ndarray          # H cells per experiment (0 if absent)
    mult_s: np.ndarray
    schedule: Schedule
    n_init: int
    n_meas: int

    @property
    def l(self) -> int:
        return self.schedule.l

    @property
    def block_width(self) -> int:
        return (self.l + 1) * self.n_meas

    def block_columns(self, b: int) -> slice:
        w = self.block_width
        return slice(b * w, (b + 1) * w)

    def in_hankel(self) -> np.ndarray:
        """Indices of experiments that occupy at least one H cell."""
        return np.flatnonzero(self.mult > 0)

    def rank_F0(self, tol: float = 1e-8) -> int:
        """Numerical rank of the t = 0 frequency block (diagnostic only)."""
        F0 = self.H[:self.n_init, :self.n_meas]
        s = np.linalg.svd(F0, compute_uv=False)
        return int(np.sum(s > tol * max(s[0], 1e-300)))


def _cell_grid(schedule: Schedule, n_init: int, n_meas: int, shift: int):
    """Time value of every cell as an (h1, h2) integer array."""
    l = schedule.l
    row_t = np.array([rho(a) + k1
                      for a in range(schedule.a_bar + 1)
                      for k1 in range(l + 1)
                      for _ in range(n_init)])
    col_t = np.array([rho(b) + k2
                      for b in range(schedule.b_bar + 1)
                      for k2 in range(l + 1)
                      for _ in range(n_meas)])
    row_i = np.tile(np.arange(n_init), (schedule.a_bar + 1) * (l + 1))
    col_m = np.tile(np.arange(n_meas), (schedule.b_bar + 1) * (l + 1))
    t = row_t[:, None] + col_t[None, :] + shift
    return t, row_i, col_m


def assemble(dataset: Dataset, schedule: Schedule | None = None,
             pseudocount: float = 1.0) -> HankelArrangement:
    """Arrange a dataset into H, its time shift, and multiplicity-normalized weights."""
    schedule = schedule or dataset.schedule
    if schedule.flight_len < 2 * schedule.l + 2:
        raise AssemblyError("flight_len must be >= 2l+2 to fill the shifted matrix")
    n_init, n_meas = len(dataset.init_labels), len(dataset.meas_labels)
    ts, N, Y = dataset.arrays()
    tpos = {int(t): k for k, t in enumerate(ts)}
    experiments = tuple((i, int(t), m)
                        for i in range(n_init) for t in ts for m in range(n_meas))
    flat = {x: k for k, x in enumerate(experiments)}
    Nf = N.reshape(-1).astype(float)
    Yf = Y.reshape(-1).astype(float)
    freqs = Yf / Nf
    variances = _variance(Yf, Nf, pseudocount)

    def index_grid(shift):
        t, row_i, col_m = _cell_grid(schedule, n_init, n_meas, shift)
        idx = np.empty(t.shape, dtype=np.int64)
        for (p, q), tv in np.ndenumerate(t):
            key = (row_i[p], int(tv), col_m[q])
            if int(tv) not in tpos:
                raise AssemblyError(f"missing experiment (i={key[0]}, t={key[1]}, m={key[2]})")
            idx[p, q] = flat[key]
        return idx

    cell = index_grid(0)
    cell_s = index_grid(1)
    mult = np.bincount(cell.ravel(), minlength=len(experiments))
    mult_s = np.bincount(cell_s.ravel(), minlength=len(experiments))
    W = 1.0 / (variances[cell] * mult[cell])
    Ws = 1.0 / (variances[cell_s] * mult_s[cell_s])
    return HankelArrangement(
        H=freqs[cell], Hs=freqs[cell_s], W=W, Ws=Ws,
        cell_exp=cell, cell_exp_s=cell_s, experiments=experiments,
        freqs=freqs, variances=variances, mult=mult, mult_s=mult_s,
        schedule=schedule, n_init=n_init, n_meas=n_meas)


def assemble_exact(model: Model, schedule: Schedule, shift: int = 0) -> np.ndarray:
    """H (or its shift) filled with exact model predictions."""
    from .model import predict_many
    n_init, n_meas = model.S.shape[0], model.P.shape[1]
    t, row_i, col_m = _cell_grid(schedule, n_init, n_meas, shift)
    uniq = np.unique(t)
    F = predict_many(model, uniq)
    pos = np.searchsorted(uniq, t)
    return F[pos, row_i[:, None], col_m[None, :]]


def block_hankel(X, k: int, start: int = 0) -> np.ndarray:
    """Block Hankel matrix [X(start + r + c)] for r, c in 0..k.

    ``X`` is a sequence (or callable) of equally shaped 2-d blocks; rows are
    ordered (r, i) and columns (c, m).
    """
    get = X if callable(X) else (lambda t: X[t])
    return np.block([[np.atleast_2d(get(start + r + c)) for c in range(k + 1)]
                     for r in range(k + 1)])


def rank_factor(H: np.ndarray, d: int):
    """Balanced rank-d factorization H ~ L R from the truncated SVD."""
    U, s, Vt = np.linalg.svd(H, full_matrices=False)
    root = np.sqrt(s[:d])
    return U[:, :d] * root, root[:, None] * Vt[:d], s


def ho_kalman_exact(H, Hs, m_rows: int, n_cols: int, d: int,
                    tol: float = RANK_TOL, init_labels=None, meas_labels=None) -> Model:
    """Minimal model from noiseless H and its time shift.

    H = L R (rank d), S = first m_rows rows of L, P = first n_cols columns
    of R, and T = L^+ H' R^+.
    """
    H = np.asarray(H, dtype=float)
    L, R, s = rank_factor(H, d)
    scale = s[0] if s.size and s[0] > 0 else 1.0
    if d > len(s) or s[d - 1] / scale < tol:
        raise RankMismatch(f"H has rank < {d}")
    if len(s) > d and s[d] / scale >= tol:
        raise RankMismatch(f"H has rank > {d} (s[{d}]/s[0] = {s[d] / scale:.3g})")
    T = np.linalg.pinv(L, rcond=PINV_RCOND) @ Hs @ np.linalg.pinv(R, rcond=PINV_RCOND)
    return Model(L[:m_rows], T, R[:, :n_cols],
                 init_labels or (), meas_labels or ())


def numerical_rank(H, tol: float = RANK_TOL) -> int:
    s = np.linalg.svd(np.asarray(H, dtype=float), compute_uv=False)
    if not s.size or s[0] == 0:
        return 0
    return int(np.sum(s / s[0] >= tol))


@dataclass(frozen=True)
class BlockSlice:
    b: int
    power: int               # rho(b)
    H: np.ndarray            # rows (a, k1, i), columns (k2, m)
    W: np.ndarray
    n_cells: int
    n_eff: float             # sum of 1/multiplicity over the cells


def slice_blocks(arr: HankelArrangement) -> list:
    """Column groups of H, one per block b in 0..b_bar."""
    out = []
    for b in range(arr.schedule.b_bar + 1):
        cols = arr.block_columns(b)
        cell = arr.cell_exp[:, cols]
        out.append(BlockSlice(
            b=b, power=rho(b), H=arr.H[:, cols], W=arr.W[:, cols],
            n_cells=cell.size, n_eff=float(np.sum(1.0 / arr.mult[cell]))))
    return out


def dump_csv(arr: HankelArrangement, shifted: bool = False) -> str:
    """Debug dump of H with (a,k1,i) / (b,k2,m) index tuples as headers."""
    sched, l = arr.schedule, arr.l
    rows = [f"({a};{k1};{i})" for a in range(sched.a_bar + 1)
            for k1 in range(l + 1) for i in range(arr.n_init)]
    cols = [f"({b};{k2};{m})" for b in range(sched.b_bar + 1)
            for k2 in range(l + 1) for m in range(arr.n_meas)]
    M = arr.Hs if shifted else arr.H
    lines = ["," + ",".join(cols)]
    lines += [rows[p] + "," + ",".join(repr(float(v)) for v in M[p]) for p in range(M.shape[0])]
    return "\n".join(lines) + "\n"
