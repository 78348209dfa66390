"""Scoring inferred models against ground truth with trace-distance error curves."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .datastore import Dataset, TruthTable
from .errors import BaselineInfeasible, InputError
from .hankel import ho_kalman_exact
from .model import Model, predict_many

PAULI = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)
HERMITIAN_TOL = 1e-10
CSV_COLUMNS = ("t", "qpi_error", "raw_error", "qpt_error", "n_avg")


def bloch_state(Fx: float, Fy: float, Fz: float) -> np.ndarray:
    """Linear-inversion qubit state (1 + r.sigma)/2 with r_k = 2 F_k - 1.

    Out-of-range probabilities give a non-physical matrix, which is kept.
    """
    r = 2.0 * np.array([Fx, Fy, Fz], dtype=float) - 1.0
    return 0.5 * (np.eye(2, dtype=complex) + sum(c * s for c, s in zip(r, PAULI)))


def trace_distance(rho1, rho2) -> float:
    """Half the sum of absolute eigenvalues of rho1 - rho2."""
    a = np.asarray(rho1, dtype=complex)
    b = np.asarray(rho2, dtype=complex)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("trace distance needs square matrices of equal shape")
    for m in (a, b):
        if np.max(np.abs(m - m.conj().T), initial=0.0) > HERMITIAN_TOL:
            raise InputError("trace distance needs Hermitian matrices")
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(a - b))))


def bloch_distances(F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
    """Trace distances between bloch_state(F1[..., :]) and bloch_state(F2[..., :]).

    For two such states the difference is (dr.sigma)/2 with eigenvalues
    +-|dr|/2, so the distance reduces to the Euclidean norm of F1 - F2.
    """
    return np.linalg.norm(np.asarray(F1, dtype=float) - np.asarray(F2, dtype=float), axis=-1)


# perfect process tomography ------------------------------------------------

def qpt_baseline(truth: TruthTable) -> Model:
    """Four-dimensional Markovian model from exact t = 0, 1 frame probabilities.

    The frame probabilities get an extra all-ones column (the identity
    measurement), which makes the t = 0 matrix square; exact Ho-Kalman with
    a single time step then yields S, T, P, and the identity column is
    dropped from P afterwards.
    """
    if truth.frame_F is None or len(truth.frame_labels) == 0:
        raise BaselineInfeasible("truth table carries no tomographic frame")
    F0, F1 = np.asarray(truth.frame_F[0]), np.asarray(truth.frame_F[1])
    ones = np.ones((F0.shape[0], 1))
    H = np.hstack([ones, F0])
    Hs = np.hstack([ones, F1])
    s = np.linalg.svd(H, compute_uv=False)
    if len(s) < 4 or s[3] < 1e-8 * s[0]:
        raise BaselineInfeasible("frame does not span a four-dimensional space")
    full = ho_kalman_exact(H, Hs, H.shape[0], H.shape[1], 4)
    try:
        rows = [list(truth.frame_labels).index(lbl) for lbl in truth.init_labels]
    except ValueError:
        raise BaselineInfeasible("initial states are not part of the frame") from None
    return Model(full.S[rows], full.T, full.P[:, 1:], truth.init_labels, truth.meas_labels)


# error curves -------------------------------------------------------------

@dataclass
class ErrorCurve:
    t: np.ndarray
    qpi: np.ndarray
    raw: np.ndarray
    qpt: np.ndarray
    n_avg: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in zip(self.t, self.qpi, self.raw, self.qpt, self.n_avg):
            t, q, r, p, n = row
            w.writerow([int(t), _fmt(q), _fmt(r), _fmt(p), int(n)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ErrorCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(c.strip() for c in rows[0]) != CSV_COLUMNS:
            raise InputError("not an error-curve CSV")
        body = rows[1:]
        col = lambda k: np.array([_parse(r[k]) for r in body], dtype=float)
        return cls(col(0).astype(int), col(1), col(2), col(3), col(4).astype(int))

    def mean_error(self, t_max: int | None = None, which: str = "qpi") -> float:
        values = getattr(self, which)
        keep = np.ones(len(self.t), bool) if t_max is None else self.t <= t_max
        v = values[keep]
        v = v[np.isfinite(v)]
        return float(np.mean(v)) if v.size else math.nan


def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def _parse(s: str) -> float:
    s = s.strip()
    return math.nan if s == "" else float(s)


def parse_grid(spec: str) -> np.ndarray:
    """'START:STOP:STEP' with STOP included when it lies on the grid."""
    try:
        start, stop, step = (int(p) for p in spec.split(":"))
    except ValueError:
        raise InputError(f"grid must be START:STOP:STEP, got {spec!r}") from None
    if step <= 0 or start < 0 or stop < start:
        raise InputError(f"invalid grid {spec!r}")
    return np.arange(start, stop + 1, step)


def _check_labels(model: Model, truth: TruthTable):
    if model.init_labels and tuple(model.init_labels) != tuple(truth.init_labels):
        raise InputError("model and truth initial-state labels differ")
    if model.meas_labels and tuple(model.meas_labels) != tuple(truth.meas_labels):
        raise InputError("model and truth measurement labels differ")
    if model.S.shape[0] != len(truth.init_labels) or model.P.shape[1] != len(truth.meas_labels):
        raise InputError("model and truth label counts differ")
    if len(truth.meas_labels) != 3:
        raise InputError("error curves need exactly three Pauli measurements")


def error_curve(model: Model, truth: TruthTable, grid, dataset: Dataset | None = None,
                baseline: Model | None = None) -> ErrorCurve:
    """Mean trace distance to the truth over initial states, per grid time.

    Raw-measurement errors use the sampled frequencies and are only defined
    at measured times; the process-tomography column is filled when a
    baseline model is given.
    """
    _check_labels(model, truth)
    grid = np.asarray(grid, dtype=int)
    try:
        exact = truth.take(grid).transpose(1, 0, 2)          # (t, i, m)
    except KeyError:
        raise InputError(f"truth table covers t <= {int(truth.times.max())}; "
                         f"grid reaches {int(grid.max())}") from None
    qpi = bloch_distances(predict_many(model, grid), exact).mean(axis=1)
    qpt = np.full(len(grid), np.nan)
    if baseline is not None:
        qpt = bloch_distances(predict_many(baseline, grid), exact).mean(axis=1)
    raw = np.full(len(grid), np.nan)
    if dataset is not None:
        if tuple(dataset.init_labels) != tuple(truth.init_labels):
            raise InputError("dataset and truth labels differ")
        ts, N, Y = dataset.arrays()
        pos = {int(t): k for k, t in enumerate(ts)}
        for g, t in enumerate(grid):
            k = pos.get(int(t))
            if k is not None:
                freq = (Y[:, k, :] / N[:, k, :])
                raw[g] = bloch_distances(freq, exact[g]).mean()
    n_avg = np.full(len(grid), len(truth.init_labels))
    return ErrorCurve(grid, qpi, raw, qpt, n_avg)


@dataclass
class AggregateCurve:
    t: np.ndarray
    mean: dict
    stderr: dict
    n_runs: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = ("qpi_error", "raw_error", "qpt_error")
        w.writerow(["t"] + [c for n in names for c in (n, n.replace("_error", "_stderr"))]
                   + ["n_runs"])
        for k, t in enumerate(self.t):
            row = [int(t)]
            for n in names:
                row += [_fmt(self.mean[n][k]), _fmt(self.stderr[n][k])]
            w.writerow(row + [int(self.n_runs[k])])
        return buf.getvalue()


def aggregate(curves) -> AggregateCurve:
    """Merge per-run curves by t: mean and standard error of the run means."""
    curves = list(curves)
    if not curves:
        raise InputError("nothing to aggregate")
    ts = np.unique(np.concatenate([c.t for c in curves]))
    fields = {"qpi_error": "qpi", "raw_error": "raw", "qpt_error": "qpt"}
    mean, stderr = {}, {}
    n_runs = np.zeros(len(ts), dtype=int)
    for name, attr in fields.items():
        mean[name] = np.full(len(ts), np.nan)
        stderr[name] = np.full(len(ts), np.nan)
        for k, t in enumerate(ts):
            vals = []
            for c in curves:
                hit = np.flatnonzero(c.t == t)
                if hit.size:
                    vals.append(getattr(c, attr)[hit[0]])
            if name == "qpi_error":
                n_runs[k] = len(vals)
            vals = np.array([v for v in vals if np.isfinite(v)])
            if vals.size:
                mean[name][k] = vals.mean()
            if vals.size > 1:
                stderr[name][k] = vals.std(ddof=1) / math.sqrt(vals.size)
    return AggregateCurve(ts, mean, stderr, n_runs)
