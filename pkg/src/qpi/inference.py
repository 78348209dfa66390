"""Model inference: weighted Ho-Kalman start, progressive block fitting, final fit."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eig

from .datastore import Dataset
from .dimension import DimensionReport, estimate_dimension
from .errors import NumericFailure, Stage2Failure, Stage3Timeout
from .hankel import BlockSlice, HankelArrangement, assemble, rank_factor, slice_blocks
from .model import Model, matrix_power, predict_many
from .optimize import (gauss_newton, kron_gram, kron_rhs, power_with_derivative,
                       powers_with_derivatives, solve_psd)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitOptions:
    phi_accept: float = 1.5
    phi_improve: float = 0.001
    psi_improve: float = 1e-4
    max_passes: int = 25
    beta_decay: float = 0.95
    pseudocount: float = 1.0
    als_max_iter: int = 200
    als_tol: float = 1e-8
    sweeps: int = 50
    sweep_tol: float = 1e-7
    gn_max_iter: int = 300
    stage4_max_iter: int = 200
    max_extra_dims: int = 5
    seed: int = 0

    @classmethod
    def from_mapping(cls, doc) -> "FitOptions":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for k, v in dict(doc).items():
            if k not in known:
                raise KeyError(f"unknown inference option {k!r}")
            kwargs[k] = type(getattr(cls, k))(v)
        return cls(**kwargs)


# stage 2 ------------------------------------------------------------------

@dataclass
class StageTwoResult:
    L: np.ndarray
    R: np.ndarray
    T: np.ndarray
    objective: float
    shift_objective: float
    iterations: int


def _weighted_rows(C: np.ndarray, W: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Solve min_x sum_j W[p,j] (x_p C[:,j] - Y[p,j])^2 for every row p."""
    G = np.einsum("aj,pj,bj->pab", C, W, C, optimize=True)
    rhs = np.einsum("aj,pj->pa", C, W * Y, optimize=True)
    d = C.shape[0]
    ridge = 1e-14 * np.maximum(np.trace(G, axis1=1, axis2=2) / d, 1e-300)
    G = G + ridge[:, None, None] * np.eye(d)
    return np.linalg.solve(G, rhs[..., None])[..., 0]


def weighted_low_rank(H, W, d, max_iter=200, tol=1e-8):
    """Alternating weighted least squares for H ~ L R, started from the SVD."""
    L, R, _ = rank_factor(H, d)
    obj = float(np.sum(W * (L @ R - H) ** 2))
    floor = 1e-12 * float(np.sum(W * H * H))
    it = 0
    for it in range(1, max_iter + 1):
        L = _weighted_rows(R, W, H)
        R = _weighted_rows(L.T, W.T, H.T).T
        new = float(np.sum(W * (L @ R - H) ** 2))
        if not np.isfinite(new):
            raise Stage2Failure("weighted factorization diverged")
        if new > obj * (1 + 1e-9) + floor:
            raise Stage2Failure(f"weighted factorization objective rose {obj:.6g} -> {new:.6g}")
        done = obj - new <= tol * max(obj, 1e-300)
        obj = new
        if done:
            break
    # rebalance the gauge so L and R have comparable column norms
    nl = np.linalg.norm(L, axis=0)
    nr = np.linalg.norm(R, axis=1)
    scale = np.sqrt(np.where(nl > 0, nr / np.where(nl > 0, nl, 1), 1.0))
    return L * scale, R / scale[:, None], obj, it


def fit_shift(L, R, Hs, Ws):
    """T minimizing sum Ws (L T R - Hs)^2; linear least squares in T."""
    d = L.shape[1]
    G = kron_gram(L, R, Ws)
    rhs = kron_rhs(L, R, Ws, Hs)
    T = solve_psd(G, rhs).reshape(d, d)
    return T, float(np.sum(Ws * (L @ T @ R - Hs) ** 2))


def stage2_initial_model(arr: HankelArrangement, d: int,
                         opts: FitOptions = FitOptions()) -> StageTwoResult:
    if not 1 <= d <= min(arr.H.shape):
        raise Stage2Failure(f"d={d} outside 1..{min(arr.H.shape)}")
    L, R, obj, it = weighted_low_rank(arr.H, arr.W, d, opts.als_max_iter, opts.als_tol)
    T, sobj = fit_shift(L, R, arr.Hs, arr.Ws)
    if not np.all(np.isfinite(T)):
        raise Stage2Failure("non-finite transfer matrix")
    return StageTwoResult(L, R, T, obj, sobj, it)


# stage 3 ------------------------------------------------------------------

def _block_error(A, T, B, blk: BlockSlice) -> float:
    """Weighted squared error of one block; inf if the power of T overflows."""
    with np.errstate(over="ignore", invalid="ignore"):
        err = float(np.sum(blk.W * (A @ matrix_power(T, blk.power) @ B - blk.H) ** 2))
    return err if np.isfinite(err) else np.inf


def phi_b(A, T, B, blocks, b: int) -> float:
    """Average weighted squared error over blocks 0..b.

    Weights are multiplicity-normalized, so the normalizer is the matching
    effective element count sum(1/multiplicity); under the true model the
    value concentrates near 1.
    """
    use = blocks[:b + 1]
    return sum(_block_error(A, T, B, blk) for blk in use) / sum(blk.n_eff for blk in use)


def all_phis(A, T, B, blocks) -> list:
    """Phi_b for every b, computed cumulatively."""
    out = []
    total = n = 0.0
    for blk in blocks:
        total += _block_error(A, T, B, blk)
        n += blk.n_eff
        out.append(total / n)
    return out


@dataclass
class FitState:
    A: np.ndarray
    T: np.ndarray
    B: np.ndarray
    b_highest: int
    phis: list
    passes: int = 0
    b_reached: int = 0
    success: bool = False
    history: list = field(default_factory=list)

    @property
    def phi_final(self) -> float:
        return self.phis[-1]

    def model(self, n_init, n_meas, init_labels=(), meas_labels=()) -> Model:
        return Model(self.A[:n_init], self.T, self.B[:, :n_meas], init_labels, meas_labels)


def _optimize_AB(A, T, B, blocks, b_highest, opts):
    """Step 3.2: fit A, B with T fixed; blocks past b_highest get free matrices.

    A block whose power of T has overflowed is also given a free matrix.
    """
    d = T.shape[0]
    free = [k for k, blk in enumerate(blocks)
            if k > b_highest or not np.isfinite(_block_error(A, T, B, blk))]
    mats = [None if k in free else matrix_power(T, blk.power)
            for k, blk in enumerate(blocks)]

    def solve_free(k):
        blk = blocks[k]
        G = kron_gram(A, B, blk.W)
        return solve_psd(G, kron_rhs(A, B, blk.W, blk.H)).reshape(d, d)

    def objective():
        return sum(float(np.sum(blk.W * (A @ M @ B - blk.H) ** 2))
                   for blk, M in zip(blocks, mats))

    for k in range(len(blocks)):
        if mats[k] is None:
            mats[k] = solve_free(k)
    obj = objective()
    Hcat = np.hstack([blk.H for blk in blocks])
    Wcat = np.hstack([blk.W for blk in blocks])
    Hstack = np.vstack([blk.H for blk in blocks])
    Wstack = np.vstack([blk.W for blk in blocks])
    for _ in range(opts.sweeps):
        C = np.hstack([M @ B for M in mats])
        A = _weighted_rows(C, Wcat, Hcat)
        D = np.vstack([A @ M for M in mats])
        B = _weighted_rows(D.T, Wstack.T, Hstack.T).T
        for k in free:
            mats[k] = solve_free(k)
        new = objective()
        done = obj - new <= opts.sweep_tol * max(obj, 1e-300)
        obj = new
        if done:
            break
    return A, B


def t_objective(A, B, blocks, b):
    """Phi_b as a function of vec(T) with A, B fixed.

    Returns ``(objective, evaluate)`` where evaluate(x) gives the value,
    gradient and Gauss-Newton Hessian.
    """
    d = A.shape[1]
    use = blocks[:b + 1]
    n = sum(blk.n_eff for blk in use)
    grams = [kron_gram(A, B, blk.W) for blk in use]

    def objective(x):
        return sum(_block_error(A, x.reshape(d, d), B, blk) for blk in use) / n

    def evaluate(x):
        Tm = x.reshape(d, d)
        f = 0.0
        g = np.zeros(d * d)
        Hm = np.zeros((d * d, d * d))
        for blk, G in zip(use, grams):
            X, D = power_with_derivative(Tm, blk.power)
            res = A @ X @ B - blk.H
            f += float(np.sum(blk.W * res ** 2))
            J = D.reshape(d * d, d * d)          # J[param, x-entry]
            g += 2.0 * J @ kron_rhs(A, B, blk.W, res)
            Hm += 2.0 * J @ G @ J.T
        return f / n, g / n, Hm / n

    return objective, evaluate


def _optimize_T(A, T, B, blocks, b, opts):
    """Gauss-Newton on T for Phi_b with A, B fixed."""
    objective, evaluate = t_objective(A, B, blocks, b)
    with np.errstate(over="raise", invalid="raise"):
        try:
            res = gauss_newton(evaluate, objective, T.ravel(), max_iter=opts.gn_max_iter)
        except FloatingPointError:
            return T
    return res.x.reshape(T.shape)


def _one_pass(A, T, B, blocks, b_highest, opts):
    """Steps 3.2 and 3.3: refit A, B, then refit T block by block."""
    accept = opts.phi_accept
    b_bar = len(blocks) - 1
    with np.errstate(over="raise", invalid="raise"):
        try:
            A, B = _optimize_AB(A, T, B, blocks, b_highest, opts)
        except FloatingPointError as exc:
            raise NumericFailure(f"overflow while fitting A, B ({exc})") from exc
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericFailure("non-finite A or B")
    b = min(2, b_bar)
    while True:
        phi = phi_b(A, T, B, blocks, b)
        if not (b < b_highest and phi <= accept):
            T = _optimize_T(A, T, B, blocks, b, opts)
            phi = phi_b(A, T, B, blocks, b)
            log.debug("  T fit b=%d: phi_b=%.4g", b, phi)
        if b < b_bar and phi <= accept:
            b += 1
            b_highest = max(b, b_highest)
            continue
        return A, B, T, b, b_highest


def stage3_progressive_fit(stage2: StageTwoResult, blocks,
                           opts: FitOptions = FitOptions()) -> FitState:
    """Progressive block fitting; returns a FitState whose ``success`` flag
    is False when the dimension should be increased.
    """
    accept = opts.phi_accept
    b_bar = len(blocks) - 1
    width = blocks[0].H.shape[1]
    A = stage2.L.copy()
    B = stage2.R[:, :width].copy()
    T = stage2.T.copy()
    phis = all_phis(A, T, B, blocks)
    over = [k for k, p in enumerate(phis) if p > accept]
    b_highest = over[0] if over else b_bar
    state = FitState(A, T, B, b_highest, phis)
    best = state
    prev_final = np.inf
    for npass in range(1, opts.max_passes + 1):
        try:
            A, B, T, b, b_highest = _one_pass(A, T, B, blocks, b_highest, opts)
        except (NumericFailure, np.linalg.LinAlgError) as exc:
            best.success = False
            raise Stage3Timeout(f"fit diverged in pass {npass}: {exc}", best) from exc
        phis = all_phis(A, T, B, blocks)
        state = FitState(A, T, B, b_highest, phis, npass, b_reached=b, history=state.history + [
            {"pass": npass, "b": b, "b_highest": b_highest, "phi_bbar": phis[-1]}])
        log.debug("stage3 pass %d: b=%d b_highest=%d phis=%s", npass, b, b_highest,
                  np.array2string(np.asarray(phis), precision=3))
        if (-b, phis[b]) < (-best.b_reached, best.phis[best.b_reached]):
            best = state
        if b == b_bar:
            if prev_final - phis[-1] <= opts.phi_improve:
                state.success = phis[-1] <= accept
                return state
            prev_final = phis[-1]
    best.success = False
    raise Stage3Timeout(f"no convergence in {opts.max_passes} passes "
                        f"(best phi={best.phi_final:.4g})", best)


# stage 4 ------------------------------------------------------------------

def buffered_weight(V, beta):
    """1 / (V + sqrt(V^2 + 4 beta^2)): finite, positive, ~1/(2V) when beta << V."""
    V = np.asarray(V, dtype=float)
    b2 = 4.0 * np.asarray(beta, dtype=float) ** 2
    root = np.sqrt(V * V + b2)
    # rationalized form avoids cancellation when V is negative
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(V >= 0, 1.0 / (V + root), (root - V) / b2)


def eigenvalue_penalty(T) -> float:
    lam = np.abs(np.linalg.eigvals(T))
    return float(np.sum(np.maximum(0.0, lam - 1.0) ** 2))


def eigenvalue_penalty_terms(T, jitter_seed: int = 0):
    """Residuals max(0, |lambda|-1) and their gradients w.r.t. row-major vec(T).

    Derivatives use left/right eigenvectors; when eigenvalues are (nearly)
    repeated, T is nudged by a tiny symmetric jitter for the gradient only.
    """
    d = T.shape[0]
    lam, vl, vr = eig(T, left=True, right=True)
    gaps = np.abs(lam[:, None] - lam[None, :]) + np.eye(d)
    if d > 1 and gaps.min() < 1e-8:
        rng = np.random.default_rng(jitter_seed)
        J = rng.normal(size=(d, d))
        lam_g, vl, vr = eig(T + 1e-10 * (J + J.T), left=True, right=True)
    else:
        lam_g = lam
    mag = np.abs(lam)
    res = np.maximum(0.0, mag - 1.0)
    grads = np.zeros((d, d * d))
    for k in np.flatnonzero(res > 0):
        w, v = vl[:, k], vr[:, k]
        dlam = np.outer(w.conj(), v) / (w.conj() @ v)
        lk = lam_g[k]
        grads[k] = (np.conj(lk) * dlam).real.ravel() / abs(lk)
    return res, grads


@dataclass
class FinalFitState:
    model: Model
    beta: np.ndarray
    psi: float
    penalty: float
    iterations: int
    valid: bool
    warning: str = ""
    history: list = field(default_factory=list)


def _unpack(x, n_init, d, n_meas):
    a = n_init * d
    S = x[:a].reshape(n_init, d)
    T = x[a:a + d * d].reshape(d, d)
    P = x[a + d * d:].reshape(d, n_meas)
    return S, T, P


def psi_objective(shape, ts, Ftilde, N, beta, jitter_seed: int = 0):
    """Psi over the packed parameters (S, T, P) for fixed buffers ``beta``.

    ``shape`` is (|I|, d, |M|). Returns ``(objective, evaluate, parts)``:
    evaluate(x) gives value, gradient and Gauss-Newton Hessian, and
    parts(x) gives (fit term, penalty, predictions). ``beta`` is read at
    call time, so later in-place updates take effect.
    """
    n_init, d, n_meas = shape
    ts = np.asarray(ts, dtype=int)
    K = Ftilde.size

    def predictions(S, T, P):
        return predict_many(Model(S, T, P), ts).transpose(1, 0, 2)

    def parts(x):
        S, T, P = _unpack(x, n_init, d, n_meas)
        F = predictions(S, T, P)
        V = F * (1 - F) / N
        W = buffered_weight(V, beta)
        return float(np.sum(W * (F - Ftilde) ** 2)) / K, eigenvalue_penalty(T), F

    def objective(x):
        try:
            fit, pen, _ = parts(x)
        except (NumericFailure, np.linalg.LinAlgError, ValueError):
            return np.inf
        return fit + pen

    def evaluate(x):
        S, T, P = _unpack(x, n_init, d, n_meas)
        derivs = powers_with_derivatives(T, ts)
        F = np.empty_like(Ftilde)
        JS = np.zeros(Ftilde.shape + (n_init, d))
        JT = np.empty(Ftilde.shape + (d * d,))
        JP = np.zeros(Ftilde.shape + (d, n_meas))
        for k, t in enumerate(ts):
            X, D = derivs[int(t)]
            XP = X @ P
            SX = S @ X
            F[:, k, :] = S @ XP
            JS[np.arange(n_init), k, :, np.arange(n_init), :] = XP.T[None, :, :].repeat(n_init, 0)
            JP[:, k, :, :, :] = np.einsum("ia,mc->imac", SX, np.eye(n_meas))
            JT[:, k, :, :] = np.einsum("ia,jab,bm->imj", S, D, P, optimize=True)
        V = F * (1 - F) / N
        root = np.sqrt(V * V + 4 * beta ** 2)
        W = buffered_weight(V, beta)
        dW_dV = -W / root
        dsqrtW_dF = 0.5 / np.sqrt(W) * dW_dV * (1 - 2 * F) / N
        r = (np.sqrt(W) * (F - Ftilde)).ravel() / np.sqrt(K)
        scale = ((np.sqrt(W) + (F - Ftilde) * dsqrtW_dF) / np.sqrt(K)).ravel()
        J = np.hstack([JS.reshape(K, -1), JT.reshape(K, -1), JP.reshape(K, -1)]) * scale[:, None]
        pres, pgrad = eigenvalue_penalty_terms(T, jitter_seed)
        Jp = np.zeros((d, len(x)))
        Jp[:, n_init * d:n_init * d + d * d] = pgrad
        r_all = np.concatenate([r, pres])
        J_all = np.vstack([J, Jp])
        f = float(r_all @ r_all)
        return f, 2.0 * J_all.T @ r_all, 2.0 * J_all.T @ J_all

    return objective, evaluate, parts


def final_fit(init: Model, ts, Ftilde, N, opts: FitOptions = FitOptions()) -> FinalFitState:
    """Minimize Psi = mean model-weighted squared error + eigenvalue penalty.

    ``Ftilde`` and ``N`` have shape (|I|, len(ts), |M|).
    """
    ts = np.asarray(ts, dtype=int)
    n_init, d, n_meas = init.S.shape[0], init.d, init.P.shape[1]
    Ftilde = np.asarray(Ftilde, dtype=float)
    N = np.asarray(N, dtype=float)
    beta = 1.0 / N
    objective, evaluate, psi_parts = psi_objective((n_init, d, n_meas), ts, Ftilde, N,
                                                   beta, opts.seed)

    def after_step(x, f_old, f_new):
        F = psi_parts(x)[2]
        bad = (F < 0) | (F > 1)
        if bad.any():
            beta[bad] *= opts.beta_decay
            return False
        return f_old - f_new <= opts.psi_improve * max(abs(f_old), 1e-300)

    x0 = np.concatenate([init.S.ravel(), init.T.ravel(), init.P.ravel()])
    with np.errstate(over="ignore", invalid="ignore"):
        result = gauss_newton(evaluate, objective, x0, max_iter=opts.stage4_max_iter,
                              ftol=None, after_step=after_step)
    S, T, P = _unpack(result.x, n_init, d, n_meas)
    model = Model(S, T, P, init.init_labels, init.meas_labels)
    fit, pen, F = psi_parts(result.x)
    valid = bool(np.all((F >= 0) & (F <= 1)))
    warning = ""
    if result.status == "line_search":
        warning = "line search failed; returning best point"
    elif result.status == "max_iter":
        warning = f"stopped after {result.iterations} iterations"
    return FinalFitState(model, beta, fit + pen, pen, result.iterations, valid, warning,
                         result.history)


def stage4_final_fit(init: Model, dataset: Dataset,
                     opts: FitOptions = FitOptions()) -> FinalFitState:
    ts, N, Y = dataset.arrays()
    return final_fit(init, ts, Y / N, N, opts)


# driver -------------------------------------------------------------------

@dataclass
class InferenceResult:
    model: Model
    dimension: DimensionReport
    d: int
    stage3: FitState
    stage4: FinalFitState
    log: list


def infer(dataset: Dataset, opts: FitOptions = FitOptions(), d: int | None = None) -> InferenceResult:
    """Run stages 1-4 on a dataset.

    Stage 3 failures raise the dimension by one and restart from stage 2,
    at most ``opts.max_extra_dims`` times; after that the best stage-3
    state seen is handed to stage 4.
    """
    events = []
    arr = assemble(dataset, pseudocount=opts.pseudocount)
    report = estimate_dimension(arr)
    d0 = report.d if d is None else d
    d0 = max(1, d0)
    events.append({"stage": 1, "d": report.d, "saturated": report.saturated,
                   "rank_F0": arr.rank_F0()})
    blocks = slice_blocks(arr)
    n_init, n_meas = arr.n_init, arr.n_meas
    best = None
    chosen = None
    for dim in range(d0, min(d0 + opts.max_extra_dims, min(arr.H.shape)) + 1):
        s2 = stage2_initial_model(arr, dim, opts)
        events.append({"stage": 2, "d": dim, "objective": s2.objective,
                       "shift_objective": s2.shift_objective, "iterations": s2.iterations})
        try:
            fit = stage3_progressive_fit(s2, blocks, opts)
        except Stage3Timeout as exc:
            fit = exc.best
            fit.success = fit.phi_final <= opts.phi_accept
            events.append({"stage": 3, "d": dim, "timeout": True, "phi_bbar": fit.phi_final})
        else:
            events.append({"stage": 3, "d": dim, "passes": fit.passes,
                           "phi_bbar": fit.phi_final, "success": fit.success})
        if best is None or fit.phi_final < best[1].phi_final:
            best = (dim, fit)
        if fit.success:
            chosen = (dim, fit)
            break
    if chosen is None:
        chosen = best
        events.append({"stage": 3, "note": "no dimension reached phi_accept; using best fit",
                       "d": chosen[0]})
    dim, fit = chosen
    init = fit.model(n_init, n_meas, dataset.init_labels, dataset.meas_labels)
    final = stage4_final_fit(init, dataset, opts)
    events.append({"stage": 4, "d": dim, "psi": final.psi, "penalty": final.penalty,
                   "iterations": final.iterations, "valid": final.valid,
                   "warning": final.warning})
    return InferenceResult(final.model, report, dim, fit, final, events)
