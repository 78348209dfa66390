"""Linear state-space models F(t) = S T^t P.

States are row vectors and operators act on the right, so the model
state after t steps from initialization i is ``S[i] @ T^t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationFailure, InvalidGauge, NumericFailure

GAUGE_COND_MAX = 1e12


def _as_matrix(x) -> np.ndarray:
    a = np.array(x, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Model:
    """A d-dimensional model of preparations S, process T and measurements P."""

    S: np.ndarray
    T: np.ndarray
    P: np.ndarray
    init_labels: tuple = field(default=())
    meas_labels: tuple = field(default=())

    def __post_init__(self):
        S, T, P = _as_matrix(self.S), _as_matrix(self.T), _as_matrix(self.P)
        d = T.shape[0]
        if T.shape != (d, d) or S.shape[1] != d or P.shape[0] != d:
            raise ValueError(
                f"inconsistent shapes S{S.shape} T{T.shape} P{P.shape}")
        for name, a in (("S", S), ("T", T), ("P", P)):
            if not np.all(np.isfinite(a)):
                raise NumericFailure(f"{name} has non-finite entries")
        init = tuple(self.init_labels) or tuple(f"i{k}" for k in range(S.shape[0]))
        meas = tuple(self.meas_labels) or tuple(f"m{k}" for k in range(P.shape[1]))
        if len(init) != S.shape[0] or len(meas) != P.shape[1]:
            raise ValueError("label count does not match S rows / P columns")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "init_labels", init)
        object.__setattr__(self, "meas_labels", meas)

    @property
    def d(self) -> int:
        return self.T.shape[0]

    def relabel(self, init_labels=None, meas_labels=None) -> "Model":
        return Model(self.S, self.T, self.P,
                     init_labels if init_labels is not None else self.init_labels,
                     meas_labels if meas_labels is not None else self.meas_labels)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dimension": self.d,
            "init_labels": list(self.init_labels),
            "meas_labels": list(self.meas_labels),
            "S": self.S.tolist(),
            "T": self.T.tolist(),
            "P": self.P.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        model = cls(doc["S"], doc["T"], doc["P"],
                    tuple(doc["init_labels"]), tuple(doc["meas_labels"]))
        if model.d != int(doc["dimension"]):
            raise ValueError("dimension field disagrees with T")
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Model":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Generator:
    """Continuous-time generator L with T = 1 + L * dtau."""

    L: np.ndarray
    dtau: float

    def transfer_matrix(self) -> np.ndarray:
        return np.eye(self.L.shape[0]) + self.L * self.dtau


def matrix_power(T: np.ndarray, t: int) -> np.ndarray:
    """T**t by repeated squaring; T**0 is the identity."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    result = np.eye(T.shape[0])
    base = np.array(T, dtype=float)
    first = True
    while t:
        if t & 1:
            result = base.copy() if first else result @ base
            first = False
        t >>= 1
        if t:
            base = base @ base
    return result


def predict(model: Model, t: int) -> np.ndarray:
    """Predicted YES probabilities F(t) = S T^t P, shape (|I|, |M|)."""
    F = model.S @ matrix_power(model.T, t) @ model.P
    if not np.all(np.isfinite(F)):
        raise NumericFailure(f"prediction at t={t} is not finite")
    return F


def predict_many(model: Model, ts) -> np.ndarray:
    """Predictions for every t in ``ts``; returns shape (len(ts), |I|, |M|).

    Uses state stepping between sorted times, so a dense grid costs one
    matrix product per gap instead of a full power per point.
    """
    ts = np.asarray(ts, dtype=int)
    out = np.empty((len(ts), model.S.shape[0], model.P.shape[1]))
    order = np.argsort(ts, kind="stable")
    state = model.S.copy()
    current = 0
    for k in order:
        gap = int(ts[k]) - current
        if gap:
            state = state @ matrix_power(model.T, gap)
            current = int(ts[k])
        out[k] = state @ model.P
    if not np.all(np.isfinite(out)):
        raise NumericFailure("predictions are not finite")
    return out


def predictions_valid(F: np.ndarray, tol: float = 0.0) -> bool:
    return bool(np.all((F >= -tol) & (F <= 1 + tol)))


def gauge_transform(model: Model, G, cond_max: float = GAUGE_COND_MAX) -> Model:
    """Similarity transform (S G, G^-1 T G, G^-1 P); predictions are unchanged."""
    G = np.asarray(G, dtype=float)
    if G.shape != (model.d, model.d):
        raise InvalidGauge(f"gauge must be {model.d}x{model.d}")
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > cond_max:
        raise InvalidGauge(f"gauge condition number {cond:.3g} exceeds {cond_max:.3g}")
    Ginv = np.linalg.inv(G)
    return Model(model.S @ G, Ginv @ model.T @ G, Ginv @ model.P,
                 model.init_labels, model.meas_labels)


def extract_generator(model: Model, dtau: float) -> Generator:
    if dtau <= 0:
        raise ValueError("dtau must be positive")
    return Generator((model.T - np.eye(model.d)) / dtau, float(dtau))


def spectral_radius(T: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(T)))) if T.size else 0.0


def random_model(d: int, n_init: int, n_meas: int, seed: int,
                 t_max: int = 64, max_retries: int = 1000,
                 decay=(0.9, 1.0)) -> Model:
    """Random model with spectral radius <= 1 and valid predictions up to t_max.

    The construction is a constant mode (eigenvalue 1) carrying the offset
    1/2 plus a (d-1)-dimensional random part rescaled to spectral radius
    in ``decay``; the whole thing is then hidden behind a random gauge.
    Draws whose predictions leave [0, 1] are rejected.
    """
    if min(d, n_init, n_meas) < 1:
        raise ValueError("d, n_init and n_meas must be >= 1")
    rng = np.random.default_rng(seed)
    k = d - 1
    for _ in range(max_retries):
        T = np.eye(d)
        S = np.zeros((n_init, d))
        P = np.zeros((d, n_meas))
        S[:, 0] = 1.0
        P[0, :] = 0.5
        if k:
            G = rng.normal(size=(k, k))
            radius = spectral_radius(G)
            if radius == 0:
                continue
            T[1:, 1:] = G / radius * rng.uniform(*decay)
            S[:, 1:] = rng.normal(size=(n_init, k)) / np.sqrt(k)
            P[1:, :] = rng.normal(size=(k, n_meas)) * 0.5 / np.sqrt(k)
        gauge = np.eye(d) + 0.3 * rng.normal(size=(d, d))
        if np.linalg.cond(gauge) > 1e3:
            continue
        model = gauge_transform(Model(S, T, P), gauge)
        F = predict_many(model, np.arange(t_max + 1))
        if predictions_valid(F):
            return model
    raise GenerationFailure(f"no valid model after {max_retries} draws")
