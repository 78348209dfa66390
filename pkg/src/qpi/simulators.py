"""Ground-truth qubit scenarios and binomial sampling of experiment records.

Each scenario evolves a joint density matrix (qubit plus any extra levels
or spins) one process application at a time and reports the YES
probability (1 + <O_m>)/2 of the extended Pauli observables O_m.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq
from scipy.special import erf

from .datastore import Dataset, ExperimentRecord, TruthTable
from .errors import CalibrationFailure
from .model import Model
from .schedule import Schedule

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = {"X": SX, "Y": SY, "Z": SZ}
MEAS_LABELS = ("X", "Y", "Z")

# qubit kets for the tomographic states |+>_x, |+>_y, |+>_z = |0>, |->_z = |1>
KETS = {
    "+x": np.array([1, 1], dtype=complex) / np.sqrt(2),
    "+y": np.array([1, 1j], dtype=complex) / np.sqrt(2),
    "+z": np.array([1, 0], dtype=complex),
    "-z": np.array([0, 1], dtype=complex),
}
FRAME_LABELS = ("+x", "+y", "+z", "-z")


def ket_dm(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


@dataclass
class Scenario:
    """A joint-space simulator for one qubit process.

    ``embed`` maps a qubit density matrix to the joint initial state,
    ``step(t)`` returns the unitary applied at step index t (t = 0 for the
    first application), and ``observables`` are the extended Pauli
    operators on the joint space.
    """

    name: str
    init_labels: tuple
    embed: Callable
    step: Callable
    observables: dict
    time_dependent: bool = False
    params: dict = field(default_factory=dict)

    def initial_state(self, label: str) -> np.ndarray:
        return self.embed(ket_dm(KETS[label]))

    def evolve(self, rho0: np.ndarray, t_max: int):
        """Yield (t, rho(t)) for t = 0..t_max by incremental stepping."""
        rho = rho0
        U = None if self.time_dependent else self.step(0)
        for t in range(t_max + 1):
            yield t, rho
            Ut = self.step(t) if self.time_dependent else U
            rho = Ut @ rho @ Ut.conj().T

    def probabilities(self, labels, t_max: int) -> np.ndarray:
        """Exact YES probabilities, shape (len(labels), t_max + 1, 3)."""
        obs = np.stack([self.observables[m] for m in MEAS_LABELS])
        out = np.empty((len(labels), t_max + 1, len(MEAS_LABELS)))
        for i, lab in enumerate(labels):
            for t, rho in self.evolve(self.initial_state(lab), t_max):
                ev = np.einsum("mab,ba->m", obs, rho).real
                out[i, t] = (1 + ev) / 2
        return out


def ry(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def drift_scenario(epsilon: float = 0.01, Omega: float = 0.02) -> Scenario:
    """Intended pi rotation about y whose angle drifts as pi + eps sin(Omega t)."""
    return Scenario(
        name="drift",
        init_labels=("+z", "+x"),
        embed=lambda rho: rho,
        step=lambda t: ry(np.pi + epsilon * np.sin(Omega * t)),
        observables=dict(PAULIS),
        time_dependent=True,
        params={"epsilon": epsilon, "Omega": Omega},
    )


def drift_angle(t: int, epsilon: float, Omega: float) -> float:
    return np.pi + epsilon * np.sin(Omega * t)


# leakage ------------------------------------------------------------------

def gaussian_envelope(tau, width=0.25):
    """Pulse shape exp(-((tau - 1/2) / width)**2) on the unit step."""
    return np.exp(-(((np.asarray(tau) - 0.5) / width) ** 2))


_GL = np.array([0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6])


def _propagate(hamiltonian, substeps: int) -> np.ndarray:
    """Unit-step propagator of a time-dependent Hamiltonian.

    Fourth-order Magnus expansion on each substep with two Gauss-Legendre
    nodes: exp(-i h (H1 + H2)/2 - (sqrt(3) h^2 / 12) [H2, H1]).
    """
    h = 1.0 / substeps
    dim = hamiltonian(0.0).shape[0]
    U = np.eye(dim, dtype=complex)
    for k in range(substeps):
        H1 = hamiltonian((k + _GL[0]) * h)
        H2 = hamiltonian((k + _GL[1]) * h)
        omega = -0.5j * h * (H1 + H2) - (np.sqrt(3) / 12) * h * h * (H2 @ H1 - H1 @ H2)
        U = expm(omega) @ U
    return U


def calibrate_pulse_peak(width: float = 0.25, substeps: int = 256) -> float:
    """Peak amplitude giving an exact pi rotation on {|0>, |1>} (two-level truncation).

    A rotation by theta about x has <0|U|0> = cos(theta / 2); the peak is the
    root of that element, bracketed around the closed-form pulse area.
    """
    area = width * np.sqrt(np.pi) * erf(0.5 / width)

    def cos_half_angle(peak):
        U = _propagate(lambda tau: peak * gaussian_envelope(tau, width) * SX, substeps)
        return U[0, 0].real

    guess = (np.pi / 2) / area
    try:
        peak = brentq(cos_half_angle, 0.5 * guess, 1.5 * guess, xtol=1e-15, rtol=1e-15)
    except ValueError as exc:
        raise CalibrationFailure(f"pulse calibration did not bracket: {exc}") from None
    if abs(cos_half_angle(peak)) > 1e-9:
        raise CalibrationFailure("calibrated pulse is not a pi rotation")
    return peak


def leakage_hamiltonian(amplitude: float, Delta: float) -> np.ndarray:
    H = np.zeros((3, 3), dtype=complex)
    H[0, 1] = H[1, 0] = amplitude
    H[1, 2] = H[2, 1] = np.sqrt(2) * amplitude
    H[2, 2] = Delta
    return H


def leakage_step_unitary(Delta: float, width: float = 0.25,
                         substeps: int = 256, peak: float | None = None) -> np.ndarray:
    if peak is None:
        peak = calibrate_pulse_peak(width, substeps)
    return _propagate(
        lambda tau: leakage_hamiltonian(peak * gaussian_envelope(tau, width), Delta),
        substeps)


def extend_observable(op: np.ndarray) -> np.ndarray:
    """sigma_m (+) (-1): the leaked level reads as the -1 outcome."""
    out = -np.eye(3, dtype=complex)
    out[:2, :2] = op
    return out


def leakage_scenario(Delta: float = 20.0, pulse_width: float = 0.25,
                     pulse_area_target: float = np.pi, substeps: int = 256) -> Scenario:
    """Three-level anharmonic oscillator driven by a calibrated Gaussian pi pulse."""
    if not np.isclose(pulse_area_target, np.pi):
        raise CalibrationFailure("only pi-pulse calibration is supported")
    U = leakage_step_unitary(Delta, pulse_width, substeps)

    def embed(rho):
        out = np.zeros((3, 3), dtype=complex)
        out[:2, :2] = rho
        return out

    return Scenario(
        name="leakage",
        init_labels=("+z", "-z", "+x", "+y"),
        embed=embed,
        step=lambda t: U,
        observables={m: extend_observable(op) for m, op in PAULIS.items()},
        params={"Delta": Delta, "pulse_width": pulse_width, "substeps": substeps},
    )


def leaked_population(scenario: Scenario, label: str, t_max: int) -> np.ndarray:
    return np.array([rho[2, 2].real
                     for _, rho in scenario.evolve(scenario.initial_state(label), t_max)])


# spin exchange ------------------------------------------------------------

def spin_exchange_scenario(gamma: float = 0.01) -> Scenario:
    """Qubit coupled to an impurity spin (initially |+>_z) by isotropic exchange."""
    H = gamma * sum(np.kron(op, op) for op in (SX, SY, SZ))
    U = expm(-1j * H)
    impurity = ket_dm(KETS["+z"])
    eye2 = np.eye(2, dtype=complex)
    return Scenario(
        name="spin_exchange",
        init_labels=("+x", "+y", "+z"),
        embed=lambda rho: np.kron(rho, impurity),
        step=lambda t: U,
        observables={m: np.kron(op, eye2) for m, op in PAULIS.items()},
        params={"gamma": gamma},
    )


SCENARIOS = {
    "drift": (drift_scenario, ("epsilon", "Omega")),
    "leakage": (leakage_scenario, ("Delta",)),
    "spin_exchange": (spin_exchange_scenario, ("gamma",)),
}


def make_scenario(name: str, **params) -> Scenario:
    try:
        factory, keys = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}") from None
    return factory(**{k: float(params[k]) for k in keys if k in params})


# truth and sampling -------------------------------------------------------

def exact_probabilities(scenario: Scenario, schedule: Schedule,
                        eval_grid=()) -> TruthTable:
    """Exact probabilities for every t up to max(schedule, grid).

    Also records the t = 0, 1 probabilities of the full single-qubit frame
    so a perfect process-tomography baseline can be built later.
    """
    t_max = max(max(schedule.T_set), max(eval_grid, default=0))
    F = scenario.probabilities(scenario.init_labels, t_max)
    frame = scenario.probabilities(FRAME_LABELS, 1).transpose(1, 0, 2)
    return TruthTable(scenario.init_labels, MEAS_LABELS, np.arange(t_max + 1), F,
                      {"scenario": scenario.name, **scenario.params},
                      frame, FRAME_LABELS)


def _stream(seed: int, i: int, t: int, m: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, i, t, m]))


def sample_counts(truth: TruthTable, schedule: Schedule, shots: int, seed: int,
                  meta: dict | None = None) -> Dataset:
    """Binomial YES counts for every scheduled experiment.

    Each experiment draws from its own stream keyed by (seed, i, t, m), so
    the result does not depend on evaluation order.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    probs = truth.take(schedule.T_set)
    records = []
    for i, il in enumerate(truth.init_labels):
        for k, t in enumerate(schedule.T_set):
            for m, ml in enumerate(truth.meas_labels):
                p = float(np.clip(probs[i, k, m], 0.0, 1.0))
                y = int(_stream(seed, i, t, m).binomial(shots, p))
                records.append(ExperimentRecord(il, int(t), ml, shots, y))
    info = dict(truth.meta)
    info.update({"shots": shots, "seed": seed})
    if meta:
        info.update(meta)
    return Dataset(schedule, truth.init_labels, truth.meas_labels, tuple(records), info)


def model_truth(model: Model, t_max: int, meta: dict | None = None) -> TruthTable:
    """Truth table of a linear model's predictions for t = 0..t_max."""
    from .model import predict_many
    times = np.arange(t_max + 1)
    F = predict_many(model, times).transpose(1, 0, 2)
    init = model.init_labels or tuple(f"s{i}" for i in range(F.shape[0]))
    meas = model.meas_labels or tuple(f"m{m}" for m in range(F.shape[2]))
    return TruthTable(tuple(init), tuple(meas), times, F, dict(meta or {"scenario": "model"}))
