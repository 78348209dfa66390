"""Constructions showing when sparse or short observation records are insufficient."""
import numpy as np

from qpi.hankel import block_hankel, ho_kalman_exact, numerical_rank
from qpi.model import Model, predict


def cyclic_shift_register(l: int) -> Model:
    """Scalar system of dimension l+1 whose output is 1 only when t = l mod (l+1).

    The state moves one slot along a cyclic register per step and only the
    last slot is measured, so nothing is seen until step l.
    """
    d = l + 1
    T = np.roll(np.eye(d), 1, axis=1)
    S = np.eye(d)[:1]
    P = np.eye(d)[:, -1:]
    return Model(S, T, P)


def shift_register_ranks(l: int):
    """(rank H^(1;l-1), rank H^(1;l), d) for the cyclic shift register."""
    m = cyclic_shift_register(l)
    X = lambda t: predict(m, t)
    return (numerical_rank(block_hankel(X, l - 1, start=1)),
            numerical_rank(block_hankel(X, l, start=1)), m.d)


def four_cycle(alpha: float, beta: float, gamma: float) -> Model:
    """Scalar response cycling alpha, beta, alpha, gamma, alpha, ..."""
    T = np.roll(np.eye(4), 1, axis=1)
    return Model(np.eye(4)[:1], T, np.array([[alpha], [beta], [alpha], [gamma]]))


def power_of_two_times(t_max: int):
    return [0] + [2**k for k in range(int(np.log2(t_max)) + 1)]


def minimal_completion_x3(X0, X1, X2, X4) -> float:
    """Value of the unobserved X(3) that keeps the 3x3 Hankel matrix singular.

    The determinant is a quadratic in X(3). When the rank-2 completion is
    unique it is a double root, located at the vertex -b / (2a).
    """
    def det(x):
        return np.linalg.det(np.array([[X0, X1, X2], [X1, X2, x], [X2, x, X4]]))
    xs = np.array([-1.0, 0.0, 1.0])
    coeffs = np.polyfit(xs, [det(x) for x in xs], 2)
    a, b, c = coeffs
    x = -b / (2 * a)
    if abs(np.polyval(coeffs, x)) > 1e-12 * max(abs(a), abs(b), abs(c)):
        raise ValueError("rank-2 completion is not unique")
    return float(x)


def sparse_observation_model(truth: Model, t_max: int = 1024) -> tuple:
    """Two-state model inferred from observations at t = 0, 1, 2, 4, 8, ...

    Returns (model, observed times). X(3) is filled by the unique rank-2
    completion and the model comes from exact Ho-Kalman on H^(0;1).
    """
    times = power_of_two_times(t_max)
    obs = {t: float(predict(truth, t)[0, 0]) for t in times}
    x3 = minimal_completion_x3(obs[0], obs[1], obs[2], obs[4])
    seq = [obs[0], obs[1], obs[2], x3]
    H = np.array([[seq[0], seq[1]], [seq[1], seq[2]]])
    Hs = np.array([[seq[1], seq[2]], [seq[2], seq[3]]])
    return ho_kalman_exact(H, Hs, 1, 1, 2), times
