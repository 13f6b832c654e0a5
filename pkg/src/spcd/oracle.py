"""Exact moments of the slow-fast system for the Gaussian mean model.

With ``E = (theta - x)^2 / 2`` the joint process ``u = (theta, x^1..x^N)`` is
the linear SDE ``du = (b - A u) dt + sigma dW`` where

* ``A[0, i] = 1/N`` and, for each particle row, ``A[i, 0] = -1/eps``,
  ``A[i, i] = 1/eps``;
* ``b = (ybar, 0, ..., 0)``;
* ``Q = sigma sigma^T = diag(2/N, 2/eps, ..., 2/eps)``.

Coordinates of a d-dimensional Gaussian model decouple, so the oracle is
one-dimensional and is applied per coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearOracle:
    epsilon: float
    n_particles: int
    data_mean: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")

    @property
    def size(self) -> int:
        return 1 + self.n_particles

    @property
    def A(self) -> np.ndarray:
        n, eps = self.n_particles, self.epsilon
        A = np.zeros((n + 1, n + 1))
        A[0, 1:] = 1.0 / n
        A[1:, 0] = -1.0 / eps
        A[np.arange(1, n + 1), np.arange(1, n + 1)] = 1.0 / eps
        return A

    @property
    def b(self) -> np.ndarray:
        b = np.zeros(self.size)
        b[0] = self.data_mean
        return b

    @property
    def Q(self) -> np.ndarray:
        return np.diag([2.0 / self.n_particles] + [2.0 / self.epsilon] * self.n_particles)


def stationary_mean(oracle: LinearOracle) -> np.ndarray:
    """``A^{-1} b``; every entry equals the data mean."""
    return np.linalg.solve(oracle.A, oracle.b)


def lyapunov_solve(A, Q) -> np.ndarray:
    """Solve ``A S + S A^T = Q`` through ``(I kron A + A kron I) vec(S) = vec(Q)``."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    eye = np.eye(n)
    K = np.kron(eye, A) + np.kron(A, eye)
    try:
        vec = np.linalg.solve(K, np.asarray(Q, dtype=float).reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"Lyapunov system is singular: {exc}") from exc
    S = vec.reshape(n, n, order="F")
    return 0.5 * (S + S.T)


def stationary_cov(oracle: LinearOracle) -> np.ndarray:
    A, Q = oracle.A, oracle.Q
    S = lyapunov_solve(A, Q)
    resid = np.linalg.norm(A @ S + S @ A.T - Q)
    if not resid < 1e-10 * max(1.0, np.linalg.norm(Q)):
        raise OracleError(f"Lyapunov residual {resid:.3e} too large")
    return S


def lyapunov_residual(oracle: LinearOracle, S) -> float:
    A, Q = oracle.A, oracle.Q
    return float(np.linalg.norm(A @ S + S @ A.T - Q))


def averaged_theta_variance(n_particles: int) -> float:
    """Variance of the averaged stationary law ``∝ exp(-N V)`` (Gaussian: 1/N)."""
    return 1.0 / n_particles


def transient_moments(oracle: LinearOracle, M0, Sigma0, t: float, h_max: float | None = None):
    """Mean and covariance at time ``t`` from the moment ODEs.

    ``dM/dt = b - A M`` and ``dS/dt = Q - A S - S A^T``, integrated with the
    classical fourth-order Runge-Kutta method at a uniform step no larger
    than ``min(eps, 1) / 50``.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    A, b, Q = oracle.A, oracle.b, oracle.Q
    M = np.array(M0, dtype=float).reshape(oracle.size)
    S = np.array(Sigma0, dtype=float).reshape(oracle.size, oracle.size)
    if t == 0:
        return M, S
    if h_max is None:
        h_max = min(oracle.epsilon, 1.0) / 50
    n_steps = int(np.ceil(t / h_max))
    h = t / n_steps

    def f(M, S):
        AS = A @ S
        return b - A @ M, Q - AS - AS.T

    for _ in range(n_steps):
        k1m, k1s = f(M, S)
        k2m, k2s = f(M + 0.5 * h * k1m, S + 0.5 * h * k1s)
        k3m, k3s = f(M + 0.5 * h * k2m, S + 0.5 * h * k2s)
        k4m, k4s = f(M + h * k3m, S + h * k3s)
        M = M + h / 6 * (k1m + 2 * k2m + 2 * k3m + k4m)
        S = S + h / 6 * (k1s + 2 * k2s + 2 * k3s + k4s)
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(S))):
            raise OracleError("non-finite moment during integration")
    return M, 0.5 * (S + S.T)


def theta_second_moment(oracle: LinearOracle, theta0: float, x0, t: float) -> float:
    """``E[theta_t^2]`` from a deterministic start ``(theta0, x0)``."""
    M0 = np.concatenate([[theta0], np.broadcast_to(np.asarray(x0, float), (oracle.n_particles,))])
    M, S = transient_moments(oracle, M0, np.zeros((oracle.size, oracle.size)), t)
    return float(S[0, 0] + M[0] ** 2)


def example_closed_form_cov(epsilon: float, n_particles: int) -> np.ndarray:
    """The 2x2 closed form printed for the one-particle Gaussian example.

    Exact at N = 1 only; for N > 1 its theta-theta entry disagrees with the
    Lyapunov solution, which gives ``(1 + 2 eps) / N``.
    """
    eps, n = epsilon, n_particles
    return np.array([[eps * (1 / n + 1) + 1 / n, 1 / n], [1 / n, 1 / n + 1]])
