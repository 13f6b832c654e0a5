"""Energy-model interface, joint state and the combined potential.

Arrays follow one broadcasting convention throughout the package:

* ``theta`` has shape ``(..., d_theta)``
* a single sample ``x`` has shape ``(..., d_x)``
* a particle set has shape ``(..., N, d_x)``

Leading axes are replica (ensemble) axes, so every kernel runs a whole
batch of independent trajectories in one numpy call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Array shapes are inconsistent with the model dimensions."""


class EnergyModel:
    """Base class for energies ``E(theta, x)`` with ``p_theta ∝ exp(-E)``.

    Subclasses set ``d_theta`` and ``d_x`` and implement :meth:`energy`,
    :meth:`grad_theta` and :meth:`grad_x`.  Models with a closed-form
    normaliser override :meth:`log_normalizer`; models whose particle-average
    of the parameter drift is known analytically override
    :meth:`averaged_drift`.
    """

    d_theta: int
    d_x: int

    def energy(self, theta, x):
        raise NotImplementedError

    def grad_theta(self, theta, x):
        raise NotImplementedError

    def grad_x(self, theta, x):
        raise NotImplementedError

    def log_normalizer(self, theta) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no analytic log Z")

    def averaged_drift(self, theta, data: "Dataset"):
        raise NotImplementedError(
            f"{type(self).__name__} has no analytic averaged drift"
        )

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 0 or theta.shape[-1] != self.d_theta:
            raise DimensionError(
                f"theta has trailing dim {theta.shape[-1:]}, expected {self.d_theta}"
            )
        return theta

    def check_particles(self, particles):
        particles = np.asarray(particles, dtype=float)
        if particles.ndim < 2 or particles.shape[-1] != self.d_x:
            raise DimensionError(
                f"particles must have shape (..., N, {self.d_x}), got {particles.shape}"
            )
        return particles


@dataclass(frozen=True)
class Dataset:
    """M observations ``y_j`` stored as an ``(M, d_x)`` array."""

    observations: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or obs.shape[0] < 1:
            raise DimensionError(f"observations must be (M, d_x) with M >= 1, got {obs.shape}")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations must be finite")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    @property
    def M(self) -> int:
        return self.observations.shape[0]

    @property
    def d_x(self) -> int:
        return self.observations.shape[1]

    def mean(self) -> np.ndarray:
        return self.observations.mean(axis=0)


@dataclass
class SystemState:
    """Slow parameter ``theta`` plus the persistent particle cloud.

    ``theta`` has shape ``(..., d_theta)`` and ``particles`` has shape
    ``(..., N, d_x)``; the leading axes must agree.
    """

    theta: np.ndarray
    particles: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        self.particles = np.array(self.particles, dtype=float)
        if self.theta.ndim == 0:
            self.theta = self.theta.reshape(1)
        if self.particles.ndim < 2:
            raise DimensionError("particles need shape (..., N, d_x)")
        if self.theta.shape[:-1] != self.particles.shape[:-2]:
            raise DimensionError(
                f"batch shapes differ: theta {self.theta.shape}, particles {self.particles.shape}"
            )
        if self.time < 0:
            raise ValueError("time must be nonnegative")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.theta.shape[:-1]

    def copy(self) -> "SystemState":
        return SystemState(self.theta.copy(), self.particles.copy(), self.time)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.particles)))


@dataclass(frozen=True)
class MultiscaleConfig:
    """Time-stepping parameters of the slow-fast system.

    ``horizon`` is simulated time; the number of steps is
    ``round(horizon / delta)``.
    """

    epsilon: float
    delta: float
    n_particles: int = 1
    stages: int = 3
    horizon: float = 1.0
    seed: int = 0
    burn_in: int = 0
    thinning: int = 1

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.stages < 2:
            raise ValueError(f"S-ROCK needs stages >= 2, got {self.stages}")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.burn_in < 0 or self.thinning < 1:
            raise ValueError("burn_in must be >= 0 and thinning >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.delta))


def _data_term(fn, theta, data: Dataset):
    # mean_j fn(theta, y_j), broadcast over the leading replica axes of theta
    theta = np.asarray(theta, dtype=float)
    return fn(theta[..., None, :], data.observations).mean(axis=theta.ndim - 1)


def _check(model: EnergyModel, data: Dataset, theta, particles):
    theta = model.check_theta(theta)
    particles = model.check_particles(particles)
    if data.d_x != model.d_x:
        raise DimensionError(f"data has d_x={data.d_x}, model expects {model.d_x}")
    if theta.shape[:-1] != particles.shape[:-2]:
        raise DimensionError(
            f"batch shapes differ: theta {theta.shape}, particles {particles.shape}"
        )
    return theta, particles


def bar_e_eval(model: EnergyModel, data: Dataset, theta, particles):
    """Combined potential ``sum_i (E(theta, x^i) - mean_j E(theta, y_j))``."""
    theta, particles = _check(model, data, theta, particles)
    n = particles.shape[-2]
    part = model.energy(theta[..., None, :], particles).sum(axis=-1)
    return part - n * _data_term(model.energy, theta, data)


def bar_e_grad_theta(model: EnergyModel, data: Dataset, theta, particles):
    """Gradient of the combined potential in ``theta``.

    Dividing by N gives the drift of the parameter equation.
    """
    theta, particles = _check(model, data, theta, particles)
    n = particles.shape[-2]
    part = model.grad_theta(theta[..., None, :], particles).sum(axis=-2)
    return part - n * _data_term(model.grad_theta, theta, data)


def bar_e_grad_z(model: EnergyModel, data: Dataset, theta, particles):
    """Per-particle gradient ``grad_x E(theta, x^i)``; shape of ``particles``."""
    theta, particles = _check(model, data, theta, particles)
    return model.grad_x(theta[..., None, :], particles)


def neg_log_likelihood(model: EnergyModel, data: Dataset, theta, log_z_theta=None):
    """Negative empirical log-likelihood ``mean_j E(theta, y_j) + log Z_theta``.

    ``log_z_theta`` defaults to the model's analytic normaliser.
    """
    theta = model.check_theta(theta)
    if log_z_theta is None:
        log_z_theta = model.log_normalizer(theta)
    log_z_theta = np.asarray(log_z_theta, dtype=float)
    if not np.all(np.isfinite(log_z_theta)):
        raise ValueError("log Z_theta must be finite")
    return _data_term(model.energy, theta, data) + log_z_theta
