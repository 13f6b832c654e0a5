"""Concrete energies: parametrised-mean Gaussian, isotropic mixture of
Gaussians, the banana target, and a numeric dissipativity probe."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .core import Dataset, EnergyModel

LOG_2PI = math.log(2 * math.pi)


class GaussianMeanModel(EnergyModel):
    """``E(theta, x) = |theta - x|^2 / 2`` with ``d_theta = d_x = dim``."""

    def __init__(self, dim: int = 1):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = self.d_theta = self.d_x = int(dim)

    def __repr__(self):
        return f"GaussianMeanModel(dim={self.dim})"

    def energy(self, theta, x):
        return 0.5 * np.sum((np.asarray(theta) - np.asarray(x)) ** 2, axis=-1)

    def grad_theta(self, theta, x):
        return np.asarray(theta, dtype=float) - x

    def grad_x(self, theta, x):
        return np.asarray(x, dtype=float) - theta

    def log_normalizer(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.full(theta.shape[:-1], 0.5 * self.dim * LOG_2PI)

    def averaged_drift(self, theta, data: Dataset):
        return data.mean() - np.asarray(theta, dtype=float)

    def joint_affine_drift(self, data: Dataset, epsilon: float, n_particles: int):
        """``(A, b)`` with joint drift ``b - A u`` on ``u = (theta, z.ravel())``."""
        d, n = self.dim, n_particles
        size = d * (1 + n)
        A = np.zeros((size, size))
        b = np.zeros(size)
        b[:d] = data.mean()
        for i in range(n):
            rows = slice(d * (1 + i), d * (2 + i))
            A[:d, rows] = np.eye(d) / n
            A[rows, :d] = -np.eye(d) / epsilon
            A[rows, rows] = np.eye(d) / epsilon
        return A, b


class FlatModel(EnergyModel):
    """Constant energy; zero drift in both variables.  Used for noise-only
    checks of the integrators and as a non-dissipative counterexample."""

    def __init__(self, d_theta: int = 1, d_x: int = 1):
        self.d_theta, self.d_x = int(d_theta), int(d_x)

    def energy(self, theta, x):
        theta, x = np.broadcast_arrays(np.asarray(theta, float)[..., :1], np.asarray(x, float)[..., :1])
        return np.zeros(theta.shape[:-1])

    def grad_theta(self, theta, x):
        shape = np.broadcast_shapes(np.shape(theta)[:-1], np.shape(x)[:-1])
        return np.zeros(shape + (self.d_theta,))

    def grad_x(self, theta, x):
        shape = np.broadcast_shapes(np.shape(theta)[:-1], np.shape(x)[:-1])
        return np.zeros(shape + (self.d_x,))

    def joint_affine_drift(self, data: Dataset, epsilon: float, n_particles: int):
        size = self.d_theta + n_particles * self.d_x
        return np.zeros((size, size)), np.zeros(size)


class MoGModel(EnergyModel):
    """Isotropic mixture ``E = -log sum_i w_i exp(-|theta_i - x|^2 / 2 c_i^2)``.

    ``theta`` stacks the K component means, ``theta = (theta_1, ..., theta_K)``
    with each ``theta_i`` in R^dim.  With ``learn_scales=True`` the last K
    entries of ``theta`` are log-scales ``s_i`` and ``c_i = exp(s_i)``;
    ``scales`` then only provides the initial values (see :meth:`initial_theta`).

    All responsibilities go through log-sum-exp, so distant components
    never underflow to 0/0.
    """

    def __init__(self, weights, scales, dim: int = 1, learn_scales: bool = False):
        self.weights = np.asarray(weights, dtype=float)
        self.scales = np.asarray(scales, dtype=float)
        if self.weights.ndim != 1 or self.weights.shape != self.scales.shape:
            raise ValueError("weights and scales must be 1-d arrays of equal length")
        if np.any(self.weights <= 0) or np.any(self.scales <= 0):
            raise ValueError("weights and scales must be positive")
        self.K = self.weights.size
        self.dim = int(dim)
        self.learn_scales = learn_scales
        self.log_w = np.log(self.weights)
        self.d_x = self.dim
        self.d_theta = self.K * self.dim + (self.K if learn_scales else 0)

    @classmethod
    def equal(cls, n_components: int, scale: float, dim: int = 1, **kw) -> "MoGModel":
        return cls(np.ones(n_components), np.full(n_components, scale), dim, **kw)

    def __repr__(self):
        return (f"MoGModel(K={self.K}, dim={self.dim}, "
                f"learn_scales={self.learn_scales})")

    def initial_theta(self, means) -> np.ndarray:
        means = np.asarray(means, dtype=float).reshape(self.K * self.dim)
        if self.learn_scales:
            return np.concatenate([means, np.log(self.scales)])
        return means

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        kd = self.K * self.dim
        means = theta[..., :kd].reshape(theta.shape[:-1] + (self.K, self.dim))
        if self.learn_scales:
            log_c = theta[..., kd:]
        else:
            log_c = np.broadcast_to(np.log(self.scales), theta.shape[:-1] + (self.K,))
        return means, log_c

    def _parts(self, theta, x):
        means, log_c = self._split(theta)
        diff = means - np.asarray(x, dtype=float)[..., None, :]  # theta_i - x
        inv_c2 = np.exp(-2.0 * log_c)
        sq = np.sum(diff**2, axis=-1)
        logits = self.log_w - 0.5 * sq * inv_c2
        return diff, sq, inv_c2, logits

    def responsibilities(self, theta, x):
        """lambda_i(theta, x), shape ``(..., K)``; sums to one."""
        *_, logits = self._parts(theta, x)
        return softmax(logits, axis=-1)

    def energy(self, theta, x):
        *_, logits = self._parts(theta, x)
        return -logsumexp(logits, axis=-1)

    def grad_theta(self, theta, x):
        diff, sq, inv_c2, logits = self._parts(theta, x)
        lam = softmax(logits, axis=-1)
        g_means = (lam * inv_c2)[..., None] * diff
        g = g_means.reshape(g_means.shape[:-2] + (self.K * self.dim,))
        if self.learn_scales:
            g_scales = -lam * sq * inv_c2
            g = np.concatenate([g, g_scales], axis=-1)
        return g

    def grad_x(self, theta, x):
        diff, _, inv_c2, logits = self._parts(theta, x)
        lam = softmax(logits, axis=-1)
        return -np.sum((lam * inv_c2)[..., None] * diff, axis=-2)

    def log_normalizer(self, theta):
        _, log_c = self._split(theta)
        return logsumexp(self.log_w + self.dim * (0.5 * LOG_2PI + log_c), axis=-1)

    def grad_log_normalizer(self, theta):
        theta = np.asarray(theta, dtype=float)
        g = np.zeros(theta.shape)
        if self.learn_scales:
            _, log_c = self._split(theta)
            g[..., self.K * self.dim:] = self.dim * softmax(self.log_w + self.dim * log_c, axis=-1)
        return g

    def mixture_probs(self, theta) -> np.ndarray:
        """Component probabilities of ``p_theta``: ``w_i c_i^d`` normalised."""
        _, log_c = self._split(theta)
        return softmax(self.log_w + self.dim * log_c, axis=-1)

    def sample_from(self, theta, uniforms, normals) -> np.ndarray:
        """Exact draws from ``p_theta`` driven by supplied randomness.

        ``uniforms`` (n,) pick components by inverse CDF and ``normals``
        (n, dim) are scaled and shifted.  Feeding the same arrays at
        different theta gives common-random-number draws.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.d_theta,):
            raise ValueError("sample_from takes a single parameter vector")
        means, log_c = self._split(theta)
        cdf = np.cumsum(self.mixture_probs(theta))
        idx = np.minimum(np.searchsorted(cdf, np.asarray(uniforms), side="right"), self.K - 1)
        return means[idx] + np.exp(log_c)[idx, None] * np.asarray(normals, dtype=float)

    def sample(self, theta, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_from(theta, rng.random(n), rng.standard_normal((n, self.dim)))

    def averaged_drift(self, theta, data: Dataset):
        """``-grad V(theta)``; for fixed scales this is
        ``-(1/M) sum_j (theta_i - y_j) / c_i^2 * lambda_i(theta, y_j)``."""
        theta = np.asarray(theta, dtype=float)
        data_grad = self.grad_theta(theta[..., None, :], data.observations).mean(axis=-2)
        return -(data_grad + self.grad_log_normalizer(theta))


def mog_lambda(model: MoGModel, theta, x):
    return model.responsibilities(theta, x)


def mog_averaged_drift(model: MoGModel, data: Dataset, theta):
    return model.averaged_drift(theta, data)


def banana_sample(n: int, rng: np.random.Generator) -> np.ndarray:
    """Exact draws ``(Y1, (Y2 + Y1^2) / 2)`` with ``Y1, Y2`` standard normal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    y = rng.standard_normal((n, 2))
    return banana_transform(y)


def banana_transform(y):
    y = np.asarray(y, dtype=float)
    return np.stack([y[..., 0], 0.5 * (y[..., 1] + y[..., 0] ** 2)], axis=-1)


def banana_log_density(x):
    """Unnormalised log-density ``-(x1^2 + (2 x2 - x1^2)^2) / 2``."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return -0.5 * (x1**2 + (2 * x2 - x1**2) ** 2)


R_LATTICE = tuple(round(0.05 * k, 2) for k in range(1, 21))


@dataclass
class DissipativityProbe:
    """Result of :func:`probe_dissipativity`.

    ``b_curves[r]`` holds the smallest admissible ``b(theta)`` on the grid for
    candidate ``r``; ``valid[r]`` says whether that candidate is certified on
    every grid ``theta``.  ``r_tilde``/``b_tilde`` are the selected pair, or
    ``None`` when no candidate works (``ok`` is then False).
    """

    theta_grid: np.ndarray
    b_curves: dict
    valid: dict
    r_tilde: float | None
    b_tilde: np.ndarray | None

    @property
    def ok(self) -> bool:
        return self.r_tilde is not None

    def b_at(self, theta) -> float:
        """Look up ``b_tilde`` at a grid theta (exact match required)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        hit = np.all(np.isclose(self.theta_grid, theta), axis=-1)
        if not hit.any():
            raise KeyError(f"theta {theta} not on the probe grid")
        return float(self.b_tilde[np.argmax(hit)])

    def accepts(self, r: float, b_fn) -> bool:
        """Whether ``(r, b_fn(theta))`` dominates the certified curve for r."""
        r = min(R_LATTICE, key=lambda c: abs(c - r))
        if not self.valid.get(r, False):
            return False
        need = self.b_curves[r]
        have = np.array([b_fn(t) for t in self.theta_grid])
        return bool(np.all(have >= need - 1e-9))


def probe_dissipativity(model: EnergyModel, theta_grid, x_grid, candidates=R_LATTICE,
                        shell: float = 0.95) -> DissipativityProbe:
    """Numerically probe ``<grad_x E(theta,x), x> >= r |x|^2 - b(theta)``.

    For each candidate ``r`` and grid ``theta`` the smallest ``b`` is the
    maximum deficit ``r|x|^2 - <grad_x E, x>`` over the x grid (floored at 0).
    A candidate is certified only if, for every theta, the deficit maximum is
    attained strictly inside ``shell * max|x|``; a maximiser on the outer
    shell means the deficit keeps growing with the grid and no finite ``b``
    exists.  Among certified candidates the one minimising the worst-case
    second-moment level ``2 (b(theta) + d_x) / r`` is selected, which is the
    quantity the frozen moment bound consumes.
    """
    theta_grid = np.atleast_2d(np.asarray(theta_grid, dtype=float))
    if theta_grid.shape[-1] != model.d_theta and theta_grid.shape[0] == model.d_theta:
        theta_grid = theta_grid.T
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.ndim == 1:
        x_grid = x_grid[:, None]
    if theta_grid.size == 0 or x_grid.size == 0:
        raise ValueError("empty probe grid")
    norm2 = np.sum(x_grid**2, axis=-1)
    radius = math.sqrt(norm2.max())
    # (n_theta, n_x)
    inner = np.sum(model.grad_x(theta_grid[:, None, :], x_grid[None]) * x_grid, axis=-1)

    b_curves, valid = {}, {}
    for r in candidates:
        deficit = r * norm2 - inner
        arg = np.argmax(deficit, axis=1)
        b = np.maximum(deficit[np.arange(len(theta_grid)), arg], 0.0)
        interior = (np.sqrt(norm2[arg]) < shell * radius) | (b == 0.0)
        # b == 0 with a boundary argmax still means deficit <= 0 everywhere
        b_curves[r] = b
        valid[r] = bool(np.all(interior))

    best, best_level = None, math.inf
    for r in candidates:
        if not valid[r]:
            continue
        level = np.max(2 * (b_curves[r] + model.d_x) / r)
        if level < best_level - 1e-12:
            best, best_level = r, level
    return DissipativityProbe(
        theta_grid=theta_grid,
        b_curves=b_curves,
        valid=valid,
        r_tilde=best,
        b_tilde=None if best is None else b_curves[best],
    )
