"""Time-stepping kernels for the slow-fast system and the trajectory driver.

Every kernel takes a :class:`~spcd.core.SystemState` whose arrays may carry
leading replica axes and returns a new state.  Noise is always supplied by
the caller as a :class:`NoiseDraw` of standard normals, which keeps the
kernels deterministic functions of their inputs.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    Dataset,
    EnergyModel,
    MultiscaleConfig,
    SystemState,
    bar_e_grad_theta,
    bar_e_grad_z,
)

DIVERGENCE_THRESHOLD = 1e8
THETA, PARTICLES = 0, 1  # subsystem ids in the noise key


@dataclass
class NoiseDraw:
    """Standard-normal increments for one step (shapes of theta/particles)."""

    theta_noise: np.ndarray
    z_noise: np.ndarray

    @classmethod
    def zeros(cls, state: SystemState) -> "NoiseDraw":
        return cls(np.zeros_like(state.theta), np.zeros_like(state.particles))


class NoiseStream:
    """Counter-based source of :class:`NoiseDraw` s.

    The normals for step ``n`` of subsystem ``s`` in replica stream ``r`` are
    taken from a Philox generator keyed by ``(seed, r, s, n // block)`` at
    offset ``n % block``.  Any step can be regenerated without replaying the
    steps before it, and two streams with the same key produce identical
    draws whatever order they are consumed in.
    """

    def __init__(self, seed: int, theta_shape, z_shape, replica: int = 0, block: int = 1024):
        self.seed = int(seed)
        self.replica = int(replica)
        self.block = int(block)
        self.shapes = {THETA: tuple(theta_shape), PARTICLES: tuple(z_shape)}
        self._cache: dict = {}

    def _block(self, subsystem: int, index: int) -> np.ndarray:
        key = (subsystem, index)
        if key not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            ss = np.random.SeedSequence(self.seed, spawn_key=(self.replica, subsystem, index))
            gen = np.random.Generator(np.random.Philox(ss))
            self._cache[key] = gen.standard_normal((self.block,) + self.shapes[subsystem])
        return self._cache[key]

    def draw(self, step: int) -> NoiseDraw:
        b, off = divmod(int(step), self.block)
        return NoiseDraw(self._block(THETA, b)[off], self._block(PARTICLES, b)[off])

    def block_arrays(self, index: int):
        """All draws of block ``index`` as ``(theta_block, z_block)``."""
        return self._block(THETA, index), self._block(PARTICLES, index)


def _joint_drift(model, data, eps, theta, particles):
    n = particles.shape[-2]
    g_theta = bar_e_grad_theta(model, data, theta, particles) / n
    g_z = -bar_e_grad_z(model, data, theta, particles) / eps
    return g_theta, g_z


def em_step(state: SystemState, model: EnergyModel, data: Dataset,
            cfg: MultiscaleConfig, noise: NoiseDraw) -> SystemState:
    """One Euler-Maruyama step of the slow-fast system (SPCD-EM)."""
    d, eps = cfg.delta, cfg.epsilon
    n = state.n_particles
    f_theta, f_z = _joint_drift(model, data, eps, state.theta, state.particles)
    theta = state.theta + d * f_theta + np.sqrt(2 * d / n) * noise.theta_noise
    z = state.particles + d * f_z + np.sqrt(2 * d / eps) * noise.z_noise
    return SystemState(theta, z, state.time + d)


def chebyshev_stages(drift: Callable, u0: Sequence[np.ndarray], h: float, m: int,
                     noise: Sequence[np.ndarray] | None = None):
    """Run the m-stage Chebyshev recursion on a tuple of arrays.

    ``drift(*u)`` returns a tuple matching ``u``.  With ``k = h / m^2``::

        K_1 = K_0 + k f(K_0)
        K_l = 2k f(K_{l-1}) + 2 K_{l-1} - K_{l-2}      l = 2..m

    ``noise`` (already scaled) is added to stage ``m - 1``, so it reaches the
    output with a factor two.  Uses m drift evaluations.
    """
    if m < 2:
        raise ValueError(f"stages must be >= 2, got {m}")
    k = h / m**2
    prev = tuple(u0)
    f = drift(*prev)
    cur = tuple(u + k * fu for u, fu in zip(prev, f))
    if noise is not None and m == 2:
        cur = tuple(u + w for u, w in zip(cur, noise))
    for stage in range(2, m + 1):
        f = drift(*cur)
        nxt = tuple(2 * k * fu + 2 * u - up for fu, u, up in zip(f, cur, prev))
        if noise is not None and stage == m - 1:
            nxt = tuple(u + w for u, w in zip(nxt, noise))
        prev, cur = cur, nxt
    return cur


def srock_step(state: SystemState, model: EnergyModel, data: Dataset,
               cfg: MultiscaleConfig, noise: NoiseDraw) -> SystemState:
    """One m-stage S-ROCK step (SPCD).

    The theta and particle recursions advance in lockstep: stage ``l`` of
    both reads stage ``l - 1`` of both.  Noise of size ``sqrt(delta/(2N))``
    and ``sqrt(delta/(2 eps))`` enters at stage ``m - 1``.
    """
    d, eps, m = cfg.delta, cfg.epsilon, cfg.stages
    n = state.n_particles

    def drift(theta, z):
        return _joint_drift(model, data, eps, theta, z)

    w = (np.sqrt(d / (2 * n)) * noise.theta_noise, np.sqrt(d / (2 * eps)) * noise.z_noise)
    theta, z = chebyshev_stages(drift, (state.theta, state.particles), d, m, w)
    return SystemState(theta, z, state.time + d)


def chebyshev_amplification(m: int, p: float) -> float:
    """``T_m(1 - p / m^2)`` by the three-term recursion.

    This is the factor the m-stage scheme applies to the linear mode
    ``u' = -lambda u`` with ``p = delta * lambda``; its modulus is at most one
    exactly for ``0 <= p <= 2 m^2``.
    """
    if p < 0:
        raise ValueError("p must be nonnegative")
    x = 1.0 - p / m**2
    t_prev, t = 1.0, x
    for _ in range(m - 1):
        t_prev, t = t, 2 * x * t - t_prev
    return t


def averaged_step(theta, drift: Callable, cfg: MultiscaleConfig, noise) -> np.ndarray:
    """Euler-Maruyama step of the averaged parameter dynamics.

    ``drift(theta)`` is the analytic averaged drift, e.g.
    ``lambda th: model.averaged_drift(th, data)``.
    """
    d, n = cfg.delta, cfg.n_particles
    theta = np.asarray(theta, dtype=float)
    return theta + d * drift(theta) + np.sqrt(2 * d / n) * noise


def averaged_drift_fn(model: EnergyModel, data: Dataset) -> Callable:
    """Bind the model's analytic averaged drift; rejects models without one."""
    try:
        model.averaged_drift(np.zeros(model.d_theta), data)
    except NotImplementedError as exc:
        raise ValueError(str(exc)) from None
    return lambda theta: model.averaged_drift(theta, data)


def frozen_step(state: SystemState, model: EnergyModel, cfg: MultiscaleConfig,
                noise: NoiseDraw) -> SystemState:
    """Particle step at fixed theta on the unit time scale (no 1/eps)."""
    d = cfg.delta
    g = model.grad_x(state.theta[..., None, :], state.particles)
    z = state.particles - d * g + np.sqrt(2 * d) * noise.z_noise
    return SystemState(state.theta, z, state.time + d)


INTEGRATORS = {"em": em_step, "srock": srock_step}

MINIBATCH = 2  # subsystem id for data subsampling draws


def minibatch_step(step_fn: Callable, batch_size: int, seed: int) -> Callable:
    """Wrap a step so each step sees a random subset of the data.

    The subset for step ``n`` (recovered from ``state.time``) is drawn
    without replacement from a Philox stream keyed by
    ``(seed, 0, MINIBATCH, n)``, so runs stay reproducible.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    def step(state, model, data, cfg, noise):
        if batch_size >= data.M:
            return step_fn(state, model, data, cfg, noise)
        n = int(round(state.time / cfg.delta))
        ss = np.random.SeedSequence(seed, spawn_key=(0, MINIBATCH, n))
        idx = np.random.Generator(np.random.Philox(ss)).choice(data.M, batch_size, replace=False)
        return step_fn(state, model, Dataset(data.observations[np.sort(idx)]), cfg, noise)

    return step


@dataclass
class TrajectoryRecord:
    """Thinned samples and running moments of one trajectory (or ensemble).

    ``theta_samples`` has shape ``(n_kept,) + theta.shape`` and
    ``times`` the matching simulated times.  The moment sums run over every
    post-burn-in step, for k in (1, 2, 4) of theta and of ``|z|``.
    """

    times: np.ndarray
    theta_samples: np.ndarray
    particle_samples: np.ndarray | None
    moment_sums: dict
    n_accumulated: int
    final_state: SystemState
    diverged: bool = False
    diverged_step: int | None = None
    wall_time: float = 0.0

    def theta_moment(self, k: int) -> np.ndarray:
        return self.moment_sums[("theta", k)] / max(self.n_accumulated, 1)

    def z_norm_moment(self, k: int) -> np.ndarray:
        return self.moment_sums[("z", k)] / max(self.n_accumulated, 1)


def is_diverged(state: SystemState) -> bool:
    return not (
        np.all(np.abs(state.theta) <= DIVERGENCE_THRESHOLD)
        and np.all(np.abs(state.particles) <= DIVERGENCE_THRESHOLD)
    )


def run_trajectory(integrator, state: SystemState, model: EnergyModel, data: Dataset,
                   cfg: MultiscaleConfig, observers=(), replica: int = 0,
                   noise_scale: float = 1.0, record_particles: bool = False,
                   n_steps: int | None = None, fast: bool = True) -> TrajectoryRecord:
    """Step ``state`` for ``cfg.n_steps`` steps and record the path.

    ``integrator`` is ``"em"``, ``"srock"`` or a step function with the
    :func:`em_step` signature.  Noise comes from a :class:`NoiseStream`
    keyed by ``(cfg.seed, replica)``; ``noise_scale=0`` gives the drift-only
    path.  States are recorded at step 0 and then every ``cfg.thinning``
    steps after ``cfg.burn_in``.  Observers are called as
    ``obs(step, state)`` on every recorded state.  On divergence (a
    non-finite entry or magnitude above 1e8) stepping stops and the record
    is returned with ``diverged`` set.

    Models exposing ``joint_affine_drift`` run through compiled loops when
    ``fast`` is set and neither observers nor particle recording are
    requested; the draws consumed are the same.
    """
    n_steps = cfg.n_steps if n_steps is None else n_steps
    stream = NoiseStream(cfg.seed, state.theta.shape, state.particles.shape, replica)
    use_fast = (
        fast and integrator in ("em", "srock") and not observers and not record_particles
        and hasattr(model, "joint_affine_drift")
    )
    t0 = _time.perf_counter()
    if use_fast:
        rec = _run_affine(integrator, state, model, data, cfg, stream, noise_scale, n_steps)
    else:
        step_fn = INTEGRATORS[integrator] if isinstance(integrator, str) else integrator
        rec = _run_generic(step_fn, state, model, data, cfg, stream, noise_scale, n_steps,
                           observers, record_particles)
    rec.wall_time = _time.perf_counter() - t0
    return rec


def _new_sums():
    return {(name, k): 0.0 for name in ("theta", "z") for k in (1, 2, 4)}


def _run_generic(step_fn, state, model, data, cfg, stream, noise_scale, n_steps,
                 observers, record_particles):
    times, thetas, parts = [], [], []
    sums = _new_sums()
    n_acc = 0

    def record(step, st):
        times.append(st.time)
        thetas.append(st.theta.copy())
        if record_particles:
            parts.append(st.particles.copy())
        for obs in observers:
            obs(step, st)

    record(0, state)
    diverged = is_diverged(state)
    div_step = 0 if diverged else None
    step = 0
    while step < n_steps and not diverged:
        noise = stream.draw(step)
        if noise_scale != 1.0:
            noise = NoiseDraw(noise_scale * noise.theta_noise, noise_scale * noise.z_noise)
        state = step_fn(state, model, data, cfg, noise)
        step += 1
        if is_diverged(state):
            diverged, div_step = True, step
            break
        if step > cfg.burn_in:
            znorm = np.sqrt(np.sum(state.particles**2, axis=(-2, -1)))
            for k in (1, 2, 4):
                sums["theta", k] = sums["theta", k] + state.theta**k
                sums["z", k] = sums["z", k] + znorm**k
            n_acc += 1
            if (step - cfg.burn_in) % cfg.thinning == 0:
                record(step, state)

    return TrajectoryRecord(
        times=np.array(times),
        theta_samples=np.array(thetas),
        particle_samples=np.array(parts) if record_particles else None,
        moment_sums=sums,
        n_accumulated=n_acc,
        final_state=state,
        diverged=diverged,
        diverged_step=div_step,
    )


def _run_affine(integrator, state, model, data, cfg, stream, noise_scale, n_steps):
    from ._fastpath import EM, SROCK, advance_block

    d, eps, m = cfg.delta, cfg.epsilon, cfg.stages
    n, dx, dth = state.n_particles, model.d_x, model.d_theta
    A, b = model.joint_affine_drift(data, eps, n)
    batch = state.batch_shape
    R = int(np.prod(batch))
    u = np.concatenate(
        [state.theta.reshape(R, dth), state.particles.reshape(R, n * dx)], axis=1
    )
    if integrator == "em":
        method, s_theta, s_z = EM, np.sqrt(2 * d / n), np.sqrt(2 * d / eps)
    else:
        method, s_theta, s_z = SROCK, np.sqrt(d / (2 * n)), np.sqrt(d / (2 * eps))
    sig = noise_scale * np.concatenate([np.full(dth, s_theta), np.full(n * dx, s_z)])

    times, thetas = [state.time], [state.theta.copy()]
    sums = _new_sums()
    n_acc = 0
    diverged = is_diverged(state)
    div_step = 0 if diverged else None
    step = 0
    while step < n_steps and not diverged:
        blk, off = divmod(step, stream.block)
        count = min(stream.block - off, n_steps - step)
        xi_theta, xi_z = stream.block_arrays(blk)
        xi = np.concatenate(
            [xi_theta[off:off + count].reshape(count, R, dth),
             xi_z[off:off + count].reshape(count, R, n * dx)], axis=2
        )
        out_theta = np.empty((count, R, dth))
        out_z = np.empty((count, R))
        done = advance_block(u, A, b, sig, xi, d, method, m, dth, DIVERGENCE_THRESHOLD,
                             out_theta, out_z)
        if done < count:
            diverged, div_step = True, step + done
            count = done - 1  # last written step is the divergent one
        steps = step + 1 + np.arange(count)
        keep = steps > cfg.burn_in
        th = out_theta[:count][keep].reshape((-1,) + batch + (dth,))
        zn = out_z[:count][keep].reshape((-1,) + batch)
        for k in (1, 2, 4):
            sums["theta", k] = sums["theta", k] + np.sum(th**k, axis=0)
            sums["z", k] = sums["z", k] + np.sum(zn**k, axis=0)
        n_acc += int(keep.sum())
        rec = keep & ((steps - cfg.burn_in) % cfg.thinning == 0)
        times.extend(state.time + d * steps[rec])
        thetas.extend(out_theta[:count][rec].reshape((-1,) + batch + (dth,)))
        step += count if not diverged else done

    final = SystemState(
        u[:, :dth].reshape(batch + (dth,)),
        u[:, dth:].reshape(batch + (n, dx)),
        state.time + d * step,
    )
    return TrajectoryRecord(
        times=np.array(times),
        theta_samples=np.array(thetas),
        particle_samples=None,
        moment_sums=sums,
        n_accumulated=n_acc,
        final_state=final,
        diverged=diverged,
        diverged_step=div_step,
    )
