"""Statistical checks of the slow-fast system and its integrators.

Scans return :class:`OrderEstimate` objects holding the raw grid, the
per-point statistics and a least-squares log-log slope; every scan can be
flattened to CSV rows with :func:`scan_rows`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import Dataset, MultiscaleConfig, SystemState
from .integrators import (
    INTEGRATORS,
    NoiseDraw,
    NoiseStream,
    chebyshev_amplification,
    frozen_step,
    run_trajectory,
)
from .models import GaussianMeanModel
from .oracle import (
    LinearOracle,
    averaged_theta_variance,
    stationary_cov,
    stationary_mean,
    transient_moments,
)

# ---------------------------------------------------------------- statistics


def batch_means(series, n_batches: int = 20):
    """Mean and std-error of an autocorrelated series by non-overlapping batches."""
    series = np.asarray(series, dtype=float)
    usable = (len(series) // n_batches) * n_batches
    if usable < n_batches:
        raise ValueError("series too short for batch means")
    means = series[-usable:].reshape(n_batches, -1).mean(axis=1)
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


def empirical_moments(theta_series, n_batches: int = 20) -> dict:
    """Mean and variance of a scalar time series, each with a batch-means std-error."""
    x = np.asarray(theta_series, dtype=float).ravel()
    mean, mean_se = batch_means(x, n_batches)
    var, var_se = batch_means((x - x.mean()) ** 2, n_batches)
    n = len(x)
    var *= n / (n - 1)
    return {"mean": mean, "mean_se": mean_se, "var": var, "var_se": var_se}


@dataclass
class OrderEstimate:
    """Errors on a grid and the fitted log-log slope with a 95% half-width."""

    grid: np.ndarray
    errors: np.ndarray
    slope: float
    half_width: float
    intercept: float = 0.0
    std_errors: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi


def fit_order(grid, errors, std_errors=None, **extra) -> OrderEstimate:
    grid = np.asarray(grid, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if grid.size < 3:
        raise ValueError("need at least 3 grid points")
    if np.any(errors <= 0):
        raise ValueError("all errors must be positive for a log-log fit")
    fit = stats.linregress(np.log(grid), np.log(errors))
    dof = grid.size - 2
    half = float(stats.t.ppf(0.975, dof) * fit.stderr) if dof > 0 else math.inf
    return OrderEstimate(grid, errors, float(fit.slope), half, float(fit.intercept),
                         None if std_errors is None else np.asarray(std_errors, float), extra)


def _check_geometric(grid, name="grid"):
    grid = np.asarray(grid, dtype=float)
    if grid.size < 3:
        raise ValueError(f"{name} needs at least 3 values")
    ratios = grid[1:] / grid[:-1]
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ValueError(f"{name} must be a geometric progression")
    return grid


# ---------------------------------------------------------------- Sinkhorn


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic OT settings.

    ``blur`` is in distance units (regularisation ``blur**2``).  The
    regularisation is annealed geometrically from the squared cloud diameter
    down to ``blur**2`` (blur shrinks by ``scaling`` per level); afterwards at
    most ``max_iter`` further iterations run until the dual value changes by
    less than ``tol``.
    """

    blur: float = 0.05
    max_iter: int = 100
    tol: float = 1e-5
    debiased: bool = True
    scaling: float = 0.9

    def __post_init__(self):
        if not self.blur > 0 or not self.tol > 0:
            raise ValueError("blur and tol must be positive")
        if not 0 < self.scaling < 1:
            raise ValueError("scaling must lie in (0, 1)")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass
class SinkhornResult:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def _sq_dist(X, Y):
    # per-coordinate accumulation: no BLAS, so results are thread-independent
    C = np.zeros((X.shape[0], Y.shape[0]))
    for k in range(X.shape[1]):
        C += (X[:, k, None] - Y[None, :, k]) ** 2
    return C


def _softmin(eps, C, h):
    # -eps * log sum_j exp(h_j - C_ij / eps), row-wise
    M = h[None, :] - C / eps
    top = M.max(axis=1)
    return -eps * (top + np.log(np.exp(M - top[:, None]).sum(axis=1)))


def _schedule(diam2, cfg):
    target = cfg.blur**2
    sched, e = [], max(diam2, target)
    while e > target:
        sched.append(e)
        e *= cfg.scaling**2
    sched.append(target)
    return sched


def _diam2(*clouds):
    both = np.concatenate(clouds)
    return float(np.sum((both.max(axis=0) - both.min(axis=0)) ** 2))


def _self_potential(C, sched, cfg):
    """Potential of ``OT(X, X)`` via the averaged map, plus a final full update."""
    log_a = np.full(C.shape[0], -math.log(C.shape[0]))
    f = _softmin(sched[0], C, log_a)
    for e in sched:
        f = 0.5 * (f + _softmin(e, C, log_a + f / e))
    e = sched[-1]
    return _softmin(e, C, log_a + f / e)


def _cross_potentials(Cxy, sched, cfg):
    n, m = Cxy.shape
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    f = _softmin(sched[0], Cxy, log_b)
    g = _softmin(sched[0], Cxy.T, log_a)
    for e in sched:
        f, g = (0.5 * (f + _softmin(e, Cxy, log_b + g / e)),
                0.5 * (g + _softmin(e, Cxy.T, log_a + f / e)))
    e = sched[-1]
    value = np.mean(f) + np.mean(g)
    converged, it = False, len(sched)
    for _ in range(cfg.max_iter):
        it += 1
        f, g = (0.5 * (f + _softmin(e, Cxy, log_b + g / e)),
                0.5 * (g + _softmin(e, Cxy.T, log_a + f / e)))
        new = np.mean(f) + np.mean(g)
        if abs(new - value) < cfg.tol:
            converged = True
            value = new
            break
        value = new
    # final extrapolation: one full (undamped) update of both potentials
    f, g = _softmin(e, Cxy, log_b + g / e), _softmin(e, Cxy.T, log_a + f / e)
    return f, g, converged, it


def sinkhorn_divergence(X, Y, cfg: SinkhornConfig | None = None, *,
                        y_self=None, diam2: float | None = None) -> SinkhornResult:
    """Entropic OT discrepancy between two uniform point clouds.

    Ground cost ``|x - y|^2``, regularisation ``blur^2``, log-domain
    symmetrised Sinkhorn updates under geometric annealing.  With
    ``debiased`` the result is ``OT(X,Y) - OT(X,X)/2 - OT(Y,Y)/2``
    (written through the dual potentials), clamped at 0.  ``y_self`` and
    ``diam2`` let :class:`SinkhornEvaluator` reuse the fixed reference cloud.
    """
    cfg = cfg or SinkhornConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("point sets differ in dimension")
    sched = _schedule(_diam2(X, Y) if diam2 is None else diam2, cfg)
    f_xy, g_xy, conv, it = _cross_potentials(_sq_dist(X, Y), sched, cfg)
    if not cfg.debiased:
        return SinkhornResult(float(np.mean(f_xy) + np.mean(g_xy)), conv, it)
    f_xx = _self_potential(_sq_dist(X, X), sched, cfg)
    g_yy = _self_potential(_sq_dist(Y, Y), sched, cfg) if y_self is None else y_self
    val = float(np.mean(f_xy - f_xx) + np.mean(g_xy - g_yy))
    return SinkhornResult(max(val, 0.0), conv, it)


class SinkhornEvaluator:
    """Repeated divergences against one fixed reference cloud.

    The annealing range is fixed from the reference (padded by ``pad`` in
    each direction) and the reference self-potential is computed once.
    Generated clouds reaching beyond the padded box use their own range.
    """

    def __init__(self, reference, cfg: SinkhornConfig | None = None, pad: float = 1.0):
        self.cfg = cfg or SinkhornConfig()
        self.reference = np.atleast_2d(np.asarray(reference, dtype=float))
        lo = self.reference.min(axis=0) - pad
        hi = self.reference.max(axis=0) + pad
        self._box = (lo, hi)
        self._diam2 = float(np.sum((hi - lo) ** 2))
        self._self = _self_potential(_sq_dist(self.reference, self.reference),
                                     _schedule(self._diam2, self.cfg), self.cfg)

    def __call__(self, X) -> SinkhornResult:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = self._box
        if np.all(X >= lo) and np.all(X <= hi):
            return sinkhorn_divergence(X, self.reference, self.cfg, y_self=self._self,
                                       diam2=self._diam2)
        return sinkhorn_divergence(X, self.reference, self.cfg)


# ---------------------------------------------------------------- moment audit


def frozen_ensemble(model, theta, z0, n_ensemble: int, horizon: float, delta: float,
                    seed: int = 0, record_every: int = 10):
    """Simulate an ensemble of frozen particle systems at fixed ``theta``.

    ``z0`` has shape ``(N, d_x)``.  Returns ``(times, z_norms)`` with
    ``z_norms[t, r] = |Z_t|`` for ensemble member r.
    """
    theta = np.broadcast_to(np.asarray(theta, float), (n_ensemble, model.d_theta)).copy()
    z0 = np.asarray(z0, float)
    z = np.broadcast_to(z0, (n_ensemble,) + z0.shape).copy()
    state = SystemState(theta, z)
    cfg = MultiscaleConfig(epsilon=1.0, delta=delta, n_particles=z0.shape[0], horizon=horizon,
                           seed=seed)
    stream = NoiseStream(seed, theta.shape, z.shape, block=64)
    times, norms = [0.0], [np.sqrt(np.sum(z**2, axis=(-2, -1)))]
    for step in range(cfg.n_steps):
        state = frozen_step(state, model, cfg, stream.draw(step))
        if (step + 1) % record_every == 0:
            times.append(state.time)
            norms.append(np.sqrt(np.sum(state.particles**2, axis=(-2, -1))))
    return np.array(times), np.array(norms)


@dataclass
class AuditResult:
    passed: bool
    worst_margin: float
    times: np.ndarray
    estimate: np.ndarray
    std_error: np.ndarray
    bound: np.ndarray


def moment_bound_audit(times, z_norms, k: int, r_tilde: float, b_tilde: float,
                       n_particles: int, d_z: int, n_se: float = 4.0) -> AuditResult:
    """Check ``E|Z_t|^k <= exp(-k r t / 2) |z_0|^k + gamma_k`` along an ensemble.

    ``gamma_k = (2 (N b + d_z + k - 2) / r)^(k/2)``.  A time point fails when
    the ensemble mean exceeds the bound by more than ``n_se`` std-errors;
    ``worst_margin`` is the smallest ``bound + n_se * se - estimate``.
    """
    if k < 2 or k % 2:
        raise ValueError("k must be an even integer >= 2")
    times = np.asarray(times, dtype=float)
    z_norms = np.asarray(z_norms, dtype=float)
    powered = z_norms**k
    est = powered.mean(axis=1)
    se = powered.std(axis=1, ddof=1) / math.sqrt(powered.shape[1])
    alpha = k * r_tilde / 2
    gamma = (2 * (n_particles * b_tilde + d_z + k - 2) / r_tilde) ** (k / 2)
    z0k = powered[0].mean()
    bound = np.exp(-alpha * times) * z0k + gamma
    margin = bound + n_se * se - est
    return AuditResult(bool(np.all(margin >= 0)), float(margin.min()), times, est, se, bound)


# ---------------------------------------------------------------- averaging gap


def averaging_gap_scan(eps_list, n_particles: int = 1, data_mean: float = 0.0,
                       simulate: bool = True, delta_ratio: float = 0.02,
                       horizon: float = 200.0, burn_in_time: float = 10.0,
                       replicas: int = 64, stages: int = 3, seed: int = 0,
                       integrator: str = "srock") -> OrderEstimate:
    """Gap between the slow-fast and averaged stationary theta-variances.

    The oracle gap is ``|Sigma_theta_theta(eps) - 1/N|`` from the Lyapunov
    solve.  When ``simulate`` is set, each eps is also run with
    ``delta = delta_ratio * eps`` over ``replicas`` independent chains
    started at the stationary mean; the simulated variance per chain is the
    time-average over post-burn-in steps and the std-error comes from the
    spread across chains.
    """
    eps_list = _check_geometric(eps_list, "eps_list")
    target = averaged_theta_variance(n_particles)
    oracle_gap, sim_gap, sim_se = [], [], []
    model = GaussianMeanModel(1)
    data = Dataset([data_mean])
    for i, eps in enumerate(eps_list):
        orc = LinearOracle(float(eps), n_particles, data_mean)
        oracle_gap.append(abs(stationary_cov(orc)[0, 0] - target))
        if not simulate:
            continue
        delta = delta_ratio * eps
        cfg = MultiscaleConfig(epsilon=float(eps), delta=delta, n_particles=n_particles,
                               stages=stages, horizon=horizon + burn_in_time,
                               seed=seed + i, burn_in=int(round(burn_in_time / delta)))
        state = SystemState(np.full((replicas, 1), data_mean),
                            np.full((replicas, n_particles, 1), data_mean))
        rec = run_trajectory(integrator, state, model, data, cfg)
        mean = rec.theta_moment(1)[:, 0]
        var = rec.theta_moment(2)[:, 0] - mean**2
        gap = var - target
        sim_gap.append(float(gap.mean()))
        sim_se.append(float(gap.std(ddof=1) / math.sqrt(replicas)))
    est = fit_order(eps_list, oracle_gap, oracle_gap=np.array(oracle_gap))
    if simulate:
        est.extra.update(sim_gap=np.array(sim_gap), sim_se=np.array(sim_se))
        est.std_errors = np.array(sim_se)
    return est


# ---------------------------------------------------------------- weak order


OBSERVABLES = {"theta": lambda th: th, "theta2": lambda th: th**2}


def weak_order_scan(integrator: str, delta_list, t_final: float, replicas: int,
                    observable: str = "theta2", epsilon: float = 0.5, n_particles: int = 1,
                    data_mean: float = 0.0, theta0: float = 0.0, x0: float = 0.0,
                    stages: int = 3, seed: int = 0, chunk: int = 100_000) -> OrderEstimate:
    """Weak error of ``E[obs(theta_T)]`` against the transient oracle.

    All step sizes share one Brownian path per replica: the normals at the
    finest step are summed in groups of ``delta / delta_min`` (and rescaled)
    to drive the coarser grids, so the Monte-Carlo error is common to every
    grid point.  ``delta_list`` entries must be integer multiples of the
    smallest.  Replicas are processed in chunks of ``chunk``; chunk ``c``
    draws its normals from noise stream ``c``.
    """
    delta_list = np.asarray(delta_list, dtype=float)
    if delta_list.size < 3:
        raise ValueError("need at least 3 step sizes")
    if t_final < 0:
        raise ValueError("t_final must be nonnegative")
    obs = OBSERVABLES[observable]
    d_min = delta_list.min()
    ratios = np.rint(delta_list / d_min).astype(int)
    if not np.allclose(ratios * d_min, delta_list, rtol=1e-9):
        raise ValueError("step sizes must be integer multiples of the smallest")
    n_fine = int(round(t_final / d_min))
    if not np.all(n_fine % ratios == 0):
        raise ValueError("t_final must be a whole number of steps at every delta")

    orc = LinearOracle(epsilon, n_particles, data_mean)
    M0 = np.concatenate([[theta0], np.full(n_particles, x0)])
    M, S = transient_moments(orc, M0, np.zeros((orc.size, orc.size)), t_final)
    exact = M[0] if observable == "theta" else S[0, 0] + M[0] ** 2

    model = GaussianMeanModel(1)
    data = Dataset([data_mean])
    step_fn = INTEGRATORS[integrator]
    sums = np.zeros(len(delta_list))
    sq = np.zeros(len(delta_list))
    # first chunk's per-replica values, kept for the common-noise std-error
    total = 0
    for c, start in enumerate(range(0, replicas, chunk)):
        R = min(chunk, replicas - start)
        stream = NoiseStream(seed, (R, 1), (R, n_particles, 1), replica=c, block=16)
        states = [SystemState(np.full((R, 1), theta0), np.full((R, n_particles, 1), x0))
                  for _ in delta_list]
        cfgs = [MultiscaleConfig(epsilon=epsilon, delta=float(d), n_particles=n_particles,
                                 stages=stages) for d in delta_list]
        acc = [NoiseDraw(np.zeros((R, 1)), np.zeros((R, n_particles, 1))) for _ in delta_list]
        for n in range(n_fine):
            xi = stream.draw(n)
            for j, k in enumerate(ratios):
                acc[j].theta_noise += xi.theta_noise
                acc[j].z_noise += xi.z_noise
                if (n + 1) % k == 0:
                    scale = 1.0 / math.sqrt(k)
                    noise = NoiseDraw(acc[j].theta_noise * scale, acc[j].z_noise * scale)
                    states[j] = step_fn(states[j], model, data, cfgs[j], noise)
                    acc[j] = NoiseDraw(np.zeros((R, 1)), np.zeros((R, n_particles, 1)))
        for j, st in enumerate(states):
            vals = obs(st.theta[:, 0])
            sums[j] += vals.sum()
            sq[j] += np.sum(vals**2)
        total += R
    means = sums / total
    ses = np.sqrt(np.maximum(sq / total - means**2, 0) / max(total - 1, 1))
    signed = means - exact
    errors = np.abs(signed)
    if t_final == 0:
        return OrderEstimate(delta_list, errors, float("nan"), float("nan"), std_errors=ses,
                             extra={"exact": exact, "estimates": means, "signed": signed})
    return fit_order(delta_list, errors, ses, exact=exact, estimates=means, signed=signed)


# ---------------------------------------------------------------- ergodic bias


def ergodic_bias_scan(delta_list, horizon: float, replicas: int, observable: str = "theta2",
                      epsilon: float = 1.0, n_particles: int = 1, data_mean: float = 0.0,
                      stages: int = 3, burn_in_time: float = 10.0, seed: int = 0,
                      integrator: str = "srock") -> OrderEstimate:
    """Bias of long-run time averages against the oracle stationary expectation.

    ``extra["noise_dominated"]`` is set when the Monte-Carlo std-error
    exceeds half the smallest observed bias, in which case the slope is not
    meaningful.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    delta_list = _check_geometric(delta_list, "delta_list")
    orc = LinearOracle(epsilon, n_particles, data_mean)
    mean0 = stationary_mean(orc)[0]
    var0 = stationary_cov(orc)[0, 0]
    exact = mean0 if observable == "theta" else var0 + mean0**2
    model = GaussianMeanModel(1)
    data = Dataset([data_mean])
    biases, ses, signed = [], [], []
    for i, d in enumerate(delta_list):
        cfg = MultiscaleConfig(epsilon=epsilon, delta=float(d), n_particles=n_particles,
                               stages=stages, horizon=horizon + burn_in_time, seed=seed,
                               burn_in=int(round(burn_in_time / d)))
        state = SystemState(np.full((replicas, 1), mean0),
                            np.full((replicas, n_particles, 1), mean0))
        rec = run_trajectory(integrator, state, model, data, cfg, replica=i)
        k = 1 if observable == "theta" else 2
        per = rec.theta_moment(k)[:, 0]
        b = per.mean() - exact
        signed.append(b)
        biases.append(abs(b))
        ses.append(per.std(ddof=1) / math.sqrt(replicas))
    biases, ses = np.array(biases), np.array(ses)
    noisy = bool(np.max(ses) > 0.5 * np.min(biases))
    if np.all(biases > 0):
        est = fit_order(delta_list, biases, ses)
    else:
        est = OrderEstimate(delta_list, biases, float("nan"), float("nan"), std_errors=ses)
    est.extra.update(noise_dominated=noisy, exact=exact, signed=np.array(signed))
    return est


# ---------------------------------------------------------------- stability


@dataclass
class StabilityResult:
    integrator: str
    stages: int
    boundary: float
    expected: float
    bracket: tuple


def _bounded(integrator, ratio, epsilon, stages, n_steps):
    model = GaussianMeanModel(1)
    data = Dataset([0.0])
    cfg = MultiscaleConfig(epsilon=epsilon, delta=ratio * epsilon, n_particles=1,
                           stages=stages, horizon=n_steps * ratio * epsilon)
    state = SystemState([1.0], [[-1.0]])
    rec = run_trajectory(integrator, state, model, data, cfg, noise_scale=0.0,
                         n_steps=n_steps)
    return not rec.diverged


def stability_scan(integrator: str, stages: int = 3, epsilon: float = 1e-3,
                   lo: float = 0.1, hi: float | None = None, n_steps: int = 10_000,
                   rtol: float = 1e-4) -> StabilityResult:
    """Bisect the largest ``delta / eps`` whose drift-only run stays bounded.

    The Gaussian system with small ``eps`` has one stiff mode of rate about
    ``1/eps``, so the boundary is ``2`` for EM and ``2 m^2`` for S-ROCK.
    """
    expected = 2.0 if integrator == "em" else 2.0 * stages**2
    hi = 4.0 * expected if hi is None else hi
    if not _bounded(integrator, lo, epsilon, stages, n_steps):
        raise RuntimeError(f"{integrator} diverges already at delta/eps={lo}")
    if _bounded(integrator, hi, epsilon, stages, n_steps):
        raise RuntimeError(f"{integrator} still bounded at delta/eps={hi}; raise hi")
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if _bounded(integrator, mid, epsilon, stages, n_steps):
            lo = mid
        else:
            hi = mid
    return StabilityResult(integrator, stages, 0.5 * (lo + hi), expected, (lo, hi))


def amplification_boundary(m: int, p_max: float | None = None, rtol: float = 1e-10) -> float:
    """Largest ``p`` with ``|T_m(1 - p/m^2)| <= 1`` (bisection on the closed form)."""
    lo, hi = 0.0, (4.0 * m * m if p_max is None else p_max)
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if abs(chebyshev_amplification(m, mid)) <= 1.0 + 1e-12:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------- CSV


SCAN_HEADER = ("grid", "statistic", "std_error", "verdict")


def fmt(x) -> str:
    """Locale-free shortest round-trip formatting for CSV cells."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def scan_rows(est: OrderEstimate, verdict: bool | str = ""):
    se = est.std_errors if est.std_errors is not None else [float("nan")] * len(est.grid)
    return [(g, e, s, verdict) for g, e, s in zip(est.grid, est.errors, se)]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
