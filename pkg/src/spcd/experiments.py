"""Experiment kinds behind ``spcd run``.

Each kind is split in two: ``prepare`` turns a validated config into the
objects a run needs (data, model, initial state) and may still raise
:class:`~spcd.config.ConfigError`; ``execute`` does the work and returns a
:class:`RunResult`.  Nothing touches the output directory before
``prepare`` has succeeded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, parse_points
from .core import Dataset, SystemState
from .diagnostics import (
    SinkhornEvaluator,
    amplification_boundary,
    averaging_gap_scan,
    empirical_moments,
    ergodic_bias_scan,
    frozen_ensemble,
    moment_bound_audit,
    stability_scan,
    weak_order_scan,
    write_csv,
)
from .integrators import INTEGRATORS, minibatch_step, run_trajectory
from .models import GaussianMeanModel, MoGModel, banana_sample, probe_dissipativity
from .oracle import LinearOracle, stationary_cov

# spawn-key tags for randomness outside the dynamics
DATA, HOLDOUT, INIT, EVAL = 10, 11, 12, 13


def aux_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(tag,))))


@dataclass
class PlotSpec:
    name: str
    x: str
    y: tuple
    logx: bool = False
    logy: bool = False
    where: tuple | None = None  # (column, value) row filter
    series: str | None = None


@dataclass
class RunResult:
    header: tuple
    rows: list
    passed: bool | None = None
    diverged: bool = False
    plots: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def load_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg["data"]
    src = d["source"]
    if src == "inline":
        return Dataset(parse_points(d["values"]))
    if src == "banana":
        return Dataset(banana_sample(d["size"], aux_rng(cfg.seed, DATA)))
    if src == "gaussian":
        dim = cfg["model"]["dim"]
        return Dataset(d["mean"] + aux_rng(cfg.seed, DATA).standard_normal((d["size"], dim)))
    try:
        arr = np.loadtxt(d["path"], delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load data from {d['path']}: {exc}") from exc
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{d['path']}: empty or non-finite data")
    return Dataset(arr)


def _step_fn(cfg: ExperimentConfig):
    d = cfg["dynamics"]
    step = INTEGRATORS[d["integrator"]]
    if d["batch_size"] > 0:
        return minibatch_step(step, d["batch_size"], cfg.seed)
    return d["integrator"]


# ---------------------------------------------------------------- gaussian-validate


def prepare_gaussian(cfg):
    data = load_data(cfg)
    if data.d_x != 1:
        raise ConfigError("gaussian-validate takes one-dimensional data")
    ms = cfg.multiscale()
    if ms.n_steps - ms.burn_in < 20 * ms.thinning:
        raise ConfigError("too few post-burn-in samples for batch-means errors")
    return data


def run_gaussian(cfg, outdir, data) -> RunResult:
    ms = cfg.multiscale()
    m = cfg["model"]
    model = GaussianMeanModel(1)
    n = ms.n_particles
    state = SystemState([m["theta0"]], np.full((n, 1), m["x0"]))
    rec = run_trajectory(_step_fn(cfg), state, model, data, ms)
    orc = LinearOracle(ms.epsilon, n, float(data.mean()[0]))
    o_mean, o_var = orc.data_mean, stationary_cov(orc)[0, 0]
    n_se = cfg["scan"]["n_se"]

    times = rec.times[1:]
    theta = rec.theta_samples[1:, 0]
    header = ("time", "n_samples", "theta_mean", "theta_mean_se", "theta_var",
              "theta_var_se", "oracle_mean", "oracle_var", "within_band")
    rows, ok = [], None
    every = cfg["dynamics"]["checkpoint_every"]
    n_ck = max(1, int(round(1 / every)))
    for c in range(1, n_ck + 1):
        t_c = ms.horizon * c / n_ck
        k = int(np.searchsorted(times, t_c + 0.5 * ms.delta))
        if k < 20:
            continue
        st = empirical_moments(theta[:k])
        ok = (abs(st["mean"] - o_mean) <= n_se * st["mean_se"]
              and abs(st["var"] - o_var) <= n_se * st["var_se"])
        rows.append((t_c, k, st["mean"], st["mean_se"], st["var"], st["var_se"],
                     o_mean, o_var, ok))
    plots = [PlotSpec("theta_var", "time", ("theta_var", "oracle_var")),
             PlotSpec("theta_mean", "time", ("theta_mean", "oracle_mean"))]
    return RunResult(header, rows, bool(ok) and not rec.diverged, rec.diverged, plots)


# ---------------------------------------------------------------- stability-scan


def run_stability(cfg, outdir, _) -> RunResult:
    scan, eps = cfg["scan"], cfg["dynamics"]["epsilon"]
    tol = scan["rel_tol"]
    header = ("integrator", "stages", "boundary", "expected", "amplification_boundary",
              "rel_error", "within_tol")
    rows = []
    for integ in scan["integrators"]:
        for m in (scan["stages"] if integ == "srock" else (2,)):
            res = stability_scan(integ, stages=m, epsilon=eps)
            amp = amplification_boundary(m) if integ == "srock" else 2.0
            rel = abs(res.boundary - res.expected) / res.expected
            rows.append((integ, m if integ == "srock" else "", res.boundary, res.expected,
                         amp, rel, rel <= tol))
    plots = [PlotSpec("boundary", "stages", ("boundary", "expected"),
                      where=("integrator", "srock"))]
    return RunResult(header, rows, all(r[-1] for r in rows), plots=plots)


# ---------------------------------------------------------------- order-scan


def run_order(cfg, outdir, _) -> RunResult:
    scan, d = cfg["scan"], cfg["dynamics"]
    header = ("integrator", "delta", "estimate", "exact", "error", "std_error", "slope",
              "slope_half_width", "within_window")
    rows, ok = [], True
    for integ in scan["integrators"]:
        est = weak_order_scan(integ, scan["deltas"], scan["t_final"], scan["replicas"],
                              observable=scan["observable"], epsilon=d["epsilon"],
                              n_particles=d["n_particles"], data_mean=scan["data_mean"],
                              theta0=cfg["model"]["theta0"], x0=cfg["model"]["x0"],
                              stages=d["stages"], seed=cfg.seed)
        inside = est.within(scan["slope_min"], scan["slope_max"])
        ok &= inside
        for g, e, s, v in zip(est.grid, est.errors, est.std_errors, est.extra["estimates"]):
            rows.append((integ, g, v, est.extra["exact"], e, s, est.slope, est.half_width,
                         inside))
    plots = [PlotSpec("weak_error", "delta", ("error",), True, True, series="integrator")]
    return RunResult(header, rows, bool(ok), plots=plots)


# ---------------------------------------------------------------- ergodic-scan


def run_ergodic(cfg, outdir, _) -> RunResult:
    scan, d = cfg["scan"], cfg["dynamics"]
    est = ergodic_bias_scan(scan["deltas"], d["horizon"], scan["replicas"],
                            observable=scan["observable"], epsilon=d["epsilon"],
                            n_particles=d["n_particles"], data_mean=scan["data_mean"],
                            stages=d["stages"], burn_in_time=d["burn_in"], seed=cfg.seed,
                            integrator=d["integrator"])
    noisy = est.extra["noise_dominated"]
    if scan["observable"] == "theta":
        ok = noisy  # unbiased in the mean: only noise should remain
    else:
        ok = (not noisy) and est.within(scan["slope_min"], scan["slope_max"])
    header = ("delta", "estimate", "exact", "bias", "std_error", "slope", "noise_dominated")
    exact = est.extra["exact"]
    rows = [(g, exact + s, exact, b, se, est.slope, noisy)
            for g, s, b, se in zip(est.grid, est.extra["signed"], est.errors, est.std_errors)]
    plots = [PlotSpec("ergodic_bias", "delta", ("bias",), True, True)]
    return RunResult(header, rows, bool(ok), plots=plots)


# ---------------------------------------------------------------- averaging-gap


def run_gap(cfg, outdir, _) -> RunResult:
    scan, d = cfg["scan"], cfg["dynamics"]
    est = averaging_gap_scan(scan["eps"], n_particles=d["n_particles"],
                             data_mean=scan["data_mean"], delta_ratio=scan["delta_ratio"],
                             horizon=d["horizon"], burn_in_time=d["burn_in"],
                             replicas=scan["replicas"], stages=d["stages"], seed=cfg.seed,
                             integrator=d["integrator"])
    sim, se = est.extra["sim_gap"], est.extra["sim_se"]
    z = (sim - est.errors) / se
    slope_ok = abs(est.slope - 1.0) <= 1e-6
    header = ("eps", "oracle_gap", "sim_gap", "sim_se", "z_score", "slope", "within_band")
    rows = [(g, o, s, e, zz, est.slope, abs(zz) <= scan["n_se"])
            for g, o, s, e, zz in zip(est.grid, est.errors, sim, se, z)]
    ok = slope_ok and all(r[-1] for r in rows)
    plots = [PlotSpec("averaging_gap", "eps", ("oracle_gap", "sim_gap"), True, True)]
    return RunResult(header, rows, bool(ok), plots=plots)


# ---------------------------------------------------------------- moment-audit


def run_audit(cfg, outdir, _) -> RunResult:
    scan, d = cfg["scan"], cfg["dynamics"]
    dim, n = cfg["model"]["dim"], d["n_particles"]
    model = GaussianMeanModel(dim)
    reach = max(abs(t) for t in scan["thetas"]) + 1.0
    probe = probe_dissipativity(model, np.linspace(-reach, reach, 2 * int(math.ceil(reach)) + 1),
                                np.linspace(-4 * reach - 10, 4 * reach + 10, 801))
    if not probe.ok:
        raise RuntimeError("dissipativity probe found no valid constant")
    n_steps = int(round(d["horizon"] / d["delta"]))
    every = max(1, n_steps // 200)
    header = ("theta", "k", "time", "estimate", "std_error", "bound", "margin", "r_tilde",
              "b_tilde", "pass")
    rows, ok = [], True
    for i, th in enumerate(scan["thetas"]):
        theta = np.full(dim, th)
        b = float(probe.b_at(theta))
        times, norms = frozen_ensemble(model, theta, np.zeros((n, dim)), scan["ensemble"],
                                       d["horizon"], d["delta"], seed=cfg.seed + i,
                                       record_every=every)
        for k in scan["moments"]:
            res = moment_bound_audit(times, norms, k, probe.r_tilde, b, n, n * dim)
            ok &= res.passed
            margin = res.bound + 4 * res.std_error - res.estimate
            for j in range(len(times)):
                rows.append((th, k, times[j], res.estimate[j], res.std_error[j], res.bound[j],
                             margin[j], probe.r_tilde, b, bool(margin[j] >= 0)))
    plots = [PlotSpec(f"audit_k{k}", "time", ("estimate", "bound"), logy=True, where=("k", k),
                      series="theta") for k in scan["moments"]]
    return RunResult(header, rows, bool(ok), plots=plots,
                     summary={"r_tilde": probe.r_tilde})


# ---------------------------------------------------------------- banana-train


BANANA_HEADER = ("kind", "step", "time", "sinkhorn", "converged", "initial", "ratio",
                 "nonincreasing_fraction")


def prepare_banana(cfg):
    data = load_data(cfg)
    d = cfg["data"]
    if d["source"] == "banana":
        held = banana_sample(d["holdout"], aux_rng(cfg.seed, HOLDOUT))
    else:
        # hold out the tail of the supplied points
        if data.M <= d["holdout"]:
            raise ConfigError("holdout must be smaller than the data set")
        obs = data.observations
        held, data = obs[-d["holdout"]:], Dataset(obs[:-d["holdout"]])
    return data, held


def run_banana(cfg, outdir, prepared) -> RunResult:
    data, held = prepared
    ms = cfg.multiscale(burn_in=0, thinning=1)
    m = cfg["model"]
    n, dim = ms.n_particles, data.d_x
    model = MoGModel.equal(m["components"], m["scale"], dim=dim)
    rng = aux_rng(cfg.seed, INIT)
    # data-agnostic start, like a freshly initialised network
    means = m["init_scale"] * rng.standard_normal((m["components"], dim))
    theta0 = model.initial_theta(means)
    state = SystemState(theta0, model.sample(theta0, n, rng))

    ev_rng = aux_rng(cfg.seed, EVAL)
    uniforms, normals = ev_rng.random(n), ev_rng.standard_normal((n, dim))
    evaluate = SinkhornEvaluator(held, cfg.sinkhorn())

    n_steps = ms.n_steps
    n_ck = max(1, int(round(1 / cfg["dynamics"]["checkpoint_every"])))
    ck_steps = sorted({int(round(n_steps * c / n_ck)) for c in range(n_ck + 1)})
    ck_dir = Path(outdir) / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    rows = []

    def checkpoint(step, st):
        if step not in ck_steps:
            return
        gen = model.sample_from(st.theta, uniforms, normals)
        res = evaluate(gen)
        tag = f"{step:07d}"
        write_csv(ck_dir / f"theta_{tag}.csv", tuple(f"x{i}" for i in range(dim)),
                  st.theta[: m["components"] * dim].reshape(m["components"], dim))
        write_csv(ck_dir / f"samples_{tag}.csv", tuple(f"x{i}" for i in range(dim)), gen)
        write_csv(ck_dir / f"particles_{tag}.csv", tuple(f"x{i}" for i in range(dim)),
                  st.particles)
        rows.append(("checkpoint", step, round(step * ms.delta, 12), res.value, res.converged,
                     "", "", ""))
        # keep the trail on disk as we go
        write_csv(Path(outdir) / "metrics.csv", BANANA_HEADER, rows)

    rec = run_trajectory(_step_fn(cfg), state, model, data, ms, observers=[checkpoint])
    vals = np.array([r[3] for r in rows])
    if rec.diverged or len(vals) < 2:
        return RunResult(BANANA_HEADER, rows, False, rec.diverged)
    ratio = vals[-1] / vals[0] if vals[0] > 0 else math.inf
    nonincr = float(np.mean(np.diff(vals) <= 0))
    rows.append(("summary", rows[-1][1], rows[-1][2], vals[-1],
                 all(r[4] for r in rows), vals[0], ratio, nonincr))
    ok = bool(ratio < 0.5 and nonincr >= 0.8)
    plots = [PlotSpec("sinkhorn", "step", ("sinkhorn",), logy=True,
                      where=("kind", "checkpoint"))]
    return RunResult(BANANA_HEADER, rows, ok, plots=plots,
                     summary={"initial": vals[0], "final": vals[-1], "ratio": ratio,
                              "nonincreasing_fraction": nonincr})


EXPERIMENTS = {
    "gaussian-validate": (prepare_gaussian, run_gaussian),
    "stability-scan": (None, run_stability),
    "order-scan": (None, run_order),
    "ergodic-scan": (None, run_ergodic),
    "averaging-gap": (None, run_gap),
    "moment-audit": (None, run_audit),
    "banana-train": (prepare_banana, run_banana),
}


def prepare(cfg: ExperimentConfig):
    prep, _ = EXPERIMENTS[cfg.kind]
    return prep(cfg) if prep else None


def execute(cfg: ExperimentConfig, outdir, prepared) -> RunResult:
    _, run = EXPERIMENTS[cfg.kind]
    return run(cfg, outdir, prepared)


__all__ = ["EXPERIMENTS", "PlotSpec", "RunResult", "aux_rng", "execute", "load_data",
           "prepare"]
