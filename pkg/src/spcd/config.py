"""Experiment configuration files.

Configs are INI files with a fixed set of sections and keys.  Anything not
listed in :data:`SCHEMA` is an error, as is any value that fails its parser
or the invariants of the objects it feeds.  A ``[manifest]`` section is
accepted and ignored so that a run manifest can be fed back in as a config.

Example::

    [experiment]
    kind = gaussian-validate
    seed = 7

    [dynamics]
    integrator = em
    epsilon = 0.1
    delta = 0.001
    horizon = 2000

    [data]
    values = 1, 3
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

KINDS = (
    "gaussian-validate",
    "stability-scan",
    "order-scan",
    "ergodic-scan",
    "moment-audit",
    "banana-train",
    "averaging-gap",
)

IGNORED_SECTIONS = ("manifest",)


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _u64(s: str) -> int:
    v = int(s.strip(), 0)
    if not 0 <= v < 2**64:
        raise ValueError(f"{v} is not an unsigned 64-bit integer")
    return v


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {s!r}")
    return v


def _int(s: str) -> int:
    return int(s.strip())


def _list(item):
    def parse(s: str):
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return tuple(item(p) for p in parts)

    return parse


def _choice(*options):
    def parse(s: str):
        v = s.strip()
        if v not in options:
            raise ValueError(f"{v!r} not one of {', '.join(options)}")
        return v

    return parse


def _str(s: str) -> str:
    return s.strip()


# section -> key -> (parser, default); a default of None means required
SCHEMA = {
    "experiment": {
        "kind": (_choice(*KINDS), None),
        "seed": (_u64, "0"),
        "plots": (_bool, "true"),
        "out": (_str, ""),
    },
    "dynamics": {
        "integrator": (_choice("em", "srock"), "srock"),
        "epsilon": (_float, "0.1"),
        "delta": (_float, "0.001"),
        "n_particles": (_int, "1"),
        "stages": (_int, "3"),
        "horizon": (_float, "1.0"),
        "burn_in": (_float, "0.0"),
        "thinning": (_int, "1"),
        "batch_size": (_int, "0"),
        "checkpoint_every": (_float, "0.05"),
    },
    "model": {
        "kind": (_choice("gaussian", "mog"), "gaussian"),
        "dim": (_int, "1"),
        "components": (_int, "8"),
        "scale": (_float, "0.5"),
        "init_scale": (_float, "0.5"),
        "theta0": (_float, "0.0"),
        "x0": (_float, "0.0"),
    },
    "data": {
        "source": (_choice("inline", "banana", "gaussian", "csv"), "inline"),
        "values": (_str, "0"),
        "size": (_int, "1000"),
        "holdout": (_int, "1000"),
        "mean": (_float, "0.0"),
        "path": (_str, ""),
    },
    "scan": {
        "integrators": (_list(_choice("em", "srock")), "em, srock"),
        "stages": (_list(_int), "2, 3, 5"),
        "deltas": (_list(_float), "0.004, 0.002, 0.001, 0.0005"),
        "eps": (_list(_float), "0.4, 0.2, 0.1"),
        "t_final": (_float, "1.0"),
        "replicas": (_int, "100000"),
        "observable": (_choice("theta", "theta2"), "theta2"),
        "data_mean": (_float, "0.0"),
        "thetas": (_list(_float), "0, 2, 5"),
        "moments": (_list(_int), "2, 4"),
        "ensemble": (_int, "10000"),
        "delta_ratio": (_float, "0.02"),
        "slope_min": (_float, "0.8"),
        "slope_max": (_float, "1.2"),
        "n_se": (_float, "3.0"),
        "rel_tol": (_float, "0.1"),
    },
    "sinkhorn": {
        "blur": (_float, "0.05"),
        "max_iter": (_int, "100"),
        "tol": (_float, "1e-05"),
        "scaling": (_float, "0.9"),
        "debiased": (_bool, "true"),
    },
}


def _canonical(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_canonical(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved configuration: every schema key has a parsed value."""

    values: dict
    source: str = ""

    def __getitem__(self, section):
        return self.values[section]

    @property
    def kind(self) -> str:
        return self.values["experiment"]["kind"]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals["experiment"]["seed"] = _u64(str(seed))
        return ExperimentConfig(vals, self.source)

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_canonical(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def multiscale(self, **over):
        from .core import MultiscaleConfig

        d = self.values["dynamics"]
        kw = dict(
            epsilon=d["epsilon"], delta=d["delta"], n_particles=d["n_particles"],
            stages=d["stages"], horizon=d["horizon"], seed=self.seed,
            burn_in=int(round(d["burn_in"] / d["delta"])), thinning=d["thinning"],
        )
        kw.update(over)
        return MultiscaleConfig(**kw)

    def sinkhorn(self):
        from .diagnostics import SinkhornConfig

        s = self.values["sinkhorn"]
        return SinkhornConfig(blur=s["blur"], max_iter=s["max_iter"], tol=s["tol"],
                              debiased=s["debiased"], scaling=s["scaling"])


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True,
                                   default_section="__none__")
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section in IGNORED_SECTIONS:
            continue
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parser, default) in keys.items():
            raw = cp.get(section, key, fallback=default) if cp.has_section(section) else default
            if raw is None:
                raise ConfigError(f"{source}: missing required key {key!r} in [{section}]")
            try:
                values[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from exc
    cfg = ExperimentConfig(values, source)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    """Check cross-field invariants by building the objects a run will use."""
    try:
        cfg.multiscale()
        cfg.sinkhorn()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    d, m, data, scan = cfg["dynamics"], cfg["model"], cfg["data"], cfg["scan"]
    _require(d["burn_in"] >= 0, "burn_in must be nonnegative")
    _require(d["batch_size"] >= 0, "batch_size must be >= 0 (0 = full data)")
    _require(0 < d["checkpoint_every"] <= 1, "checkpoint_every must lie in (0, 1]")
    _require(m["dim"] >= 1 and m["components"] >= 1, "dim and components must be >= 1")
    _require(m["scale"] > 0 and m["init_scale"] >= 0, "scale must be positive")
    _require(data["size"] >= 1 and data["holdout"] >= 1, "data sizes must be >= 1")
    _require(scan["replicas"] >= 2 and scan["ensemble"] >= 2, "need at least 2 replicas")
    _require(all(s >= 2 for s in scan["stages"]), "stages must be >= 2")
    _require(all(k >= 2 and k % 2 == 0 for k in scan["moments"]), "moments must be even and >= 2")
    _require(all(x > 0 for x in scan["deltas"] + scan["eps"]), "scan grids must be positive")
    _require(scan["t_final"] >= 0 and scan["n_se"] > 0, "t_final >= 0 and n_se > 0 required")
    _require(scan["slope_min"] < scan["slope_max"], "slope_min must be below slope_max")
    _require(scan["delta_ratio"] > 0 and scan["rel_tol"] > 0, "delta_ratio and rel_tol must be positive")

    kind = cfg.kind
    if kind in ("order-scan", "ergodic-scan", "averaging-gap"):
        grid = scan["eps"] if kind == "averaging-gap" else scan["deltas"]
        _require(len(grid) >= 3, f"{kind} needs at least 3 grid values")
    if kind in ("ergodic-scan", "averaging-gap"):
        grid = scan["eps"] if kind == "averaging-gap" else scan["deltas"]
        r = [b / a for a, b in zip(grid, grid[1:])]
        _require(all(abs(x / r[0] - 1) < 1e-9 for x in r), f"{kind} grid must be geometric")
        _require(d["horizon"] > 0, "horizon must be positive")
    if kind == "gaussian-validate":
        _require(m["kind"] == "gaussian", "gaussian-validate needs model kind gaussian")
        _require(d["horizon"] > 0, "horizon must be positive")
    if kind == "banana-train":
        _require(m["kind"] == "mog", "banana-train needs model kind mog")
    if data["source"] == "csv":
        _require(bool(data["path"]), "data source csv needs a path")
    if data["source"] == "inline":
        try:
            parse_points(data["values"])
        except ValueError as exc:
            raise ConfigError(f"[data] values: {exc}") from exc


def parse_points(text: str):
    """Comma-separated points; coordinates within a point separated by spaces."""
    import numpy as np

    pts = [p.split() for p in text.split(",") if p.strip()]
    if not pts:
        raise ValueError("no data points")
    if len({len(p) for p in pts}) != 1:
        raise ValueError("points have differing dimensions")
    arr = np.array([[float(c) for c in p] for p in pts])
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite data value")
    return arr
