import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spcd.cli import CONFIG_ERROR, DIVERGED, FAILED, OK, main
from spcd.config import ConfigError, parse_config, parse_points
from spcd.experiments import execute, prepare
from spcd.plots import plot_from_csv

GAUSS = """\
[experiment]
kind = gaussian-validate
seed = 5
plots = false

[dynamics]
integrator = em
epsilon = 0.1
delta = 0.01
horizon = 50
thinning = 2
checkpoint_every = 0.25

[data]
values = 1, 3
"""

BANANA = """\
[experiment]
kind = banana-train
seed = 2
plots = false

[dynamics]
epsilon = 0.1
delta = 0.002
n_particles = 60
horizon = 0.02
checkpoint_every = 0.5

[model]
kind = mog
components = 3
dim = 2

[data]
source = banana
size = 80
holdout = 60
"""


def write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def spcd(*args, env=None, cwd=None):
    return subprocess.run([sys.executable, "-m", "spcd", *map(str, args)],
                          capture_output=True, text=True, env=env, cwd=cwd)


# ---------------------------------------------------------------- config parsing


def test_minimal_config_uses_defaults():
    cfg = parse_config("[experiment]\nkind = stability-scan\n")
    assert cfg.seed == 0
    assert cfg["dynamics"]["integrator"] == "srock"
    assert cfg.sinkhorn().blur == 0.05


@pytest.mark.parametrize("text", [
    "[experiment]\nkind = stability-scan\ncolour = red\n",
    "[experiment]\nkind = stability-scan\n[extras]\na = 1\n",
    "[dynamics]\nepsilon = 0.1\n",
    "[experiment]\nkind = nope\n",
    "[experiment]\nkind = stability-scan\nseed = -1\n",
    "[experiment]\nkind = stability-scan\n[dynamics]\nepsilon = -0.1\n",
    "[experiment]\nkind = stability-scan\n[dynamics]\ndelta = nan\n",
    "[experiment]\nkind = stability-scan\n[dynamics]\nhorizon = 1\nhorizon = 2\n",
    "[experiment]\nkind = ergodic-scan\n[scan]\ndeltas = 0.4, 0.2, 0.15\n",
    "[experiment]\nkind = order-scan\n[scan]\ndeltas = 0.2, 0.1\n",
    "[experiment]\nkind = moment-audit\n[scan]\nmoments = 3\n",
    "[experiment]\nkind = banana-train\n",
    "[experiment]\nkind = gaussian-validate\n[data]\nvalues = 1 2, 3\n",
    "[experiment]\nkind = stability-scan\n[sinkhorn]\nblur = 0\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_manifest_section_is_ignored():
    cfg = parse_config("[experiment]\nkind = stability-scan\n[manifest]\nstatus = ok\n")
    assert cfg.kind == "stability-scan"


def test_to_ini_round_trips():
    cfg = parse_config(GAUSS)
    again = parse_config(cfg.to_ini())
    assert again.values == cfg.values
    assert again.to_ini() == cfg.to_ini()


def test_parse_points():
    np.testing.assert_array_equal(parse_points("1 2, 3 4"), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(parse_points("1, 3"), [[1], [3]])


# ---------------------------------------------------------------- exit codes and outputs


def test_run_writes_metrics_and_manifest(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(write(tmp_path, GAUSS)), "--out", str(out)]) == OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("time,n_samples,theta_mean")
    assert len(lines) == 5
    man = (out / "manifest.ini").read_text()
    assert "[manifest]" in man and "status = ok" in man and "seed = 5" in man


@pytest.mark.parametrize("text", [GAUSS.replace("epsilon = 0.1", "epsilon = -0.1"),
                                  GAUSS + "bogus = 1\n"])
def test_config_error_exits_two_and_writes_nothing(tmp_path, text):
    out = tmp_path / "never"
    assert main(["run", str(write(tmp_path, text)), "--out", str(out)]) == CONFIG_ERROR
    assert not out.exists()


def test_missing_file_and_bad_seed(tmp_path):
    assert main(["run", str(tmp_path / "absent.ini"), "--out", str(tmp_path / "o")]) == CONFIG_ERROR
    cfg = write(tmp_path, GAUSS)
    assert main(["run", str(cfg), "--seed", "-3", "--out", str(tmp_path / "o")]) == CONFIG_ERROR
    assert not (tmp_path / "o").exists()


def test_failed_check_exits_four(tmp_path):
    text = GAUSS + "\n[scan]\nn_se = 1e-9\n"
    out = tmp_path / "f"
    assert main(["run", str(write(tmp_path, text)), "--out", str(out)]) == FAILED
    assert "status = failed" in (out / "manifest.ini").read_text()


def test_divergence_exits_three(tmp_path):
    text = GAUSS.replace("epsilon = 0.1", "epsilon = 0.001").replace("delta = 0.01", "delta = 0.1")
    out = tmp_path / "d"
    assert main(["run", str(write(tmp_path, text)), "--out", str(out)]) == DIVERGED
    assert "status = diverged" in (out / "manifest.ini").read_text()


def test_env_out_and_default_dir(tmp_path, monkeypatch):
    cfg = write(tmp_path, GAUSS, "myrun.ini")
    monkeypatch.setenv("SPCD_OUT", str(tmp_path / "env"))
    assert main(["run", str(cfg)]) == OK
    assert (tmp_path / "env" / "myrun" / "metrics.csv").exists()
    monkeypatch.delenv("SPCD_OUT")
    monkeypatch.chdir(tmp_path)
    assert main(["run", str(cfg)]) == OK
    assert (tmp_path / "runs" / "myrun" / "metrics.csv").exists()


def test_seed_override(tmp_path):
    cfg = write(tmp_path, GAUSS)
    assert main(["run", str(cfg), "--seed", "99", "--out", str(tmp_path / "a")]) == OK
    assert main(["run", str(cfg), "--out", str(tmp_path / "b")]) == OK
    assert "seed = 99" in (tmp_path / "a" / "manifest.ini").read_text()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


# ---------------------------------------------------------------- determinism


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    cfg = write(tmp_path, GAUSS)
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == OK
    assert main(["run", str(tmp_path / "a" / "manifest.ini"), "--out", str(tmp_path / "b")]) == OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


@pytest.mark.parametrize("text", [GAUSS, BANANA], ids=["fast-path", "generic-path"])
def test_thread_count_does_not_change_output(tmp_path, text):
    cfg = write(tmp_path, text)
    outs = []
    for threads in ("1", "4"):
        env = dict(os.environ, OMP_NUM_THREADS=threads, NUMBA_NUM_THREADS=threads,
                   OPENBLAS_NUM_THREADS=threads, MKL_NUM_THREADS=threads)
        out = tmp_path / f"t{threads}"
        proc = spcd("run", cfg, "--out", out, env=env)
        assert proc.returncode in (OK, FAILED), proc.stderr
        outs.append(out)
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()


def test_banana_checkpoints(tmp_path):
    out = tmp_path / "b"
    main(["run", str(write(tmp_path, BANANA)), "--out", str(out)])
    ck = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert ck == [f"{k}_{s:07d}.csv" for k in ("particles", "samples", "theta") for s in (0, 5, 10)]
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "kind,step,time,sinkhorn,converged,initial,ratio,nonincreasing_fraction"
    assert [r.split(",")[0] for r in rows[1:]] == ["checkpoint"] * 3 + ["summary"]
    theta = np.loadtxt(out / "checkpoints" / "theta_0000000.csv", delimiter=",", skiprows=1)
    assert theta.shape == (3, 2)


def test_plots_are_reproducible_from_csv(tmp_path):
    text = GAUSS.replace("plots = false", "plots = true")
    cfg = write(tmp_path, text)
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == OK
    svg = tmp_path / "a" / "theta_var.svg"
    assert svg.exists()
    res = execute(parse_config(text), tmp_path / "x", prepare(parse_config(text)))
    spec = next(s for s in res.plots if s.name == "theta_var")
    again = plot_from_csv(tmp_path / "a" / "metrics.csv", tmp_path / "again.svg", spec)
    assert Path(again).read_bytes() == svg.read_bytes()
    assert main(["run", str(cfg), "--no-plots", "--out", str(tmp_path / "c")]) == OK
    assert not list((tmp_path / "c").glob("*.svg"))


# ---------------------------------------------------------------- model sanity


def test_single_component_mixture_learns_data_mean(tmp_path):
    """K=1 with a fixed unit scale is the Gaussian mean model in each coordinate."""
    text = """\
[experiment]
kind = banana-train
seed = 3
plots = false
[dynamics]
epsilon = 0.1
delta = 0.002
n_particles = 200
horizon = 6.0
checkpoint_every = 1.0
[model]
kind = mog
components = 1
dim = 2
scale = 1.0
init_scale = 0.1
[data]
source = gaussian
mean = 2.0
size = 300
holdout = 100
"""
    cfg = parse_config(text)
    data, _ = prepare(cfg)
    out = tmp_path / "k1"
    execute(cfg, out, (data, _))
    theta = np.loadtxt(out / "checkpoints" / "theta_0003000.csv", delimiter=",", skiprows=1)
    sd = np.sqrt((1 + 2 * 0.1) / 200)
    assert np.all(np.abs(theta - data.observations.mean(axis=0)) < 5 * sd)
