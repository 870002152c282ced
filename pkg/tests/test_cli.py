import json
import subprocess
import sys
import time

import numpy as np
import pytest

from dmdcast import cli, dmd, gridstore, metrics, plotting, resdmd, synth


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    monkeypatch.delenv("RESDMD_SEED", raising=False)


def run(*argv):
    return cli.main([str(a) for a in argv])


def small_rotation(path, T=240, noise=0.0, seasonal=0.0, nlat=3, nlon=4, seed=0):
    assert run("synth", "--kind", "rotation", "--radius", "1.0", "--theta", "0.5", "--nlat", nlat, "--nlon", nlon,
               "--T", T, "--noise", noise, "--seasonal", seasonal, "--start", "1980-01", "--seed", seed,
               "--out", path) == 0


def pipeline(d):
    """Run every subcommand once inside ``d``; return ``{name: bytes}`` for all outputs."""
    small_rotation(d / "raw.grid", T=240, noise=0.01, seasonal=0.3)
    assert run("prepare", "--input", d / "raw.grid", "--clim-start", "1980-01", "--clim-end", "1989-12",
               "--train-range", "1980-01:1994-12", "--test-range", "1995-01:1999-12", "--out-dir", d / "prep") == 0
    assert run("fit-dmd", "--train", d / "prep/train.grid", "--rank", 2, "--out", d / "m.dmd") == 0
    assert run("train", "--dmd", d / "m.dmd", "--train", d / "prep/train.grid", "--val", d / "prep/test.grid",
               "--epochs", 5, "--seed", 3, "--out", d / "m.ckpt") == 0
    assert run("forecast", "--model", d / "m.ckpt", "--obs", d / "prep/test.grid", "--steps", 6,
               "--out", d / "fc.grid") == 0
    assert run("evaluate", "--model", d / "m.dmd", "--obs", d / "prep/test.grid", "--leads", "1,6",
               "--save-predictions", "--out-dir", d / "ev_dmd") == 0
    assert run("evaluate", "--model", d / "m.ckpt", "--obs", d / "prep/test.grid", "--leads", "1,6",
               "--baseline", f"6={d / 'ev_dmd/pred_lead006.grid'}", "--rmse", "--out-dir", d / "ev_res") == 0
    assert run("render", "--input", d / "ev_res/dacc_lead006.skill", "--vmin", -0.2, "--vmax", 0.2,
               "--out", d / "dacc.ppm") == 0
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_every_command_is_byte_deterministic(tmp_path):
    first = pipeline(tmp_path)
    second = pipeline(tmp_path)
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name
    manifests = [n for n in first if n.endswith("manifest.json")]
    assert len(manifests) == 8


def test_manifest_contents(tmp_path):
    small_rotation(tmp_path / "raw.grid")
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    man = json.loads((tmp_path / "m.dmd.manifest.json").read_text())
    assert man["command"] == "fit-dmd"
    assert man["params"]["rank"] == 2
    assert man["outputs"] == ["m.dmd", "m.dmd.svd.tsv", "m.dmd.modes.tsv"]
    import hashlib
    digest = hashlib.sha256((tmp_path / "raw.grid").read_bytes()).hexdigest()
    assert man["inputs"] == {str(tmp_path / "raw.grid"): digest}
    assert man["created"] == "2023-11-14T22:13:20Z"
    assert man["version"]


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RESDMD_SEED", "9")
    parser = cli.build_parser()
    assert parser.parse_args(["synth", "--out", "x"]).seed == 9
    assert parser.parse_args(["synth", "--out", "x", "--seed", "2"]).seed == 2


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "dmdcast.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("synth", "prepare", "fit-dmd", "train", "forecast", "evaluate", "render"):
        assert name in out.stdout


# -- prepare ------------------------------------------------------------------------------------

def test_prepare_constant_input_zero_anomalies(tmp_path):
    values = np.broadcast_to(np.arange(6.0).reshape(2, 3), (48, 2, 3))
    series = gridstore.GridSeries(values=values, mask=np.ones((2, 3), bool), times=gridstore.month_range((1990, 1), 48))
    gridstore.save_grid_series(series, tmp_path / "c.grid")
    assert run("prepare", "--input", tmp_path / "c.grid", "--clim-start", "1990-01", "--clim-end", "1991-12",
               "--out-dir", tmp_path / "out") == 0
    anom = gridstore.load_grid_series(tmp_path / "out/anomalies.grid")
    assert np.all(anom.values == 0.0)


def test_prepare_splits_cover_series(tmp_path):
    small_rotation(tmp_path / "raw.grid", T=120)
    assert run("prepare", "--input", tmp_path / "raw.grid", "--clim-start", "1980-01", "--clim-end", "1989-12",
               "--train-range", "1980-01:1986-12", "--test-range", "1987-01:1989-12", "--out-dir", tmp_path / "p") == 0
    train = gridstore.load_grid_series(tmp_path / "p/train.grid")
    test = gridstore.load_grid_series(tmp_path / "p/test.grid")
    assert train.ntime + test.ntime == 120


def test_prepare_matches_library_climatology(tmp_path):
    # 40-year synthetic record with a 1980-2010 reference window
    small_rotation(tmp_path / "raw.grid", T=480, seasonal=1.0)
    assert run("prepare", "--input", tmp_path / "raw.grid", "--clim-start", "1980-01", "--clim-end", "2010-12",
               "--out-dir", tmp_path / "p") == 0
    raw = gridstore.load_grid_series(tmp_path / "raw.grid")
    clim = gridstore.load_climatology(tmp_path / "p/climatology.clim")
    months = np.array([m for _, m in raw.times])
    years = np.array([y for y, _ in raw.times])
    for m in range(1, 13):
        sel = (months == m) & (years <= 2010)
        expect = raw.values[sel].mean(axis=0).astype(np.float32)
        np.testing.assert_allclose(clim.monthly_means[m - 1], expect, rtol=0, atol=1e-6)


# -- fit-dmd --------------------------------------------------------------------------------------

def test_fit_dmd_recovers_eigenvalues(tmp_path, capsys):
    assert run("synth", "--kind", "linear_diag", "--eigenvalues", "0.9,0.5", "--nlat", 4, "--nlon", 4,
               "--T", 100, "--out", tmp_path / "d.grid") == 0
    assert run("fit-dmd", "--train", tmp_path / "d.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    model = dmd.load_dmd(tmp_path / "m.dmd")
    # float32 storage of the snapshots limits the recovery accuracy here
    np.testing.assert_allclose(np.sort(model.eigenvalues.real), [0.5, 0.9], atol=1e-5)
    out = capsys.readouterr().out
    assert "sigma_1" in out and "captures" in out
    report = (tmp_path / "m.dmd.svd.tsv").read_text().splitlines()
    assert report[0] == "index\tsigma\tenergy_fraction\tcumulative"
    assert len(report) == 17


def test_rank_zero_is_usage_error(tmp_path):
    small_rotation(tmp_path / "raw.grid")
    with pytest.raises(SystemExit) as info:
        run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 0, "--out", tmp_path / "m.dmd")
    assert info.value.code == 2


def test_exit_codes_by_error_family(tmp_path):
    small_rotation(tmp_path / "raw.grid")
    # container problems
    assert run("fit-dmd", "--train", tmp_path / "missing.grid", "--rank", 2, "--out", tmp_path / "m") == 3
    (tmp_path / "junk.grid").write_bytes(b"junk")
    assert run("fit-dmd", "--train", tmp_path / "junk.grid", "--rank", 2, "--out", tmp_path / "m") == 3
    # data problems
    assert run("prepare", "--input", tmp_path / "raw.grid", "--clim-start", "1970-01", "--clim-end", "1980-12",
               "--out-dir", tmp_path / "p") == 4
    # numerical problems: every snapshot is a multiple of one pattern, so the rank is exactly 1
    amp = np.random.default_rng(0).standard_normal(24).astype(np.float32)
    flat = gridstore.GridSeries(values=amp[:, None, None] * np.ones((24, 2, 2)), mask=np.ones((2, 2), bool),
                                times=gridstore.month_range((2000, 1), 24))
    gridstore.save_grid_series(flat, tmp_path / "flat.grid")
    assert run("fit-dmd", "--train", tmp_path / "flat.grid", "--rank", 2, "--out", tmp_path / "m") == 5


def test_render_rejects_bad_range(tmp_path):
    small_rotation(tmp_path / "raw.grid")
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("evaluate", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--leads", 1,
               "--out-dir", tmp_path / "ev") == 0
    assert run("render", "--input", tmp_path / "ev/acc_lead001.skill", "--vmin", 1, "--vmax", -1,
               "--out", tmp_path / "x.ppm") == 2


# -- train ---------------------------------------------------------------------------------------------

def test_train_zero_epochs_equals_init(tmp_path):
    small_rotation(tmp_path / "raw.grid", noise=0.01)
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("train", "--dmd", tmp_path / "m.dmd", "--train", tmp_path / "raw.grid", "--epochs", 0,
               "--seed", 5, "--eps", 0.01, "--out", tmp_path / "c.ckpt") == 0
    ck = resdmd.load_checkpoint(tmp_path / "c.ckpt")
    init = resdmd.init_from_dmd(dmd.load_dmd(tmp_path / "m.dmd"), eps=0.01, seed=5)
    for name in init.param_names():
        np.testing.assert_array_equal(ck.params[name], init.params[name])
    assert (tmp_path / "c.ckpt.history.tsv").read_text().splitlines()[0] == "epoch\ttrain_loss\tval_loss"


def test_train_nonlinear_lowers_loss(tmp_path):
    assert run("synth", "--kind", "nonlinear_cubic", "--theta", 0.45, "--nlat", 4, "--nlon", 4, "--T", 400,
               "--out", tmp_path / "c.grid") == 0
    assert run("fit-dmd", "--train", tmp_path / "c.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("train", "--dmd", tmp_path / "m.dmd", "--train", tmp_path / "c.grid", "--epochs", 20,
               "--figure", tmp_path / "h.png", "--out", tmp_path / "c.ckpt") == 0
    rows = [line.split("\t") for line in (tmp_path / "c.ckpt.history.tsv").read_text().splitlines()[1:]]
    assert len(rows) == 21
    assert float(rows[-1][1]) < float(rows[0][1])
    assert (tmp_path / "h.png").exists()


def test_train_rejects_grid_mismatch(tmp_path):
    small_rotation(tmp_path / "a.grid", nlat=3, nlon=4)
    small_rotation(tmp_path / "b.grid", nlat=2, nlon=6)
    assert run("fit-dmd", "--train", tmp_path / "a.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("train", "--dmd", tmp_path / "m.dmd", "--train", tmp_path / "b.grid", "--out", tmp_path / "c") == 4


# -- forecast / evaluate / render -------------------------------------------------------------------------

def test_forecast_trajectory(tmp_path):
    small_rotation(tmp_path / "raw.grid")
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("forecast", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--init", "1985-06",
               "--steps", 12, "--out", tmp_path / "fc.grid") == 0
    fc = gridstore.load_grid_series(tmp_path / "fc.grid")
    raw = gridstore.load_grid_series(tmp_path / "raw.grid")
    assert fc.times[0] == (1985, 7) and fc.ntime == 12
    i = raw.times.index((1985, 7))
    np.testing.assert_allclose(fc.values, raw.values[i:i + 12], atol=1e-5)
    assert run("forecast", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--init", "2030-01",
               "--out", tmp_path / "bad.grid") == 4


def test_evaluate_on_training_data_gives_unit_acc(tmp_path, capsys):
    small_rotation(tmp_path / "raw.grid")
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("evaluate", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--leads", 1,
               "--figures", "--out-dir", tmp_path / "ev") == 0
    acc = metrics.load_skill_map(tmp_path / "ev/acc_lead001.skill")
    np.testing.assert_allclose(acc.values, 1.0, atol=1e-5)
    assert "area-weighted mean" in capsys.readouterr().out
    summary = (tmp_path / "ev/summary.tsv").read_text().splitlines()
    assert summary[0] == "lead_months\tmetric\tglobal_mean\tn_samples"
    assert (tmp_path / "ev/acc_lead001.png").exists()


def test_evaluate_baseline_self_gives_zero_delta(tmp_path):
    small_rotation(tmp_path / "raw.grid", noise=0.05)
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("evaluate", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--leads", "1,6",
               "--save-predictions", "--out-dir", tmp_path / "a") == 0
    assert run("evaluate", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--leads", "1,6",
               "--baseline", f"1={tmp_path / 'a/pred_lead001.grid'}",
               "--baseline", f"6={tmp_path / 'a/pred_lead006.grid'}", "--out-dir", tmp_path / "b") == 0
    for lead in (1, 6):
        d = metrics.load_skill_map(tmp_path / f"b/dacc_lead{lead:03d}.skill")
        # the saved baseline went through float32 storage; the live forecasts did not
        np.testing.assert_allclose(d.values[d.mask], 0.0, atol=1e-6)


def test_evaluate_matches_library(tmp_path):
    small_rotation(tmp_path / "raw.grid", noise=0.1, seed=4)
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("evaluate", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--leads", "1,6,12",
               "--out-dir", tmp_path / "ev") == 0
    model = dmd.load_dmd(tmp_path / "m.dmd")
    obs = gridstore.load_grid_series(tmp_path / "raw.grid")
    for lead in (1, 6, 12):
        expect = metrics.acc_map(metrics.rolling_forecast_set(model, obs, lead), obs, lead)
        got = metrics.load_skill_map(tmp_path / f"ev/acc_lead{lead:03d}.skill")
        np.testing.assert_array_equal(got.values, expect.values.astype(np.float32))
        assert got.n_samples == obs.ntime - lead


def test_evaluate_per_month_and_cap(tmp_path):
    small_rotation(tmp_path / "raw.grid", noise=0.1)
    assert run("fit-dmd", "--train", tmp_path / "raw.grid", "--rank", 2, "--out", tmp_path / "m.dmd") == 0
    assert run("evaluate", "--model", tmp_path / "m.dmd", "--obs", tmp_path / "raw.grid", "--leads", 3,
               "--per-month", "--cap-modulus", "--out-dir", tmp_path / "ev") == 0
    man = json.loads((tmp_path / "ev/manifest.json").read_text())
    assert man["params"]["per_month"] and man["params"]["cap_modulus"]


def test_render_outputs(tmp_path):
    zero = metrics.SkillMap(values=np.zeros((3, 5)), mask=np.ones((3, 5), bool), metric="delta_acc",
                            lead_months=6, n_samples=120)
    metrics.save_skill_map(zero, tmp_path / "z.skill")
    assert run("render", "--input", tmp_path / "z.skill", "--scale", 2, "--png", tmp_path / "z.png",
               "--out", tmp_path / "z.ppm") == 0
    rgb = plotting.read_ppm(tmp_path / "z.ppm")
    assert rgb.shape == (6, 10, 3) and np.all(rgb == 255)
    assert (tmp_path / "z.png").exists()


# -- end to end -------------------------------------------------------------------------------------------

def test_end_to_end_16x32(tmp_path):
    t0 = time.perf_counter()
    d = tmp_path
    assert run("synth", "--kind", "rotation", "--radius", 1.0, "--theta", 0.4, "--nlat", 16, "--nlon", 32,
               "--T", 480, "--noise", 0.005, "--seasonal", 0.5, "--start", "1980-01", "--out", d / "raw.grid") == 0
    assert run("prepare", "--input", d / "raw.grid", "--clim-start", "1980-01", "--clim-end", "2010-12",
               "--train-range", "1980-01:2009-12", "--test-range", "2010-01:2019-12", "--out-dir", d / "p") == 0
    assert run("fit-dmd", "--train", d / "p/train.grid", "--rank", 2, "--out", d / "m.dmd") == 0
    assert run("train", "--dmd", d / "m.dmd", "--train", d / "p/train.grid", "--val", d / "p/test.grid",
               "--out", d / "m.ckpt") == 0
    assert run("evaluate", "--model", d / "m.ckpt", "--obs", d / "p/test.grid", "--leads", "1,6,12",
               "--figures", "--out-dir", d / "ev") == 0
    assert run("render", "--input", d / "ev/acc_lead006.skill", "--out", d / "acc6.ppm") == 0
    assert time.perf_counter() - t0 < 300
    acc = metrics.load_skill_map(d / "ev/acc_lead006.skill")
    assert acc.n_samples == 114
    assert acc.global_mean() > 0.5
    assert plotting.read_ppm(d / "acc6.ppm").shape == (64, 128, 3)
