import csv
import json

import numpy as np
import pytest

from scalable_rto import cli
from scalable_rto.cli import ConfigError, ExperimentConfig, build_problem, density_grid, main
from scalable_rto.rto import build_svd_basis, find_reference


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    rc = main([*args, "--out", str(out)])
    return rc, out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_defaults_validate():
    assert ExperimentConfig().validate() is not None


@pytest.mark.parametrize(
    "changes",
    [
        {"model": "nope"},
        {"sampler": "gibbs"},
        {"workers": 0},
        {"seed": -1},
        {"sigma": 0.0},
        {"tau": -1.0},
        {"beta": 1.5},
        {"rho": 1.0},
        {"gamma": 0.0},
        {"dims": [81, 41]},
        {"thresholds": [0.1, 1.0]},
        {"ftol": 0.0},
        {"toy_y": [1.0]},
    ],
)
def test_invalid_config_rejected(changes):
    with pytest.raises(ConfigError):
        ExperimentConfig(**changes).validate()


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"chain_length": 5})


def test_config_round_trips_through_dict():
    cfg = ExperimentConfig(model="toy2d", steps=17, thresholds=[1.0, 0.0])
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_bad_model_flag_exits_with_config_error(tmp_path, capsys):
    rc, _ = run(tmp_path, "sample", "--model", "bogus")
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_unreadable_config_file_exits_with_config_error(tmp_path):
    bad = tmp_path / "cfg.json"
    bad.write_text("{not json")
    rc, _ = run(tmp_path, "sample", "--config", str(bad))
    assert rc == 1


def test_unknown_subcommand_exits_with_config_error():
    assert main(["resample"]) == 1


def test_runtime_failure_exits_with_two(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(cli, "run_sampler", boom)
    rc, _ = run(tmp_path, "sample", "--model", "linear")
    assert rc == 2


def test_config_file_and_flag_override(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"model": "linear", "steps": 50, "seed": 3}))
    rc, out = run(tmp_path, "sample", "--config", str(cfg_file), "--seed", "8")
    assert rc == 0
    echo = json.loads((out / "config-echo.json").read_text())
    assert echo["config"]["seed"] == 8 and echo["config"]["steps"] == 50
    assert echo["command"] == "sample" and echo["version"]


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def test_linear_sample_writes_outputs_with_full_acceptance(tmp_path):
    rc, out = run(tmp_path, "sample", "--model", "linear", "--steps", "500")
    assert rc == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["acceptance_rate"] == 1.0
    header, rows = read_csv(out / "chain.csv")
    assert header[:3] == ["step", "accepted", "log_weight"] and len(header) == 3 + 20
    assert len(rows) == 500 and all(len(r) == len(header) for r in rows)


def test_sample_is_reproducible_across_runs_and_worker_counts(tmp_path):
    args = ["sample", "--model", "toy2d", "--steps", "60", "--seed", "4"]
    _, a = run(tmp_path, *args, "--workers", "1", name="a")
    _, b = run(tmp_path, *args, "--workers", "1", name="b")
    _, c = run(tmp_path, *args, "--workers", "3", name="c")
    ref = (a / "chain.csv").read_bytes()
    assert ref == (b / "chain.csv").read_bytes() == (c / "chain.csv").read_bytes()


@pytest.mark.parametrize("sampler", ["rto-standard", "importance", "pcn", "implicit", "rml"])
def test_every_sampler_runs_on_toy(tmp_path, sampler):
    rc, out = run(tmp_path, "sample", "--model", "toy2d", "--sampler", sampler, "--steps", "40", "--beta", "0.5")
    assert rc == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["sampler"] == sampler
    assert 0.0 <= stats["acceptance_rate"] <= 1.0


def test_elliptic_sample_reports_kappa_band(tmp_path):
    rc, out = run(tmp_path, "sample", "--model", "elliptic", "--n", "41", "--steps", "30")
    assert rc == 0
    stats = json.loads((out / "stats.json").read_text())
    band = stats["kappa_band_90"]
    assert len(band["lower"]) == 41
    assert all(lo <= hi for lo, hi in zip(band["lower"], band["upper"]))


def test_pcn_run_records_tuning_and_flag(tmp_path):
    cfg = ExperimentConfig(model="toy2d", pcn_steps=400, pcn_pilot=200, pcn_betas=[0.9, 0.3])
    wp, _ = build_problem(cfg)
    res = cli.run_pcn(wp, cfg)
    assert res.extra["beta"] in (0.9, 0.3)
    assert set(res.extra["tuning"]) == {"0.9", "0.3"}
    assert len(res.chain) == 200 and isinstance(res.extra["converged"], bool)


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------


def test_dim_study_table(tmp_path):
    rc, out = run(tmp_path, "dim-study", "--dims", "41,81", "--steps", "30")
    assert rc == 0
    header, rows = read_csv(out / "cpu_vs_dim.csv")
    assert header == cli.DIM_HEADER
    assert [int(r[0]) for r in rows] == [41, 81]
    assert all(len(r) == len(header) for r in rows)


def test_noise_study_table(tmp_path):
    rc, out = run(tmp_path, "noise-study", "--sigmas", "1,0.01", "--steps", "30")
    assert rc == 0
    header, rows = read_csv(out / "cpu_vs_obs.csv")
    assert header == cli.NOISE_HEADER and len(rows) == 2


def test_compare_pcn_table(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"pcn_steps": 200, "pcn_pilot": 100, "pcn_betas": [0.2]}))
    rc, out = run(tmp_path, "compare-pcn", "--config", str(cfg), "--sigmas", "1", "--steps", "30")
    assert rc == 0
    header, rows = read_csv(out / "rto_vs_pcn.csv")
    assert header == cli.PCN_HEADER
    assert [r[1] for r in rows] == ["rto", "pcn"]


def test_truncation_study_grid(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"grid_points": 41}))
    rc, out = run(tmp_path, "truncation-study", "--config", str(cfg), "--model", "toy2d", "--thresholds", "100,0", "--steps", "40")
    assert rc == 0
    header, rows = read_csv(out / "truncation.csv")
    assert header == cli.TRUNC_HEADER
    assert [float(r[0]) for r in rows] == [-1.0, 100.0, 0.0]
    assert int(rows[1][1]) == 0
    gh, grid = read_csv(out / "density_grid.csv")
    assert {"v1", "v2", "prior", "target", "q_standard", "q_tau_100", "q_tau_0"} <= set(gh)
    G = np.array(grid, dtype=float)
    np.testing.assert_allclose(G[:, gh.index("q_tau_100")], G[:, gh.index("prior")], rtol=0, atol=1e-12)


def test_density_grid_target_is_normalised():
    wp, _ = build_problem(ExperimentConfig(model="toy2d"))
    basis = build_svd_basis(wp, find_reference(wp))
    V, prior, target, prop, cell = density_grid(wp, basis, 6.0, 81)
    assert target.sum() * cell == pytest.approx(1.0)
    assert prior.sum() * cell == pytest.approx(1.0, abs=1e-6)
    assert prop.sum() * cell == pytest.approx(1.0, abs=1e-3)


def test_csv_writer_rejects_ragged_rows(tmp_path):
    with pytest.raises(ValueError):
        cli.write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 2], [3]])


def test_truncation_table_marks_stuck_chains(tmp_path, monkeypatch):
    real = cli.run_rto

    def stuck(wp, cfg, sampler="rto-scalable", tau=None, steps=None):
        res = real(wp, cfg, sampler, tau, steps)
        if tau == 100.0:
            res.stats.degenerate = True
        return res

    monkeypatch.setattr(cli, "run_rto", stuck)
    cfg = ExperimentConfig(model="toy2d", thresholds=[100.0, 0.0], steps=30, grid_points=21)
    header, rows, _ = cli.truncation_study(cfg)
    col = header.index("degenerate")
    assert [r[col] for r in rows] == [0, 1, 0]
