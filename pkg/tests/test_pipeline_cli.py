import json

import pytest
import yaml
from click.testing import CliRunner

import wscbias.pipeline as pl
from wscbias.cli import main
from wscbias.errors import ConfigError

SMALL = ["scenario.n_schools=500", "scenario.n_trial_controls=8", "scenario.n_interventions=3",
         "scenario.rng_seed=11", "nullsim.replicates=3", "meta.ci_draws=100", "meta.ci_grid_step=0.01"]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = pl.load_config(None, SMALL)
    report = pl.run_pipeline(cfg, out)
    return out, report


def test_defaults_and_bundled_configs():
    cfg = pl.load_config()
    assert cfg.nullsim.replicates == 500 and cfg.nullsim.modes == ("naive", "match")
    for name in ("null_scenario", "national_shape", "recovery"):
        c = pl.load_config(name)
        assert c.scenario.n_interventions == 14


def test_overrides_reach_their_sections():
    cfg = pl.load_config(None, ["n_schools=700", "replicates=9", "analysis.caliper=0.1",
                                "strict_matching=true", "meta.ci_draws=50"])
    assert cfg.scenario.n_schools == 700
    assert cfg.nullsim.replicates == 9
    assert cfg.analysis.caliper == 0.1 and cfg.analysis.strict_matching is True
    assert cfg.meta.ci_draws == 50


@pytest.mark.parametrize("override", ["nullsim.bogus=1", "other.x=1", "nullsim.replicates=-1",
                                      "nullsim.modes=[foo]", "analysis.caliper=0", "noequals",
                                      "analysis.strict_matching=maybe"])
def test_bad_config_rejected(override):
    with pytest.raises(ConfigError):
        pl.load_config(None, [override])


def test_bad_config_files(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        pl.load_config(p)
    p.write_text("schema_version: 99\n")
    with pytest.raises(ConfigError):
        pl.load_config(p)
    with pytest.raises(ConfigError):
        pl.load_config(tmp_path / "missing.yaml")


def test_config_dump_round_trip(tmp_path):
    cfg = pl.load_config(None, SMALL)
    cfg.dump(tmp_path / "c.yaml")
    assert pl.load_config(tmp_path / "c.yaml") == cfg
    assert "threads" not in yaml.safe_load((tmp_path / "c.yaml").read_text())["nullsim"]


def test_derived_seeds_differ_by_key():
    assert pl.derived_seed(1, 10, 0) != pl.derived_seed(1, 10, 1)
    assert pl.derived_seed(1, 10, 0) == pl.derived_seed(1, 10, 0)


def test_pipeline_report_structure(small_run):
    out, report = small_run
    assert report["status"] == "ok" and report["error"] is None
    assert report["stages"] == list(pl.STAGES)
    for f in report["files"]:
        assert (out / f).is_file()
    cells = {(c["intervention"], c["outcome"]) for c in report["cells"]}
    assert len(cells) == 9
    for c in report["cells"]:
        assert c["naive"] is not None
        if c["match"] is None:
            assert f"{c['intervention']}:{c['outcome']}:match" in report["failures"]
    assert set(report["null"]) == {"naive", "match"}
    assert set(report["meta"]) == {"naive", "match"}
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk == report
    assert "timings" not in on_disk and json.loads((out / "timings.json").read_text())


def test_pipeline_is_byte_reproducible(small_run, tmp_path):
    out, _ = small_run
    pl.run_pipeline(pl.load_config(None, SMALL), tmp_path, threads=2)
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
    for name in ("estimates.csv", "null_match_draws.csv", "meta_naive.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_stage_failure_keeps_partial_outputs(tmp_path, monkeypatch):
    def boom(ws):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pl, "stage_estimate", boom)
    report = pl.run_pipeline(pl.load_config(None, SMALL), tmp_path)
    assert report["status"] == "failed"
    assert report["error"] == {"stage": "estimate", "type": "RuntimeError", "message": "disk on fire"}
    assert report["stages"] == ["generate", "prepare", "match"]
    assert (tmp_path / "matching.json").exists() and not (tmp_path / "estimates.csv").exists()


def test_cli_stages_match_one_shot_pipeline(small_run, tmp_path):
    out, _ = small_run
    runner = CliRunner()
    base = ["--out", str(tmp_path)] + [a for s in SMALL for a in ("--set", s)]
    r = runner.invoke(main, base + ["generate"])
    assert r.exit_code == 0, r.output
    for stage in ("prepare", "match", "estimate", "nullsim", "meta"):
        r = runner.invoke(main, ["--out", str(tmp_path), stage])
        assert r.exit_code == 0, r.output
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_cli_pipeline_command(tmp_path):
    r = CliRunner().invoke(main, ["--out", str(tmp_path), "--seed", "5", "--replicates", "0",
                                  "--set", "n_schools=400", "--set", "n_interventions=2",
                                  "--set", "n_trial_controls=6", "pipeline"])
    assert r.exit_code == 0, r.output
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["scenario"]["scenario"]["rng_seed"] == 5
    assert "null" not in rep and "nullsim" not in rep["stages"]


def test_cli_stage_without_config_is_usage_error(tmp_path):
    r = CliRunner().invoke(main, ["--out", str(tmp_path), "match"])
    assert r.exit_code == 2


def test_cli_changed_scenario_is_usage_error(small_run, tmp_path):
    runner = CliRunner()
    base = ["--out", str(tmp_path)] + [a for s in SMALL for a in ("--set", s)]
    assert runner.invoke(main, base + ["generate"]).exit_code == 0
    r = runner.invoke(main, ["--out", str(tmp_path), "--seed", "12", "prepare"])
    assert r.exit_code == 2


def test_cli_stage_failure_writes_error_record(tmp_path):
    runner = CliRunner()
    base = ["--out", str(tmp_path)] + [a for s in SMALL for a in ("--set", s)]
    assert runner.invoke(main, base + ["generate"]).exit_code == 0
    (tmp_path / "students.csv").unlink()
    r = runner.invoke(main, ["--out", str(tmp_path), "prepare"])
    assert r.exit_code == 1
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["status"] == "failed" and rep["error"]["stage"] == "prepare"
    assert (tmp_path / "schools.csv").exists()
