import json
import subprocess
import sys

import pytest

from gpbalance import cli
from gpbalance.config import load_scenario
from gpbalance.sim import Dataset, EpisodeLog

FAST_LEARNING = ["excitation.t_end=3.0", "gp.n_points=80", "gp.hyper_subset=40", "gp.restarts=1", "gp.max_iter=30"]


@pytest.fixture
def short_scenario(tmp_path):
    """Furuta scenario shortened to 1 s with a small disturbance at 0.5 s."""
    cfg = load_scenario("furuta_tracking")
    cfg.sim.t_end = 1.0
    for d in cfg.disturbances:
        d.t, d.jump = 0.5, 0.1 * d.jump
    path = tmp_path / "short.ini"
    path.write_text(cfg.to_ini())
    return str(path)


def sets(items):
    return [arg for item in items for arg in ("--set", item)]


def test_collect_train_run_analyze(tmp_path, short_scenario, capsys):
    out = tmp_path / "out"
    assert cli.main(["collect", short_scenario, "-o", str(out), *sets(FAST_LEARNING)]) == 0
    data = Dataset.from_csv(out / "dataset.csv")
    assert len(data) == 80
    assert cli.main(["train", short_scenario, "-o", str(out), "--data", str(out / "dataset.csv"),
                     *sets(FAST_LEARNING)]) == 0
    assert "channel 1:" in capsys.readouterr().out
    assert cli.main(["run", short_scenario, "-o", str(out), "--gp", str(out / "gp.json")]) == 0
    episode = EpisodeLog.from_csv(out / "episode.csv")
    assert len(episode) == 401 and not episode.diverged
    text = capsys.readouterr().out
    assert "EIC" in text and "n == m" in text
    assert cli.main(["analyze", short_scenario, str(out / "episode.csv"), "-o", str(out / "again"),
                     "--gp", str(out / "gp.json")]) == 0
    for cmd in ("collect", "train", "run"):
        meta = json.loads((out / f"{cmd}.meta.json").read_text())
        assert meta["command"] == cmd and meta["scenario"] == short_scenario
        assert {"version", "python", "numpy", "timestamp", "overrides"} <= meta.keys()
    assert json.loads((out / "again" / "analyze.meta.json").read_text())["episode"] == str(out / "episode.csv")


def test_run_without_gp_and_output_env(tmp_path, short_scenario, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", short_scenario, "--set", "sim.t_end=0.5"]) == 0
    assert (tmp_path / "env" / "episode.csv").is_file()
    assert len(EpisodeLog.from_csv(tmp_path / "env" / "episode.csv")) == 201


def test_sweep_writes_one_episode_per_value(tmp_path, short_scenario):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", short_scenario, "controller.kind", "eic", "peic", "-o", str(out)])
    assert code == 0
    assert (out / "episode_kind=eic.csv").is_file() and (out / "episode_kind=peic.csv").is_file()
    assert len((out / "sweep_stats.csv").read_text().splitlines()) == 3


def test_divergence_exit_code(tmp_path, short_scenario):
    code = cli.main(["run", short_scenario, "-o", str(tmp_path), "--set", "sim.fall_limit=0.2",
                     "--set", "disturbances.pendulum=(0.5, 1, 0.6)"])
    assert code == cli.EXIT_DIVERGED
    meta = json.loads((tmp_path / "run.meta.json").read_text())
    assert meta["diverged"] is True and "balance error" in meta["reason"]


def test_configuration_errors_exit_1(tmp_path, capsys):
    assert cli.main(["run", "no_such_scenario", "-o", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "furuta_tracking", "-o", str(tmp_path), "--set", "controller.kind=lqr"]) == 1
    assert "controller.kind" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "furuta_tracking", "--no-such-flag"])
    assert exc.value.code == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        cli.main(["reproduce", "not-a-target"])
    assert exc.value.code == cli.EXIT_CONFIG


def test_missing_input_is_an_io_error(tmp_path):
    code = cli.main(["analyze", "furuta_tracking", str(tmp_path / "missing.csv"), "-o", str(tmp_path)])
    assert code == cli.EXIT_IO


def test_reproduce_numerics_via_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gpbalance.cli", "reproduce", "numerics", "-o", str(tmp_path)],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("PASS") == 12
    meta = json.loads((tmp_path / "numerics" / "reproduce.meta.json").read_text())
    assert meta["checks_passed"] is True and meta["target"] == "numerics"


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("gpbalance ")
