import json

import pytest

from gpcbf.cli import EXIT_OK, main
from gpcbf.experiments import default_config, dump_config


@pytest.fixture
def fast_config(tmp_path):
    cfg = default_config("cruise")
    cfg.gp.n_starts = 2
    cfg.sweep.frequencies = [10.0]
    cfg.sweep.duration = 0.3
    path = tmp_path / "fast.yaml"
    dump_config(cfg, path)
    return str(path)


def test_run_writes_trace(tmp_path, fast_config, capsys):
    out = tmp_path / "o"
    assert main(["run", "--config", fast_config, "--duration", "0.5", "--out", str(out)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["min_h"] > 0 and "wall_time" not in summary
    assert (out / "trace.csv").exists() and (out / "config.yaml").exists()


def test_check_verb(tmp_path, capsys):
    assert main(["check", "--plant", "quadrotor", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "check.csv").read_text().startswith("barrier,")


def test_sweep_and_export(tmp_path, fast_config):
    assert main(["sweep", "--config", fast_config, "--trials", "1", "--out", str(tmp_path / "s")]) == EXIT_OK
    assert (tmp_path / "s" / "failure_rates.csv").read_text().count("\n") == 3
    assert main(["run", "--config", fast_config, "--duration", "0.2", "--out", str(tmp_path / "r")]) == EXIT_OK
    trace = str(tmp_path / "r" / "trace.csv")
    assert main(["export", "--config", fast_config, "--trace", trace, "--out", str(tmp_path / "e")]) == EXIT_OK
    assert (tmp_path / "e" / "h_vs_t.csv").exists()


def test_bad_arguments():
    with pytest.raises(SystemExit):
        main(["fly"])
    with pytest.raises(SystemExit):
        main(["run", "--plant", "boat"])
