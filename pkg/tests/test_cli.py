import json

import pytest

from test_harness import small_config
from whirl import cli
from whirl.demo import load_demo


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = small_config(tmp)
    out = tmp / "out"
    assert cli.main(["run", "--config", str(cfg), "--seed", "2", "--out", str(out), "--quiet"]) == 0
    return cfg, out


def test_run_writes_outputs(run_dir):
    _, out = run_dir
    for name in ("manifest.json", "curve_seed2.csv", "samples_seed2.csv"):
        assert (out / name).is_file()
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [2]


def test_resume_reproduces(run_dir, tmp_path):
    cfg, out = run_dir
    before = (out / "curve_seed2.csv").read_bytes()
    assert cli.main(["run", "--config", str(cfg), "--seed", "2", "--out", str(out), "--resume", "--quiet"]) == 0
    assert (out / "curve_seed2.csv").read_bytes() == before


def test_compare(run_dir, tmp_path, capsys):
    _, out = run_dir
    assert cli.main(["compare", str(out / "manifest.json"), str(out), "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert "task: drawer" in printed and "whirl" in printed
    assert (tmp_path / "comparison.csv").read_text().count("\n") == 2
    assert json.loads((tmp_path / "comparison.json").read_text())[0]["n_runs"] == 2


def test_demo_gen(tmp_path):
    assert cli.main(["demo-gen", "--task", "door", "--scene", "door_a", "--seed", "3", "--out", str(tmp_path)]) == 0
    path = tmp_path / "door_a_seed3.demo"
    assert path.is_file() and (tmp_path / "door_a_seed3.demo.env").is_file()
    demo = load_demo(path)
    assert demo.T >= 10 and demo.env_truth is not None


@pytest.mark.parametrize("argv", [
    ["run", "--config", "no_such_task.cfg"],
    ["demo-gen", "--task", "drawer", "--scene", "nowhere"],
])
def test_configuration_errors_exit_2(argv, capsys, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2
    assert "whirl: error" in capsys.readouterr().err


def test_bad_config_value_exits_2(tmp_path, capsys):
    cfg = small_config(tmp_path, seeds=[])
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err


def test_compare_missing_manifest_exits_2(tmp_path):
    assert cli.main(["compare", str(tmp_path / "missing.json")]) == 2


def test_unwritable_output_exits_1(run_dir, tmp_path, capsys):
    cfg, _ = run_dir
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["run", "--config", str(cfg), "--out", str(blocker / "x"), "--quiet"]) == 1
    assert "I/O error" in capsys.readouterr().err


def test_missing_subcommand():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
