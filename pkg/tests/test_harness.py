import json
from dataclasses import asdict

import numpy as np
import pytest
import yaml

from whirl import harness
from whirl.config import builtin_config_path
from whirl.sim import ConfigurationError


def small_config(tmp_path, task="drawer", **overrides):
    raw = yaml.safe_load(builtin_config_path(task).read_text())
    raw.pop("defaults", None)
    raw["loop"].update(M=4, n_elite=2, iterations=2, n_eval=3, epochs=10)
    raw["seeds"] = [0]
    raw.update(overrides)
    path = tmp_path / f"{task}_small.cfg"
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    exp = harness.load_experiment(small_config(tmp), seeds=[0, 1])
    return exp, harness.run_experiment(exp, tmp / "out"), tmp / "out"


@pytest.mark.parametrize("task", ["drawer", "door", "dishwasher", "shelf_pick_place"])
def test_builtin_configs_load(task):
    exp = harness.load_experiment(f"{task}.cfg")
    assert exp.task == task and exp.variant == "whirl" and len(exp.seeds) == 5
    assert exp.loop == harness.LoopConfig(**{**asdict(exp.loop)})
    assert len(exp.train_demos) >= 3 and exp.test_demos


def test_bc_forces_one_iteration():
    exp = harness.load_experiment("drawer", variant="bc")
    loop = exp.effective_loop()
    assert loop.iterations == 1 and loop.policy == "mlp" and loop.p_explore == 0.0


def test_variant_isolation():
    base = asdict(harness.apply_variant(harness.LoopConfig(), "whirl"))

    def diff(variant):
        other = asdict(harness.apply_variant(harness.LoopConfig(), variant))
        return {k for k in base if base[k] != other[k]}

    assert diff("no_agent_agnostic") == {"agent_agnostic"}
    assert diff("no_exploration") == {"p_explore", "fit_exploration"}


def test_shelf_protocol(experiments):
    exp = experiments["shelf_pick_place"]
    assert len(exp.train_demos) == 4 and len(exp.test_demos) == 2
    train_obstacles = {exp.scenes[n][0].obstacles for n in exp.train_demos}
    test_obstacles = {exp.scenes[n][0].obstacles for n in exp.test_demos}
    assert not train_obstacles & test_obstacles
    train_objects = {exp.scenes[n][0].free_objects for n in exp.train_demos}
    assert len(train_objects) == 4


@pytest.mark.parametrize("change,match", [
    ({"bogus": 1}, "unknown top-level"),
    ({"seeds": []}, "at least one seed"),
    ({"variant": "fancy"}, "unknown variant"),
    ({"test_demos": ["drawer_a"]}, "both training"),
    ({"loop": {"M": 3, "n_elite": 5}}, "n_elite"),
])
def test_invalid_configs(tmp_path, change, match):
    with pytest.raises(ConfigurationError, match=match):
        harness.load_experiment(small_config(tmp_path, **change))


def test_unknown_scene_key(tmp_path):
    raw = yaml.safe_load(small_config(tmp_path).read_text())
    raw["scenes"]["drawer_a"]["colour"] = "red"
    path = tmp_path / "bad.cfg"
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(ConfigurationError):
        harness.load_experiment(path)


def test_manifest_shape(small_run):
    exp, manifest, out = small_run
    assert [r["seed"] for r in manifest["runs"]] == [0, 1]
    for run in manifest["runs"]:
        assert all(len(v) == exp.loop.iterations + 1 for v in run["curve"].values())
        assert len(run["iterations"]) == exp.loop.iterations + 1
        assert run["seconds"] > 0
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk["config_text"] == exp.source and on_disk["loop"]["M"] == 4


def test_curve_file_schema(small_run):
    _, manifest, out = small_run
    lines = (out / "curve_seed0.csv").read_text().splitlines()
    assert lines[0] == "iteration,train_success,test_success,mean_cost,mean_change_score"
    assert len(lines) == 1 + 3
    rows = harness.read_curve_csv(out / "curve_seed0.csv")
    written = [r["train_success"] for r in rows]
    assert written == pytest.approx(manifest["runs"][0]["curve"]["train_success"], abs=1e-9)
    samples = (out / "samples_seed0.csv").read_text().splitlines()
    assert len(samples) == 1 + 3 * 4 * 3


def test_checksums_match_files(small_run):
    import hashlib
    _, manifest, out = small_run
    for name, digest in manifest["runs"][1]["checksums"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_rerun_byte_identical(small_run, tmp_path):
    exp, _, out = small_run
    harness.run_experiment(exp, tmp_path / "again")
    for name in ("curve_seed0.csv", "samples_seed0.csv", "curve_seed1.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (out / name).read_bytes()


def test_bc_manifest_has_one_iteration(tmp_path):
    exp = harness.load_experiment(small_config(tmp_path), variant="bc")
    manifest = harness.run_experiment(exp, tmp_path / "bc")
    assert manifest["loop"]["iterations"] == 1
    assert len(manifest["runs"][0]["curve"]["train_success"]) == 2


def test_unwritable_output(small_run, tmp_path):
    exp, _, _ = small_run
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        harness.run_experiment(exp, blocker / "sub")


def test_compare_single_and_identical(small_run):
    _, manifest, out = small_run
    rows = harness.compare([manifest])
    assert len(rows) == 1
    finals = [r["final_train_success"] for r in manifest["runs"]]
    assert rows[0]["train_mean"] == pytest.approx(np.mean(finals))
    one = dict(manifest, runs=manifest["runs"][:1])
    rows = harness.compare([one, one])
    assert rows[0]["train_stderr"] == 0.0 and rows[0]["n_runs"] == 2
    table = harness.render_table(rows)
    assert "whirl" in table and "±" in table
    assert harness.comparison_csv(rows).startswith("task,variant,n_runs,train_mean")


def test_compare_mixed_tasks(small_run):
    _, manifest, _ = small_run
    with pytest.raises(harness.UsageError):
        harness.compare([manifest, dict(manifest, task="door")])


def test_output_root_override(monkeypatch, tmp_path):
    exp = harness.load_experiment("door")
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path))
    assert harness.default_output_dir(exp) == tmp_path / "door_whirl"
    monkeypatch.delenv(harness.OUTPUT_ROOT_ENV)
    assert harness.default_output_dir(exp).name == "door_whirl"


def test_demo_generation_deterministic(experiments):
    exp = experiments["door"]
    scene, settings = exp.scenes["door_a"]
    a = harness.generate_demo(scene, settings, exp.noise, 11, exp.extraction)
    b = harness.generate_demo(scene, settings, exp.noise, 11, exp.extraction)
    assert np.array_equal(a.h, b.h) and np.array_equal(a.contact, b.contact)
