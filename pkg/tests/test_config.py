import json
import os

import pytest

from dyslim.config import load_document, load_run_config
from dyslim.errors import ConfigError
from dyslim.models import ConvStepperSpec, MlpStepperSpec

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _write(tmp_path, text, name="run.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


@pytest.mark.parametrize("name", ["lorenz.example.yaml", "ks.example.yaml",
                                  "experiments/lorenz_baseline.yaml", "experiments/lorenz_dyslim.yaml"])
def test_shipped_configs_load(name):
    run = load_run_config(os.path.join(ROOT, name))
    assert len(run.hash) == 16
    assert run.training.window >= run.training.max_rollout + 1


def test_lorenz_example_values():
    run = load_run_config(os.path.join(ROOT, "lorenz.example.yaml"))
    assert run.system == "lorenz"
    assert run.generator.dt == pytest.approx(0.4)
    assert run.model == MlpStepperSpec(state_dim=3, hidden=(32, 32), dt=0.4)
    assert run.training.objective.lambda2 == 100.0
    assert run.training.objective.kernel.bandwidths == (0.2, 0.5, 0.9, 1.3)
    assert run.splits["test"].record_steps == 101


def test_ks_example_values():
    run = load_run_config(os.path.join(ROOT, "ks.example.yaml"))
    assert run.system == "ks"
    assert isinstance(run.model, ConvStepperSpec) and run.model.state_dim == 512
    assert run.training.lr_schedule == "staircase"
    assert run.training.objective.discount.ratio == 0.9


def test_empty_document_takes_lorenz_defaults(tmp_path):
    run = load_run_config(_write(tmp_path, "{}\n"))
    assert run.system == "lorenz"
    assert run.model == MlpStepperSpec()
    assert run.training.learning_rate == 1e-4 and run.training.batch_size == 2048
    assert run.splits["train"].n_trajectories == 200
    assert run.evaluation.rollout_steps == 100


def test_unknown_key_reports_line(tmp_path):
    path = _write(tmp_path, "system:\n  name: lorenz\ntraining:\n  learnig_rate: 0.001\n")
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    assert info.value.line == 4
    assert str(info.value).startswith(f"{path}:4: ")
    assert "training.learnig_rate" in str(info.value)


def test_unknown_section_reports_line(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_run_config(_write(tmp_path, "model:\n  kind: mlp\noptimiser: {}\n"))
    assert info.value.line == 3


def test_wrong_type_reports_line(tmp_path):
    path = _write(tmp_path, "training:\n  window: 3\n  batch_size: big\n")
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    assert info.value.line == 3


def test_booleans_are_not_integers(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path, "training:\n  batch_size: true\n"))


def test_ks_grid_must_be_power_of_two(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_run_config(_write(tmp_path, "system:\n  name: ks\n  N: 100\n"))
    assert info.value.line == 1
    assert "power of two" in str(info.value)


def test_unknown_system_and_model(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path, "system:\n  name: rossler\n"))
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path, "model:\n  kind: transformer\n"))


def test_invalid_values_inside_a_section(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_run_config(_write(tmp_path, "\ntraining:\n  window: 3\n  max_rollout: 5\n"))
    assert info.value.line == 2


def test_malformed_yaml(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_document(_write(tmp_path, "training:\n  window: [3\n"))
    assert info.value.line is not None


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_document(str(tmp_path / "nope.yaml"))


def test_json_documents_work(tmp_path):
    doc = {"system": {"name": "lorenz", "h": 0.01}, "training": {"seed": 3}}
    path = _write(tmp_path, json.dumps(doc, indent=2), name="run.json")
    run = load_run_config(path)
    assert run.generator.h == 0.01 and run.training.seed == 3
    bad = _write(tmp_path, json.dumps({"training": {"sed": 3}}, indent=2), name="bad.json")
    with pytest.raises(ConfigError) as info:
        load_run_config(bad)
    assert info.value.line == 3


def test_null_optional_values(tmp_path):
    run = load_run_config(_write(tmp_path, "objective:\n  reg_mode: null\nevaluation:\n  sinkhorn_epsilon: null\n"))
    assert run.training.objective.reg_mode is None
    assert run.evaluation.sinkhorn.epsilon is None


def test_hash_is_stable_and_tracks_content(tmp_path):
    a = load_run_config(_write(tmp_path, "training:\n  seed: 1\n", "a.yaml"))
    b = load_run_config(_write(tmp_path, "# same document\ntraining: {seed: 1}\n", "b.yaml"))
    c = load_run_config(_write(tmp_path, "training:\n  seed: 2\n", "c.yaml"))
    assert a.hash == b.hash
    assert a.hash != c.hash


def test_seed_override(tmp_path):
    path = _write(tmp_path, "training:\n  seed: 1\n")
    base = load_run_config(path)
    run = load_run_config(path, seed=7, split="test")
    assert run.training.seed == 7
    assert run.splits["test"].seed == 7 and run.splits["train"].seed == 0
    assert run.hash != base.hash
    assert load_run_config(path, seed=1).hash == base.hash
