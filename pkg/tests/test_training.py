import os
import shutil

import numpy as np
import pytest

from dyslim.errors import ConfigError, ContractError, NonFiniteError
from dyslim.models import MlpStepperSpec
from dyslim.objectives import DyslimConfig
from dyslim.training import (FINAL_CHECKPOINT, STATUS_COMPLETED, STATUS_DIVERGED, AdamState, TrainConfig, adam_update,
                             draw_rollout_length, ks_defaults, load_checkpoint, lorenz_defaults, lr_schedule,
                             read_run_log, rollout_schedule, sample_windows, train)

SPEC = MlpStepperSpec(state_dim=3, hidden=(8,), dt=0.1)


def _config(**overrides):
    fields = dict(system="lorenz", objective=DyslimConfig(lambda1=0.5, lambda2=1.0), learning_rate=1e-3,
                  total_steps=100, batch_size=16, window=3, rollout_interval=50, max_rollout=2,
                  checkpoint_interval=50, seed=5, log_interval=25)
    fields.update(overrides)
    return TrainConfig(**fields)


def _rows_without_wall(rows):
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in rows]


def test_staircase_learning_rate():
    config = ks_defaults()
    assert lr_schedule(0, config) == 5e-4
    assert lr_schedule(59_999, config) == 5e-4
    assert lr_schedule(60_000, config) == pytest.approx(2.5e-4)
    assert lr_schedule(120_000, config) == pytest.approx(1.25e-4)
    assert lr_schedule(10**6, lorenz_defaults()) == 1e-4


def test_rollout_schedule_ramps_and_caps():
    config = lorenz_defaults()
    assert [rollout_schedule(s, config) for s in (0, 49_999, 50_000, 10**6)] == [1, 1, 2, 10]


def test_rollout_length_draws_stay_in_range():
    rng = np.random.default_rng(0)
    draws = {draw_rollout_length(rng, 3) for _ in range(200)}
    assert draws == {1, 2, 3}


def test_window_must_hold_max_rollout():
    with pytest.raises(ConfigError):
        TrainConfig(window=5, max_rollout=5)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="cosine")


def test_adam_first_step_matches_formula():
    state = AdamState.zeros(3)
    params = np.array([1.0, -1.0, 0.5])
    grads = np.array([0.2, -4.0, 0.0])
    new_state, new_params = adam_update(state, params, grads, 0.01)
    expected = params - 0.01 * grads / (np.abs(grads) + 1e-8)
    np.testing.assert_allclose(new_params, expected, rtol=1e-12)
    assert new_state.step == 1
    np.testing.assert_allclose(new_state.m, 0.1 * grads)
    np.testing.assert_allclose(new_state.v, 0.001 * grads ** 2)


def test_adam_second_step_uses_bias_correction():
    state = AdamState.zeros(1)
    params = np.array([0.0])
    state, params = adam_update(state, params, np.array([1.0]), 0.1)
    state, params = adam_update(state, params, np.array([3.0]), 0.1)
    m = 0.9 * 0.1 + 0.1 * 3.0
    v = 0.999 * 0.001 + 0.001 * 9.0
    step = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(params, [-0.1 * 1.0 / (1.0 + 1e-8) - step], rtol=1e-12)


def test_adam_rejects_bad_gradients():
    state = AdamState.zeros(2)
    with pytest.raises(NonFiniteError):
        adam_update(state, np.zeros(2), np.array([np.inf, 0.0]), 0.1)
    with pytest.raises(ContractError):
        adam_update(state, np.zeros(2), np.zeros(3), 0.1)


def test_sample_windows(small_lorenz):
    a = sample_windows(small_lorenz, np.random.default_rng(1), 8, 2, window=5)
    b = sample_windows(small_lorenz, np.random.default_rng(1), 8, 2, window=5)
    assert a.shape == (8, 3, 3)
    np.testing.assert_array_equal(a, b)
    # every window is a contiguous slice of some trajectory
    for w in a:
        hits = [(i, t) for i in range(small_lorenz.n_trajectories)
                for t in range(small_lorenz.steps - 2) if np.array_equal(small_lorenz.data[i, t:t + 3], w)]
        assert hits
    with pytest.raises(ContractError):
        sample_windows(small_lorenz, np.random.default_rng(1), 8, 3, window=3)


def test_smoke_run_completes(tmp_path, small_lorenz):
    result = train(_config(), small_lorenz, SPEC, str(tmp_path))
    assert result.status == STATUS_COMPLETED
    assert result.steps_run == 100 and result.skipped_steps == 0
    hash_value, rows = read_run_log(result.log_path)
    assert hash_value is not None and len(hash_value) == 16
    assert len(rows) == 100
    assert [int(r["step"]) for r in rows] == list(range(100))
    assert {int(r["ell"]) for r in rows[:50]} == {1} and {int(r["ell"]) for r in rows[50:]} == {2}
    assert all(np.isfinite(float(r["total"])) for r in rows)
    assert os.path.exists(tmp_path / "checkpoint_00000050.dysl")
    ckpt = load_checkpoint(result.checkpoint_path)
    assert ckpt.step == 100 and ckpt.status == STATUS_COMPLETED
    assert ckpt.normalizer is not None
    assert ckpt.config["model"]["hidden"] == [8]


def test_huge_learning_rate_diverges(tmp_path, small_lorenz):
    config = _config(learning_rate=1e150, objective=DyslimConfig(), max_skipped_steps=2)
    result = train(config, small_lorenz, SPEC, str(tmp_path))
    assert result.status == STATUS_DIVERGED
    assert result.events and result.events[-1]["event"] in ("forward_nonfinite", "backward_nonfinite")
    assert load_checkpoint(result.checkpoint_path).status == STATUS_DIVERGED
    _, events = read_run_log(str(tmp_path / "events.csv"))
    assert events


def test_dataset_system_must_match(tmp_path, small_lorenz):
    with pytest.raises(ConfigError):
        train(_config(system="ks"), small_lorenz, SPEC, str(tmp_path))
    with pytest.raises(ConfigError):
        train(_config(), small_lorenz, MlpStepperSpec(state_dim=4, hidden=(8,)), str(tmp_path))


def test_same_seed_gives_identical_checkpoints(tmp_path, small_lorenz):
    config = _config(total_steps=30)
    a = train(config, small_lorenz, SPEC, str(tmp_path / "a"))
    b = train(config, small_lorenz, SPEC, str(tmp_path / "b"))
    with open(a.checkpoint_path, "rb") as fa, open(b.checkpoint_path, "rb") as fb:
        assert fa.read() == fb.read()
    c = train(_config(total_steps=30, seed=6), small_lorenz, SPEC, str(tmp_path / "c"))
    assert load_checkpoint(c.checkpoint_path).config_hash != load_checkpoint(a.checkpoint_path).config_hash


def test_resume_reproduces_the_uninterrupted_run(tmp_path, small_lorenz):
    config = _config(total_steps=60, checkpoint_interval=30,
                     objective=DyslimConfig(base="pushforward", lambda1=0.5, lambda2=1.0))
    out = tmp_path / "run"
    full = train(config, small_lorenz, SPEC, str(out))
    full_bytes = open(full.checkpoint_path, "rb").read()
    _, full_rows = read_run_log(full.log_path)
    shutil.copy(out / "checkpoint_00000030.dysl", tmp_path / "resume_from.dysl")

    resumed = train(config, small_lorenz, SPEC, str(out), resume_from=str(tmp_path / "resume_from.dysl"))
    assert resumed.steps_run == 30
    assert open(out / FINAL_CHECKPOINT, "rb").read() == full_bytes
    _, rows = read_run_log(resumed.log_path)
    assert _rows_without_wall(rows) == _rows_without_wall(full_rows)


def test_resume_rejects_other_config(tmp_path, small_lorenz):
    first = train(_config(total_steps=10), small_lorenz, SPEC, str(tmp_path / "a"))
    with pytest.raises(ConfigError):
        train(_config(total_steps=10, learning_rate=5e-3), small_lorenz, SPEC, str(tmp_path / "b"),
              resume_from=first.checkpoint_path)
