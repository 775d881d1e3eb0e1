import math

import numpy as np
import pytest

from rewardloop.config import EnvConfig, Task
from rewardloop.gait_env import (
    JOINT_NAMES,
    SEGMENTS,
    GaitParams,
    ParamsOutOfBoundsError,
    RolloutError,
    export_rollout,
    h_mts,
    rollout,
    schema,
)
from rewardloop.reward_dsl import compile_reward, evaluate
from rewardloop.similarity import autocorr_period
from rewardloop.trajectory import Space, load_trajectories
from rewardloop.utils import derive_seed

QUIET = EnvConfig(noise_sigma=0.0)


def test_schema_per_task():
    tracking = schema(Task.VELOCITY_TRACKING)
    fast = schema(Task.RUN_FAST)
    assert "target_vel_x" in tracking.variable_names()
    assert "target_vel_x" not in fast.variable_names()
    assert schema(Task.VELOCITY_TRACKING) == tracking

    names = tracking.variable_names()
    assert len(names) == len(set(names))
    for joint in JOINT_NAMES:
        assert {f"joint_{joint}_x", f"joint_{joint}_y", f"joint_{joint}_z"} <= set(names)


def test_schema_describe_lists_every_variable():
    text = schema(Task.RUN_FAST).describe()
    assert len(text.splitlines()) == len(schema(Task.RUN_FAST).variables)
    assert text.splitlines()[0].startswith("root_vel_x (m/s)")


def test_params_vector_and_bounds(make_params):
    params = make_params()
    assert GaitParams.from_vector(params.to_vector()) == params
    assert GaitParams.from_dict(params.to_dict()) == params
    lo, hi = GaitParams.bounds()
    assert lo.shape == hi.shape == (GaitParams.dimension(),)
    GaitParams.box_center().validate()


def test_params_out_of_bounds(make_params):
    with pytest.raises(ParamsOutOfBoundsError):
        rollout(make_params(frequency=10.0), Task.RUN_FAST, 10, seed=0)


def test_height_period_matches_frequency(make_params):
    env = EnvConfig(steps=400, dt=0.01, noise_sigma=0.0)
    result = rollout(make_params(frequency=2.0), Task.RUN_FAST, env.steps, seed=1, env=env)
    for joint in JOINT_NAMES:
        assert autocorr_period(result.states[f"joint_{joint}_z"]) == 50


def test_still_joints_and_constant_speed(make_params):
    params = make_params(amplitudes=(0.0, 0.0, 0.0, 0.0), base_speed=1.5)
    result = rollout(params, Task.RUN_FAST, 100, seed=2, env=QUIET)
    assert np.all(result.states["root_vel_x"] == 1.5)
    for i, joint in enumerate(JOINT_NAMES):
        assert np.all(result.states[f"joint_{joint}_z"] == params.offsets[i])


def test_speed_noise_is_small(make_params):
    result = rollout(make_params(base_speed=2.0), Task.RUN_FAST, 300, seed=3)
    assert np.mean(result.states["root_vel_x"]) == pytest.approx(2.0, abs=0.01)
    assert np.std(result.states["root_vel_x"]) == pytest.approx(0.02, rel=0.3)


def test_rollout_is_deterministic(make_params):
    a = rollout(make_params(), Task.VELOCITY_TRACKING, 120, seed=4)
    b = rollout(make_params(), Task.VELOCITY_TRACKING, 120, seed=4)
    for name in a.states:
        assert np.array_equal(a.states[name], b.states[name])
    assert np.array_equal(a.keypoints.stacked(), b.keypoints.stacked())
    assert a.sparse_reward == b.sparse_reward

    c = rollout(make_params(), Task.VELOCITY_TRACKING, 120, seed=5)
    assert not np.array_equal(a.states["target_vel_x"], c.states["target_vel_x"])


def test_segments_keep_their_length(make_params):
    result = rollout(make_params(shape=0.5), Task.VELOCITY_TRACKING, 200, seed=6)
    for parent, child, length, _ in SEGMENTS:
        a = result.keypoints.joint(parent).points
        b = result.keypoints.joint(child).points
        assert np.allclose(np.linalg.norm(a - b, axis=1), length, atol=1e-9)


def test_sparse_reward_of_perfect_tracking(make_params):
    params = make_params(tracking_gain=1.0, base_speed=0.0)
    result = rollout(params, Task.VELOCITY_TRACKING, 200, seed=7, env=QUIET)
    assert result.sparse_reward == 0.0


def test_sparse_reward_of_constant_forward_error(make_params):
    params = make_params(tracking_gain=1.0, base_speed=0.5)
    result = rollout(params, Task.VELOCITY_TRACKING, 200, seed=8, env=QUIET)
    assert result.sparse_reward == pytest.approx(-0.5)


def test_sparse_reward_of_run_fast(make_params):
    result = rollout(make_params(base_speed=2.0), Task.RUN_FAST, 200, seed=9, env=QUIET)
    assert result.sparse_reward == 2.0


def test_tracking_sparse_reward_is_never_positive():
    rng = np.random.default_rng(10)
    lo, hi = GaitParams.bounds()
    for k in range(30):
        params = GaitParams.from_vector(rng.uniform(lo, hi))
        assert rollout(params, Task.VELOCITY_TRACKING, 50, seed=k).sparse_reward <= 0.0


def test_episode_reward_sums_step_rewards(make_params):
    task = Task.VELOCITY_TRACKING
    program = compile_reward(
        "let e = root_vel_x - target_vel_x\nexp(-abs(e)) + 0.1 * joint_knee_z", schema(task)
    )
    result = rollout(make_params(tracking_gain=0.8), task, 60, seed=11, program=program)
    expected = math.fsum(evaluate(program, result.state(t)) for t in range(60))
    assert result.episode_reward == pytest.approx(expected, rel=1e-9)
    assert len(result.rewards) == 60


def test_failing_reward_names_the_step(make_params):
    task = Task.RUN_FAST
    program = compile_reward("1.0 / (root_vel_x - root_vel_x)", schema(task))
    with pytest.raises(RolloutError) as exc:
        rollout(make_params(), task, 30, seed=12, program=program)
    assert exc.value.step == 0


def test_h_mts_single_episode_matches_rollout(make_params):
    params = make_params(tracking_gain=0.7)
    single = h_mts(params, Task.VELOCITY_TRACKING, 1, seed=13, steps=100)
    direct = rollout(params, Task.VELOCITY_TRACKING, 100, derive_seed(13, 0))
    assert single == direct.sparse_reward


def test_h_mts_without_noise_ignores_episode_count(make_params):
    params = make_params(base_speed=1.2)
    one = h_mts(params, Task.RUN_FAST, 1, seed=14, steps=100, env=QUIET)
    five = h_mts(params, Task.RUN_FAST, 5, seed=14, steps=100, env=QUIET)
    assert five == pytest.approx(one, rel=1e-12)


def test_h_mts_of_perfect_tracking(make_params):
    params = make_params(tracking_gain=1.0, base_speed=0.0)
    assert h_mts(params, Task.VELOCITY_TRACKING, 4, seed=15, steps=100, env=QUIET) == 0.0


def test_export_rollout(tmp_path, make_params):
    result = rollout(make_params(), Task.RUN_FAST, 40, seed=16)
    export_rollout(result, str(tmp_path / "rollout.jsonl"))
    loaded = load_trajectories(str(tmp_path / "rollout.jsonl"))
    assert loaded.space == Space.SIM3D
    assert loaded.length == 40
    assert loaded.joint_names == list(JOINT_NAMES)
