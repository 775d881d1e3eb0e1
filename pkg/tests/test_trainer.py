import math
from dataclasses import replace

import numpy as np
import pytest

from rewardloop.config import EnvConfig, Task, TrainerConfig
from rewardloop.gait_env import GaitParams, rollout, schema
from rewardloop.reward_dsl import compile_reward
from rewardloop.trainer import TrainedPolicy, TrainStatus, train

TRACKING = "-abs(root_vel_x - target_vel_x) - abs(root_vel_y - target_vel_y)"
# best forward speed is the target plus 1 m/s, far from the middle of the box
OFFSET_TRACKING = "-abs(root_vel_x - target_vel_x - 1.0) - abs(root_vel_y - target_vel_y)"


def _program(source, task=Task.VELOCITY_TRACKING):
    return compile_reward(source, schema(task))


def test_tracking_reward_learns_to_track():
    env = EnvConfig(noise_sigma=0.0)
    policy = train(_program(TRACKING), Task.VELOCITY_TRACKING, 2000, seed=0, env=env)
    assert policy.status.succeeded()
    assert policy.evals_used <= 2000
    assert policy.h_mts >= -0.05


def _mean_step_reward(params, program, env, seeds=range(4)):
    rewards = [rollout(params, Task.VELOCITY_TRACKING, env.steps, s, program, env).rewards for s in seeds]
    return float(np.mean(rewards))


def test_offset_target_is_found_away_from_the_box_center():
    env = EnvConfig(noise_sigma=0.0)
    program = _program(OFFSET_TRACKING)
    center = GaitParams.box_center()

    grid = np.linspace(-2.0, 2.0, 81)
    grid_scores = [_mean_step_reward(replace(center, base_speed=float(b)), program, env) for b in grid]
    grid_best = float(grid[int(np.argmax(grid_scores))])
    assert grid_best == pytest.approx(1.0, abs=0.05)
    assert max(grid_scores) >= -0.01
    assert _mean_step_reward(center, program, env) <= -0.95

    policy = train(program, Task.VELOCITY_TRACKING, 2000, seed=0, env=env)
    assert policy.status.succeeded()
    assert policy.params.base_speed > 0.7
    assert _mean_step_reward(policy.params, program, env, seeds=range(100, 104)) >= -0.1


def test_broken_reward_is_reported():
    policy = train(_program("1.0 / (root_height - root_height)"), Task.VELOCITY_TRACKING, 256, seed=1)
    assert policy.status == TrainStatus.REWARD_ERROR
    assert policy.h_mts is None
    assert policy.error_detail
    assert policy.evals_used == 64
    assert policy.params == GaitParams.box_center()


def test_constant_reward_still_trains():
    policy = train(_program("1.0"), Task.RUN_FAST, 256, seed=2)
    assert policy.status.succeeded()
    assert math.isfinite(policy.h_mts)
    assert policy.evals_used <= 256
    policy.params.validate()


def test_curve_never_decreases():
    policy = train(_program(TRACKING), Task.VELOCITY_TRACKING, 512, seed=3)
    curve = np.array(policy.train_curve)
    assert 1 <= len(curve) <= 8
    assert np.all(np.diff(curve) >= 0.0)


def test_training_is_deterministic():
    a = train(_program(TRACKING), Task.VELOCITY_TRACKING, 256, seed=4)
    b = train(_program(TRACKING), Task.VELOCITY_TRACKING, 256, seed=4)
    assert a == b
    c = train(_program(TRACKING), Task.VELOCITY_TRACKING, 256, seed=5)
    assert c.params != a.params


def test_power_of_two_scaling_keeps_the_policy():
    a = train(_program(TRACKING), Task.VELOCITY_TRACKING, 256, seed=6)
    b = train(_program(f"2 * ({TRACKING})"), Task.VELOCITY_TRACKING, 256, seed=6)
    assert b.params == a.params
    assert b.h_mts == a.h_mts
    assert b.train_curve == tuple(2.0 * v for v in a.train_curve)


def test_budget_below_population():
    with pytest.raises(ValueError):
        train(_program(TRACKING), Task.VELOCITY_TRACKING, 31, seed=7)


def test_worker_threads_do_not_change_the_result():
    serial = train(_program(TRACKING), Task.VELOCITY_TRACKING, 256, seed=8)
    threaded = train(
        _program(TRACKING), Task.VELOCITY_TRACKING, 256, seed=8, config=TrainerConfig(workers=4)
    )
    assert threaded == serial


def test_policy_round_trips_through_dict():
    policy = train(_program(TRACKING), Task.VELOCITY_TRACKING, 128, seed=9)
    assert TrainedPolicy.from_dict(policy.to_dict()) == policy
