"""Built-in reference rewards: the task's sparse reward and a hand-shaped one."""

import logging

from rewardloop.config import RunConfig, Task
from rewardloop.gait_env import schema
from rewardloop.reward_dsl import RewardProgram, compile_reward
from rewardloop.trainer import train
from rewardloop.utils import derive_seed

logger = logging.getLogger(__name__)

BASELINE_STREAM = 4

SPARSE_SOURCES = {
    Task.VELOCITY_TRACKING: "-abs(root_vel_x - target_vel_x) - abs(root_vel_y - target_vel_y)",
    Task.RUN_FAST: "root_vel_x",
}

HUMAN_SOURCES = {
    Task.VELOCITY_TRACKING: """\
let ex = root_vel_x - target_vel_x
let ey = root_vel_y - target_vel_y
let tracking = exp(-4 * (ex * ex + ey * ey))
let posture = abs(root_height - 0.9)
let bounce = abs(joint_hip_vz)
tracking - 0.5 * posture - 0.05 * bounce""",
    Task.RUN_FAST: """\
let posture = abs(root_height - 0.9)
let clearance = clamp(joint_toe_z, 0, 0.1)
root_vel_x - 0.5 * posture + 0.5 * clearance""",
}


def sparse_program(task: Task) -> RewardProgram:
    return compile_reward(SPARSE_SOURCES[task], schema(task))


def human_program(task: Task) -> RewardProgram:
    return compile_reward(HUMAN_SOURCES[task], schema(task))


def train_baselines(config: RunConfig, progress: bool = False) -> dict[str, float]:
    """H_mts of the sparse and hand-shaped rewards under the run's trainer settings."""
    task = config.task.name
    scores = {}
    for stream, (name, program) in enumerate(
        (("sparse", sparse_program(task)), ("human", human_program(task)))
    ):
        seed = derive_seed(config.run.seed, BASELINE_STREAM, stream)
        policy = train(program, task, config.trainer.budget, seed, config.trainer, config.env, progress)
        logger.info("%s baseline: h_mts %.4f (%s)", name, policy.h_mts, policy.status.value)
        scores[name] = policy.h_mts
    return scores
