"""
A kinematic, single-leg sagittal gait model used in place of a physics
simulator.

Every joint's height follows a warped sinusoid

    z_j(t) = offset_j + amplitude_j * sin(theta + shape * sin(theta)),
    theta  = 2*pi*frequency*t*dt + phase_j

(shape = 0 gives a plain sinusoid). The root (hip) moves with a commanded
velocity plus per-step Gaussian noise, and each child joint hangs off its
parent on a rigid segment: the horizontal offset along the heading is
whatever keeps the segment length fixed for the current height difference.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from rewardloop.config import EnvConfig, Task
from rewardloop.reward_dsl import RewardEvaluationError, RewardProgram, evaluate_batch
from rewardloop.trajectory import Space, Trajectory, TrajectorySet, write_trajectories
from rewardloop.utils import derive_seed

JOINT_NAMES = ("hip", "knee", "ankle", "toe")
ROOT_JOINT = "hip"
# (parent, child, length m, side): side is +1 ahead of the parent, -1 behind
SEGMENTS = (
    ("hip", "knee", 0.70, 1.0),
    ("knee", "ankle", 0.65, -1.0),
    ("ankle", "toe", 0.35, 1.0),
)

OFFSET_BOUNDS = ((0.85, 0.95), (0.45, 0.55), (0.10, 0.20), (0.02, 0.08))
AMPLITUDE_BOUNDS = (0.0, 0.08)
PHASE_BOUNDS = (0.0, 2.0 * math.pi)
FREQUENCY_BOUNDS = (0.5, 3.0)
BASE_SPEED_BOUNDS = (-2.0, 2.0)
TRACKING_GAIN_BOUNDS = (0.0, 2.0)
SHAPE_BOUNDS = (0.0, 0.9)

HEADING_EPS = 1e-9


class GaitEnvError(Exception):
    """Base class of environment errors."""


class ParamsOutOfBoundsError(GaitEnvError):
    pass


class RolloutError(GaitEnvError):
    def __init__(self, step: Optional[int], cause: Exception):
        where = f"step {step}" if step is not None else "unknown step"
        super().__init__(f"reward failed at {where}: {cause}")
        self.step = step
        self.cause = cause


class Variable(NamedTuple):
    name: str
    description: str
    unit: str


@dataclass(frozen=True)
class EnvSchema:
    task: Task
    variables: Tuple[Variable, ...]
    joint_names: Tuple[str, ...]

    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    def describe(self) -> str:
        """One line per variable, in catalog order; embedded in prompts."""
        return "\n".join(f"{v.name} ({v.unit}): {v.description}" for v in self.variables)


def schema(task: Task) -> EnvSchema:
    variables = [
        Variable("root_vel_x", "forward velocity of the body", "m/s"),
        Variable("root_vel_y", "lateral velocity of the body", "m/s"),
        Variable("root_height", "height of the hip above the ground", "m"),
    ]
    if task == Task.VELOCITY_TRACKING:
        variables += [
            Variable("target_vel_x", "commanded forward velocity", "m/s"),
            Variable("target_vel_y", "commanded lateral velocity", "m/s"),
        ]
    for name in JOINT_NAMES:
        variables += [
            Variable(f"joint_{name}_x", f"{name} position along x", "m"),
            Variable(f"joint_{name}_y", f"{name} position along y", "m"),
            Variable(f"joint_{name}_z", f"{name} height", "m"),
            Variable(f"joint_{name}_vz", f"{name} vertical velocity", "m/s"),
        ]
    variables.append(Variable("step_dt", "duration of one step", "s"))
    return EnvSchema(task=task, variables=tuple(variables), joint_names=JOINT_NAMES)


@dataclass(frozen=True)
class GaitParams:
    """
    The policy: per-joint sinusoid parameters plus locomotion gains.

    `tracking_gain` scales the commanded target velocity and `base_speed`
    adds a signed constant forward speed, so one parameter vector can
    follow targets that change from episode to episode.
    """

    offsets: Tuple[float, ...]
    amplitudes: Tuple[float, ...]
    phases: Tuple[float, ...]
    frequency: float
    base_speed: float
    tracking_gain: float
    shape: float

    @staticmethod
    def bounds() -> Tuple[np.ndarray, np.ndarray]:
        pairs = (
            list(OFFSET_BOUNDS)
            + [AMPLITUDE_BOUNDS] * len(JOINT_NAMES)
            + [PHASE_BOUNDS] * len(JOINT_NAMES)
            + [FREQUENCY_BOUNDS, BASE_SPEED_BOUNDS, TRACKING_GAIN_BOUNDS, SHAPE_BOUNDS]
        )
        lo = np.array([p[0] for p in pairs])
        hi = np.array([p[1] for p in pairs])
        return lo, hi

    @staticmethod
    def dimension() -> int:
        return 3 * len(JOINT_NAMES) + 4

    @staticmethod
    def from_vector(vec: np.ndarray) -> "GaitParams":
        n = len(JOINT_NAMES)
        v = [float(x) for x in vec]
        return GaitParams(
            offsets=tuple(v[0:n]),
            amplitudes=tuple(v[n : 2 * n]),
            phases=tuple(v[2 * n : 3 * n]),
            frequency=v[3 * n],
            base_speed=v[3 * n + 1],
            tracking_gain=v[3 * n + 2],
            shape=v[3 * n + 3],
        )

    @staticmethod
    def box_center() -> "GaitParams":
        lo, hi = GaitParams.bounds()
        return GaitParams.from_vector((lo + hi) / 2.0)

    def to_vector(self) -> np.ndarray:
        return np.array(
            list(self.offsets)
            + list(self.amplitudes)
            + list(self.phases)
            + [self.frequency, self.base_speed, self.tracking_gain, self.shape],
            dtype=np.float64,
        )

    def validate(self) -> None:
        n = len(JOINT_NAMES)
        for key in ("offsets", "amplitudes", "phases"):
            if len(getattr(self, key)) != n:
                raise ParamsOutOfBoundsError(f"'{key}' needs {n} values")
        lo, hi = GaitParams.bounds()
        vec = self.to_vector()
        bad = np.flatnonzero((vec < lo) | (vec > hi))
        if bad.size:
            i = int(bad[0])
            raise ParamsOutOfBoundsError(
                f"parameter {i} = {vec[i]} is outside [{lo[i]}, {hi[i]}]"
            )

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "GaitParams":
        return GaitParams(
            offsets=tuple(float(x) for x in data["offsets"]),
            amplitudes=tuple(float(x) for x in data["amplitudes"]),
            phases=tuple(float(x) for x in data["phases"]),
            frequency=float(data["frequency"]),
            base_speed=float(data["base_speed"]),
            tracking_gain=float(data["tracking_gain"]),
            shape=float(data["shape"]),
        )


@dataclass(frozen=True, eq=False)
class Rollout:
    task: Task
    # one array of length `steps` per schema variable
    states: Mapping[str, np.ndarray]
    keypoints: TrajectorySet
    rewards: Optional[np.ndarray]
    episode_reward: Optional[float]
    sparse_reward: float

    @property
    def steps(self) -> int:
        return self.keypoints.length

    def state(self, step: int) -> dict[str, float]:
        return {name: float(col[step]) for name, col in self.states.items()}


def _command(params: GaitParams, task: Task, target: np.ndarray) -> np.ndarray:
    forward = np.array([params.base_speed, 0.0])
    if task == Task.VELOCITY_TRACKING:
        return params.tracking_gain * target + forward
    return forward


def sparse_reward_from(task: Task, states: Mapping[str, np.ndarray]) -> float:
    match task:
        case Task.VELOCITY_TRACKING:
            # the planar model has no yaw, so the angular error term is always zero
            ex = np.mean(np.abs(states["root_vel_x"] - states["target_vel_x"]))
            ey = np.mean(np.abs(states["root_vel_y"] - states["target_vel_y"]))
            return float(-ex - ey)
        case Task.RUN_FAST:
            return float(np.mean(states["root_vel_x"]))


def sparse_reward(rollout: Rollout, task: Task) -> float:
    return sparse_reward_from(task, rollout.states)


def rollout(
    params: GaitParams,
    task: Task,
    steps: int,
    seed: int,
    program: Optional[RewardProgram] = None,
    env: Optional[EnvConfig] = None,
) -> Rollout:
    """
    Simulate one episode. The result depends only on the arguments.

    Raises `RolloutError` (carrying the first failing step) when `program`
    cannot be evaluated on the generated states.
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    env = env or EnvConfig()
    params.validate()
    dt = env.dt
    rng = np.random.default_rng(seed)

    if task == Task.VELOCITY_TRACKING:
        target = np.array(
            [rng.uniform(*env.target_vel_x_range), rng.uniform(*env.target_vel_y_range)]
        )
    else:
        target = np.zeros(2)

    command = _command(params, task, target)
    speed = float(np.hypot(command[0], command[1]))
    heading = command / speed if speed > HEADING_EPS else np.array([1.0, 0.0])

    noise = rng.normal(0.0, env.noise_sigma * speed, size=(steps, 2))
    vel = command[None, :] + noise
    root_xy = np.vstack([np.zeros((1, 2)), np.cumsum(vel[:-1] * dt, axis=0)])

    t = np.arange(steps) * dt
    omega = 2.0 * math.pi * params.frequency
    heights, vertical_vel = {}, {}
    for i, name in enumerate(JOINT_NAMES):
        theta = omega * t + params.phases[i]
        warped = theta + params.shape * np.sin(theta)
        amp = params.amplitudes[i]
        heights[name] = params.offsets[i] + amp * np.sin(warped)
        vertical_vel[name] = amp * np.cos(warped) * (1.0 + params.shape * np.cos(theta)) * omega

    positions = {ROOT_JOINT: root_xy}
    for parent, child, length, side in SEGMENTS:
        dz = heights[parent] - heights[child]
        reach = side * np.sqrt(np.maximum(length * length - dz * dz, 0.0))
        positions[child] = positions[parent] + reach[:, None] * heading[None, :]

    states: dict[str, np.ndarray] = {
        "root_vel_x": vel[:, 0],
        "root_vel_y": vel[:, 1],
        "root_height": heights[ROOT_JOINT],
    }
    if task == Task.VELOCITY_TRACKING:
        states["target_vel_x"] = np.full(steps, target[0])
        states["target_vel_y"] = np.full(steps, target[1])
    for name in JOINT_NAMES:
        states[f"joint_{name}_x"] = positions[name][:, 0]
        states[f"joint_{name}_y"] = positions[name][:, 1]
        states[f"joint_{name}_z"] = heights[name]
        states[f"joint_{name}_vz"] = vertical_vel[name]
    states["step_dt"] = np.full(steps, dt)

    joints = tuple(
        Trajectory(name, np.column_stack([positions[name], heights[name]]), dt)
        for name in JOINT_NAMES
    )
    keypoints = TrajectorySet(joints, Space.SIM3D, source=f"rollout seed={seed}")

    rewards = None
    episode_reward = None
    if program is not None:
        try:
            rewards = evaluate_batch(program, states, steps)
        except RewardEvaluationError as e:
            raise RolloutError(e.step, e) from e
        episode_reward = float(np.sum(rewards))

    return Rollout(
        task=task,
        states=states,
        keypoints=keypoints,
        rewards=rewards,
        episode_reward=episode_reward,
        sparse_reward=sparse_reward_from(task, states),
    )


def h_mts(
    params: GaitParams,
    task: Task,
    n_episodes: int,
    seed: int,
    steps: Optional[int] = None,
    env: Optional[EnvConfig] = None,
) -> float:
    """Mean sparse reward over `n_episodes` episodes seeded by (seed, episode)."""
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    env = env or EnvConfig()
    steps = steps or env.steps
    values = [
        rollout(params, task, steps, derive_seed(seed, episode), env=env).sparse_reward
        for episode in range(n_episodes)
    ]
    return math.fsum(values) / n_episodes


def export_rollout(result: Rollout, path: str) -> None:
    write_trajectories(result.keypoints, path)
