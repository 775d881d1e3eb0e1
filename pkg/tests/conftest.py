import numpy as np
import pytest

from rewardloop.config import EnvConfig, RunConfig, Task
from rewardloop.gait_env import GaitParams, rollout
from rewardloop.trajectory import Space, Trajectory, TrajectorySet, project_sagittal, write_trajectories
from rewardloop.utils import write_jsonl

# the gait every synthetic reference clip is drawn from
REFERENCE_OFFSETS = (0.9, 0.5, 0.15, 0.05)
REFERENCE_AMPLITUDES = (0.04, 0.05, 0.06, 0.03)
REFERENCE_PHASES = (0.0, 0.5, 1.0, 1.5)
REFERENCE_FREQUENCY = 2.0


class Catalog:
    def __init__(self, names):
        self.names = list(names)

    def variable_names(self):
        return self.names


@pytest.fixture(scope="session")
def catalog():
    return Catalog(["vx", "vy", "h", "root_vel_x"])


@pytest.fixture(scope="session")
def make_params():
    def _make(
        frequency=REFERENCE_FREQUENCY,
        base_speed=1.0,
        tracking_gain=0.0,
        offsets=REFERENCE_OFFSETS,
        amplitudes=REFERENCE_AMPLITUDES,
        phases=REFERENCE_PHASES,
        shape=0.0,
    ):
        return GaitParams(
            offsets=tuple(offsets),
            amplitudes=tuple(amplitudes),
            phases=tuple(phases),
            frequency=frequency,
            base_speed=base_speed,
            tracking_gain=tracking_gain,
            shape=shape,
        )

    return _make


@pytest.fixture(scope="session")
def write_reference_clip(make_params):
    """Render a noiseless gait as a 1000x1000 pixel clip recorded at 100 fps."""

    def _write(path, steps=300, **param_overrides):
        result = rollout(
            make_params(**param_overrides), Task.RUN_FAST, steps, seed=11, env=EnvConfig(noise_sigma=0.0)
        )
        plane = project_sagittal(result.keypoints, "hip")
        stacked = plane.stacked()
        pixels = np.empty_like(stacked)
        pixels[..., 0] = 50.0 + 200.0 * stacked[..., 0]
        pixels[..., 1] = 950.0 - 200.0 * stacked[..., 1]
        clip = TrajectorySet(
            tuple(Trajectory(j.joint_name, pixels[i], j.sample_period) for i, j in enumerate(plane.joints)),
            Space.IMAGE2D,
            source="synthetic",
            frame_size=(1000.0, 1000.0),
        )
        write_trajectories(clip, str(path))
        return str(path)

    return _write


def fenced(source):
    return f"Here is the reward.\n```reward\n{source}\n```\n"


@pytest.fixture(scope="session")
def write_mock_script():
    """
    Write a mock script from (round, index, source) or
    (round, index, source, attempt) tuples; a source of None stands for a
    reply without any code block.
    """

    def _write(path, entries):
        records = []
        for entry in entries:
            round_index, index, source = entry[:3]
            text = "I am not able to write that reward." if source is None else fenced(source)
            rec = {"round": round_index, "index": index, "response_text": text}
            if len(entry) > 3:
                rec["attempt"] = entry[3]
            records.append(rec)
        write_jsonl(str(path), records)
        return str(path)

    return _write


@pytest.fixture(scope="session")
def small_config():
    def _make(reference_path, mock_script, out_dir, rounds=3, samples=2, seed=7, budget=640, n_eval=4):
        return RunConfig.parse(
            {
                "task": {"name": "velocity_tracking"},
                "reference": {"path": reference_path, "stride": 2, "normalization": "frame", "root": "hip"},
                "env": {"steps": 300},
                "trainer": {"budget": budget, "holdout_episodes": 4},
                "feedback": {"n_eval": n_eval},
                "llm": {"backend": "mock", "mock_script": mock_script, "parallelism": 1},
                "run": {"rounds": rounds, "samples": samples, "seed": seed, "out_dir": str(out_dir), "workers": 1},
            }
        )

    return _make
