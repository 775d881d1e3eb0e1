"""
Cross-entropy method over gait parameters.

Search happens in the unit cube; samples are mapped onto the parameter box
before every rollout. The rollout budget is counted in episodes, so one
evaluation costs `rollouts_per_eval` of it.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Tuple

import numpy as np
from tqdm import tqdm

from rewardloop.config import EnvConfig, Task, TrainerConfig
from rewardloop.gait_env import GaitParams, RolloutError, h_mts, rollout
from rewardloop.reward_dsl import RewardProgram
from rewardloop.utils import derive_seed

logger = logging.getLogger(__name__)

# seed streams
TRAIN_STREAM = 0
HOLDOUT_STREAM = 1
SAMPLE_STREAM = 2

INITIAL_SIGMA = 0.25
BROKEN_REWARD_FRACTION = 0.5


class TrainStatus(Enum):
    OK = "ok"
    REWARD_ERROR = "reward_error"
    BUDGET_EXHAUSTED = "budget_exhausted"

    def succeeded(self) -> bool:
        return self != TrainStatus.REWARD_ERROR


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


@dataclass(frozen=True)
class TrainedPolicy:
    params: GaitParams
    h_mts: Optional[float]
    train_curve: Tuple[float, ...]
    # episodes rolled out, never more than the budget
    evals_used: int
    status: TrainStatus
    error_detail: Optional[str] = field(default=None)

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "h_mts": self.h_mts,
            "train_curve": [_finite_or_none(v) for v in self.train_curve],
            "evals_used": self.evals_used,
            "status": self.status.value,
            "error_detail": self.error_detail,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "TrainedPolicy":
        return TrainedPolicy(
            params=GaitParams.from_dict(data["params"]),
            h_mts=data["h_mts"],
            train_curve=tuple(-math.inf if v is None else float(v) for v in data["train_curve"]),
            evals_used=int(data["evals_used"]),
            status=TrainStatus(data["status"]),
            error_detail=data.get("error_detail"),
        )


class _Evaluator:
    def __init__(self, program: RewardProgram, task: Task, seed: int, config: TrainerConfig, env: EnvConfig):
        self.program = program
        self.task = task
        self.seed = seed
        self.config = config
        self.env = env
        self.lo, self.hi = GaitParams.bounds()

    def to_params(self, unit: np.ndarray) -> GaitParams:
        return GaitParams.from_vector(self.lo + unit * (self.hi - self.lo))

    def __call__(self, job: Tuple[int, int, np.ndarray]) -> Tuple[float, Optional[str]]:
        generation, index, unit = job
        params = self.to_params(unit)
        total = 0.0
        for r in range(self.config.rollouts_per_eval):
            seed = derive_seed(self.seed, TRAIN_STREAM, generation, index, r)
            try:
                result = rollout(params, self.task, self.env.steps, seed, self.program, self.env)
            except RolloutError as e:
                return -math.inf, str(e)
            total += result.episode_reward
        return total / self.config.rollouts_per_eval, None


def train(
    program: RewardProgram,
    task: Task,
    budget: int,
    seed: int,
    config: Optional[TrainerConfig] = None,
    env: Optional[EnvConfig] = None,
    progress: bool = False,
) -> TrainedPolicy:
    config = config or TrainerConfig()
    env = env or EnvConfig()
    if budget < config.population:
        raise ValueError(f"budget {budget} is smaller than the population {config.population}")

    evaluator = _Evaluator(program, task, seed, config, env)
    rng = np.random.default_rng(derive_seed(seed, SAMPLE_STREAM))
    dim = GaitParams.dimension()
    # unit-cube image of GaitParams.box_center()
    mean = np.full(dim, 0.5)
    sigma = np.full(dim, INITIAL_SIGMA)

    best_unit = mean.copy()
    best_score = -math.inf
    curve: list[float] = []
    used = 0
    status = TrainStatus.BUDGET_EXHAUSTED

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    bar = tqdm(desc="cem", unit="gen", leave=False, disable=not progress)
    try:
        generation = 0
        while True:
            n = min(config.population, (budget - used) // config.rollouts_per_eval)
            if n == 0:
                break

            samples = np.clip(mean + sigma * rng.standard_normal((n, dim)), 0.0, 1.0)
            jobs = [(generation, i, samples[i]) for i in range(n)]
            # map keeps population order whatever the scheduling
            results = list(pool.map(evaluator, jobs)) if pool else [evaluator(j) for j in jobs]
            used += n * config.rollouts_per_eval

            scores = np.array([score for score, _ in results])
            errors = [detail for _, detail in results if detail is not None]
            if generation == 0 and len(errors) >= BROKEN_REWARD_FRACTION * n:
                logger.warning("reward failed on %d of %d first evaluations", len(errors), n)
                return TrainedPolicy(
                    params=GaitParams.box_center(),
                    h_mts=None,
                    train_curve=(),
                    evals_used=used,
                    status=TrainStatus.REWARD_ERROR,
                    error_detail=errors[0],
                )

            top = int(np.argmax(scores))
            if scores[top] > best_score:
                best_score = float(scores[top])
                best_unit = samples[top].copy()
            curve.append(best_score)

            n_elite = max(1, int(config.elite_fraction * n))
            order = np.argsort(-scores, kind="stable")[:n_elite]
            elites = samples[order[np.isfinite(scores[order])]]
            logger.debug("generation %d: best %.6g, %d elites", generation, best_score, len(elites))
            bar.update(1)
            generation += 1

            if len(elites) == 0:
                continue
            spread = elites.std(axis=0)
            mean = elites.mean(axis=0)
            sigma = np.maximum(spread, config.sigma_floor)
            if np.all(spread <= config.sigma_floor):
                status = TrainStatus.OK
                break
    finally:
        bar.close()
        if pool:
            pool.shutdown()

    params = evaluator.to_params(best_unit)
    score = h_mts(params, task, config.holdout_episodes, derive_seed(seed, HOLDOUT_STREAM), env.steps, env)
    return TrainedPolicy(
        params=params,
        h_mts=score,
        train_curve=tuple(curve),
        evals_used=used,
        status=status,
    )
