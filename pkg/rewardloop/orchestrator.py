"""
The refinement loop: prompt, sample K rewards, train each, keep the best,
compare its gait with the reference and feed the result into the next
round's prompt.

Every round is written to disk before the next one starts; a run can be
resumed from its directory and reproduces the uninterrupted result.
"""

import datetime
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Sequence, Tuple

from tqdm import tqdm

from rewardloop.config import EnvConfig, RunConfig, Task, TrainerConfig, dump_config, load_config
from rewardloop.feedback import prepare_reference, score_rollouts
from rewardloop.gait_env import export_rollout, rollout, schema
from rewardloop.llm import Backend, CandidateSource, ParseStatus, make_backend, sample_rewards
from rewardloop.paths import (
    get_candidate_path,
    get_config_snapshot_path,
    get_eval_rollout_path,
    get_feedback_path,
    get_manifest_path,
    get_messages_path,
    get_metadata_path,
    get_policies_path,
    get_record_path,
    get_responses_path,
    get_run_dir,
)
from rewardloop.prompts import (
    FeedbackBlock,
    build_feedback_prompt,
    build_initial_prompt,
    make_context,
    trajectory_block,
)
from rewardloop.reward_dsl import compile_reward
from rewardloop.similarity import FeedbackScores, SimilarityError
from rewardloop.state import RunMachine, RunState
from rewardloop.trainer import TrainedPolicy, train
from rewardloop.trajectory import TrajectoryError, serialize_for_prompt
from rewardloop.utils import (
    calculate_text_sha256,
    canonical_json,
    derive_seed,
    get_cpu_cores_minus_one,
    read_json,
    write_json,
    write_jsonl,
    write_text,
)

logger = logging.getLogger(__name__)

EVAL_STREAM = 3
FEEDBACK_SOURCE = "round_best"
COMPARISON_NORMALIZATION = "root_centered_uniform_box"


class RoundFailureError(Exception):
    def __init__(self, round_index: int, statuses: Sequence[str]):
        super().__init__(
            f"round {round_index}: every candidate failed twice: " + "; ".join(statuses)
        )
        self.round_index = round_index
        self.statuses = list(statuses)


class RunDirectoryError(Exception):
    pass


class CandidateStatus(Enum):
    OK = "ok"
    PARSE_FAILED = "parse_failed"
    TRAIN_FAILED = "train_failed"


@dataclass(frozen=True)
class CandidateResult:
    index: int
    source: str
    status: CandidateStatus
    h_mts: Optional[float] = None
    policy: Optional[TrainedPolicy] = None
    detail: Optional[str] = None

    def describe(self) -> str:
        text = f"candidate {self.index}: {self.status.value}"
        return f"{text} ({self.detail})" if self.detail else text

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "source": self.source,
            "status": self.status.value,
            "h_mts": self.h_mts,
            "policy": self.policy.to_dict() if self.policy else None,
            "detail": self.detail,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "CandidateResult":
        return CandidateResult(
            index=int(data["index"]),
            source=data["source"],
            status=CandidateStatus(data["status"]),
            h_mts=data["h_mts"],
            policy=TrainedPolicy.from_dict(data["policy"]) if data["policy"] else None,
            detail=data["detail"],
        )


@dataclass(frozen=True)
class RoundRecord:
    round: int
    prompt_digest: str
    attempts: int
    candidates: Tuple[CandidateResult, ...]
    best_index: int
    dtw_feedback: Optional[FeedbackScores]
    feedback_error: Optional[str]
    best_so_far_score: float
    best_so_far_source: str
    best_so_far_round: int

    @property
    def best(self) -> CandidateResult:
        return self.candidates[self.best_index]

    def feedback_block(self) -> FeedbackBlock:
        return FeedbackBlock(
            round=self.round,
            best_reward_source=self.best.source,
            best_score=self.best.h_mts,
            dtw_scores=dict(self.dtw_feedback.per_joint) if self.dtw_feedback else {},
            error=self.feedback_error,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "prompt_digest": self.prompt_digest,
            "attempts": self.attempts,
            "candidates": [c.to_dict() for c in self.candidates],
            "best_index": self.best_index,
            "dtw_feedback": (
                {
                    "per_joint": dict(sorted(self.dtw_feedback.per_joint.items())),
                    "rollout_count": self.dtw_feedback.rollout_count,
                }
                if self.dtw_feedback
                else None
            ),
            "feedback_error": self.feedback_error,
            "best_so_far_score": self.best_so_far_score,
            "best_so_far_source": self.best_so_far_source,
            "best_so_far_round": self.best_so_far_round,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "RoundRecord":
        fb = data["dtw_feedback"]
        return RoundRecord(
            round=int(data["round"]),
            prompt_digest=data["prompt_digest"],
            attempts=int(data["attempts"]),
            candidates=tuple(CandidateResult.from_dict(c) for c in data["candidates"]),
            best_index=int(data["best_index"]),
            dtw_feedback=(
                FeedbackScores(per_joint=dict(fb["per_joint"]), rollout_count=int(fb["rollout_count"]))
                if fb
                else None
            ),
            feedback_error=data["feedback_error"],
            best_so_far_score=float(data["best_so_far_score"]),
            best_so_far_source=data["best_so_far_source"],
            best_so_far_round=int(data["best_so_far_round"]),
        )


@dataclass(frozen=True)
class RunManifest:
    config: dict[str, Any]
    config_hash: str
    seed: int
    rounds: Tuple[RoundRecord, ...]
    final_reward_source: str
    final_score: float
    final_round: int
    flags: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seeds": {"run": self.seed},
            "rounds": [r.to_dict() for r in self.rounds],
            "final_reward_source": self.final_reward_source,
            "final_score": self.final_score,
            "final_round": self.final_round,
            "flags": self.flags,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "RunManifest":
        return RunManifest(
            config=data["config"],
            config_hash=data["config_hash"],
            seed=int(data["seeds"]["run"]),
            rounds=tuple(RoundRecord.from_dict(r) for r in data["rounds"]),
            final_reward_source=data["final_reward_source"],
            final_score=float(data["final_score"]),
            final_round=int(data["final_round"]),
            flags=data["flags"],
        )


def load_manifest(path: str) -> RunManifest:
    return RunManifest.from_dict(read_json(path))


def _train_job(job: Tuple[str, Task, int, int, TrainerConfig, EnvConfig]) -> TrainedPolicy:
    source, task, budget, seed, trainer_config, env_config = job
    # sources are recompiled here so only plain data crosses process boundaries
    program = compile_reward(source, schema(task))
    return train(program, task, budget, seed, trainer_config, env_config)


def train_candidates(
    candidates: Sequence[CandidateSource],
    config: RunConfig,
    round_index: int,
    attempt: int,
    workers: int = 1,
) -> list[CandidateResult]:
    task = config.task.name
    jobs = {
        i: (
            c.extracted_source,
            task,
            config.trainer.budget,
            derive_seed(config.run.seed, round_index, i, attempt),
            config.trainer,
            config.env,
        )
        for i, c in enumerate(candidates)
        if c.parse_status == ParseStatus.OK
    }

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            policies = dict(zip(jobs, pool.map(_train_job, jobs.values())))
    else:
        policies = {i: _train_job(job) for i, job in jobs.items()}

    results = []
    for i, c in enumerate(candidates):
        if c.parse_status != ParseStatus.OK:
            results.append(
                CandidateResult(
                    index=i,
                    source=c.extracted_source if c.extracted_source is not None else c.raw_response,
                    status=CandidateStatus.PARSE_FAILED,
                    detail=f"{c.parse_status.value}: {c.error_detail}",
                )
            )
            continue
        policy = policies[i]
        if not policy.status.succeeded():
            logger.warning("round %d candidate %d: %s", round_index, i, policy.error_detail)
            results.append(
                CandidateResult(i, c.extracted_source, CandidateStatus.TRAIN_FAILED, None, policy, policy.error_detail)
            )
        else:
            logger.info("round %d candidate %d: h_mts %.4f", round_index, i, policy.h_mts)
            results.append(CandidateResult(i, c.extracted_source, CandidateStatus.OK, policy.h_mts, policy))
    return results


def select_best(results: Sequence[CandidateResult]) -> int:
    """Index of the highest h_mts among ok candidates; ties go to the lowest index."""
    ok = [r for r in results if r.status == CandidateStatus.OK]
    if not ok:
        raise ValueError("no successful candidate to select")
    return max(ok, key=lambda r: (r.h_mts, -r.index)).index


class Orchestrator:
    def __init__(
        self,
        config: RunConfig,
        backend: Optional[Backend] = None,
        progress: bool = False,
    ):
        self.config = config
        self.backend = backend or make_backend(config.llm)
        self.progress = progress
        self.run_dir = get_run_dir(config.run.out_dir)
        self.machine = RunMachine(self.run_dir)
        self.task = config.task.name
        self.schema = schema(self.task)
        self.reference = prepare_reference(config.reference)
        self.trajectory_text = trajectory_block(
            serialize_for_prompt(self.reference, config.reference.precision),
            self.reference.sample_period,
        )
        self.workers = config.run.workers or get_cpu_cores_minus_one()

    def _context(self, history: Sequence[FeedbackBlock]):
        ctx = make_context(
            self.config.task,
            self.config.llm.prompt_mode,
            self.schema,
            self.trajectory_text,
            self.config.feedback.precision,
        )
        return replace(ctx, feedback_history=tuple(history))

    def _messages(self, round_index: int, history: Sequence[FeedbackBlock]) -> list[dict[str, str]]:
        ctx = self._context(history)
        if round_index == 1:
            return build_initial_prompt(ctx)
        return build_feedback_prompt(ctx)

    def _sample_and_train(self, round_index: int, messages) -> Tuple[list[CandidateResult], int, list[dict]]:
        k = self.config.run.samples
        responses: list[dict] = []
        statuses: list[str] = []
        for attempt in (0, 1):
            candidates = sample_rewards(
                messages, k, self.backend, self.schema, round_index, attempt, self.config.llm.parallelism
            )
            responses += [
                {"attempt": attempt, "index": i, **c.to_dict()} for i, c in enumerate(candidates)
            ]
            results = train_candidates(candidates, self.config, round_index, attempt, self.workers)
            if any(r.status == CandidateStatus.OK for r in results):
                return results, attempt + 1, responses
            statuses = [r.describe() for r in results]
            logger.warning("round %d: all %d candidates failed, %s", round_index, k,
                           "re-requesting" if attempt == 0 else "giving up")
        raise RoundFailureError(round_index, statuses)

    def _evaluate_best(self, round_index: int, best: CandidateResult) -> Tuple[Optional[FeedbackScores], Optional[str]]:
        env = self.config.env
        keypoints = []
        for e in range(self.config.feedback.n_eval):
            seed = derive_seed(self.config.run.seed, EVAL_STREAM, round_index, e)
            result = rollout(best.policy.params, self.task, env.steps, seed, env=env)
            export_rollout(result, get_eval_rollout_path(self.run_dir, round_index, e))
            keypoints.append(result.keypoints)
        try:
            scores = score_rollouts(keypoints, self.reference, self.config.similarity, self.config.reference.root)
        except (SimilarityError, TrajectoryError) as e:
            logger.warning("round %d: feedback failed: %s", round_index, e)
            return None, str(e)
        return scores, None

    def run_round(self, round_index: int, records: Sequence[RoundRecord]) -> RoundRecord:
        history = [r.feedback_block() for r in records]
        messages = self._messages(round_index, history)
        write_json(get_messages_path(self.run_dir, round_index), messages)
        digest = calculate_text_sha256(canonical_json(messages))

        results, attempts, responses = self._sample_and_train(round_index, messages)
        write_jsonl(get_responses_path(self.run_dir, round_index), responses)
        for r in results:
            write_text(get_candidate_path(self.run_dir, round_index, r.index), r.source + "\n")
        write_jsonl(
            get_policies_path(self.run_dir, round_index),
            [{"index": r.index, "policy": r.policy.to_dict() if r.policy else None} for r in results],
        )

        best_index = select_best(results)
        best = results[best_index]
        dtw, feedback_error = self._evaluate_best(round_index, best)

        previous = records[-1] if records else None
        if previous is None or best.h_mts > previous.best_so_far_score:
            if previous is not None:
                logger.info("round %d improves the best score %.4f -> %.4f",
                            round_index, previous.best_so_far_score, best.h_mts)
            so_far = (best.h_mts, best.source, round_index)
        else:
            so_far = (previous.best_so_far_score, previous.best_so_far_source, previous.best_so_far_round)

        record = RoundRecord(
            round=round_index,
            prompt_digest=digest,
            attempts=attempts,
            candidates=tuple(results),
            best_index=best_index,
            dtw_feedback=dtw,
            feedback_error=feedback_error,
            best_so_far_score=so_far[0],
            best_so_far_source=so_far[1],
            best_so_far_round=so_far[2],
        )
        write_json(get_feedback_path(self.run_dir, round_index), record.feedback_block().to_dict())
        write_json(get_record_path(self.run_dir, round_index), record.to_dict())
        return record

    def manifest(self, records: Sequence[RoundRecord]) -> RunManifest:
        last = records[-1]
        sim = self.config.similarity
        return RunManifest(
            config=self.config.snapshot(include_location=False),
            config_hash=self.config.config_hash(),
            seed=self.config.run.seed,
            rounds=tuple(records),
            final_reward_source=last.best_so_far_source,
            final_score=last.best_so_far_score,
            final_round=last.best_so_far_round,
            flags={
                "cost_normalization": sim.cost_normalization.value,
                "radius": sim.radius,
                "autocorr_threshold": sim.autocorr_threshold,
                "comparison_normalization": COMPARISON_NORMALIZATION,
                "reference_normalization": self.config.reference.normalization.value,
                "feedback_source": FEEDBACK_SOURCE,
                "prompt_mode": self.config.llm.prompt_mode.value,
                "temperature": self.config.llm.temperature,
                "n_eval": self.config.feedback.n_eval,
                "optimizer": "cem",
            },
        )

    def _write_metadata(self, **values: str) -> None:
        path = get_metadata_path(self.run_dir)
        try:
            metadata = read_json(path)
        except (OSError, ValueError):
            metadata = {}
        metadata.update(values)
        write_json(path, metadata)

    def run(self, resume: bool = False) -> RunManifest:
        state, last_round = self.machine.get_state()
        if state != RunState.NOT_STARTED and not resume:
            raise RunDirectoryError(f"{self.run_dir} already holds a run; resume it instead")

        records: list[RoundRecord] = []
        if resume and state != RunState.NOT_STARTED:
            records = [
                RoundRecord.from_dict(read_json(get_record_path(self.run_dir, n)))
                for n in range(1, last_round + 1)
            ]
            logger.info("resuming %s after round %d", self.run_dir, last_round)
        else:
            write_text(get_config_snapshot_path(self.run_dir), dump_config(self.config))
            self._write_metadata(started_at=_now())

        rounds = range(len(records) + 1, self.config.run.rounds + 1)
        for n in tqdm(rounds, desc="rounds", unit="round", disable=not self.progress):
            logger.info("round %d of %d", n, self.config.run.rounds)
            records.append(self.run_round(n, records))
            self.machine.set_state(RunState.ROUND_DONE, n)

        manifest = self.manifest(records)
        write_json(get_manifest_path(self.run_dir), manifest.to_dict())
        self.machine.set_state(RunState.FINISHED, len(records))
        self._write_metadata(finished_at=_now())
        return manifest


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def run(config: RunConfig, backend: Optional[Backend] = None, resume: bool = False, progress: bool = False) -> RunManifest:
    return Orchestrator(config, backend, progress).run(resume)


def resume_config(run_dir: str) -> RunConfig:
    """The snapshot config of an existing run, pointed at that run directory."""
    return load_config(get_config_snapshot_path(get_run_dir(run_dir))).with_overrides(out_dir=run_dir)


def best_so_far_curve(manifest: RunManifest) -> list[float]:
    return [r.best_so_far_score for r in manifest.rounds]


def round_dtw_total(record: RoundRecord) -> float:
    if record.dtw_feedback is None:
        return math.inf
    return math.fsum(record.dtw_feedback.per_joint.values())
