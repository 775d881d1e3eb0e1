from dataclasses import dataclass, field, replace
from typing import Any, Optional

from rewardloop.config import PromptMode, Task, TaskConfig
from rewardloop.gait_env import EnvSchema
from rewardloop.llm import PromptPreconditionError
from rewardloop.reward_dsl import GRAMMAR

Messages = list[dict[str, str]]

# how many of the worst joints the feedback names explicitly
WORST_JOINTS_SHOWN = 2

GENERATION_RULES = """
You write reward functions for a legged robot controller.
- Write the reward in the reward language below; nothing else is executed.
- Use useful variables from the environment as inputs; only the listed variables exist.
- The reward is evaluated once per step and summed over the episode; higher is better.
- Keep every term finite: guard divisions, avoid exp of large positive values.
- Combine a task term with terms that shape the gait.
""".strip()

SYSTEM_TEMPLATE = """
{rules}

Reward language grammar:
{grammar}

Environment variables (name (unit): meaning):
{schema}
""".strip()

TASK_TEMPLATES = {
    Task.VELOCITY_TRACKING: (
        "Make the {agent} {behavior} while tracking the commanded velocity "
        "(target_vel_x, target_vel_y), which changes from episode to episode."
    ),
    Task.RUN_FAST: "Make the {agent} {behavior} forward along +x as fast as possible.",
}

ABSTRACT_TEMPLATE = "Make the {agent} {behavior} like a real {animal}."

TRAJECTORY_TEMPLATE = """
The motion should resemble this reference gait. Each line is one joint's
trajectory in the sagittal plane, as (horizontal, vertical) pairs in [0, 1],
sampled every {period:.3f} s:
{trajectory}
""".strip()

OUTPUT_FORMAT = (
    "Answer with exactly one fenced code block tagged `reward` that contains the "
    "whole reward program, for example:\n```reward\nlet e = root_vel_x - 1.0\nexp(-abs(e))\n```"
)

FEEDBACK_SCORE_TEMPLATE = (
    "Round {round} feedback: the reward above trained a policy whose task score "
    "(mean sparse reward, higher is better) is {score:.4f}."
)

FEEDBACK_DTW_TEMPLATE = """
Per-joint DTW distance between the trained gait and the reference (lower is more similar):
{lines}
Improve the reward so the joints with the highest DTW scores ({worst}) move more like the reference.
""".strip()

FEEDBACK_ERROR_TEMPLATE = "Comparing the trained gait with the reference failed: {error}"

FEEDBACK_PLAIN = "Improve the reward so the policy performs the task better."


@dataclass(frozen=True)
class FeedbackBlock:
    round: int
    best_reward_source: str
    best_score: float
    dtw_scores: dict[str, float]
    # set when the comparison with the reference failed
    error: Optional[str] = None

    def __post_init__(self):
        if self.round < 1:
            raise ValueError(f"feedback round must be >= 1, got {self.round}")
        if not self.dtw_scores and self.error is None:
            raise ValueError("feedback needs DTW scores or an error")

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "best_reward_source": self.best_reward_source,
            "best_score": self.best_score,
            "dtw_scores": dict(sorted(self.dtw_scores.items())),
            "error": self.error,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "FeedbackBlock":
        return FeedbackBlock(
            round=int(data["round"]),
            best_reward_source=data["best_reward_source"],
            best_score=float(data["best_score"]),
            dtw_scores={k: float(v) for k, v in data["dtw_scores"].items()},
            error=data.get("error"),
        )


@dataclass(frozen=True)
class PromptContext:
    task_description: str
    env_schema_text: str
    generation_rules: str
    trajectory_text: str
    mode: PromptMode = PromptMode.VIDEO
    feedback_history: tuple[FeedbackBlock, ...] = field(default=())
    score_precision: int = 2


def task_description(task: TaskConfig, mode: PromptMode) -> str:
    if task.description:
        return task.description
    words = {"agent": task.agent, "behavior": task.behavior, "animal": task.animal}
    if mode == PromptMode.ABSTRACT_DESCRIPTION:
        return ABSTRACT_TEMPLATE.format(**words)
    return TASK_TEMPLATES[task.name].format(**words)


def env_schema_text(env_schema: EnvSchema) -> str:
    return SYSTEM_TEMPLATE.format(rules=GENERATION_RULES, grammar=GRAMMAR, schema=env_schema.describe())


def trajectory_block(serialized: str, sample_period: float) -> str:
    return TRAJECTORY_TEMPLATE.format(period=sample_period, trajectory=serialized)


def make_context(
    task: TaskConfig,
    mode: PromptMode,
    env_schema: EnvSchema,
    trajectory_text: str,
    score_precision: int = 2,
) -> PromptContext:
    return PromptContext(
        task_description=task_description(task, mode),
        env_schema_text=env_schema_text(env_schema),
        generation_rules=GENERATION_RULES,
        trajectory_text=trajectory_text if mode.shows_trajectory() else "",
        mode=mode,
        score_precision=score_precision,
    )


def _check_context(ctx: PromptContext) -> None:
    for name in ("task_description", "env_schema_text", "generation_rules"):
        if not getattr(ctx, name):
            raise PromptPreconditionError(f"prompt context has an empty {name}")
    if ctx.mode.shows_trajectory() and not ctx.trajectory_text:
        raise PromptPreconditionError(f"prompt mode {ctx.mode.value} needs trajectory text")


def build_initial_prompt(ctx: PromptContext) -> Messages:
    if ctx.feedback_history:
        raise PromptPreconditionError("the initial prompt takes no feedback history")
    _check_context(ctx)

    parts = [ctx.task_description]
    if ctx.mode.shows_trajectory():
        parts.append(ctx.trajectory_text)
    parts.append(OUTPUT_FORMAT)
    return [
        {"role": "system", "content": ctx.env_schema_text},
        {"role": "user", "content": "\n\n".join(parts)},
    ]


def format_dtw_lines(scores: dict[str, float], precision: int) -> str:
    return "\n".join(f"{name}: {scores[name]:.{precision}f}" for name in sorted(scores))


def worst_joints(scores: dict[str, float], count: int = WORST_JOINTS_SHOWN) -> list[str]:
    ranked = sorted(scores, key=lambda name: (-scores[name], name))
    return ranked[:count]


def feedback_message(block: FeedbackBlock, mode: PromptMode, precision: int) -> str:
    parts = [FEEDBACK_SCORE_TEMPLATE.format(round=block.round, score=block.best_score)]
    if mode.shows_dtw():
        if block.error is not None:
            parts.append(FEEDBACK_ERROR_TEMPLATE.format(error=block.error))
        else:
            parts.append(
                FEEDBACK_DTW_TEMPLATE.format(
                    lines=format_dtw_lines(block.dtw_scores, precision),
                    worst=", ".join(worst_joints(block.dtw_scores)),
                )
            )
    else:
        parts.append(FEEDBACK_PLAIN)
    parts.append(OUTPUT_FORMAT)
    return "\n\n".join(parts)


def build_feedback_prompt(ctx: PromptContext) -> Messages:
    if not ctx.feedback_history:
        raise PromptPreconditionError("the feedback prompt needs at least one completed round")

    messages = build_initial_prompt(replace(ctx, feedback_history=()))
    for block in ctx.feedback_history:
        messages.append(
            {"role": "assistant", "content": f"```reward\n{block.best_reward_source}\n```"}
        )
        messages.append(
            {"role": "user", "content": feedback_message(block, ctx.mode, ctx.score_precision)}
        )
    return messages
