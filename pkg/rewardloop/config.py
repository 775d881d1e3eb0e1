import logging
import os
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Tuple

import toml

from rewardloop.utils import calculate_text_sha256, canonical_json

logger = logging.getLogger(__name__)

API_KEY_ENV = "GAITLOOP_API_KEY"
FALLBACK_API_KEY_ENV = "OPENAI_API_KEY"
BASE_URL_ENV = "GAITLOOP_BASE_URL"

cached_config: Optional["RunConfig"] = None


class Task(Enum):
    VELOCITY_TRACKING = "velocity_tracking"
    RUN_FAST = "run_fast"


class PromptMode(Enum):
    VIDEO = "video"
    NO_VIDEO_FEEDBACK = "no_video_feedback"
    TEXT_ONLY = "text_only"
    ABSTRACT_DESCRIPTION = "abstract_description"

    def shows_trajectory(self) -> bool:
        return self in (PromptMode.VIDEO, PromptMode.NO_VIDEO_FEEDBACK)

    def shows_dtw(self) -> bool:
        return self == PromptMode.VIDEO


class BackendKind(Enum):
    HTTP = "http"
    MOCK = "mock"


class ReferenceNormalization(Enum):
    FRAME = "frame"
    BBOX = "bbox"
    # the clip is already normalized (or in sim3d and gets projected)
    NONE = "none"


class CostNormalization(Enum):
    SUM = "sum"
    MEAN = "mean"


def _enum(cls, conf_sec: dict[str, Any], key: str, default):
    value = conf_sec.get(key, default.value)
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ValueError(f"Invalid value '{value}' for '{key}', expected one of: {allowed}")


def _positive_int(conf_sec: dict[str, Any], key: str, default: int) -> int:
    value = int(conf_sec.get(key, default))
    if value < 1:
        raise ValueError(f"'{key}' must be >= 1, got {value}")
    return value


def _positive_float(conf_sec: dict[str, Any], key: str, default: float) -> float:
    value = float(conf_sec.get(key, default))
    if not value > 0:
        raise ValueError(f"'{key}' must be > 0, got {value}")
    return value


def _range(conf_sec: dict[str, Any], key: str, default: Tuple[float, float]) -> Tuple[float, float]:
    value = conf_sec.get(key, list(default))
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValueError(f"'{key}' must be a [low, high] pair")
    lo, hi = float(value[0]), float(value[1])
    if lo > hi:
        raise ValueError(f"'{key}' low bound {lo} exceeds high bound {hi}")
    return (lo, hi)


@dataclass
class TaskConfig:
    name: Task = Task.VELOCITY_TRACKING
    # words of the abstract behaviour sentence
    agent: str = "legged robot"
    behavior: str = "amble"
    animal: str = "dog"
    description: str = ""

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "TaskConfig":
        return TaskConfig(
            name=_enum(Task, conf_sec, "name", Task.VELOCITY_TRACKING),
            agent=str(conf_sec.get("agent", "legged robot")),
            behavior=str(conf_sec.get("behavior", "amble")),
            animal=str(conf_sec.get("animal", "dog")),
            description=str(conf_sec.get("description", "")),
        )


@dataclass
class ReferenceConfig:
    path: str = "reference.jsonl"
    stride: int = 1
    normalization: ReferenceNormalization = ReferenceNormalization.FRAME
    root: str = "hip"
    precision: int = 2
    # reference joint name -> robot joint name
    joint_map: dict[str, str] = field(default_factory=dict)

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "ReferenceConfig":
        precision = int(conf_sec.get("precision", 2))
        if precision < 0:
            raise ValueError(f"'precision' must be >= 0, got {precision}")
        joint_map = conf_sec.get("joint_map", {})
        if not isinstance(joint_map, dict):
            raise ValueError("'joint_map' must be a table.")
        return ReferenceConfig(
            path=str(conf_sec.get("path", "reference.jsonl")),
            stride=_positive_int(conf_sec, "stride", 1),
            normalization=_enum(
                ReferenceNormalization, conf_sec, "normalization", ReferenceNormalization.FRAME
            ),
            root=str(conf_sec.get("root", "hip")),
            precision=precision,
            joint_map={str(k): str(v) for k, v in joint_map.items()},
        )


@dataclass
class EnvConfig:
    steps: int = 300
    dt: float = 0.01
    noise_sigma: float = 0.01
    target_vel_x_range: Tuple[float, float] = (0.5, 1.5)
    target_vel_y_range: Tuple[float, float] = (-0.3, 0.3)

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "EnvConfig":
        steps = int(conf_sec.get("steps", 300))
        if steps < 2:
            raise ValueError(f"'steps' must be >= 2, got {steps}")
        noise_sigma = float(conf_sec.get("noise_sigma", 0.01))
        if noise_sigma < 0:
            raise ValueError(f"'noise_sigma' must be >= 0, got {noise_sigma}")
        return EnvConfig(
            steps=steps,
            dt=_positive_float(conf_sec, "dt", 0.01),
            noise_sigma=noise_sigma,
            target_vel_x_range=_range(conf_sec, "target_vel_x_range", (0.5, 1.5)),
            target_vel_y_range=_range(conf_sec, "target_vel_y_range", (-0.3, 0.3)),
        )


@dataclass
class TrainerConfig:
    budget: int = 2000
    population: int = 32
    elite_fraction: float = 0.25
    rollouts_per_eval: int = 2
    sigma_floor: float = 1e-3
    holdout_episodes: int = 8
    # threads evaluating one generation
    workers: int = 1

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "TrainerConfig":
        population = _positive_int(conf_sec, "population", 32)
        budget = _positive_int(conf_sec, "budget", 2000)
        elite_fraction = float(conf_sec.get("elite_fraction", 0.25))
        if not 0 < elite_fraction <= 1:
            raise ValueError(f"'elite_fraction' must be in (0, 1], got {elite_fraction}")
        return TrainerConfig(
            budget=budget,
            population=population,
            elite_fraction=elite_fraction,
            rollouts_per_eval=_positive_int(conf_sec, "rollouts_per_eval", 2),
            sigma_floor=_positive_float(conf_sec, "sigma_floor", 1e-3),
            holdout_episodes=_positive_int(conf_sec, "holdout_episodes", 8),
            workers=_positive_int(conf_sec, "workers", 1),
        )


@dataclass
class SimilarityConfig:
    radius: int = 2
    autocorr_threshold: float = 0.2
    cost_normalization: CostNormalization = CostNormalization.SUM

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "SimilarityConfig":
        radius = int(conf_sec.get("radius", 2))
        if radius < 0:
            raise ValueError(f"'radius' must be >= 0, got {radius}")

        value = conf_sec.get("cost_normalization", "sum")
        try:
            cost_normalization = CostNormalization(value)
        except ValueError:
            logger.warning(
                "Invalid cost_normalization '%s' config found. Using default 'sum'.", value
            )
            cost_normalization = CostNormalization.SUM

        return SimilarityConfig(
            radius=radius,
            autocorr_threshold=float(conf_sec.get("autocorr_threshold", 0.2)),
            cost_normalization=cost_normalization,
        )


@dataclass
class FeedbackConfig:
    n_eval: int = 8
    precision: int = 2

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "FeedbackConfig":
        return FeedbackConfig(
            n_eval=_positive_int(conf_sec, "n_eval", 8),
            precision=int(conf_sec.get("precision", 2)),
        )


@dataclass
class LlmConfig:
    backend: BackendKind = BackendKind.HTTP
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    temperature: float = 1.0
    max_retries: int = 3
    backoff_seconds: float = 1.0
    timeout_seconds: float = 120.0
    parallelism: int = 4
    mock_script: str = ""
    prompt_mode: PromptMode = PromptMode.VIDEO

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "LlmConfig":
        max_retries = int(conf_sec.get("max_retries", 3))
        if max_retries < 0:
            raise ValueError(f"'max_retries' must be >= 0, got {max_retries}")
        backoff = float(conf_sec.get("backoff_seconds", 1.0))
        if backoff < 0:
            raise ValueError(f"'backoff_seconds' must be >= 0, got {backoff}")
        return LlmConfig(
            backend=_enum(BackendKind, conf_sec, "backend", BackendKind.HTTP),
            base_url=str(conf_sec.get("base_url", "https://api.openai.com/v1")),
            model=str(conf_sec.get("model", "gpt-4o")),
            temperature=float(conf_sec.get("temperature", 1.0)),
            max_retries=max_retries,
            backoff_seconds=backoff,
            timeout_seconds=_positive_float(conf_sec, "timeout_seconds", 120.0),
            parallelism=_positive_int(conf_sec, "parallelism", 4),
            mock_script=str(conf_sec.get("mock_script", "")),
            prompt_mode=_enum(PromptMode, conf_sec, "prompt_mode", PromptMode.VIDEO),
        )

    def resolved_base_url(self) -> str:
        # environment wins over the config file
        env_url = os.environ.get(BASE_URL_ENV)
        if env_url:
            return env_url
        return self.base_url

    @staticmethod
    def api_key() -> Optional[str]:
        return os.environ.get(API_KEY_ENV) or os.environ.get(FALLBACK_API_KEY_ENV)


@dataclass
class RunSection:
    rounds: int = 5
    samples: int = 16
    seed: int = 0
    out_dir: str = "runs/latest"
    # candidate training processes; 0 means cores minus one
    workers: int = 0

    @staticmethod
    def parse(conf_sec: dict[str, Any]) -> "RunSection":
        seed = int(conf_sec.get("seed", 0))
        if seed < 0:
            raise ValueError(f"'seed' must be >= 0, got {seed}")
        workers = int(conf_sec.get("workers", 0))
        if workers < 0:
            raise ValueError(f"'workers' must be >= 0, got {workers}")
        return RunSection(
            rounds=_positive_int(conf_sec, "rounds", 5),
            samples=_positive_int(conf_sec, "samples", 16),
            seed=seed,
            out_dir=str(conf_sec.get("out_dir", "runs/latest")),
            workers=workers,
        )


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    run: RunSection = field(default_factory=RunSection)

    @staticmethod
    def parse(parsed_toml: dict[str, Any]) -> "RunConfig":
        return RunConfig(
            task=TaskConfig.parse(parsed_toml.get("task", {})),
            reference=ReferenceConfig.parse(parsed_toml.get("reference", {})),
            env=EnvConfig.parse(parsed_toml.get("env", {})),
            trainer=TrainerConfig.parse(parsed_toml.get("trainer", {})),
            similarity=SimilarityConfig.parse(parsed_toml.get("similarity", {})),
            feedback=FeedbackConfig.parse(parsed_toml.get("feedback", {})),
            llm=LlmConfig.parse(parsed_toml.get("llm", {})),
            run=RunSection.parse(parsed_toml.get("run", {})),
        )

    def snapshot(self, include_location: bool = True) -> dict[str, Any]:
        """
        JSON and TOML compatible dict; `RunConfig.parse` of it gives an equal
        config. Without the location, `run.out_dir` is left out so runs
        written to different directories compare equal.
        """

        def plain(value):
            if isinstance(value, Enum):
                return value.value
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value

        snap = {
            section: {k: plain(v) for k, v in values.items()}
            for section, values in asdict(self).items()
        }
        if not include_location:
            del snap["run"]["out_dir"]
        return snap

    def config_hash(self) -> str:
        return calculate_text_sha256(canonical_json(self.snapshot(include_location=False)))

    def with_overrides(
        self,
        rounds: Optional[int] = None,
        samples: Optional[int] = None,
        seed: Optional[int] = None,
        backend: Optional[str] = None,
        mock_script: Optional[str] = None,
        out_dir: Optional[str] = None,
    ) -> "RunConfig":
        run = self.run
        if rounds is not None:
            run = replace(run, rounds=rounds)
        if samples is not None:
            run = replace(run, samples=samples)
        if seed is not None:
            run = replace(run, seed=seed)
        if out_dir is not None:
            run = replace(run, out_dir=out_dir)
        llm = self.llm
        if backend is not None:
            llm = replace(llm, backend=BackendKind(backend))
        if mock_script is not None:
            llm = replace(llm, mock_script=mock_script)
        # re-validate through parse so CLI values obey the same rules
        return RunConfig.parse(replace(self, run=run, llm=llm).snapshot())


def load_config(path: str) -> RunConfig:
    with open(os.path.abspath(path), "r") as f:
        parsed_toml = toml.load(f)
    return RunConfig.parse(parsed_toml)


def dump_config(config: RunConfig) -> str:
    return toml.dumps(config.snapshot())


def parse_config(path: str = "config.toml") -> RunConfig:
    global cached_config
    cached_config = load_config(path)
    return cached_config


def set_config(config: RunConfig) -> None:
    global cached_config
    cached_config = config




def get_task_config() -> TaskConfig:
    return cached_config.task  # type: ignore


def get_reference_config() -> ReferenceConfig:
    return cached_config.reference  # type: ignore


def get_similarity_config() -> SimilarityConfig:
    return cached_config.similarity  # type: ignore
