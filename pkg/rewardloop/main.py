import logging
import os
import sys
from typing import Optional, Sequence

from rewardloop.args import get_arg, get_command, get_log_level, parse_args
from rewardloop.baselines import train_baselines
from rewardloop.config import (
    RunConfig,
    Task,
    get_reference_config,
    get_similarity_config,
    get_task_config,
    parse_config,
    set_config,
)
from rewardloop.feedback import score_pair
from rewardloop.gait_env import GaitEnvError, schema
from rewardloop.llm import LlmError
from rewardloop.log import setup_logging
from rewardloop.orchestrator import (
    RoundFailureError,
    RunDirectoryError,
    load_manifest,
    resume_config,
    run,
)
from rewardloop.paths import get_baselines_path, get_report_path, get_run_dir, get_score_table_path
from rewardloop.report import ScoreUndefinedError, report
from rewardloop.reward_dsl import RewardDslError, compile_reward, pretty_print
from rewardloop.similarity import SimilarityError
from rewardloop.trajectory import TrajectoryError
from rewardloop.utils import DirectoryCreationError, read_json, read_text, write_json

logger = logging.getLogger("rewardloop")

HANDLED_ERRORS = (
    TrajectoryError,
    SimilarityError,
    RewardDslError,
    GaitEnvError,
    LlmError,
    RoundFailureError,
    RunDirectoryError,
    ScoreUndefinedError,
    DirectoryCreationError,
    FileNotFoundError,
    ValueError,
)


def _load_or_default(path: str) -> None:
    if os.path.exists(path):
        parse_config(path)
        return
    logger.info("%s not found, using the default configuration", path)
    set_config(RunConfig())


def cmd_run() -> None:
    resume_dir = get_arg("resume")
    if resume_dir:
        config = resume_config(resume_dir)
    else:
        config = parse_config(get_arg("config")).with_overrides(
            rounds=get_arg("rounds"),
            samples=get_arg("samples"),
            seed=get_arg("seed"),
            backend=get_arg("backend"),
            mock_script=get_arg("mock_script"),
            out_dir=get_arg("out"),
        )
    set_config(config)
    manifest = run(config, resume=bool(resume_dir), progress=True)
    print(f"final score {manifest.final_score:.4f} from round {manifest.final_round}")
    print(manifest.final_reward_source)


def cmd_score() -> None:
    _load_or_default(get_arg("config"))
    reference = get_reference_config()
    scores = score_pair(
        get_arg("clip_a"),
        get_arg("clip_b"),
        get_similarity_config(),
        reference.root,
        reference.normalization,
        reference.joint_map,
    )
    for name, value in scores.items():
        print(f"{name}: {value:.4f}")
    if get_arg("out"):
        write_json(get_arg("out"), scores)


def cmd_report() -> None:
    manifest_path = get_arg("manifest")
    manifest = load_manifest(manifest_path)
    sparse, human = get_arg("sparse"), get_arg("human")
    if get_arg("baselines"):
        baselines = read_json(get_arg("baselines"))
        sparse = baselines["sparse"] if sparse is None else sparse
        human = baselines["human"] if human is None else human
    run_dir = os.path.dirname(os.path.abspath(manifest_path))
    text = report(manifest, get_report_path(run_dir), get_score_table_path(run_dir), sparse, human)
    print(text, end="")


def cmd_validate_reward() -> None:
    path = get_arg("source")
    source = sys.stdin.read() if path == "-" else read_text(path)
    if get_arg("task"):
        task = Task(get_arg("task"))
    else:
        _load_or_default(get_arg("config"))
        task = get_task_config().name
    program = compile_reward(source, schema(task))
    print(pretty_print(program))
    print(f"# variables: {', '.join(sorted(program.referenced_vars)) or '(none)'}")


def cmd_baselines() -> None:
    config = parse_config(get_arg("config")).with_overrides(seed=get_arg("seed"), out_dir=get_arg("out"))
    scores = train_baselines(config, progress=True)
    path = get_baselines_path(get_run_dir(config.run.out_dir))
    write_json(path, scores)
    print(f"sparse {scores['sparse']:.4f}  human {scores['human']:.4f}  -> {path}")


COMMANDS = {
    "run": cmd_run,
    "score": cmd_score,
    "report": cmd_report,
    "validate-reward": cmd_validate_reward,
    "baselines": cmd_baselines,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parse_args(argv)
    setup_logging(get_log_level())

    try:
        COMMANDS[get_command()]()
    except HANDLED_ERRORS as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1
    return 0
