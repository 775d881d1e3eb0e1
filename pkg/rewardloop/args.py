import argparse
from typing import Optional, Sequence

cached_args = None


def parse_args(argv: Optional[Sequence[str]] = None) -> None:
    global cached_args
    parser = argparse.ArgumentParser(
        prog="run.py",
        description="Refine reward programs for a gait task against a reference clip.",
    )
    parser.add_argument("--log-level", default="INFO", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the refinement loop")
    run.add_argument("--config", default="config.toml", help="config file")
    run.add_argument("--out", help="run directory (overrides run.out_dir)")
    run.add_argument("--rounds", type=int, help="number of rounds N")
    run.add_argument("--samples", type=int, help="reward candidates per round K")
    run.add_argument("--seed", type=int, help="run seed")
    run.add_argument("--backend", choices=["http", "mock"], help="completion backend")
    run.add_argument("--mock-script", help="JSONL script for the mock backend")
    run.add_argument("--resume", metavar="DIR", help="continue the run stored in DIR")

    score = sub.add_parser("score", help="per-joint DTW between two trajectory files")
    score.add_argument("clip_a", help="first trajectory file")
    score.add_argument("clip_b", help="second trajectory file")
    score.add_argument("--config", default="config.toml", help="config file for similarity options")
    score.add_argument("--out", help="write the scores as JSON here")

    report = sub.add_parser("report", help="summarize a finished run")
    report.add_argument("--manifest", required=True, help="manifest.json of the run")
    report.add_argument("--sparse", type=float, help="H_mts of the sparse reward baseline")
    report.add_argument("--human", type=float, help="H_mts of the hand-designed reward baseline")
    report.add_argument("--baselines", help="baselines.json written by the baselines command")

    validate = sub.add_parser("validate-reward", help="parse and check a reward program")
    validate.add_argument("source", help="reward file, or - for stdin")
    validate.add_argument("--task", choices=["velocity_tracking", "run_fast"], help="task schema")
    validate.add_argument("--config", default="config.toml", help="config file naming the task")

    baselines = sub.add_parser("baselines", help="train the sparse and hand-designed rewards")
    baselines.add_argument("--config", default="config.toml", help="config file")
    baselines.add_argument("--out", help="directory for baselines.json")
    baselines.add_argument("--seed", type=int, help="run seed")

    cached_args = parser.parse_args(argv)


def get_command() -> str:
    return cached_args.command  # type: ignore


def get_log_level() -> str:
    return cached_args.log_level  # type: ignore


def get_arg(name: str):
    """A subcommand option, None when the subcommand does not define it."""
    return getattr(cached_args, name, None)
