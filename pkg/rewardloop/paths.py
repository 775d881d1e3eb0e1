import os


def get_run_dir(out_dir: str) -> str:
    return os.path.abspath(out_dir)


def get_config_snapshot_path(run_dir: str) -> str:
    return f"{run_dir}/config.toml"


def get_run_state_path(run_dir: str) -> str:
    return f"{run_dir}/run_state.json"


def get_metadata_path(run_dir: str) -> str:
    return f"{run_dir}/metadata.json"


def get_manifest_path(run_dir: str) -> str:
    return f"{run_dir}/manifest.json"


def get_baselines_path(run_dir: str) -> str:
    return f"{run_dir}/baselines.json"


def get_report_path(run_dir: str) -> str:
    return f"{run_dir}/report.txt"


def get_score_table_path(run_dir: str) -> str:
    return f"{run_dir}/scores.csv"


def get_round_dir(run_dir: str, round_index: int) -> str:
    return f"{run_dir}/rounds/round_{round_index:03d}"


def get_messages_path(run_dir: str, round_index: int) -> str:
    return f"{get_round_dir(run_dir, round_index)}/messages.json"


def get_responses_path(run_dir: str, round_index: int) -> str:
    return f"{get_round_dir(run_dir, round_index)}/responses.jsonl"


def get_candidate_path(run_dir: str, round_index: int, index: int) -> str:
    return f"{get_round_dir(run_dir, round_index)}/candidates/candidate_{index:02d}.reward"


def get_policies_path(run_dir: str, round_index: int) -> str:
    return f"{get_round_dir(run_dir, round_index)}/policies.jsonl"


def get_feedback_path(run_dir: str, round_index: int) -> str:
    return f"{get_round_dir(run_dir, round_index)}/feedback.json"


def get_record_path(run_dir: str, round_index: int) -> str:
    return f"{get_round_dir(run_dir, round_index)}/record.json"


def get_eval_rollout_path(run_dir: str, round_index: int, eval_index: int) -> str:
    return f"{get_round_dir(run_dir, round_index)}/rollouts/eval_{eval_index:02d}.jsonl"
