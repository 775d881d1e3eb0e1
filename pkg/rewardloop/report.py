import csv
import io
from typing import Optional

from rewardloop.orchestrator import RunManifest, round_dtw_total
from rewardloop.utils import write_text


class ScoreUndefinedError(Exception):
    pass


def human_normalized_score(method: float, sparse: float, human: float) -> float:
    """(method - sparse) / |human - sparse|; 1.0 matches the hand-designed reward."""
    if human == sparse:
        raise ScoreUndefinedError(f"human and sparse baselines are both {human}")
    return (method - sparse) / abs(human - sparse)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    if value is None:
        return "n/a"
    return f"{value:.{digits}f}"


def _joints(manifest: RunManifest) -> list[str]:
    names = set()
    for r in manifest.rounds:
        if r.dtw_feedback is not None:
            names.update(r.dtw_feedback.per_joint)
    return sorted(names)


def render_report(manifest: RunManifest, sparse: Optional[float] = None, human: Optional[float] = None) -> str:
    lines = [
        f"config {manifest.config_hash[:12]}  seed {manifest.seed}  rounds {len(manifest.rounds)}",
        "",
        f"{'round':>5}  {'best_h_mts':>12}  {'best_so_far':>12}  {'dtw_total':>12}",
    ]
    for r in manifest.rounds:
        dtw = round_dtw_total(r) if r.dtw_feedback is not None else None
        lines.append(
            f"{r.round:>5}  {_fmt(r.best.h_mts):>12}  {_fmt(r.best_so_far_score):>12}  {_fmt(dtw):>12}"
        )

    lines += ["", f"final score: {_fmt(manifest.final_score)} (round {manifest.final_round})"]
    if sparse is not None and human is not None:
        normalized = human_normalized_score(manifest.final_score, sparse, human)
        lines.append(
            f"human normalized score: {_fmt(normalized)} (sparse {_fmt(sparse)}, human {_fmt(human)})"
        )
    else:
        lines.append("human normalized score: n/a (no baselines given)")

    joints = _joints(manifest)
    lines += ["", "per-joint DTW (lower is more similar)"]
    header = f"{'joint':<10}" + "".join(f"{'round ' + str(r.round):>12}" for r in manifest.rounds)
    lines.append(header)
    for name in joints:
        row = f"{name:<10}"
        for r in manifest.rounds:
            value = r.dtw_feedback.per_joint.get(name) if r.dtw_feedback else None
            row += f"{_fmt(value):>12}"
        lines.append(row)

    failed = [r for r in manifest.rounds if r.feedback_error]
    for r in failed:
        lines.append(f"round {r.round} feedback failed: {r.feedback_error}")

    lines += ["", "final reward:", manifest.final_reward_source]
    return "\n".join(lines) + "\n"


def score_table(manifest: RunManifest, sparse: Optional[float] = None, human: Optional[float] = None) -> str:
    joints = _joints(manifest)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "best_h_mts", "best_so_far", "human_normalized"] + [f"dtw_{j}" for j in joints])
    for r in manifest.rounds:
        normalized = None
        if sparse is not None and human is not None:
            normalized = human_normalized_score(r.best_so_far_score, sparse, human)
        per_joint = r.dtw_feedback.per_joint if r.dtw_feedback else {}
        writer.writerow(
            [r.round, _fmt(r.best.h_mts, 6), _fmt(r.best_so_far_score, 6), _fmt(normalized, 6)]
            + [_fmt(per_joint.get(j), 6) for j in joints]
        )
    return buf.getvalue()


def report(
    manifest: RunManifest,
    report_path: str,
    table_path: str,
    sparse: Optional[float] = None,
    human: Optional[float] = None,
) -> str:
    text = render_report(manifest, sparse, human)
    write_text(report_path, text)
    write_text(table_path, score_table(manifest, sparse, human))
    return text
