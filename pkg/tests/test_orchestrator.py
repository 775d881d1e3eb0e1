import math
import os
import shutil
from dataclasses import replace

import pytest

from rewardloop.orchestrator import (
    CandidateResult,
    CandidateStatus,
    Orchestrator,
    RoundFailureError,
    RunDirectoryError,
    best_so_far_curve,
    load_manifest,
    resume_config,
    round_dtw_total,
    run,
    select_best,
)
from rewardloop.paths import (
    get_candidate_path,
    get_eval_rollout_path,
    get_manifest_path,
    get_messages_path,
    get_responses_path,
    get_round_dir,
)
from rewardloop.state import RunMachine, RunState
from rewardloop.utils import read_json, read_jsonl

JOINTS = ("hip", "knee", "ankle", "toe")
LOOP_BUDGET = 1600
TRACK = "abs(root_vel_x - target_vel_x{bias}) + abs(root_vel_y - target_vel_y)"


def _tracking(bias):
    return "-(" + TRACK.format(bias=f" - {bias}" if bias else "") + ")"


def _busy_legs():
    # rewards fast, large joint swings on top of tracking with a 0.8 m/s surplus
    swing = " + ".join(f"joint_{j}_vz * joint_{j}_vz" for j in JOINTS)
    return _tracking(0.8) + f" + 0.01 * ({swing})"


def _matching_gait(params):
    """Tracking plus a penalty for leaving the reference ellipse of every joint and its phase lag."""
    omega = 2.0 * math.pi * params.frequency
    lines = []
    for j, offset in zip(JOINTS, params.offsets):
        lines.append(f"let z_{j} = joint_{j}_z - {offset}")
        lines.append(f"let v_{j} = joint_{j}_vz / {omega!r}")
    amp = " + ".join(
        f"abs(z_{j} * z_{j} + v_{j} * v_{j} - {a * a:.8f})" for j, a in zip(JOINTS, params.amplitudes)
    )
    lines.append(f"let amp = {amp}")
    sync = []
    for i in range(len(JOINTS) - 1):
        a, b = JOINTS[i], JOINTS[i + 1]
        scale = params.amplitudes[i] * params.amplitudes[i + 1]
        lag = params.phases[i + 1] - params.phases[i]
        sync.append(f"abs(z_{a} * z_{b} + v_{a} * v_{b} - {scale * math.cos(lag):.8f})")
        sync.append(f"abs(v_{a} * z_{b} - z_{a} * v_{b} - {scale * math.sin(lag):.8f})")
    lines.append(f"let sync = {' + '.join(sync)}")
    lines.append(f"-({TRACK.format(bias='')}) - 200 * (amp + sync)")
    return "\n".join(lines)


@pytest.fixture(scope="module")
def loop_inputs(tmp_path_factory, write_reference_clip, write_mock_script, make_params):
    base = tmp_path_factory.mktemp("loop")
    reference = write_reference_clip(base / "reference.jsonl")
    script = write_mock_script(
        base / "script.jsonl",
        [
            (1, 0, _busy_legs()),
            (1, 1, None),
            (2, 0, _tracking(0.3)),
            (2, 1, _tracking(0.6)),
            (3, 0, "1 +"),
            (3, 1, _matching_gait(make_params())),
        ],
    )
    return base, reference, script


@pytest.fixture(scope="module")
def finished_run(loop_inputs, small_config):
    base, reference, script = loop_inputs
    config = small_config(reference, script, base / "run_a", budget=LOOP_BUDGET)
    return config, run(config)


def test_every_round_improves_the_task_score(finished_run):
    _, manifest = finished_run
    first, second, third = manifest.rounds
    assert -1.1 < first.best.h_mts < -0.5
    assert second.best_index == 0
    assert -0.55 < second.best.h_mts < -0.1
    assert second.candidates[1].h_mts < second.best.h_mts
    assert third.best_index == 1
    assert third.best.h_mts > -0.15

    assert [r.best_so_far_round for r in manifest.rounds] == [1, 2, 3]
    curve = best_so_far_curve(manifest)
    assert curve[0] < curve[1] < curve[2]
    assert manifest.final_round == 3
    assert manifest.final_score == third.best.h_mts
    assert manifest.final_reward_source == third.best.source


def test_unusable_candidates_are_recorded(finished_run):
    _, manifest = finished_run
    first, _, third = manifest.rounds
    assert first.candidates[1].status == CandidateStatus.PARSE_FAILED
    assert first.candidates[1].detail.startswith("no_code_block")
    assert third.candidates[0].status == CandidateStatus.PARSE_FAILED
    assert third.candidates[0].detail.startswith("parse_error")
    assert [r.attempts for r in manifest.rounds] == [1, 1, 1]
    assert len({r.prompt_digest for r in manifest.rounds}) == 3


def test_gait_moves_toward_the_reference(finished_run):
    _, manifest = finished_run
    first, _, third = manifest.rounds
    assert first.dtw_feedback is not None
    assert third.dtw_feedback is not None
    assert sorted(third.dtw_feedback.per_joint) == sorted(JOINTS)
    assert third.dtw_feedback.rollout_count == 4
    assert round_dtw_total(third) < round_dtw_total(first)


def test_run_directory_layout(finished_run):
    config, manifest = finished_run
    run_dir = os.path.abspath(config.run.out_dir)
    assert load_manifest(get_manifest_path(run_dir)) == manifest
    assert RunMachine(run_dir).get_state() == (RunState.FINISHED, 3)

    for n in (1, 2, 3):
        messages = read_json(get_messages_path(run_dir, n))
        assert len(messages) == 2 * n
        assert [r["index"] for r in read_jsonl(get_responses_path(run_dir, n))] == [0, 1]
        assert os.path.isfile(get_candidate_path(run_dir, n, 0))
        for e in range(4):
            assert os.path.isfile(get_eval_rollout_path(run_dir, n, e))

    with open(get_candidate_path(run_dir, 2, 1)) as f:
        assert f.read() == _tracking(0.6) + "\n"


def test_manifest_records_the_configuration(finished_run):
    config, manifest = finished_run
    assert "out_dir" not in manifest.config["run"]
    assert manifest.config_hash == config.config_hash()
    assert manifest.seed == 7
    assert manifest.flags["prompt_mode"] == "video"
    assert manifest.flags["cost_normalization"] == "sum"
    assert manifest.flags["n_eval"] == 4


def _manifest_bytes(run_dir):
    with open(get_manifest_path(os.path.abspath(str(run_dir))), "rb") as f:
        return f.read()


def test_second_run_is_byte_identical(finished_run, loop_inputs, small_config):
    config, _ = finished_run
    base, reference, script = loop_inputs
    again = small_config(reference, script, base / "run_b", budget=LOOP_BUDGET)
    run(again)
    assert _manifest_bytes(base / "run_b") == _manifest_bytes(config.run.out_dir)


def test_resumed_run_matches_uninterrupted_run(finished_run, tmp_path):
    config, _ = finished_run
    resumed = tmp_path / "resumed"
    shutil.copytree(os.path.abspath(config.run.out_dir), resumed)
    shutil.rmtree(get_round_dir(str(resumed), 3))
    os.remove(get_manifest_path(str(resumed)))
    RunMachine(str(resumed)).set_state(RunState.ROUND_DONE, 2)

    manifest = run(resume_config(str(resumed)), resume=True)
    assert manifest.final_round == 3
    assert _manifest_bytes(resumed) == _manifest_bytes(config.run.out_dir)


def test_used_directory_needs_resume(finished_run):
    config, _ = finished_run
    with pytest.raises(RunDirectoryError):
        run(config)


def test_equal_score_keeps_the_earlier_best(finished_run, loop_inputs, small_config, tmp_path):
    _, manifest = finished_run
    _, reference, script = loop_inputs
    first, second, _ = manifest.rounds
    orchestrator = Orchestrator(small_config(reference, script, tmp_path / "tie", budget=LOOP_BUDGET))

    tied = replace(first, best_so_far_score=second.best.h_mts, best_so_far_source="previous")
    record = orchestrator.run_round(2, [tied])
    assert record.best.h_mts == second.best.h_mts
    assert record.best_so_far_source == "previous"
    assert record.best_so_far_round == 1

    beaten = replace(tied, best_so_far_score=second.best.h_mts - 1e-9)
    record = orchestrator.run_round(2, [beaten])
    assert record.best_so_far_source == second.best.source
    assert record.best_so_far_round == 2


def test_all_invalid_round_is_requested_again(loop_inputs, write_mock_script, small_config, tmp_path):
    _, reference, _ = loop_inputs
    script = write_mock_script(
        tmp_path / "script.jsonl", [(1, 0, "1 +", 0), (1, 0, _tracking(0.0), 1)]
    )
    config = small_config(reference, script, tmp_path / "run", rounds=1, samples=1, budget=256, n_eval=2)
    manifest = run(config)
    record = manifest.rounds[0]
    assert record.attempts == 2
    assert record.best.status == CandidateStatus.OK
    responses = read_jsonl(get_responses_path(os.path.abspath(str(tmp_path / "run")), 1))
    assert [r["attempt"] for r in responses] == [0, 1]


def test_round_fails_when_every_candidate_fails_twice(loop_inputs, write_mock_script, small_config, tmp_path):
    _, reference, _ = loop_inputs
    script = write_mock_script(tmp_path / "script.jsonl", [(1, 0, None), (1, 1, "speed * 2")])
    config = small_config(reference, script, tmp_path / "run", rounds=1, budget=256)
    with pytest.raises(RoundFailureError, match="round 1") as exc:
        run(config)
    assert exc.value.round_index == 1
    assert len(exc.value.statuses) == 2


def test_select_best_breaks_ties_by_index():
    results = [
        CandidateResult(0, "a", CandidateStatus.PARSE_FAILED),
        CandidateResult(1, "b", CandidateStatus.OK, -0.5),
        CandidateResult(2, "c", CandidateStatus.OK, -0.2),
        CandidateResult(3, "d", CandidateStatus.OK, -0.2),
    ]
    assert select_best(results) == 2
    with pytest.raises(ValueError):
        select_best(results[:1])
