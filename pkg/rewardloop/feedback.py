"""
Video-assisted feedback: put the reference clip and robot rollouts into
the same 2D frame and score them joint by joint.
"""

import logging
from typing import Optional, Sequence

from rewardloop.config import ReferenceConfig, ReferenceNormalization, SimilarityConfig
from rewardloop.similarity import FeedbackScores, JointKeyMismatchError, aggregate_feedback, joint_similarity
from rewardloop.trajectory import (
    Space,
    SpaceMismatchError,
    Trajectory,
    TrajectorySet,
    load_trajectories,
    normalize_bbox,
    normalize_for_comparison,
    normalize_frame,
    project_sagittal,
    subsample,
)

logger = logging.getLogger(__name__)


def rename_joints(traj_set: TrajectorySet, mapping: dict[str, str]) -> TrajectorySet:
    if not mapping:
        return traj_set
    joints = tuple(
        Trajectory(mapping.get(j.joint_name, j.joint_name), j.points, j.sample_period)
        for j in traj_set.joints
    )
    return TrajectorySet(
        joints,
        traj_set.space,
        source=traj_set.source,
        frame_size=traj_set.frame_size,
        normalized=traj_set.normalized,
    )


def to_plane(traj_set: TrajectorySet, normalization: ReferenceNormalization, root: str) -> TrajectorySet:
    """Any clip to normalized 2D: sim3d is projected, raw image2d normalized."""
    if traj_set.space == Space.SIM3D:
        return project_sagittal(traj_set, root)
    if traj_set.space == Space.SAGITTAL2D:
        return traj_set
    match normalization:
        case ReferenceNormalization.FRAME:
            return normalize_frame(traj_set)
        case ReferenceNormalization.BBOX:
            return normalize_bbox(traj_set)
        case ReferenceNormalization.NONE:
            if traj_set.normalized:
                return traj_set
    raise SpaceMismatchError("raw image2d clips need 'frame' or 'bbox' normalization")


def prepare_reference(config: ReferenceConfig) -> TrajectorySet:
    clip = rename_joints(load_trajectories(config.path), config.joint_map)
    clip = subsample(clip, config.stride)
    clip = to_plane(clip, config.normalization, config.root)
    return normalize_for_comparison(clip, config.root)


def robot_stride(robot_period: float, reference_period: float) -> int:
    stride = max(1, round(reference_period / robot_period))
    if abs(stride * robot_period - reference_period) > 1e-6 * reference_period:
        logger.warning(
            "robot period %.4gs does not divide reference period %.4gs; using stride %d",
            robot_period, reference_period, stride,
        )
    return stride


def prepare_robot(keypoints: TrajectorySet, reference_period: float, root: str) -> TrajectorySet:
    stride = robot_stride(keypoints.sample_period, reference_period)
    plane = to_plane(subsample(keypoints, stride), ReferenceNormalization.NONE, root)
    return normalize_for_comparison(plane, root)


def joint_scores(robot: TrajectorySet, reference: TrajectorySet, config: SimilarityConfig) -> dict[str, float]:
    missing = sorted(set(reference.joint_names) - set(robot.joint_names))
    if missing:
        raise JointKeyMismatchError(f"robot has no joints named {missing}")
    return {
        name: joint_similarity(
            robot.joint(name),
            reference.joint(name),
            config.radius,
            config.autocorr_threshold,
            config.cost_normalization.value,
        )
        for name in sorted(reference.joint_names)
    }


def score_rollouts(
    keypoint_sets: Sequence[TrajectorySet],
    reference: TrajectorySet,
    config: SimilarityConfig,
    root: str,
) -> FeedbackScores:
    per_rollout = [
        joint_scores(prepare_robot(kp, reference.sample_period, root), reference, config)
        for kp in keypoint_sets
    ]
    return aggregate_feedback(per_rollout)


def score_pair(
    path_a: str,
    path_b: str,
    config: SimilarityConfig,
    root: str,
    normalization: ReferenceNormalization = ReferenceNormalization.FRAME,
    joint_map: Optional[dict[str, str]] = None,
) -> dict[str, float]:
    """
    Per-joint DTW of clip A against clip B, for offline comparison.

    The finer clip is subsampled to the coarser one's period.
    """
    a = rename_joints(load_trajectories(path_a), joint_map or {})
    b = rename_joints(load_trajectories(path_b), joint_map or {})
    if a.sample_period < b.sample_period:
        a = subsample(a, robot_stride(a.sample_period, b.sample_period))
    elif b.sample_period < a.sample_period:
        b = subsample(b, robot_stride(b.sample_period, a.sample_period))
    a = normalize_for_comparison(to_plane(a, normalization, root), root)
    b = normalize_for_comparison(to_plane(b, normalization, root), root)
    return joint_scores(a, b, config)
