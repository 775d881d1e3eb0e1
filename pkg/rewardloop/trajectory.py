"""
Keypoint trajectories: ingestion, normalization, subsampling, sagittal
projection and the textual form used in prompts.

Every operation returns a new `TrajectorySet`; inputs are never mutated.
"""

import json
import os
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Any, NamedTuple, Optional, Tuple

import numpy as np

from rewardloop.utils import write_jsonl

DIRECTION_EPS = 1e-6


class TrajectoryError(Exception):
    """Base class of trajectory errors."""


class MalformedRecordError(TrajectoryError):
    pass


class RaggedTrajectoryError(TrajectoryError):
    def __init__(self, joint: str, expected: int, actual: int):
        super().__init__(
            f"joint '{joint}' has {actual} points, expected {expected}"
        )
        self.joint = joint
        self.expected = expected
        self.actual = actual


class SubsampleError(TrajectoryError):
    pass


class MissingFrameSizeError(TrajectoryError):
    pass


class ZeroDimensionError(TrajectoryError):
    pass


class UndefinedDirectionError(TrajectoryError):
    pass


class SpaceMismatchError(TrajectoryError):
    pass


class Space(Enum):
    IMAGE2D = "image2d"
    SIM3D = "sim3d"
    SAGITTAL2D = "sagittal2d"

    def dims(self) -> int:
        match self:
            case Space.SIM3D:
                return 3
            case Space.IMAGE2D | Space.SAGITTAL2D:
                return 2


class Keypoint(NamedTuple):
    x: float
    y: float
    z: Optional[float] = None


def _frozen(points: Any) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    joint_name: str
    points: np.ndarray  # shape (L, 2) or (L, 3)
    sample_period: float

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points))
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise MalformedRecordError(
                f"joint '{self.joint_name}' has no points"
            )
        if self.points.shape[1] not in (2, 3):
            raise MalformedRecordError(
                f"joint '{self.joint_name}' points must be 2D or 3D"
            )
        if not self.sample_period > 0:
            raise MalformedRecordError(
                f"joint '{self.joint_name}' sample_period must be > 0"
            )

    def __len__(self) -> int:
        return self.points.shape[0]

    def keypoint(self, index: int) -> Keypoint:
        p = self.points[index]
        return Keypoint(*(float(c) for c in p))

    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    def vertical(self) -> np.ndarray:
        """The upward coordinate: z for 3D points, y otherwise."""
        return self.points[:, 2] if self.points.shape[1] == 3 else self.points[:, 1]

    def horizontal(self) -> np.ndarray:
        return self.points[:, 0]


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    joints: Tuple[Trajectory, ...]
    space: Space
    source: str = ""
    frame_size: Optional[Tuple[float, float]] = None
    # coordinates are no longer raw pixels
    normalized: bool = field(default=False)

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if not self.joints:
            raise MalformedRecordError("trajectory set has no joints")

        names = [j.joint_name for j in self.joints]
        if len(set(names)) != len(names):
            raise MalformedRecordError(f"duplicate joint names in {names}")

        expected = max(len(j) for j in self.joints)
        for j in self.joints:
            if len(j) != expected:
                raise RaggedTrajectoryError(j.joint_name, expected, len(j))

        periods = {j.sample_period for j in self.joints}
        if len(periods) != 1:
            raise MalformedRecordError(f"joints disagree on sample_period: {periods}")

        dims = self.space.dims()
        for j in self.joints:
            if j.points.shape[1] != dims:
                raise MalformedRecordError(
                    f"joint '{j.joint_name}' is {j.points.shape[1]}D "
                    f"but space {self.space.value} is {dims}D"
                )

        if self.frame_size is not None and self.space != Space.IMAGE2D:
            raise MalformedRecordError("frame_size is only valid for image2d")
        if self.space == Space.IMAGE2D and not self.normalized and self.frame_size is None:
            raise MalformedRecordError("raw image2d trajectories need frame_size")

    @property
    def length(self) -> int:
        return len(self.joints[0])

    @property
    def sample_period(self) -> float:
        return self.joints[0].sample_period

    @property
    def joint_names(self) -> list[str]:
        return [j.joint_name for j in self.joints]

    def joint(self, name: str) -> Trajectory:
        for j in self.joints:
            if j.joint_name == name:
                return j
        raise KeyError(name)

    def stacked(self) -> np.ndarray:
        """Points as an array of shape (J, L, dims)."""
        return np.stack([j.points for j in self.joints])

    def with_points(self, stacked: np.ndarray, sample_period: Optional[float] = None, **changes) -> "TrajectorySet":
        period = self.sample_period if sample_period is None else sample_period
        joints = tuple(
            Trajectory(j.joint_name, stacked[i], period)
            for i, j in enumerate(self.joints)
        )
        return replace(self, joints=joints, **changes)


def _parse_header(record: dict[str, Any]) -> Tuple[Space, float, Optional[Tuple[float, float]], str]:
    try:
        space = Space(record["space"])
        fps = float(record["fps"])
    except (KeyError, ValueError) as e:
        raise MalformedRecordError(f"bad header record {record}: {e}")
    if fps <= 0:
        raise MalformedRecordError(f"fps must be > 0, got {fps}")

    frame_size = None
    if "frame_w" in record or "frame_h" in record:
        try:
            frame_size = (float(record["frame_w"]), float(record["frame_h"]))
        except (KeyError, ValueError) as e:
            raise MalformedRecordError(f"header needs both frame_w and frame_h: {e}")
    if space == Space.IMAGE2D and frame_size is None:
        raise MalformedRecordError("image2d header needs frame_w and frame_h")

    return space, fps, frame_size, str(record.get("source", ""))


def load_trajectories(path: str) -> TrajectorySet:
    """
    Load one clip from a line-delimited trajectory file.

    The first record is the header (`space`, `fps`, optional `frame_w`,
    `frame_h`, `source`); every other record is one point
    (`joint`, `t`, `x`, `y`, optional `z`).
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"trajectory file not found: {path}")

    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append((lineno, json.loads(line)))
            except json.JSONDecodeError as e:
                raise MalformedRecordError(f"{path}:{lineno}: {e}")

    if not records:
        raise MalformedRecordError(f"{path}: empty file")

    space, fps, frame_size, source = _parse_header(records[0][1])
    dims = space.dims()

    per_joint: dict[str, dict[int, list[float]]] = {}
    for lineno, rec in records[1:]:
        try:
            joint = str(rec["joint"])
            t = int(rec["t"])
            point = [float(rec["x"]), float(rec["y"])]
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecordError(f"{path}:{lineno}: bad point record: {e}")

        if ("z" in rec) != (dims == 3):
            raise MalformedRecordError(
                f"{path}:{lineno}: 'z' must be present iff space is sim3d"
            )
        if dims == 3:
            point.append(float(rec["z"]))

        points = per_joint.setdefault(joint, {})
        if t in points:
            raise MalformedRecordError(f"{path}:{lineno}: duplicate t={t} for '{joint}'")
        points[t] = point

    if not per_joint:
        raise MalformedRecordError(f"{path}: no joint records")

    # unequal counts are reported as ragged by TrajectorySet
    first_name, first_points = next(iter(per_joint.items()))
    first_times = sorted(first_points)
    for name, pts in per_joint.items():
        times = sorted(pts)
        if len(times) == len(first_times) and times != first_times:
            raise MalformedRecordError(
                f"{path}: frames of '{name}' (t={times[0]}..{times[-1]}) "
                f"do not line up with '{first_name}' (t={first_times[0]}..{first_times[-1]})"
            )

    joints = [
        Trajectory(name, [pts[t] for t in sorted(pts)], 1.0 / fps)
        for name, pts in per_joint.items()
    ]
    return TrajectorySet(tuple(joints), space, source=source or path, frame_size=frame_size)


def write_trajectories(traj_set: TrajectorySet, path: str) -> None:
    header: dict[str, Any] = {
        "space": traj_set.space.value,
        "fps": 1.0 / traj_set.sample_period,
        "source": traj_set.source,
    }
    if traj_set.frame_size is not None:
        header["frame_w"], header["frame_h"] = traj_set.frame_size

    records = [header]
    for j in traj_set.joints:
        for t, p in enumerate(j.points):
            rec: dict[str, Any] = {"joint": j.joint_name, "t": t, "x": float(p[0]), "y": float(p[1])}
            if p.shape[0] == 3:
                rec["z"] = float(p[2])
            records.append(rec)
    write_jsonl(path, records)


def subsample(traj_set: TrajectorySet, stride: int) -> TrajectorySet:
    if stride < 1:
        raise SubsampleError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return traj_set
    if stride >= traj_set.length:
        raise SubsampleError(
            f"stride {stride} would leave fewer than 2 of {traj_set.length} points"
        )
    stacked = traj_set.stacked()[:, ::stride, :]
    return traj_set.with_points(stacked, sample_period=traj_set.sample_period * stride)


def normalize_frame(traj_set: TrajectorySet) -> TrajectorySet:
    """Map pixels to [0, 1] by frame size, flipping y so larger means higher."""
    if traj_set.space != Space.IMAGE2D:
        raise SpaceMismatchError(f"normalize_frame needs image2d, got {traj_set.space.value}")
    if traj_set.frame_size is None:
        raise MissingFrameSizeError("normalize_frame needs frame_size")

    width, height = traj_set.frame_size
    if width == 0 or height == 0:
        raise ZeroDimensionError(f"frame size {width}x{height} has a zero dimension")

    stacked = traj_set.stacked()
    out = np.empty_like(stacked)
    out[..., 0] = stacked[..., 0] / width
    out[..., 1] = 1.0 - stacked[..., 1] / height
    return traj_set.with_points(out, frame_size=None, normalized=True)


def normalize_bbox(traj_set: TrajectorySet) -> TrajectorySet:
    """
    Normalize every frame by the bounding box of that frame's keypoints.

    Removes camera translation and zoom; an axis with zero extent maps
    to 0.5.
    """
    if traj_set.space != Space.IMAGE2D:
        raise SpaceMismatchError(f"normalize_bbox needs image2d, got {traj_set.space.value}")

    stacked = traj_set.stacked()  # (J, L, 2)
    lo = stacked.min(axis=0)  # (L, 2)
    extent = stacked.max(axis=0) - lo
    degenerate = extent == 0
    safe = np.where(degenerate, 1.0, extent)

    out = np.where(degenerate, 0.5, (stacked - lo) / safe)
    out[..., 1] = 1.0 - out[..., 1]
    return traj_set.with_points(out, frame_size=None, normalized=True)


def project_sagittal(traj_set: TrajectorySet, root: Optional[str] = None) -> TrajectorySet:
    """
    Project sim3d keypoints onto the vertical plane of travel.

    The direction of travel is the root's net horizontal displacement.
    """
    if traj_set.space != Space.SIM3D:
        raise SpaceMismatchError(f"project_sagittal needs sim3d, got {traj_set.space.value}")

    root_name = root or traj_set.joint_names[0]
    try:
        root_pts = traj_set.joint(root_name).points
    except KeyError:
        raise UndefinedDirectionError(f"root joint '{root_name}' not in set")

    disp = root_pts[-1, :2] - root_pts[0, :2]
    norm = float(np.hypot(disp[0], disp[1]))
    if norm < DIRECTION_EPS:
        raise UndefinedDirectionError(
            f"root '{root_name}' horizontal displacement {norm:.3g} is below {DIRECTION_EPS}"
        )
    direction = disp / norm

    stacked = traj_set.stacked()
    out = np.empty(stacked.shape[:2] + (2,))
    out[..., 0] = stacked[..., 0] * direction[0] + stacked[..., 1] * direction[1]
    out[..., 1] = stacked[..., 2]
    return traj_set.with_points(out, space=Space.SAGITTAL2D, normalized=True)


def normalize_for_comparison(traj_set: TrajectorySet, root: Optional[str] = None) -> TrajectorySet:
    """
    Bring a normalized 2D set into the frame used for DTW scoring.

    The root's horizontal position is subtracted in every frame, then one
    clip-wide box is mapped into [0, 1] with a uniform scale (the larger
    extent spans the unit interval).
    """
    if traj_set.space == Space.SIM3D or (traj_set.space == Space.IMAGE2D and not traj_set.normalized):
        raise SpaceMismatchError("normalize_for_comparison needs normalized 2D trajectories")

    root_name = root or traj_set.joint_names[0]
    stacked = traj_set.stacked().copy()
    stacked[..., 0] -= traj_set.joint(root_name).points[:, 0]

    lo = stacked.reshape(-1, 2).min(axis=0)
    extent = float((stacked.reshape(-1, 2).max(axis=0) - lo).max())
    if extent == 0:
        raise ZeroDimensionError("all keypoints coincide; nothing to normalize")
    return traj_set.with_points((stacked - lo) / extent, normalized=True)


def _round_half_away(value: float, precision: int) -> str:
    quantum = Decimal(1).scaleb(-precision)
    rounded = Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP)
    if rounded == 0:
        rounded = abs(rounded)
    return f"{rounded:.{precision}f}"


def serialize_for_prompt(traj_set: TrajectorySet, precision: int = 2) -> str:
    if traj_set.space == Space.SIM3D or not traj_set.normalized:
        raise SpaceMismatchError(
            "only normalized image2d or sagittal2d trajectories can be serialized"
        )

    lines = []
    for j in traj_set.joints:
        pts = ", ".join(
            f"({_round_half_away(p[0], precision)},{_round_half_away(p[1], precision)})"
            for p in j.points
        )
        lines.append(f"{j.joint_name}: [{pts}]")
    return "\n".join(lines)
