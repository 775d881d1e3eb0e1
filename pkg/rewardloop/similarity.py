"""
Video-assisted similarity: period detection, two-period segmentation,
exact DTW, FastDTW, per-joint scores and their aggregation.

Costs are sums of Euclidean point distances along the warp path unless
`cost_normalization` is "mean", which divides by the path length.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from rewardloop.trajectory import Trajectory

DEFAULT_RADIUS = 2
DEFAULT_AUTOCORR_THRESHOLD = 0.2
MIN_SIGNAL_LENGTH = 8
FLAT_VARIANCE = 1e-12


class SimilarityError(Exception):
    """Base class of similarity errors."""

    joint: Optional[str] = None


class NoPeriodError(SimilarityError):
    pass


class TooShortError(SimilarityError):
    pass


class JointKeyMismatchError(SimilarityError):
    pass


def _tag_joint(err: SimilarityError, joint: str) -> SimilarityError:
    tagged = type(err)(f"joint '{joint}': {err}")
    tagged.joint = joint
    return tagged


@dataclass(frozen=True)
class WarpPath:
    pairs: Tuple[Tuple[int, int], ...]
    cost: float

    def is_valid(self, len_a: int, len_b: int) -> bool:
        if not self.pairs or self.pairs[0] != (0, 0):
            return False
        if self.pairs[-1] != (len_a - 1, len_b - 1):
            return False
        for (i0, j0), (i1, j1) in zip(self.pairs, self.pairs[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                return False
        return self.cost >= 0


@dataclass(frozen=True)
class FeedbackScores:
    per_joint: dict[str, float]
    rollout_count: int


def autocorr_period(signal: Sequence[float], threshold: float = DEFAULT_AUTOCORR_THRESHOLD) -> int:
    """
    Estimate the period of a signal in samples.

    Returns the smallest lag in 1..len/2 that is a strict local maximum of
    the normalized autocorrelation with r >= threshold.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[0]
    if n < MIN_SIGNAL_LENGTH:
        raise TooShortError(f"signal of length {n} is shorter than {MIN_SIGNAL_LENGTH}")

    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom <= FLAT_VARIANCE * n:
        raise NoPeriodError("signal has no variance")

    max_lag = n // 2
    # r[0] = 1; one extra lag so max_lag can be tested as a local maximum
    r = np.array([np.dot(x[: n - lag], x[lag:]) / denom for lag in range(0, min(max_lag + 2, n))])

    for lag in range(1, max_lag + 1):
        if lag + 1 >= r.shape[0]:
            break
        if r[lag] >= threshold and r[lag] > r[lag - 1] and r[lag] > r[lag + 1]:
            return lag
    raise NoPeriodError(f"no autocorrelation peak >= {threshold} within {max_lag} lags")


def segment_two_periods(traj: Trajectory, period: int) -> list[Trajectory]:
    if period < 2:
        raise TooShortError(f"period must be >= 2 samples, got {period}")
    window = 2 * period
    if len(traj) < window:
        raise TooShortError(
            f"trajectory of length {len(traj)} is shorter than one window of {window}"
        )
    count = len(traj) // window
    return [
        Trajectory(traj.joint_name, traj.points[k * window : (k + 1) * window], traj.sample_period)
        for k in range(count)
    ]


def _as_points(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] == 0:
        raise TooShortError("DTW needs non-empty sequences")
    return arr


def _distance_rows(a: np.ndarray, b: np.ndarray) -> list[list[float]]:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1).tolist()


def _dtw_windowed(a: np.ndarray, b: np.ndarray, lo: Sequence[int], hi: Sequence[int]) -> WarpPath:
    """DTW restricted to columns lo[i]..hi[i] (inclusive) of every row i."""
    n, m = a.shape[0], b.shape[0]
    dist = _distance_rows(a, b)
    inf = math.inf
    acc = [[inf] * m for _ in range(n)]

    for i in range(n):
        row = acc[i]
        prev = acc[i - 1] if i > 0 else None
        d = dist[i]
        for j in range(lo[i], hi[i] + 1):
            if i == 0 and j == 0:
                row[j] = d[0]
                continue
            best = inf
            if prev is not None:
                if j > 0 and prev[j - 1] < best:
                    best = prev[j - 1]
                if prev[j] < best:
                    best = prev[j]
            if j > 0 and row[j - 1] < best:
                best = row[j - 1]
            row[j] = d[j] + best

    # backtrack; ties prefer the diagonal predecessor
    i, j = n - 1, m - 1
    pairs = [(i, j)]
    while i > 0 or j > 0:
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1][j - 1], i - 1, j - 1))
        if i > 0:
            candidates.append((acc[i - 1][j], i - 1, j))
        if j > 0:
            candidates.append((acc[i][j - 1], i, j - 1))
        best_cost, i, j = candidates[0]
        for cand in candidates[1:]:
            if cand[0] < best_cost:
                best_cost, i, j = cand
        pairs.append((i, j))
    pairs.reverse()
    return WarpPath(pairs=tuple(pairs), cost=float(acc[n - 1][m - 1]))


def dtw_exact(a, b) -> WarpPath:
    """Full dynamic-programming DTW with Euclidean point distance."""
    pa, pb = _as_points(a), _as_points(b)
    n, m = pa.shape[0], pb.shape[0]
    return _dtw_windowed(pa, pb, [0] * n, [m - 1] * n)


def _reduce_by_half(x: np.ndarray) -> np.ndarray:
    even = x.shape[0] - x.shape[0] % 2
    return (x[0:even:2] + x[1:even:2]) / 2.0


def _expand_window(path: Tuple[Tuple[int, int], ...], n: int, m: int, radius: int) -> Tuple[list[int], list[int]]:
    """
    Column range of every fine row: the coarse path grown by `radius` cells
    in both directions, then projected onto 2x2 blocks of the finer level.
    """
    nc, mc = n // 2, m // 2
    clo = [mc] * nc
    chi = [-1] * nc
    for ci, cj in path:
        j_lo, j_hi = max(0, cj - radius), min(mc - 1, cj + radius)
        for r in range(max(0, ci - radius), min(nc, ci + radius + 1)):
            clo[r] = min(clo[r], j_lo)
            chi[r] = max(chi[r], j_hi)

    # odd lengths leave the last row or column without a coarse cell
    lo, hi = [0] * n, [0] * n
    for i in range(n):
        ci = min(i // 2, nc - 1)
        lo[i] = 2 * clo[ci]
        hi[i] = m - 1 if chi[ci] == mc - 1 else 2 * chi[ci] + 1
    lo[0] = 0
    hi[n - 1] = m - 1

    # keep consecutive rows connected
    for i in range(1, n):
        lo[i] = min(max(lo[i], lo[i - 1]), hi[i - 1] + 1)
        hi[i] = max(hi[i], lo[i])
    return lo, hi


def fastdtw(a, b, radius: int = DEFAULT_RADIUS) -> WarpPath:
    """
    Multiresolution approximation of DTW.

    Coarsens both sequences by averaging adjacent pairs until one fits the
    base size max(radius + 2, 10), solves that level exactly and refines the
    path level by level inside the coarse path grown by `radius` cells.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    pa, pb = _as_points(a), _as_points(b)
    return _fastdtw(pa, pb, radius)


def _fastdtw(a: np.ndarray, b: np.ndarray, radius: int) -> WarpPath:
    n, m = a.shape[0], b.shape[0]
    min_size = max(radius + 2, 10)
    if n <= min_size or m <= min_size:
        return _dtw_windowed(a, b, [0] * n, [m - 1] * n)

    coarse = _fastdtw(_reduce_by_half(a), _reduce_by_half(b), radius)
    lo, hi = _expand_window(coarse.pairs, n, m, radius)
    return _dtw_windowed(a, b, lo, hi)


def _path_cost(path: WarpPath, cost_normalization: str) -> float:
    match cost_normalization:
        case "sum":
            return path.cost
        case "mean":
            return path.cost / len(path.pairs)
        case _:
            raise ValueError(f"unknown cost normalization '{cost_normalization}'")


def _period_signal(traj: Trajectory) -> np.ndarray:
    vertical = traj.vertical()
    if float(np.var(vertical)) > FLAT_VARIANCE:
        return vertical
    return traj.horizontal()


def joint_similarity(
    robot: Trajectory,
    reference: Trajectory,
    radius: int = DEFAULT_RADIUS,
    threshold: float = DEFAULT_AUTOCORR_THRESHOLD,
    cost_normalization: str = "sum",
) -> float:
    """
    DTW score of one joint: mean FastDTW cost of each two-period robot
    segment against the reference's first two periods. Lower is closer.
    """
    name = reference.joint_name
    try:
        robot_period = autocorr_period(_period_signal(robot), threshold)
        segments = segment_two_periods(robot, robot_period)

        ref_period = autocorr_period(_period_signal(reference), threshold)
        ref_window = segment_two_periods(reference, ref_period)[0]
    except SimilarityError as e:
        raise _tag_joint(e, name) from e

    ref_xy = ref_window.xy()
    costs = [
        _path_cost(fastdtw(seg.xy(), ref_xy, radius), cost_normalization)
        for seg in segments
    ]
    return math.fsum(costs) / len(costs)


def aggregate_feedback(per_rollout: Sequence[dict[str, float]]) -> FeedbackScores:
    if not per_rollout:
        raise ValueError("aggregate_feedback needs at least one rollout")

    keys = set(per_rollout[0])
    for k, scores in enumerate(per_rollout[1:], start=1):
        if set(scores) != keys:
            raise JointKeyMismatchError(
                f"rollout {k} joints {sorted(scores)} differ from {sorted(keys)}"
            )

    count = len(per_rollout)
    per_joint = {
        name: math.fsum(scores[name] for scores in per_rollout) / count
        for name in sorted(keys)
    }
    return FeedbackScores(per_joint=per_joint, rollout_count=count)
