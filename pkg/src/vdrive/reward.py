"""Rule-based driving rewards from a drivable mask, a mock risk rater, and their hybrid.

Off-road checks floor-index the point into the mask; anything outside the
image counts as off-road.  The lateral term normalises each waypoint's
distance to the mean drivable column of its row by half the row's drivable
span and scores it with a Gaussian kernel.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

DEGENERATE_DEVIATION = 1e6


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 2.0
    beta: float = 10.0  # penalty magnitude, applied as -beta
    omega_h: float = 1.0
    omega_a: float = 0.5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0 (it is subtracted)")
        if self.omega_h < 0 or self.omega_a < 0 or not (self.omega_h + self.omega_a) > 0:
            raise ValueError("weights must be >= 0 with a positive sum")


@dataclass(frozen=True)
class RowStats:
    row: int
    lo: int
    hi: int
    mean: float
    count: int

    @property
    def undefined(self) -> bool:
        return self.count == 0


@dataclass(frozen=True)
class RewardRecord:
    p_off: int
    r_center: float
    r_h: float
    r_a: float
    r: float
    config: RewardConfig

    def to_json(self) -> dict:
        d = asdict(self)
        d["config"] = asdict(self.config)
        return d


def off_road_indicator(mask: np.ndarray, point) -> int:
    x, y = float(point[0]), float(point[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        return 1
    xi, yi = math.floor(x), math.floor(y)
    H, W = mask.shape
    if 0 <= yi < H and 0 <= xi < W and mask[yi, xi] == 1:
        return 0
    return 1


def _check_traj(trajectory) -> np.ndarray:
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 2 or len(traj) == 0:
        raise ValueError(f"trajectory must be a non-empty N x 2 array, got shape {traj.shape}")
    return traj


def off_road_penalty(mask: np.ndarray, trajectory) -> int:
    traj = _check_traj(trajectory)
    return int(sum(off_road_indicator(mask, p) for p in traj))


def row_stats(mask: np.ndarray, y: int) -> RowStats:
    if not 0 <= y < mask.shape[0]:
        raise IndexError(f"row {y} outside mask with {mask.shape[0]} rows")
    cols = np.flatnonzero(mask[y] == 1)
    if cols.size == 0:
        return RowStats(row=y, lo=-1, hi=-1, mean=float("nan"), count=0)
    return RowStats(row=y, lo=int(cols[0]), hi=int(cols[-1]), mean=float(cols.mean()), count=int(cols.size))


def lateral_deviation(stats: RowStats, x: float) -> float:
    if stats.undefined:
        return DEGENERATE_DEVIATION
    if stats.hi == stats.lo:
        return 0.0 if x == stats.mean else DEGENERATE_DEVIATION
    return abs(x - stats.mean) / ((stats.hi - stats.lo) / 2.0)


def _deviations(mask: np.ndarray, traj: np.ndarray) -> np.ndarray:
    H = mask.shape[0]
    out = np.empty(len(traj))
    cache: dict[int, RowStats] = {}
    for i, (x, y) in enumerate(traj):
        yi = math.floor(y) if math.isfinite(y) else -1
        if not 0 <= yi < H:
            out[i] = DEGENERATE_DEVIATION
            continue
        if yi not in cache:
            cache[yi] = row_stats(mask, yi)
        out[i] = lateral_deviation(cache[yi], x)
    return out


def centering_reward(mask: np.ndarray, trajectory, alpha: float) -> float:
    traj = _check_traj(trajectory)
    d = _deviations(mask, traj)
    return float(np.mean(np.exp(-alpha * d * d)))


def rule_reward(mask: np.ndarray, trajectory, config: RewardConfig = RewardConfig()) -> tuple[int, float, float]:
    """Return ``(p_off, r_center, r_h)``."""
    p_off = off_road_penalty(mask, trajectory)
    r_center = centering_reward(mask, trajectory, config.alpha)
    r_h = r_center if p_off == 0 else -config.beta
    return p_off, r_center, r_h


# ---------------------------------------------------------------------------
# mock expert rater


@dataclass(frozen=True)
class RaterConfig:
    w_proximity: float = 0.5
    w_motion: float = 0.5
    # second difference (pixels) treated as maximally discontinuous
    jerk_scale: float = 4.0


def _point_box_distance(p: np.ndarray, box) -> float:
    x0, y0, x1, y1 = box
    dx = max(x0 - p[0], 0.0, p[0] - x1)
    dy = max(y0 - p[1], 0.0, p[1] - y1)
    return math.hypot(dx, dy)


def min_obstacle_distance(trajectory, boxes) -> float:
    traj = _check_traj(trajectory)
    if not boxes:
        return math.inf
    return min(_point_box_distance(p, b) for p in traj for b in boxes)


def motion_discontinuity(trajectory, jerk_scale: float = RaterConfig.jerk_scale) -> float:
    traj = _check_traj(trajectory)
    if len(traj) < 3:
        return 0.0
    sd = traj[2:] - 2 * traj[1:-1] + traj[:-2]
    return float(min(1.0, np.linalg.norm(sd, axis=1).max() / jerk_scale))


def mock_expert_rating(scene, trajectory, config: RaterConfig = RaterConfig()) -> float:
    """Risk rating in [0, 5]; 0 is safest.

    Proximity is ``1 - d_min / diag`` with ``d_min`` the closest approach of any
    waypoint to any obstacle box (0 when no obstacles exist).
    """
    H, W = scene.drivable_mask.shape
    diag = math.hypot(H, W)
    d_min = min_obstacle_distance(trajectory, scene.boxes)
    proximity = 0.0 if math.isinf(d_min) else max(0.0, 1.0 - d_min / diag)
    score = config.w_proximity * proximity + config.w_motion * motion_discontinuity(trajectory, config.jerk_scale)
    return 5.0 * min(1.0, max(0.0, score))


def signed_rating(r_a: float) -> float:
    """Map a [0, 5] risk rating onto [-1, 1] with the safest rating at +1."""
    return (5.0 - 2.0 * r_a) / 5.0


def hybrid_reward(r_h: float, r_a: float, config: RewardConfig = RewardConfig()) -> float:
    if not 0.0 <= r_a <= 5.0:
        raise ValueError(f"rating {r_a} outside [0, 5]")
    return config.omega_h * r_h + config.omega_a * signed_rating(r_a)


def score(scene, trajectory=None, config: RewardConfig = RewardConfig(),
          rater: RaterConfig = RaterConfig()) -> RewardRecord:
    traj = scene.trajectory if trajectory is None else trajectory
    p_off, r_center, r_h = rule_reward(scene.drivable_mask, traj, config)
    r_a = mock_expert_rating(scene, traj, rater)
    return RewardRecord(p_off=p_off, r_center=r_center, r_h=r_h, r_a=r_a,
                        r=hybrid_reward(r_h, r_a, config), config=config)
