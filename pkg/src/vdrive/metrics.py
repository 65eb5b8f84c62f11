"""Open-loop planning metrics: per-horizon L2 and footprint collision rate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_HORIZONS = (3, 5, 8)
DEFAULT_FOOTPRINT = (3.0, 4.0)  # width (x), height (y) in pixels


def l2_metric(pred, gt, horizons=DEFAULT_HORIZONS) -> dict[str, float]:
    """Mean waypoint distance over the first ``k`` points for each ``k`` in ``horizons``.

    Accepts a single ``(N, 2)`` trajectory or a batch ``(B, N, 2)``; a batch is
    averaged over trajectories as well.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory length mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim not in (2, 3) or pred.shape[-1] != 2:
        raise ValueError(f"trajectories must be (N, 2) or (B, N, 2), got {pred.shape}")
    n = pred.shape[-2]
    dist = np.sqrt(np.sum((pred - gt) ** 2, axis=-1))
    out = {}
    for k in horizons:
        if not 1 <= k <= n:
            raise ValueError(f"horizon {k} outside 1..{n}")
        out[f"k{k}"] = float(np.mean(dist[..., :k]))
    return out


def footprint_overlaps(x: float, y: float, box, footprint=DEFAULT_FOOTPRINT) -> bool:
    """Open-interval overlap of the footprint centred at (x, y) with a half-open pixel box."""
    w, h = footprint
    x0, y0, x1, y1 = box
    return (x - w / 2 < x1 and x + w / 2 > x0) and (y - h / 2 < y1 and y + h / 2 > y0)


def collides(trajectory, boxes, footprint=DEFAULT_FOOTPRINT) -> bool:
    return any(footprint_overlaps(float(x), float(y), b, footprint) for x, y in np.asarray(trajectory) for b in boxes)


def collision_rate(trajectories, scenes, footprint=DEFAULT_FOOTPRINT) -> float:
    w, h = footprint
    if not (w > 0 and h > 0):
        raise ValueError("footprint must be positive")
    trajectories = list(trajectories)
    if len(trajectories) != len(scenes):
        raise ValueError("one scene per trajectory required")
    if not trajectories:
        return 0.0
    hits = sum(collides(t, s.boxes, footprint) for t, s in zip(trajectories, scenes))
    return hits / len(trajectories)


@dataclass
class EvalReport:
    l2: dict[str, float]
    collision_rate: float
    mean_reward: float
    n_samples: int
    config_hash: str
    seed: int
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("report needs at least one sample")
        if not 0.0 <= self.collision_rate <= 1.0:
            raise ValueError("collision rate outside [0, 1]")
        if any(v < 0 for v in self.l2.values()):
            raise ValueError("negative L2")

    @property
    def l2_avg(self) -> float:
        return float(np.mean(list(self.l2.values())))

    def to_json(self) -> str:
        d = asdict(self)
        d["l2_avg"] = self.l2_avg
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d.pop("l2_avg", None)
        return cls(**d)
