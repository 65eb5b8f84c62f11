"""Procedural driving scenes: curved corridors, edge obstacles, ego trajectories.

Coordinates are pixels with the origin at the top-left corner; ``x`` grows to
the right (columns) and ``y`` grows downward (rows).  The ego sits on the
bottom row and drives toward the top of the image, so a trajectory has
decreasing ``y``.

A scene is a frame of a short sequence.  Geometry lives in "world" distance
measured along the road from the first frame's ego row; frame ``f`` is the
same world shifted down by ``round(f * speed)`` rows.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from . import vdtn
from .nn import seed_rng

V_MAX = 8.0  # pixels per step at full throttle
STEER_GAIN = 0.15  # heading change per step (rad) at full steering lock
NAV_NAMES = ("left", "straight", "right")


@dataclass(frozen=True)
class ActionTriplet:
    steering: float
    throttle: float
    brake: float

    def __post_init__(self):
        if not (-1.0 <= self.steering <= 1.0 and 0.0 <= self.throttle <= 1.0 and 0.0 <= self.brake <= 1.0):
            raise ValueError(f"action out of range: {self}")

    @classmethod
    def from_array(cls, a) -> "ActionTriplet":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(np.clip(a[0], -1, 1)), float(np.clip(a[1], 0, 1)), float(np.clip(a[2], 0, 1)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steering, self.throttle, self.brake], dtype=np.float64)


@dataclass(frozen=True)
class NavCommand:
    one_hot: tuple[int, int, int]

    def __post_init__(self):
        if sorted(self.one_hot) != [0, 0, 1]:
            raise ValueError(f"navigation command must be one-hot, got {self.one_hot}")

    @classmethod
    def from_index(cls, i: int) -> "NavCommand":
        flags = [0, 0, 0]
        flags[int(i)] = 1
        return cls(tuple(flags))

    @property
    def index(self) -> int:
        return self.one_hot.index(1)

    def as_array(self) -> np.ndarray:
        return np.array(self.one_hot, dtype=np.float64)


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 64
    channels: int = 1
    n_points: int = 8
    corridor_width: tuple[float, float] = (12.0, 20.0)
    # lateral shift of the corridor centre one image-height ahead, in quarter image widths
    curvature: tuple[float, float] = (-0.8, 0.8)
    n_obstacles: int = 2
    speed: tuple[float, float] = (2.5, 5.0)
    noise_std: float = 0.05
    max_frames: int = 4

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        lo, hi = self.corridor_width
        if lo < 3:
            raise ValueError(f"corridor width must be >= 3 pixels, got {lo}")
        if hi > self.width - 2 or lo > hi:
            raise ValueError(f"corridor width range {self.corridor_width} infeasible for width {self.width}")
        if self.speed[1] * self.n_points > self.height - 1:
            raise ValueError("trajectory would leave the image: reduce speed or n_points")
        if self.n_points < 1 or self.max_frames < 1:
            raise ValueError("n_points and max_frames must be positive")


@dataclass
class SceneSample:
    drivable_mask: np.ndarray  # uint8 HxW
    obstacle_mask: np.ndarray  # uint8 HxW
    image: np.ndarray  # float32 HxWxC
    trajectory: np.ndarray  # float64 Nx2, (x, y)
    action: ActionTriplet
    nav: NavCommand
    ego_speed: float
    ego_start: tuple[float, float]
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)  # (x0, y0, x1, y1), half-open
    seed: int = 0
    frame: int = 0
    tag: str = "annotated-safe"
    id: str = ""

    @property
    def seg_target(self) -> np.ndarray:
        return self.drivable_mask

    @property
    def height(self) -> int:
        return self.drivable_mask.shape[0]

    @property
    def width(self) -> int:
        return self.drivable_mask.shape[1]


@dataclass
class PreferencePair:
    chosen: SceneSample
    rejected: SceneSample

    @property
    def tags(self) -> tuple[str, str]:
        return self.chosen.tag, self.rejected.tag


# ---------------------------------------------------------------------------
# kinematics


def rollout(start, speed_ref: float, action, n_points: int) -> np.ndarray:
    """Integrate the ego's unicycle motion for ``n_points`` steps.

    ``speed_ref`` is unused for the dynamics proper and kept for call-site
    symmetry with ground truth; speed comes from throttle and brake.
    """
    a = action.as_array() if isinstance(action, ActionTriplet) else np.asarray(action, dtype=np.float64)
    v = V_MAX * float(np.clip(a[1], 0, 1)) * (1.0 - float(np.clip(a[2], 0, 1)))
    dtheta = STEER_GAIN * float(np.clip(a[0], -1, 1))
    k = np.arange(1, n_points + 1)
    theta = dtheta * k
    x = start[0] + v * np.cumsum(np.sin(theta))
    y = start[1] - v * np.cumsum(np.cos(theta))
    return np.stack([x, y], axis=1)


def fit_action(start, trajectory: np.ndarray, speed: float) -> ActionTriplet:
    """Steering that makes :func:`rollout` best match ``trajectory`` at the given speed."""
    throttle = float(np.clip(speed / V_MAX, 0, 1))
    n = len(trajectory)

    def err(s):
        return float(((rollout(start, speed, (s, throttle, 0.0), n) - trajectory) ** 2).sum())

    res = minimize_scalar(err, bounds=(-1.0, 1.0), method="bounded", options={"xatol": 1e-7})
    return ActionTriplet(float(np.clip(res.x, -1, 1)), throttle, 0.0)


def nav_for(start, trajectory: np.ndarray, threshold: float = 2.0) -> NavCommand:
    dx = float(trajectory[-1, 0] - start[0])
    if dx < -threshold:
        return NavCommand.from_index(0)
    if dx > threshold:
        return NavCommand.from_index(2)
    return NavCommand.from_index(1)


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class _World:
    cx: float
    half: float
    bend: float  # centre shift per (distance / (H-1))^2
    speed: float
    obstacles: tuple  # (world_d0, depth_rows, side, depth_px)


def _sample_world(rng: np.random.Generator, p: SceneParams) -> _World:
    H, W = p.height, p.width
    half = rng.uniform(*p.corridor_width) / 2.0
    curv = rng.uniform(*p.curvature)
    speed = rng.uniform(*p.speed)
    max_offset = round((p.max_frames - 1) * p.speed[1])
    p_max = (H - 1 + max_offset) / (H - 1)
    bend = curv * W / 4.0
    b_far = bend * p_max ** 2
    lo = half - min(0.0, b_far) + 1
    hi = W - 2 - half - max(0.0, b_far)
    if lo > hi:
        # keep the corridor inside the image by flattening the bend
        room = max(0.0, W - 3 - 2 * half)
        bend = math.copysign(min(abs(bend), room / p_max ** 2), bend)
        b_far = bend * p_max ** 2
        lo = half - min(0.0, b_far) + 1
        hi = W - 2 - half - max(0.0, b_far)
    cx = rng.uniform(lo, max(lo, hi))
    obstacles = []
    for _ in range(p.n_obstacles):
        d0 = float(rng.integers(6, H - 4 + max_offset))
        rows = int(rng.integers(3, 7))
        side = int(rng.integers(0, 2))
        depth = float(rng.uniform(1.0, max(1.0, 0.5 * half)))
        obstacles.append((d0, rows, side, depth))
    return _World(cx=cx, half=half, bend=bend, speed=speed, obstacles=tuple(obstacles))


def _render(world: _World, p: SceneParams, frame: int, rng: np.random.Generator) -> SceneSample:
    H, W = p.height, p.width
    offset = round(frame * world.speed)
    rows = np.arange(H)
    dist = (H - 1 - rows) + offset
    centre = world.cx + world.bend * (dist / (H - 1)) ** 2
    cols = np.arange(W)
    corridor = np.abs(cols[None, :] - centre[:, None]) <= world.half

    # ground truth follows the corridor centre line (column mean of the corridor row)
    counts = corridor.sum(axis=1)
    mu = (corridor * cols[None, :]).sum(axis=1) / np.maximum(counts, 1)
    y_start = float(H - 1)
    x_start = float(mu[H - 1])
    ys = y_start - world.speed * np.arange(1, p.n_points + 1)
    xs = mu[np.floor(ys).astype(int)]
    traj = np.stack([xs, ys], axis=1)

    key_px = np.floor(np.vstack([traj, [[x_start, y_start]]])).astype(int)

    obstacle = np.zeros((H, W), dtype=bool)
    boxes = []
    for d0, n_rows, side, depth in world.obstacles:
        y1 = H - int(d0) + offset  # exclusive bottom row
        y0 = y1 - n_rows
        if y1 <= 0 or y0 >= H:
            continue
        y0c, y1c = max(y0, 0), min(y1, H)
        c = centre[np.clip((y0 + y1) // 2, 0, H - 1)]
        if side == 0:
            x0 = int(math.floor(c - world.half)) - 3
            x1 = int(math.floor(c - world.half + depth)) + 1
        else:
            x0 = int(math.ceil(c + world.half - depth))
            x1 = int(math.ceil(c + world.half)) + 4
        x0c, x1c = max(x0, 0), min(x1, W)
        if x0c >= x1c:
            continue
        # never place an obstacle on the ground-truth path
        if np.any((key_px[:, 0] >= x0c) & (key_px[:, 0] < x1c) & (key_px[:, 1] >= y0c) & (key_px[:, 1] < y1c)):
            continue
        obstacle[y0c:y1c, x0c:x1c] = True
        boxes.append((x0c, y0c, x1c, y1c))
    drivable = corridor & ~obstacle

    border = corridor & ~(np.roll(corridor, 1, axis=1) & np.roll(corridor, -1, axis=1))
    img = 0.25 + 0.5 * corridor + 0.25 * border - 0.7 * obstacle
    img = img + rng.normal(0.0, p.noise_std, size=(H, W))
    image = np.repeat(img[:, :, None], p.channels, axis=2).astype(np.float32)

    start = (x_start, y_start)
    action = fit_action(start, traj, world.speed)
    return SceneSample(
        drivable_mask=drivable.astype(np.uint8),
        obstacle_mask=obstacle.astype(np.uint8),
        image=image,
        trajectory=traj,
        action=action,
        nav=nav_for(start, traj),
        ego_speed=float(world.speed),
        ego_start=start,
        boxes=boxes,
        frame=frame,
    )


def generate_sequence(seed: int, params: SceneParams = SceneParams(), n_frames: int = 2) -> list[SceneSample]:
    """Consecutive frames of one drive; frame 0 equals :func:`generate_scene`."""
    params.validate()
    if n_frames > params.max_frames:
        raise ValueError(f"n_frames={n_frames} exceeds params.max_frames={params.max_frames}")
    world = _sample_world(seed_rng(seed, 0), params)
    frames = []
    for f in range(n_frames):
        s = _render(world, params, f, seed_rng(seed, 1, f))
        s.seed = int(seed)
        s.id = f"s{seed}_f{f}"
        frames.append(s)
    return frames


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> SceneSample:
    return generate_sequence(seed, params, 1)[0]


def derive_seed(seed: int, *index: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, index)]).generate_state(2, np.uint32).view(np.uint64)[0])


def point_violates(scene: SceneSample, x: float, y: float) -> bool:
    H, W = scene.height, scene.width
    if not (math.isfinite(x) and math.isfinite(y)):
        return True
    xi, yi = math.floor(x), math.floor(y)
    if not (0 <= xi < W and 0 <= yi < H):
        return True
    return bool(scene.drivable_mask[yi, xi] == 0 or scene.obstacle_mask[yi, xi] == 1)


def generate_risky_variant(base: SceneSample, seed: int) -> SceneSample:
    """Shear the trajectory sideways until at least one waypoint leaves the road."""
    rng = seed_rng(seed, 7)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    W = base.width
    n = len(base.trajectory)
    ramp = np.arange(1, n + 1) / n
    mag = float(base.drivable_mask[int(base.trajectory[-1, 1])].sum()) / 2.0 + 1.0
    traj = base.trajectory
    for _ in range(10):
        traj = base.trajectory.copy()
        traj[:, 0] = np.clip(traj[:, 0] + direction * mag * ramp, 0.0, W - 1e-3)
        if any(point_violates(base, x, y) for x, y in traj):
            break
        mag *= 1.5
    else:
        # forced clamp: move the last waypoint to the nearest non-drivable column of its row
        row = int(math.floor(traj[-1, 1]))
        bad = np.flatnonzero(base.drivable_mask[row] == 0)
        col = bad[np.argmin(np.abs(bad + 0.5 - traj[-1, 0]))]
        traj[-1, 0] = col + 0.5
    action = fit_action(base.ego_start, traj, base.ego_speed)
    return replace(
        base,
        trajectory=traj,
        action=action,
        nav=nav_for(base.ego_start, traj),
        tag="synthetic-risky",
        id=base.id + "_risky",
        boxes=list(base.boxes),
    )


# ---------------------------------------------------------------------------
# manifests


def _scene_row(s: SceneSample, mask_path: str, obstacle_path: str, image_path: str) -> dict:
    return {
        "id": s.id,
        "mask_path": mask_path,
        "obstacle_path": obstacle_path,
        "image_path": image_path,
        "traj": [[float(x), float(y)] for x, y in s.trajectory],
        "action": [float(v) for v in s.action.as_array()],
        "nav": [int(v) for v in s.nav.one_hot],
        "speed": float(s.ego_speed),
        "tag": s.tag,
        "ego_start": [float(v) for v in s.ego_start],
        "boxes": [list(b) for b in s.boxes],
        "seed": int(s.seed),
        "frame": int(s.frame),
    }


def write_scene_files(s: SceneSample, root: Path, stem: str) -> tuple[str, str, str]:
    paths = (f"scenes/{stem}_mask.vdtn", f"scenes/{stem}_obstacle.vdtn", f"scenes/{stem}_image.vdtn")
    try:
        vdtn.write(root / paths[0], s.drivable_mask.astype(np.float32))
        vdtn.write(root / paths[1], s.obstacle_mask.astype(np.float32))
        vdtn.write(root / paths[2], s.image)
    except OSError as exc:
        raise OSError(f"failed writing scene tensors under {root / 'scenes'}: {exc}") from exc
    return paths


def scene_row(s: SceneSample, root: Path, stem: str | None = None) -> dict:
    return _scene_row(s, *write_scene_files(s, root, stem or s.id))


def load_scene(row: dict, root: str | os.PathLike) -> SceneSample:
    root = Path(root)
    try:
        mask = vdtn.read(root / row["mask_path"]).astype(np.uint8)
        obstacle = vdtn.read(root / row["obstacle_path"]).astype(np.uint8)
        image = vdtn.read(root / row["image_path"])
    except OSError as exc:
        raise OSError(f"failed reading scene tensors for {row.get('id')}: {exc}") from exc
    return SceneSample(
        drivable_mask=mask,
        obstacle_mask=obstacle,
        image=image,
        trajectory=np.asarray(row["traj"], dtype=np.float64),
        action=ActionTriplet.from_array(row["action"]),
        nav=NavCommand(tuple(int(v) for v in row["nav"])),
        ego_speed=float(row["speed"]),
        ego_start=tuple(row.get("ego_start", (float(row["traj"][0][0]), float(mask.shape[0] - 1)))),
        boxes=[tuple(b) for b in row.get("boxes", [])],
        seed=int(row.get("seed", 0)),
        frame=int(row.get("frame", 0)),
        tag=row.get("tag", "annotated-safe"),
        id=row["id"],
    )


def make_pair(seed: int, index: int, params: SceneParams = SceneParams()) -> PreferencePair:
    sample_seed = derive_seed(seed, index)
    chosen = generate_scene(sample_seed, params)
    chosen.id = f"pair{index:05d}_chosen"
    rejected = generate_risky_variant(chosen, derive_seed(seed, index, 1))
    rejected.id = f"pair{index:05d}_rejected"
    return PreferencePair(chosen=chosen, rejected=rejected)


def build_preference_dataset(
    n_pairs: int,
    seed: int,
    out_dir: str | os.PathLike,
    params: SceneParams = SceneParams(),
    workers: int = 1,
) -> tuple[list[PreferencePair], Path]:
    """Generate chosen/rejected pairs and write ``preferences.jsonl`` under ``out_dir``.

    Each manifest row is ``{"pair_id", "chosen": {...}, "rejected": {...}}``;
    the two scene entries share mask and image files.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pairs = list(pool.map(lambda i: make_pair(seed, i, params), range(n_pairs)))
    rows = []
    for i, pair in enumerate(pairs):
        paths = write_scene_files(pair.chosen, root, f"pair{i:05d}")
        rows.append({
            "pair_id": i,
            "chosen": _scene_row(pair.chosen, *paths),
            "rejected": _scene_row(pair.rejected, *paths),
        })
    manifest = root / "preferences.jsonl"
    try:
        with open(manifest, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing manifest {manifest}: {exc}") from exc
    return pairs, manifest


def read_manifest(path: str | os.PathLike) -> list[dict]:
    """Scene rows from a manifest; preference rows expand into chosen then rejected."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if "chosen" in row:
                rows.extend([row["chosen"], row["rejected"]])
            else:
                rows.append(row)
    return rows


def load_manifest(path: str | os.PathLike) -> list[SceneSample]:
    root = Path(path).parent
    return [load_scene(r, root) for r in read_manifest(path)]
