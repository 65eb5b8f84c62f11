"""Residual trajectory refinement conditioned on a pair of consecutive actions.

Each waypoint is projected and given a learned positional embedding; the
action pair goes through a small MLP and is tiled onto every waypoint along
the feature axis.  After a ReLU, an attention encoder mixes the waypoints and
a zero-initialised head emits a per-waypoint correction that is added to the
input trajectory.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import vdtn
from .cvqvae import TrainingDivergence
from .nn import MLP, Adam, EncoderBlock, LayerNorm, Linear, Module, seed_rng

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    horizon: int = 8
    dim: int = 32
    depth: int = 2
    coord_scale: float = 64.0
    lr: float = 2e-3
    steps: int = 2000
    batch: int = 64
    jitter: float = 1.5


class RefinementHead(Module):
    def __init__(self, config: RefineConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.proj = Linear(2, c.dim, rng)
        self.pos = ad.parameter(rng.normal(0.0, 0.1, size=(c.horizon, c.dim)))
        self.action_mlp = MLP([6, c.dim, c.dim], rng)
        self.fuse = Linear(2 * c.dim, c.dim, rng)
        self.blocks = [EncoderBlock(c.dim, rng) for _ in range(c.depth)]
        self.ln_f = LayerNorm(c.dim)
        self.decode = Linear(c.dim, 2, rng, zero=True)

    def correction(self, c: np.ndarray, U: np.ndarray) -> ad.Tensor:
        """Decode path only: the per-waypoint offset in pixels, ``(B, T, 2)``."""
        cfg = self.config
        c = np.asarray(c, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        if c.ndim != 3 or c.shape[1:] != (cfg.horizon, 2):
            raise ValueError(f"trajectory must be (B, {cfg.horizon}, 2), got {list(c.shape)}")
        if U.shape != (c.shape[0], 2, 3):
            raise ValueError(f"action pair must be (B, 2, 3), got {list(U.shape)}")
        B, T = c.shape[0], cfg.horizon
        dt = self.pos.data.dtype
        pts = ad.add(self.proj(ad.Tensor((c / cfg.coord_scale).astype(dt))), self.pos)
        act = ad.repeat(self.action_mlp(ad.Tensor(U.reshape(B, 6).astype(dt))), T, axis=1)
        x = ad.relu(ad.concat([pts, act], axis=2))
        x = self.fuse(x)
        for block in self.blocks:
            x = block(x)
        return ad.scale(self.decode(self.ln_f(x)), cfg.coord_scale)

    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> Path:
        return vdtn.save_checkpoint(directory, self.state_dict(),
                                    {"kind": "refine", "config": asdict(self.config), **(extra or {})})

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "RefinementHead":
        tensors, meta = vdtn.load_checkpoint(directory)
        if meta.get("kind") != "refine":
            raise ValueError(f"{directory} is not a refinement checkpoint")
        model = cls(RefineConfig(**meta["config"]), np.random.default_rng(0))
        model.load_state_dict(tensors)
        return model


def init_head(config: RefineConfig = RefineConfig(), seed: int = 0) -> RefinementHead:
    return RefinementHead(config, seed_rng(seed, 61))


def refine(c: np.ndarray, U: np.ndarray, head: RefinementHead) -> np.ndarray:
    """Refined trajectory ``decode(...) + c``; accepts a single ``(T, 2)`` or a batch."""
    c = np.asarray(c, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    single = c.ndim == 2
    if single:
        c, U = c[None], U[None]
    if c.shape[1] != head.config.horizon:
        raise ValueError(f"trajectory has {c.shape[1]} points, head expects {head.config.horizon}")
    out = c + head.correction(c, U).data.astype(np.float64)
    return out[0] if single else out


def refinement_loss(head: RefinementHead, c: np.ndarray, U: np.ndarray, gt: np.ndarray) -> ad.Tensor:
    """Mean squared waypoint error (pixels^2 per coordinate) of the refined trajectory."""
    delta = head.correction(c, U)
    dt = delta.data.dtype
    # residual kept in float64 on the numpy side: target for the correction is gt - c
    return ad.mse(delta, ad.Tensor((np.asarray(gt) - np.asarray(c)).astype(dt)))


def make_pairs(episodes, seed: int, jitter: float = 1.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coarse/ground-truth pairs from consecutive frames: ``U = [u_prev, u_curr]``."""
    rng = seed_rng(seed, 62)
    C, U, G = [], [], []
    for frames in episodes:
        for prev, cur in zip(frames[:-1], frames[1:]):
            gt = np.asarray(cur.trajectory, dtype=np.float64)
            C.append(gt + rng.normal(0.0, jitter, size=gt.shape))
            U.append(np.stack([prev.action.as_array(), cur.action.as_array()]))
            G.append(gt)
    return np.stack(C), np.stack(U), np.stack(G)


def train_refinement(C: np.ndarray, U: np.ndarray, G: np.ndarray, config: RefineConfig = RefineConfig(),
                     seed: int = 0) -> tuple[RefinementHead, list[dict]]:
    n = len(C)
    if n == 0:
        raise ValueError("refinement dataset is empty")
    head = init_head(config, seed)
    rng = seed_rng(seed, 63)
    opt = Adam(head.parameters(), lr=config.lr, grad_clip=5.0)
    history = []
    for step in range(config.steps):
        idx = rng.choice(n, size=min(config.batch, n), replace=False)
        loss = refinement_loss(head, C[idx], U[idx], G[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergence(step)
        opt.step(ad.backward(loss))
        history.append({"step": step, "mse": value})
        if step % 250 == 0:
            log.info("refine step %d mse %.4f", step, value)
    return head, history


def trajectory_mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
