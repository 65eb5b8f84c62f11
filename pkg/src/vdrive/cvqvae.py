"""Conditional VQ autoencoder over segmented scenes.

The encoder sees the image with the trajectory rasterised as an extra
channel, cut into non-overlapping ``patch x patch`` tiles; every tile maps to
one latent cell.  The decoder reconstructs each tile of the drivable mask from
the (straight-through) quantised cell plus the trajectory raster of the same
tile.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import vdtn
from .nn import MLP, Adam, Module, seed_rng

log = logging.getLogger(__name__)

TOKEN_BASE = 4  # ids 0..3 are reserved specials (pad, bos, sep, eos)


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at step {step}")
        self.step = step


@dataclass
class CvqVaeConfig:
    K: int = 32
    Dc: int = 16
    commitment_beta: float = 0.25
    patch: int = 8
    enc_hidden: int = 96
    dec_hidden: int = 96
    lr: float = 2e-3
    steps: int = 2000
    batch: int = 16
    dead_after: int = 200
    height: int = 64
    width: int = 64
    channels: int = 1

    def __post_init__(self):
        if self.commitment_beta <= 0:
            raise ValueError("commitment_beta must be > 0")
        if self.K < 1 or self.Dc < 1:
            raise ValueError("K and Dc must be positive")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("image dims must be multiples of the patch size")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch


@dataclass
class LatentGrid:
    z_e: np.ndarray  # (h, w, Dc)
    z_q: np.ndarray  # (h, w, Dc)
    index: np.ndarray  # (h, w) int64


@dataclass
class Codebook:
    codes: ad.Tensor  # (K, Dc) trainable
    usage_counts: np.ndarray = field(default=None)
    calls: int = 0

    def __post_init__(self):
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.codes.shape[0], dtype=np.int64)

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    def record(self, index: np.ndarray) -> None:
        self.usage_counts += np.bincount(index.reshape(-1), minlength=self.K)
        self.calls += 1


def nearest_codes(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the closest code for every row of ``z`` (lowest index on ties)."""
    z64 = np.asarray(z, dtype=np.float64).reshape(-1, codes.shape[1])
    c64 = np.asarray(codes, dtype=np.float64)
    d = ((z64[:, None, :] - c64[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def quantize(z_e: np.ndarray, codebook: Codebook | np.ndarray, record: bool = False) -> LatentGrid:
    codes = codebook.codes.data if isinstance(codebook, Codebook) else np.asarray(codebook)
    if z_e.shape[-1] != codes.shape[1]:
        raise ValueError(f"latent dim {z_e.shape[-1]} != code dim {codes.shape[1]}")
    idx = nearest_codes(z_e, codes).reshape(z_e.shape[:-1])
    if record and isinstance(codebook, Codebook):
        codebook.record(idx)
    return LatentGrid(z_e=z_e, z_q=codes[idx].astype(z_e.dtype), index=idx)


def perplexity(index: np.ndarray, K: int) -> float:
    counts = np.bincount(np.asarray(index).reshape(-1), minlength=K).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(math.exp(-(nz * np.log(nz)).sum()))


def rasterize_trajectory(trajectory: np.ndarray, height: int, width: int, samples: int = 4) -> np.ndarray:
    """Binary ``height x width`` image of the polyline through the waypoints."""
    out = np.zeros((height, width), dtype=np.float32)
    traj = np.asarray(trajectory, dtype=np.float64)
    if len(traj) == 1:
        pts = traj
    else:
        t = np.linspace(0.0, 1.0, samples, endpoint=False)
        segs = [a + t[:, None] * (b - a) for a, b in zip(traj[:-1], traj[1:])]
        pts = np.vstack(segs + [traj[-1:]])
    xi = np.floor(pts[:, 0]).astype(int)
    yi = np.floor(pts[:, 1]).astype(int)
    ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
    out[yi[ok], xi[ok]] = 1.0
    return out


def to_patches(x: np.ndarray, patch: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(h*w, patch*patch*C)`` in row-major cell order."""
    H, W, C = x.shape
    h, w = H // patch, W // patch
    return x.reshape(h, patch, w, patch, C).transpose(0, 2, 1, 3, 4).reshape(h * w, patch * patch * C)


def from_patches(p: np.ndarray, h: int, w: int, patch: int) -> np.ndarray:
    """Inverse of :func:`to_patches` for single-channel tiles."""
    return p.reshape(h, w, patch, patch).transpose(0, 2, 1, 3).reshape(h * patch, w * patch)


class CvqVae(Module):
    def __init__(self, config: CvqVaeConfig, rng: np.random.Generator):
        c = config
        self.config = c
        p2 = c.patch * c.patch
        self.encoder = MLP([p2 * (c.channels + 1), c.enc_hidden, c.enc_hidden, c.Dc], rng)
        self.decoder = MLP([c.Dc + p2, c.dec_hidden, c.dec_hidden, p2], rng)
        self.codes = ad.parameter(rng.normal(0.0, 1.0, size=(c.K, c.Dc)))
        self.codebook = Codebook(self.codes)

    # -- tensors for a batch ------------------------------------------------
    def _inputs(self, image: np.ndarray, trajectory: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        if image.shape != (c.height, c.width, c.channels):
            raise ValueError(f"image dims {list(image.shape)} != {[c.height, c.width, c.channels]}")
        traj = np.asarray(trajectory)
        if traj.ndim != 2 or traj.shape[1] != 2:
            raise ValueError(f"trajectory must be N x 2, got {list(traj.shape)}")
        raster = rasterize_trajectory(traj, c.height, c.width)
        x = np.concatenate([image.astype(np.float32), raster[:, :, None]], axis=2)
        return to_patches(x, c.patch), to_patches(raster[:, :, None], c.patch)

    def encode_tensor(self, x: np.ndarray) -> ad.Tensor:
        return self.encoder(ad.Tensor(x.astype(self.codes.data.dtype)))

    def decode_tensor(self, z: ad.Tensor, raster: np.ndarray) -> ad.Tensor:
        inp = ad.concat([z, ad.Tensor(raster.astype(z.data.dtype))], axis=-1)
        return ad.sigmoid(self.decoder(inp))

    # -- public inference ---------------------------------------------------
    def encode(self, image: np.ndarray, trajectory: np.ndarray) -> np.ndarray:
        h, w = self.config.grid
        x, _ = self._inputs(image, trajectory)
        return self.encode_tensor(x).data.reshape(h, w, self.config.Dc)

    def quantize(self, z_e: np.ndarray) -> LatentGrid:
        return quantize(z_e, self.codebook)

    def decode_indices(self, index: np.ndarray, trajectory: np.ndarray) -> np.ndarray:
        """Drivable-probability image for an ``(h, w)`` index grid."""
        c = self.config
        h, w = c.grid
        raster = to_patches(rasterize_trajectory(trajectory, c.height, c.width)[:, :, None], c.patch)
        z = ad.Tensor(self.codes.data[np.asarray(index).reshape(-1)])
        probs = self.decode_tensor(z, raster).data
        return from_patches(probs, h, w, c.patch)

    def tokens(self, image: np.ndarray, trajectory: np.ndarray) -> np.ndarray:
        grid = self.quantize(self.encode(image, trajectory))
        return grid.index.reshape(-1) + TOKEN_BASE

    def tokens_for_scene(self, scene) -> np.ndarray:
        return self.tokens(scene.image, scene.trajectory)

    def decode_tokens(self, tokens: np.ndarray, trajectory: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.min() < TOKEN_BASE or tokens.max() >= TOKEN_BASE + self.config.K:
            raise ValueError("token ids outside the codebook range")
        return self.decode_indices((tokens - TOKEN_BASE).reshape(self.config.grid), trajectory)

    # -- persistence ----------------------------------------------------------
    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> Path:
        meta = {"kind": "cvqvae", "config": asdict(self.config),
                "usage_counts": self.codebook.usage_counts.tolist(), **(extra or {})}
        return vdtn.save_checkpoint(directory, self.state_dict(), meta)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "CvqVae":
        tensors, meta = vdtn.load_checkpoint(directory)
        if meta.get("kind") != "cvqvae":
            raise ValueError(f"{directory} is not a cvqvae checkpoint")
        model = cls(CvqVaeConfig(**meta["config"]), np.random.default_rng(0))
        model.load_state_dict(tensors)
        model.codebook.usage_counts = np.asarray(meta.get("usage_counts", np.zeros(model.config.K)), dtype=np.int64)
        return model


def vq_loss(z_e: ad.Tensor, codes: ad.Tensor, index: np.ndarray, decoder, raster: np.ndarray,
            target: np.ndarray, beta: float) -> dict[str, ad.Tensor]:
    """Reconstruction + codebook + commitment terms for a batch of cell grids.

    ``z_e`` is ``(B, cells, Dc)``.  Squared norms and the BCE are summed per
    sample and averaged over the batch.  The codebook term only reaches
    ``codes``; the commitment term only reaches ``z_e``; the reconstruction
    reaches ``z_e`` through the straight-through copy.
    """
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("segmentation target must be binary")
    B = z_e.shape[0]
    z_q = ad.embedding(codes, index)
    z_st = ad.add(z_e, ad.stop_gradient(ad.sub(z_q, z_e)))
    decoded = decoder(z_st, raster)
    recon = ad.scale(ad.bce(decoded, ad.Tensor(target.astype(decoded.data.dtype)), reduction="sum"), 1.0 / B)
    codebook_term = ad.scale(ad.sum_(ad.square(ad.sub(z_q, ad.stop_gradient(z_e)))), 1.0 / B)
    commitment_term = ad.scale(ad.sum_(ad.square(ad.sub(z_e, ad.stop_gradient(z_q)))), 1.0 / B)
    total = ad.add(ad.add(recon, codebook_term), ad.scale(commitment_term, beta))
    return {"total": total, "recon": recon, "codebook": codebook_term, "commitment": commitment_term,
            "decoded": decoded}


def reconstruction_loss(decoded: np.ndarray, target: np.ndarray) -> float:
    """Summed BCE between a probability image and a binary target."""
    return float(ad.bce(ad.Tensor(np.asarray(decoded, dtype=np.float64)),
                        ad.Tensor(np.asarray(target, dtype=np.float64)), reduction="sum").data)


def _dataset_arrays(model: CvqVae, scenes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = model.config
    xs, rs, ys = [], [], []
    for s in scenes:
        x, r = model._inputs(s.image, s.trajectory)
        xs.append(x)
        rs.append(r)
        ys.append(to_patches(s.seg_target[:, :, None].astype(np.float32), c.patch))
    return np.stack(xs), np.stack(rs), np.stack(ys)


def train(scenes, config: CvqVaeConfig = CvqVaeConfig(), seed: int = 0) -> tuple[CvqVae, list[dict]]:
    """Fit the autoencoder and codebook; returns the model and per-step metrics."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("training set is empty")
    rng = seed_rng(seed, 11)
    model = CvqVae(config, rng)
    X, R, Y = _dataset_arrays(model, scenes)
    n, cells = X.shape[0], X.shape[1]
    p2 = config.patch * config.patch
    if config.steps > 0:
        # initialise codes from encoder outputs so none start out of reach
        z0 = model.encode_tensor(X.reshape(-1, X.shape[2])).data
        model.codes.data = z0[rng.choice(len(z0), size=config.K, replace=len(z0) < config.K)].astype(np.float32)
    opt = Adam(model.parameters(), lr=config.lr)
    code_slot = opt.params.index(model.codes)
    last_used = np.zeros(config.K, dtype=np.int64)
    history: list[dict] = []
    for step in range(config.steps):
        batch = rng.choice(n, size=min(config.batch, n), replace=False)
        B = len(batch)
        z_e = ad.reshape(model.encode_tensor(X[batch].reshape(B * cells, -1)), (B, cells, config.Dc))
        idx = nearest_codes(z_e.data, model.codes.data).reshape(B, cells)
        model.codebook.record(idx)
        terms = vq_loss(z_e, model.codes, idx, model.decode_tensor, R[batch], Y[batch], config.commitment_beta)
        total = float(terms["total"].data)
        if not math.isfinite(total):
            raise TrainingDivergence(step)
        grads = ad.backward(terms["total"])
        opt.step(grads)

        used = np.unique(idx)
        last_used[used] = step
        dead = np.flatnonzero(step - last_used >= config.dead_after)
        if dead.size:
            pool = z_e.data.reshape(-1, config.Dc)
            pick = rng.choice(len(pool), size=dead.size, replace=len(pool) < dead.size)
            model.codes.data[dead] = pool[pick]
            opt.m[code_slot][dead] = 0.0
            opt.v[code_slot][dead] = 0.0
            last_used[dead] = step
        history.append({
            "step": step,
            "total": total,
            "recon": float(terms["recon"].data),
            "recon_per_pixel": float(terms["recon"].data) / (cells * p2),
            "codebook": float(terms["codebook"].data),
            "commitment": float(terms["commitment"].data),
            "perplexity": perplexity(idx, config.K),
            "reseeded": int(dead.size),
        })
        if step % 200 == 0:
            log.info("cvqvae step %d total %.3f recon/px %.4f ppl %.2f", step, total,
                     history[-1]["recon_per_pixel"], history[-1]["perplexity"])
    return model, history


def evaluate(model: CvqVae, scenes) -> dict:
    """Reconstruction BCE per pixel and code perplexity over a scene set."""
    c = model.config
    X, R, Y = _dataset_arrays(model, scenes)
    n, cells = X.shape[0], X.shape[1]
    z_e = model.encode_tensor(X.reshape(n * cells, -1))
    idx = nearest_codes(z_e.data, model.codes.data)
    z_q = ad.Tensor(model.codes.data[idx])
    decoded = model.decode_tensor(z_q, R.reshape(n * cells, -1)).data
    bce = reconstruction_loss(decoded, Y.reshape(n * cells, -1))
    return {
        "recon_bce_per_pixel": bce / (n * c.height * c.width),
        "perplexity": perplexity(idx, c.K),
        "codes_used": int(np.unique(idx).size),
    }


def write_log(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
