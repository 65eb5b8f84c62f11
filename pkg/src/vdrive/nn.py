"""Layers, parameter containers and Adam on top of :mod:`vdrive.autodiff`."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameters are Tensor attributes; submodules are Module attributes or lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint dims {list(arr.shape)} != model dims {p.dims}")
            p.data = arr.astype(p.data.dtype)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False, gain: float = 1.0):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, gain / math.sqrt(n_in), size=(n_in, n_out))
        self.w = ad.parameter(w)
        self.b = ad.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class MLP(Module):
    """Linear layers with ReLU in between (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, zero_last: bool = False, last_gain: float = 1.0):
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng,
                   zero=zero_last and i == n - 1,
                   gain=last_gain if i == n - 1 else math.sqrt(2.0))
            for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x), self.gain), self.bias)


class EncoderBlock(Module):
    """Pre-norm single-head self-attention followed by a ReLU feedforward."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or 2 * dim
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng, gain=0.5)
        self.ln2 = LayerNorm(dim)
        self.ff = MLP([dim, hidden, dim], rng, last_gain=0.5)
        self.dim = dim

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        # x: (B, T, D); mask: (T, T) additive, -inf style entries for blocked pairs
        d = self.dim
        h = self.qkv(self.ln1(x))
        q = ad.slice_(h, (Ellipsis, slice(0, d)))
        k = ad.slice_(h, (Ellipsis, slice(d, 2 * d)))
        v = ad.slice_(h, (Ellipsis, slice(2 * d, 3 * d)))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
        if mask is not None:
            bias = np.broadcast_to(mask, scores.shape).astype(scores.data.dtype)
            scores = ad.add(scores, ad.Tensor(bias))
        attn = ad.softmax(scores, axis=-1)
        x = ad.add(x, self.out(ad.matmul(attn, v)))
        return ad.add(x, self.ff(self.ln2(x)))


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9), k=1)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        gs = [grads[p].astype(np.float64) if p in grads else np.zeros(p.shape) for p in self.params]
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in gs))
            if norm > self.grad_clip:
                gs = [g * (self.grad_clip / norm) for g in gs]
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 100.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def seed_rng(*keys: int) -> np.random.Generator:
    """Generator keyed on a tuple of integers; used to derive per-stage and per-sample streams."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))
