"""Tiny autoregressive next-state model over scene tokens.

Given the previous frame's tokens, action and navigation command, it emits
the current frame's tokens greedily, then reads the current action,
navigation command and trajectory off continuous heads.

Sequence layout (length ``2 * cells + 2``)::

    [CTX] prev_0 .. prev_{cells-1} [SEP] next_0 .. next_{cells-1}

``CTX`` is a projection of the previous action and navigation command.  The
hidden state at ``SEP`` and at each ``next_i`` predicts the following token;
the hidden state at the last position feeds the continuous heads.
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
from .cvqvae import TOKEN_BASE, TrainingDivergence
from .nn import MLP, Adam, EncoderBlock, LayerNorm, Linear, Module, causal_mask, seed_rng
from .scene import ActionTriplet, NavCommand

log = logging.getLogger(__name__)

SEP = 2


@dataclass
class StateTuple:
    tokens: np.ndarray | None  # (cells,) int64 token ids, None when unknown
    action: ActionTriplet
    nav: NavCommand
    trajectory: np.ndarray | None = None  # (N, 2)
    timestamp: int = 0


@dataclass
class OracleConfig:
    n_codes: int = 32
    cells: int = 64
    n_points: int = 8
    dim: int = 48
    depth: int = 2
    lr: float = 3e-3
    steps: int = 1500
    batch: int = 8
    aux_weight: float = 1.0
    height: int = 64
    width: int = 64

    @property
    def vocab(self) -> int:
        return TOKEN_BASE + self.n_codes

    @property
    def seq_len(self) -> int:
        return 2 * self.cells + 2


class UntrainedError(RuntimeError):
    pass


class TokenOracle(Module):
    def __init__(self, config: OracleConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.tok_emb = ad.parameter(rng.normal(0.0, 0.3, size=(c.vocab, c.dim)))
        self.pos_emb = ad.parameter(rng.normal(0.0, 0.1, size=(c.seq_len, c.dim)))
        self.ctx = MLP([6, c.dim, c.dim], rng)
        self.blocks = [EncoderBlock(c.dim, rng) for _ in range(c.depth)]
        self.ln_f = LayerNorm(c.dim)
        self.token_head = Linear(c.dim, c.vocab, rng, gain=0.01)
        self.action_head = Linear(c.dim, 3, rng)
        self.nav_head = Linear(c.dim, 3, rng)
        self.traj_head = Linear(c.dim, 2 * c.n_points, rng)
        self.trained = False

    def hidden(self, ctx: np.ndarray, seq: np.ndarray) -> ad.Tensor:
        """``ctx``: (B, 6); ``seq``: (B, L-1) token ids after the CTX slot."""
        B, L1 = seq.shape
        L = L1 + 1
        c_emb = ad.reshape(self.ctx(ad.Tensor(ctx.astype(self.tok_emb.data.dtype))), (B, 1, self.config.dim))
        t_emb = ad.embedding(self.tok_emb, seq)
        x = ad.concat([c_emb, t_emb], axis=1)
        x = ad.add(x, ad.slice_(self.pos_emb, (slice(0, L),)))
        mask = causal_mask(L)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)

    def heads(self, h_last: ad.Tensor) -> dict[str, ad.Tensor]:
        a = self.action_head(h_last)
        steer = ad.tanh(ad.slice_(a, (slice(None), slice(0, 1))))
        pedals = ad.sigmoid(ad.slice_(a, (slice(None), slice(1, 3))))
        return {
            "action": ad.concat([steer, pedals], axis=1),
            "nav_logits": self.nav_head(h_last),
            "traj": self.traj_head(h_last),  # normalised by (width, height)
        }

    # -- persistence ----------------------------------------------------------
    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> Path:
        meta = {"kind": "oracle", "config": asdict(self.config), "trained": self.trained, **(extra or {})}
        return vdtn.save_checkpoint(directory, self.state_dict(), meta)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TokenOracle":
        tensors, meta = vdtn.load_checkpoint(directory)
        if meta.get("kind") != "oracle":
            raise ValueError(f"{directory} is not an oracle checkpoint")
        model = cls(OracleConfig(**meta["config"]), np.random.default_rng(0))
        model.load_state_dict(tensors)
        model.trained = bool(meta.get("trained", False))
        return model


def _ctx(state: StateTuple) -> np.ndarray:
    return np.concatenate([state.action.as_array(), state.nav.as_array()])


def _check_tokens(tokens: np.ndarray, config: OracleConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (config.cells,):
        raise ValueError(f"expected {config.cells} tokens, got shape {tokens.shape}")
    if tokens.min() < TOKEN_BASE or tokens.max() >= config.vocab:
        raise ValueError(f"token ids must lie in [{TOKEN_BASE}, {config.vocab}); vocabulary mismatch")
    return tokens


def _teacher_batch(model: TokenOracle, prevs, nexts):
    c = model.config
    ctx = np.stack([_ctx(p) for p in prevs])
    prev_tok = np.stack([_check_tokens(p.tokens, c) for p in prevs])
    next_tok = np.stack([_check_tokens(n.tokens, c) for n in nexts])
    sep = np.full((len(prevs), 1), SEP, dtype=np.int64)
    seq = np.concatenate([prev_tok, sep, next_tok], axis=1)
    return ctx, seq, next_tok


def _losses(model: TokenOracle, prevs, nexts) -> dict[str, ad.Tensor]:
    c = model.config
    ctx, seq, next_tok = _teacher_batch(model, prevs, nexts)
    B = len(prevs)
    h = model.hidden(ctx, seq)
    # positions 1+cells (SEP) .. 2*cells predict next tokens
    h_tok = ad.slice_(h, (slice(None), slice(c.cells + 1, 2 * c.cells + 1)))
    logp = ad.log_softmax(model.token_head(h_tok), axis=-1)
    onehot = np.zeros(logp.shape, dtype=logp.data.dtype)
    np.put_along_axis(onehot, next_tok[:, :, None], 1.0, axis=2)
    token_ce = ad.scale(ad.sum_(ad.mul(logp, ad.Tensor(onehot))), -1.0 / (B * c.cells))

    out = model.heads(ad.slice_(h, (slice(None), -1)))
    act = np.stack([n.action.as_array() for n in nexts])
    nav = np.stack([n.nav.as_array() for n in nexts])
    scale = np.array([c.width, c.height], dtype=np.float64)
    traj = np.stack([(np.asarray(n.trajectory) / scale).reshape(-1) for n in nexts])
    dt = out["action"].data.dtype
    act_l = ad.mse(out["action"], ad.Tensor(act.astype(dt)))
    nav_l = ad.scale(ad.sum_(ad.mul(ad.log_softmax(out["nav_logits"]), ad.Tensor(nav.astype(dt)))), -1.0 / B)
    traj_l = ad.mse(out["traj"], ad.Tensor(traj.astype(dt)))
    aux = ad.add(ad.add(act_l, nav_l), ad.scale(traj_l, 10.0))
    total = ad.add(token_ce, ad.scale(aux, c.aux_weight))
    acc = float((logp.data.argmax(axis=-1) == next_tok).mean())
    return {"total": total, "token_ce": token_ce, "action": act_l, "nav": nav_l, "traj": traj_l, "accuracy": acc}


def pretrain_tokens(dataset, config: OracleConfig = OracleConfig(), seed: int = 0) -> tuple[TokenOracle, list[dict]]:
    """Teacher-forced training on ``(prev, next)`` StateTuple pairs."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("oracle dataset is empty")
    rng = seed_rng(seed, 21)
    model = TokenOracle(config, rng)
    for prev, nxt in dataset:
        _check_tokens(prev.tokens, config)
        _check_tokens(nxt.tokens, config)
    opt = Adam(model.parameters(), lr=config.lr, grad_clip=1.0)
    history = []
    n = len(dataset)
    for step in range(config.steps):
        batch = rng.choice(n, size=min(config.batch, n), replace=False)
        terms = _losses(model, [dataset[i][0] for i in batch], [dataset[i][1] for i in batch])
        total = float(terms["total"].data)
        if not math.isfinite(total):
            raise TrainingDivergence(step)
        opt.step(ad.backward(terms["total"]))
        history.append({"step": step, "total": total, "token_ce": float(terms["token_ce"].data),
                        "action": float(terms["action"].data), "nav": float(terms["nav"].data),
                        "traj": float(terms["traj"].data), "token_accuracy": terms["accuracy"]})
        if step % 200 == 0:
            log.info("oracle step %d ce %.4f acc %.3f", step, history[-1]["token_ce"], terms["accuracy"])
    model.trained = True
    return model, history


def initial_token_loss(dataset, config: OracleConfig = OracleConfig(), seed: int = 0) -> float:
    model = TokenOracle(config, seed_rng(seed, 21))
    dataset = list(dataset)
    return float(_losses(model, [d[0] for d in dataset], [d[1] for d in dataset])["token_ce"].data)


def predict_batch(model: TokenOracle, prevs: list[StateTuple]) -> list[StateTuple]:
    if not model.trained:
        raise UntrainedError("oracle parameters are untrained; run pretrain_tokens first")
    c = model.config
    ctx = np.stack([_ctx(p) for p in prevs])
    B = len(prevs)
    seq = np.concatenate([np.stack([_check_tokens(p.tokens, c) for p in prevs]),
                          np.full((B, 1), SEP, dtype=np.int64)], axis=1)
    for _ in range(c.cells):
        h = model.hidden(ctx, seq)
        logits = model.token_head(ad.slice_(h, (slice(None), -1))).data
        # restrict to codebook ids; specials are never emitted
        nxt = TOKEN_BASE + np.argmax(logits[:, TOKEN_BASE:], axis=1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    h = model.hidden(ctx, seq)
    out = model.heads(ad.slice_(h, (slice(None), -1)))
    scale = np.array([c.width, c.height], dtype=np.float64)
    results = []
    for i, prev in enumerate(prevs):
        traj = out["traj"].data[i].astype(np.float64).reshape(c.n_points, 2) * scale
        results.append(StateTuple(
            tokens=seq[i, c.cells + 1:].copy(),
            action=ActionTriplet.from_array(out["action"].data[i]),
            nav=NavCommand.from_index(int(np.argmax(out["nav_logits"].data[i]))),
            trajectory=traj,
            timestamp=prev.timestamp + 1,
        ))
    return results


def predict_next(model: TokenOracle, prev: StateTuple) -> StateTuple:
    return predict_batch(model, [prev])[0]


def sequence_logprob(model: TokenOracle, prev: StateTuple, nxt: StateTuple) -> float:
    """Teacher-forced log-likelihood of the discrete outputs (tokens and nav command)."""
    c = model.config
    ctx, seq, next_tok = _teacher_batch(model, [prev], [nxt])
    h = model.hidden(ctx, seq)
    logp = ad.log_softmax(model.token_head(ad.slice_(h, (slice(None), slice(c.cells + 1, 2 * c.cells + 1)))))
    tok_lp = np.take_along_axis(logp.data[0].astype(np.float64), next_tok[0][:, None], axis=1).sum()
    nav_lp = ad.log_softmax(model.heads(ad.slice_(h, (slice(None), -1)))["nav_logits"]).data[0, nxt.nav.index]
    return float(min(0.0, tok_lp + float(nav_lp)))


def score_preference(model: TokenOracle, prev: StateTuple, chosen: StateTuple,
                     rejected: StateTuple) -> tuple[float, float]:
    return sequence_logprob(model, prev, chosen), sequence_logprob(model, prev, rejected)


def state_from_scene(scene, tokens: np.ndarray, timestamp: int = 0) -> StateTuple:
    return StateTuple(tokens=np.asarray(tokens, dtype=np.int64), action=scene.action, nav=scene.nav,
                      trajectory=np.asarray(scene.trajectory, dtype=np.float64), timestamp=timestamp)
