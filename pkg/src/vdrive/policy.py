"""Conditional diffusion action head with twin critics, trained offline.

The denoiser predicts the clean action from a noised one (x0 parameterisation)
under a variance-preserving cosine schedule.  Training minimises the
denoising loss minus a critic term, where the critic value is evaluated on
actions drawn through the full differentiable reverse chain.
"""
from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import vdtn
from .cvqvae import TOKEN_BASE, TrainingDivergence
from .nn import MLP, Adam, Linear, Module, seed_rng, sinusoidal_embedding
from .scene import ActionTriplet, NavCommand

log = logging.getLogger(__name__)

ACTION_LO = np.array([-1.0, 0.0, 0.0])
ACTION_HI = np.array([1.0, 1.0, 1.0])


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray
    sigma: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.alpha)

    @classmethod
    def cosine(cls, steps: int = 16) -> "NoiseSchedule":
        """``alpha_t = cos(pi/2 * t/T)``, ``sigma_t = sin(pi/2 * t/T)`` for ``t = 0..T-1``."""
        if steps < 1:
            raise ValueError("need at least one diffusion step")
        phase = 0.5 * math.pi * np.arange(steps) / steps
        return cls(alpha=np.cos(phase), sigma=np.sin(phase))


def corrupt(a0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.steps):
        raise ValueError(f"diffusion step outside [0, {schedule.steps})")
    a0 = np.asarray(a0, dtype=np.float64)
    alpha = schedule.alpha[t]
    sigma = schedule.sigma[t]
    if a0.ndim == 2:
        alpha, sigma = alpha[:, None], sigma[:, None]
    return alpha * a0 + sigma * np.asarray(eps, dtype=np.float64)


@dataclass
class PolicyState:
    tokens_current: np.ndarray  # frame t-1, (cells,)
    tokens_predicted: np.ndarray  # oracle's frame t, (cells,)
    u0: ActionTriplet
    nav: NavCommand


@dataclass
class Transition:
    s: PolicyState
    a: ActionTriplet
    r: float
    s_next: PolicyState

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError("transition reward must be finite")


@dataclass
class StateBatch:
    cur: np.ndarray
    pred: np.ndarray
    u0: np.ndarray
    nav: np.ndarray

    def __len__(self) -> int:
        return len(self.cur)

    def take(self, idx) -> "StateBatch":
        return StateBatch(self.cur[idx], self.pred[idx], self.u0[idx], self.nav[idx])

    @classmethod
    def of(cls, states: list[PolicyState]) -> "StateBatch":
        return cls(
            cur=np.stack([np.asarray(s.tokens_current, dtype=np.int64) for s in states]),
            pred=np.stack([np.asarray(s.tokens_predicted, dtype=np.int64) for s in states]),
            u0=np.stack([s.u0.as_array() for s in states]),
            nav=np.stack([s.nav.as_array() for s in states]),
        )


@dataclass
class TransitionBatch:
    s: StateBatch
    a: np.ndarray
    r: np.ndarray
    s_next: StateBatch

    def __len__(self) -> int:
        return len(self.a)

    def take(self, idx) -> "TransitionBatch":
        return TransitionBatch(self.s.take(idx), self.a[idx], self.r[idx], self.s_next.take(idx))

    @classmethod
    def of(cls, transitions: list[Transition]) -> "TransitionBatch":
        if not transitions:
            raise ValueError("empty transition batch")
        return cls(
            s=StateBatch.of([t.s for t in transitions]),
            a=np.stack([t.a.as_array() for t in transitions]),
            r=np.array([t.r for t in transitions], dtype=np.float64),
            s_next=StateBatch.of([t.s_next for t in transitions]),
        )


@dataclass
class PolicyConfig:
    n_codes: int = 32
    cells: int = 64
    diffusion_steps: int = 16
    gamma: float = 0.9
    omega_q: float = 1.0
    tau: float = 0.005
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    batch: int = 256
    steps: int = 2000
    hidden: int = 128
    token_dim: int = 4
    state_dim: int = 64
    time_dim: int = 16

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.omega_q < 0:
            raise ValueError("omega_q must be >= 0")

    @property
    def vocab(self) -> int:
        return TOKEN_BASE + self.n_codes


class StateEncoder(Module):
    """Embeds both token grids, flattens them through a learned linear pooling, adds u0 and nav."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        c = config
        self.emb = ad.parameter(rng.normal(0.0, 0.5, size=(c.vocab, c.token_dim)))
        self.pool = Linear(2 * c.cells * c.token_dim + 6, c.state_dim, rng, gain=math.sqrt(2.0))
        self.cells = c.cells
        self.token_dim = c.token_dim

    def __call__(self, s: StateBatch) -> ad.Tensor:
        B = len(s)
        flat = self.cells * self.token_dim
        cur = ad.reshape(ad.embedding(self.emb, s.cur), (B, flat))
        pred = ad.reshape(ad.embedding(self.emb, s.pred), (B, flat))
        extra = ad.Tensor(np.concatenate([s.u0, s.nav], axis=1).astype(self.emb.data.dtype))
        return ad.relu(self.pool(ad.concat([cur, pred, extra], axis=1)))


class DiffusionActor(Module):
    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.encoder = StateEncoder(c, rng)
        self.net = MLP([3 + c.time_dim + c.state_dim, c.hidden, c.hidden, 3], rng)

    def denoise(self, a_t, t: np.ndarray, s: StateBatch, features: ad.Tensor | None = None) -> ad.Tensor:
        """Predicted clean action for noisy ``a_t`` at steps ``t``."""
        feats = features if features is not None else self.encoder(s)
        dt = feats.data.dtype
        a_t = a_t if isinstance(a_t, ad.Tensor) else ad.Tensor(np.asarray(a_t, dtype=dt))
        temb = ad.Tensor(sinusoidal_embedding(np.asarray(t), self.config.time_dim).astype(dt))
        return self.net(ad.concat([a_t, temb, feats], axis=1))


class Critic(Module):
    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        self.encoder = StateEncoder(config, rng)
        self.net = MLP([config.state_dim + 3, config.hidden, config.hidden, 1], rng)

    def __call__(self, s: StateBatch, a) -> ad.Tensor:
        feats = self.encoder(s)
        a = a if isinstance(a, ad.Tensor) else ad.Tensor(np.asarray(a, dtype=feats.data.dtype))
        return ad.reshape(self.net(ad.concat([feats, a], axis=1)), (len(s),))


class TwinCritic(Module):
    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        self.q1 = Critic(config, rng)
        self.q2 = Critic(config, rng)
        self.target_q1 = copy.deepcopy(self.q1)
        self.target_q2 = copy.deepcopy(self.q2)

    def online(self) -> list[ad.Tensor]:
        return self.q1.parameters() + self.q2.parameters()

    def target_min(self, s: StateBatch, a: np.ndarray) -> np.ndarray:
        return np.minimum(self.target_q1(s, a).data, self.target_q2(s, a).data).astype(np.float64)

    def polyak(self, tau: float) -> None:
        for online, target in ((self.q1, self.target_q1), (self.q2, self.target_q2)):
            for p, tp in zip(online.parameters(), target.parameters()):
                tp.data = ((1.0 - tau) * tp.data + tau * p.data).astype(tp.data.dtype)


# ---------------------------------------------------------------------------
# losses and sampling


def actor_loss(actor, batch: TransitionBatch, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
               t: np.ndarray | None = None, eps: np.ndarray | None = None) -> ad.Tensor:
    """Batch mean of ``|| denoise(a_t, t | s) - a_0 ||^2``."""
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.integers(0, schedule.steps, size=B)
    if eps is None:
        eps = rng.standard_normal((B, 3))
    a_t = corrupt(batch.a, t, eps, schedule)
    pred = actor.denoise(a_t, t, batch.s)
    target = ad.Tensor(batch.a.astype(pred.data.dtype))
    return ad.scale(ad.mse(pred, target), 3.0)


def _posterior(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Coefficients on (x_t, x0_hat) and the std of q(x_{t-1} | x_t, x0)."""
    a_t, s_t = schedule.alpha[t], schedule.sigma[t]
    a_p, s_p = schedule.alpha[t - 1], schedule.sigma[t - 1]
    a_ts = a_t / a_p
    var_ts = s_t ** 2 - a_ts ** 2 * s_p ** 2
    c_x = a_ts * s_p ** 2 / s_t ** 2
    c_0 = a_p * var_ts / s_t ** 2
    std = math.sqrt(max(var_ts * s_p ** 2 / s_t ** 2, 0.0))
    return c_x, c_0, std


def sample_action(actor, s: StateBatch, schedule: NoiseSchedule, rng: np.random.Generator,
                  differentiable: bool = False) -> ad.Tensor:
    """Ancestral reverse chain from pure noise; clamped to the action box.

    With ``differentiable`` the chain stays on the autodiff graph so a critic
    value of the result can be backpropagated into the actor.
    """
    B = len(s)
    feats = actor.encoder(s) if hasattr(actor, "encoder") else None
    if feats is not None and not differentiable:
        feats = ad.stop_gradient(feats)
    dt = feats.data.dtype if feats is not None else ad.default_dtype()
    x = ad.Tensor(rng.standard_normal((B, 3)).astype(dt))
    for t in range(schedule.steps - 1, -1, -1):
        tt = np.full(B, t)
        x0 = actor.denoise(x, tt, s, features=feats) if feats is not None else actor.denoise(x, tt, s)
        if not differentiable:
            x0 = ad.stop_gradient(x0)
        if t == 0:
            x = x0
            break
        c_x, c_0, std = _posterior(schedule, t)
        noise = rng.standard_normal((B, 3)).astype(dt)
        x = ad.add(ad.add(ad.scale(x, c_x), ad.scale(x0, c_0)), ad.Tensor(std * noise))
    lo = np.broadcast_to(ACTION_LO, (B, 3))
    hi = np.broadcast_to(ACTION_HI, (B, 3))
    return ad.clip(x, lo, hi)


def sample_actions(actor, states: list[PolicyState], schedule: NoiseSchedule, seed: int) -> list[ActionTriplet]:
    out = sample_action(actor, StateBatch.of(states), schedule, seed_rng(seed, 31)).data
    return [ActionTriplet.from_array(a) for a in out]


def critic_update(batch: TransitionBatch, critic: TwinCritic, actor, config: PolicyConfig,
                  schedule: NoiseSchedule, rng: np.random.Generator, opt: Adam,
                  target_action=None) -> float:
    """One TD(0) regression step for both critics, then a Polyak target update.

    ``target_action`` overrides the next action (used by toy problems without an actor).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if config.gamma > 0:
        if target_action is None:
            a_next = sample_action(actor, batch.s_next, schedule, rng).data
        else:
            a_next = np.asarray(target_action)
        y = batch.r + config.gamma * critic.target_min(batch.s_next, a_next)
    else:
        y = batch.r.copy()
    target = ad.Tensor(y.astype(critic.q1.net.layers[0].w.data.dtype))
    loss = ad.add(ad.mse(critic.q1(batch.s, batch.a), target), ad.mse(critic.q2(batch.s, batch.a), target))
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergence(-1, "critic loss")
    opt.step(ad.backward(loss))
    critic.polyak(config.tau)
    return value


def policy_objective(actor, critic, batch: TransitionBatch, config: PolicyConfig, schedule: NoiseSchedule,
                     rng: np.random.Generator) -> dict[str, ad.Tensor]:
    """``L_total = L_diffusion - omega_q * mean(Q(s, a0)) / sg(mean |Q|)``."""
    l_d = actor_loss(actor, batch, schedule, rng)
    if config.omega_q == 0:
        return {"total": l_d, "diffusion": l_d, "q": ad.Tensor(np.zeros((), dtype=l_d.data.dtype))}
    a0 = sample_action(actor, batch.s, schedule, rng, differentiable=True)
    q = critic(batch.s, a0) if not isinstance(critic, TwinCritic) else critic.q1(batch.s, a0)
    norm = max(float(np.abs(q.data).mean()), 1e-8)
    l_q = ad.scale(ad.mean(q), -config.omega_q / norm)
    return {"total": ad.add(l_d, l_q), "diffusion": l_d, "q": l_q}


# ---------------------------------------------------------------------------
# training


class PolicyModel:
    """Actor, twin critic, schedule and their optimizers."""

    def __init__(self, config: PolicyConfig, seed: int = 0):
        rng = seed_rng(seed, 41)
        self.config = config
        self.schedule = NoiseSchedule.cosine(config.diffusion_steps)
        self.actor = DiffusionActor(config, rng)
        self.critic = TwinCritic(config, rng)
        self.actor_opt = Adam(self.actor.parameters(), lr=config.lr_actor, grad_clip=10.0)
        self.critic_opt = Adam(self.critic.online(), lr=config.lr_critic, grad_clip=10.0)

    def policy_step(self, batch: TransitionBatch, rng: np.random.Generator) -> dict[str, float]:
        terms = policy_objective(self.actor, self.critic, batch, self.config, self.schedule, rng)
        total = float(terms["total"].data)
        if not math.isfinite(total):
            raise TrainingDivergence(-1, "policy loss")
        grads = ad.backward(terms["total"])
        self.actor_opt.step({p: grads[p] for p in self.actor.parameters() if p in grads})
        return {"total": total, "diffusion": float(terms["diffusion"].data), "q": float(terms["q"].data)}

    def sample(self, states: StateBatch, seed: int) -> np.ndarray:
        return sample_action(self.actor, states, self.schedule, seed_rng(seed, 31)).data.astype(np.float64)

    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> Path:
        tensors = {f"actor.{k}": v for k, v in self.actor.state_dict().items()}
        tensors.update({f"critic.{k}": v for k, v in self.critic.state_dict().items()})
        meta = {"kind": "policy", "config": asdict(self.config), **(extra or {})}
        return vdtn.save_checkpoint(directory, tensors, meta)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "PolicyModel":
        tensors, meta = vdtn.load_checkpoint(directory)
        if meta.get("kind") != "policy":
            raise ValueError(f"{directory} is not a policy checkpoint")
        model = cls(PolicyConfig(**meta["config"]))
        model.actor.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("actor.")})
        crit = {k[7:]: v for k, v in tensors.items() if k.startswith("critic.")}
        model.critic.q1.load_state_dict({k[3:]: v for k, v in crit.items() if k.startswith("q1.")})
        model.critic.q2.load_state_dict({k[3:]: v for k, v in crit.items() if k.startswith("q2.")})
        model.critic.target_q1.load_state_dict({k[10:]: v for k, v in crit.items() if k.startswith("target_q1.")})
        model.critic.target_q2.load_state_dict({k[10:]: v for k, v in crit.items() if k.startswith("target_q2.")})
        return model


def train(transitions, config: PolicyConfig = PolicyConfig(), seed: int = 0) -> tuple[PolicyModel, list[dict]]:
    """Offline actor-critic training; reads only the given transitions."""
    data = transitions if isinstance(transitions, TransitionBatch) else TransitionBatch.of(list(transitions))
    model = PolicyModel(config, seed)
    rng = seed_rng(seed, 42)
    n = len(data)
    history = []
    for step in range(config.steps):
        idx = rng.choice(n, size=min(config.batch, n), replace=False)
        batch = data.take(idx)
        row = {"step": step}
        try:
            if config.omega_q > 0:
                row["critic"] = critic_update(batch, model.critic, model.actor, config, model.schedule, rng,
                                              model.critic_opt)
            row.update(model.policy_step(batch, rng))
        except TrainingDivergence as exc:
            raise TrainingDivergence(step, str(exc)) from exc
        history.append(row)
        if step % 200 == 0:
            log.info("policy step %d %s", step, {k: round(v, 4) for k, v in row.items() if k != "step"})
    return model, history
