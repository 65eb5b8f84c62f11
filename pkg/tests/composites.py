"""Finite-difference audits of the three composite training losses.

Each audit builds a tiny float64 instance, takes the reverse-mode gradient of
the package's loss, and compares it with central differences on a random
subset of coordinates of every parameter tensor.

The quantized-autoencoder loss contains straight-through and stop-gradient
terms, whose value is piecewise constant in some inputs.  Its audit therefore
differentiates a *surrogate* written out here by hand: the same formula with
every stop-gradient operand replaced by its value at the base point.  The
package gradient must equal the true derivative of that surrogate.
"""
from __future__ import annotations

import numpy as np

from vdrive import autodiff as ad
from vdrive import cvqvae, policy, refine
from vdrive.nn import MLP

from .oracles import fd_sampled, rel_err


def _compare(f, params, grads, rng, n_coords=6, h=1e-5) -> float:
    worst = 0.0
    for p, idx, num in fd_sampled(f, params, rng, n_coords, h):
        analytic = grads[p].reshape(-1)[idx]
        worst = max(worst, rel_err(analytic, num))
    return worst


def _off_kinks(module, rng) -> None:
    """Jitter all-zero bias vectors.

    With zero biases, a sample whose ReLU layer is entirely inactive hands the
    next layer a pre-activation of exactly 0, i.e. a point on the kink where
    central differences are meaningless.
    """
    for p in module.parameters():
        if p.data.ndim == 1 and not p.data.any():
            p.data[...] = rng.normal(0.0, 0.1, size=p.data.shape)


def vq_audit(rng) -> float:
    B, cells, Dc, K, p2 = 2, 4, 3, 5, 4
    with ad.precision(np.float64):
        enc = MLP([6, 5, Dc], rng)
        dec = MLP([Dc + p2, 5, p2], rng)
        _off_kinks(enc, rng)
        _off_kinks(dec, rng)
        codes = ad.parameter(rng.normal(size=(K, Dc)))
        x = rng.normal(size=(B * cells, 6))
        raster = (rng.random((B, cells, p2)) < 0.3).astype(np.float64)
        target = (rng.random((B, cells, p2)) < 0.5).astype(np.float64)
        beta = float(rng.uniform(0.1, 1.0))

        def decoder(z, r):
            return ad.sigmoid(dec(ad.concat([z, ad.Tensor(r)], axis=-1)))

        def z_e_of():
            return ad.reshape(enc(ad.Tensor(x)), (B, cells, Dc))

        z0 = z_e_of().data
        index = cvqvae.nearest_codes(z0, codes.data).reshape(B, cells)
        terms = cvqvae.vq_loss(z_e_of(), codes, index, decoder, raster, target, beta)
        params = enc.parameters() + dec.parameters() + [codes]
        grads = ad.backward(terms["total"])

        # frozen copies of every stop-gradient operand at the base point
        zq_base = codes.data[index].copy()
        ze_base = z0.copy()

        def surrogate():
            z_e = z_e_of()
            z_q = ad.embedding(codes, index)
            # straight-through: forward value z_q, derivative of the identity in z_e
            z_st = ad.add(z_e, ad.Tensor(zq_base - ze_base))
            decoded = decoder(z_st, raster)
            recon = ad.scale(ad.bce(decoded, ad.Tensor(target), reduction="sum"), 1.0 / B)
            cb = ad.scale(ad.sum_(ad.square(ad.sub(z_q, ad.Tensor(ze_base)))), 1.0 / B)
            cm = ad.scale(ad.sum_(ad.square(ad.sub(z_e, ad.Tensor(zq_base)))), 1.0 / B)
            return ad.add(ad.add(recon, cb), ad.scale(cm, beta))

        assert abs(float(surrogate().data) - float(terms["total"].data)) < 1e-12
        return _compare(surrogate, params, grads, rng)


def _tiny_policy_config(**kw) -> policy.PolicyConfig:
    base = dict(n_codes=4, cells=3, hidden=6, token_dim=2, state_dim=5, time_dim=4, diffusion_steps=4)
    base.update(kw)
    return policy.PolicyConfig(**base)


def tiny_transitions(rng, n: int, cfg: policy.PolicyConfig, reward: float | None = None) -> policy.TransitionBatch:
    from vdrive.scene import ActionTriplet, NavCommand

    def state():
        tok = rng.integers(4, cfg.vocab, size=cfg.cells)
        return policy.PolicyState(tok, rng.integers(4, cfg.vocab, size=cfg.cells),
                                  ActionTriplet.from_array(rng.uniform([-1, 0, 0], [1, 1, 1])),
                                  NavCommand.from_index(int(rng.integers(3))))

    trs = [policy.Transition(state(), ActionTriplet.from_array(rng.uniform([-1, 0, 0], [1, 1, 1])),
                             float(rng.normal()) if reward is None else reward, state()) for _ in range(n)]
    return policy.TransitionBatch.of(trs)


def actor_audit(rng) -> float:
    cfg = _tiny_policy_config()
    sched = policy.NoiseSchedule.cosine(cfg.diffusion_steps)
    with ad.precision(np.float64):
        actor = policy.DiffusionActor(cfg, rng)
        _off_kinks(actor, rng)
        batch = tiny_transitions(rng, 2, cfg)
        t = rng.integers(0, cfg.diffusion_steps, size=2)
        eps = rng.standard_normal((2, 3))

        def f():
            return policy.actor_loss(actor, batch, sched, t=t, eps=eps)

        grads = ad.backward(f())
        return _compare(f, actor.parameters(), grads, rng)


def refine_audit(rng) -> float:
    cfg = refine.RefineConfig(horizon=4, dim=8, depth=2)
    with ad.precision(np.float64):
        head = refine.init_head(cfg, seed=int(rng.integers(1 << 30)))
        _off_kinks(head, rng)
        # the zero-initialised decode layer would hide every upstream gradient
        head.decode.w.data[...] = rng.normal(0.0, 0.3, size=head.decode.w.shape)
        head.decode.b.data[...] = rng.normal(0.0, 0.1, size=head.decode.b.shape)
        c = rng.uniform(0, 64, size=(3, 4, 2))
        U = rng.uniform(0, 1, size=(3, 2, 3))
        gt = c + rng.normal(0, 1.5, size=c.shape)

        def f():
            return refine.refinement_loss(head, c, U, gt)

        grads = ad.backward(f())
        return _compare(f, head.parameters(), grads, rng)
