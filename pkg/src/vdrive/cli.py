"""``vdrive`` command line.

Pipeline verbs (``gen-data`` ... ``eval``, ``report``, ``run-pipeline``) work on the
artifact root given by ``--data-dir`` or ``VDRIVE_DATA_DIR``.  Module tools
(``reward``, ``cvqvae``, ``oracle``, ``policy``, ``refine``) work on explicit files.

Exit codes: 0 success, 2 validation failure, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corridor, cvqvae, oracle, pipeline, policy, refine, reward, scene, vdtn
from .cvqvae import TrainingDivergence
from .metrics import EvalReport

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


def _emit(obj) -> None:
    if isinstance(obj, EvalReport):
        sys.stdout.write(obj.to_json())
    elif isinstance(obj, str):
        sys.stdout.write(obj)
    else:
        sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2, default=float) + "\n")


def _config(args) -> dict:
    return pipeline.load_config(args.config, args.set or [])


def _section(args, name: str) -> dict:
    return _config(args)[name]


# ---------------------------------------------------------------------------
# pipeline verbs


def cmd_stage(args) -> None:
    cfg = _config(args)
    root = pipeline.data_root(args.data_dir)
    _emit(pipeline.run_stage(args.stage, cfg, root, args.seed))


def cmd_run_pipeline(args) -> None:
    _emit(pipeline.run_pipeline(_config(args), args.seed, pipeline.data_root(args.data_dir)))


def cmd_report(args) -> None:
    if args.reports:
        reports = [EvalReport.from_json(Path(p).read_text()) for p in args.reports]
        _emit(pipeline.comparison_table(reports))
        return
    omegas = tuple(float(v) for v in args.omegas.split(","))
    _, table = pipeline.omega_sweep(_config(args), args.seed, omegas, pipeline.data_root(args.data_dir))
    _emit(table)


# ---------------------------------------------------------------------------
# module tools


def cmd_reward_score(args) -> None:
    cfg = reward.RewardConfig(alpha=args.alpha, beta=args.beta, omega_h=args.omega_h, omega_a=args.omega_a)
    rows = pipeline.score_manifest(args.manifest, cfg)
    pipeline._write_jsonl(Path(args.out), rows)
    _emit({"scored": len(rows), "out": str(args.out)})


def _manifest_scenes(path) -> list[scene.SceneSample]:
    rows = pipeline._read_jsonl(Path(path))
    if rows and "frames" in rows[0]:
        return [f for ep in pipeline.read_episodes(path) for f in ep]
    return scene.load_manifest(path)


def cmd_cvqvae_train(args) -> None:
    scenes = _manifest_scenes(args.manifest)
    model, history = cvqvae.train(scenes, cvqvae.CvqVaeConfig(**_section(args, "cvqvae")), args.seed)
    model.save(args.out)
    cvqvae.write_log(history, Path(args.out) / "log.jsonl")
    _emit(cvqvae.evaluate(model, scenes))


def cmd_cvqvae_encode(args) -> None:
    model = cvqvae.CvqVae.load(args.checkpoint)
    z = np.stack([model.encode(s.image, s.trajectory) for s in _manifest_scenes(args.manifest)])
    vdtn.write(args.out, z.astype(np.float32))
    _emit({"shape": list(z.shape), "out": str(args.out)})


def cmd_cvqvae_tokens(args) -> None:
    model = cvqvae.CvqVae.load(args.checkpoint)
    toks = np.stack([model.tokens_for_scene(s) for s in _manifest_scenes(args.manifest)])
    vdtn.write(args.out, toks.astype(np.float32))
    _emit({"shape": list(toks.shape), "out": str(args.out)})


def _episode_tokens(cvq_dir, episodes):
    model = cvqvae.CvqVae.load(cvq_dir)
    return [[model.tokens_for_scene(f) for f in ep] for ep in episodes]


def cmd_oracle_pretrain(args) -> None:
    episodes = pipeline.read_episodes(args.episodes)
    pairs = pipeline._oracle_pairs(episodes, _episode_tokens(args.cvqvae, episodes))
    model, history = oracle.pretrain_tokens(pairs, oracle.OracleConfig(**_section(args, "oracle")), args.seed)
    model.save(args.out)
    pipeline._write_jsonl(Path(args.out) / "log.jsonl", history)
    _emit(history[-1])


def cmd_oracle_predict(args) -> None:
    model = oracle.TokenOracle.load(args.checkpoint)
    scenes = _manifest_scenes(args.manifest)
    cvq = cvqvae.CvqVae.load(args.cvqvae)
    preds = pipeline._predict_frames(model, scenes, [cvq.tokens_for_scene(s) for s in scenes])
    rows = [{"id": s.id, "tokens": [int(t) for t in p.tokens], "action": [float(v) for v in p.action.as_array()],
             "nav": p.nav.index, "trajectory": p.trajectory.tolist(), "timestamp": p.timestamp}
            for s, p in zip(scenes, preds)]
    pipeline._write_jsonl(Path(args.out), rows)
    _emit({"predicted": len(rows), "out": str(args.out)})


def cmd_oracle_score(args) -> None:
    """Log-likelihood of each true next frame against a risky variant of it."""
    model = oracle.TokenOracle.load(args.checkpoint)
    episodes = pipeline.read_episodes(args.episodes)
    cvq = cvqvae.CvqVae.load(args.cvqvae)
    rows = []
    for e, ep in enumerate(episodes):
        prev, nxt = ep[0], ep[1]
        risky = scene.generate_risky_variant(nxt, scene.derive_seed(args.seed, e))
        lp_c, lp_r = oracle.score_preference(
            model, oracle.state_from_scene(prev, cvq.tokens_for_scene(prev)),
            oracle.state_from_scene(nxt, cvq.tokens_for_scene(nxt), 1),
            oracle.state_from_scene(risky, cvq.tokens_for_scene(risky), 1))
        rows.append({"episode": e, "logp_chosen": lp_c, "logp_rejected": lp_r})
    pipeline._write_jsonl(Path(args.out), rows)
    _emit({"scored": len(rows), "prefers_chosen": float(np.mean([r["logp_chosen"] > r["logp_rejected"] for r in rows]))})


def _policy_config(args) -> policy.PolicyConfig:
    cfg = _section(args, "policy")
    for key in ("omega_q", "gamma", "steps"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    return policy.PolicyConfig(**cfg)


def cmd_policy_train(args) -> None:
    transitions, _, _ = pipeline.read_transitions(args.dataset)
    model, history = policy.train(transitions, _policy_config(args), args.seed)
    model.save(args.out)
    pipeline._write_jsonl(Path(args.out) / "log.jsonl", history)
    _emit(history[-1] if history else {})


def _dataset_states(path):
    transitions, eps, meta = pipeline.read_transitions(path)
    seen, states, episodes = set(), [], []
    for t, e in zip(transitions, eps):
        if e not in seen:
            seen.add(e)
            states.append(t.s)
            episodes.append(e)
    return states, episodes, meta


def cmd_policy_sample(args) -> None:
    model = policy.PolicyModel.load(args.checkpoint)
    states, episodes, _ = _dataset_states(args.dataset)
    actions = model.sample(policy.StateBatch.of(states), seed=args.seed)
    rows = [{"episode": e, "action": [float(v) for v in a]} for e, a in zip(episodes, actions)]
    pipeline._write_jsonl(Path(args.out), rows)
    _emit({"sampled": len(rows), "out": str(args.out)})


def cmd_policy_eval(args) -> None:
    model = policy.PolicyModel.load(args.checkpoint)
    states, episodes, meta = _dataset_states(args.dataset)
    all_eps = pipeline.read_episodes(Path(args.dataset).parent / meta["episodes"])
    scenes = [all_eps[e][1] for e in episodes]
    actions = model.sample(policy.StateBatch.of(states), seed=args.seed)
    _emit({"mean_reward": corridor.mean_policy_reward(actions, scenes), "states": len(states),
           "omega_q": model.config.omega_q})


def cmd_refine_train(args) -> None:
    episodes = pipeline.read_episodes(args.episodes)
    rc = refine.RefineConfig(**_section(args, "refine"))
    C, U, G = refine.make_pairs(episodes, args.seed, rc.jitter)
    head, history = refine.train_refinement(C, U, G, rc, args.seed)
    head.save(args.out)
    pipeline._write_jsonl(Path(args.out) / "log.jsonl", history)
    _emit(history[-1] if history else {})


def cmd_refine_apply(args) -> None:
    """Input rows carry ``trajectory`` (N x 2) and ``actions`` (2 x 3)."""
    head = refine.RefinementHead.load(args.checkpoint)
    rows = pipeline._read_jsonl(Path(args.input))
    if not rows:
        raise ValueError("no input rows")
    C = np.array([r["trajectory"] for r in rows], dtype=np.float64)
    U = np.array([r["actions"] for r in rows], dtype=np.float64)
    out = refine.refine(C, U, head)
    pipeline._write_jsonl(Path(args.out), [{**r, "refined": o.tolist()} for r, o in zip(rows, out)])
    _emit({"refined": len(rows), "out": str(args.out)})


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, data_dir: bool = True) -> None:
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. policy.steps=100")
    p.add_argument("--seed", type=int, default=0)
    if data_dir:
        p.add_argument("--data-dir", help="artifact root (default: $VDRIVE_DATA_DIR or ./vdrive_data)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdrive", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in pipeline.STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        p.set_defaults(func=cmd_stage, stage=stage)

    p = sub.add_parser("run-pipeline", help="run every stage in order and write the eval report")
    _common(p)
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("report", help="omega_Q sweep comparison table")
    _common(p)
    p.add_argument("--omegas", default="0,0.5,1")
    p.add_argument("--reports", nargs="+", help="tabulate existing report.json files instead of running a sweep")
    p.set_defaults(func=cmd_report)

    # reward
    rw = sub.add_parser("reward").add_subparsers(dest="tool", required=True)
    p = rw.add_parser("score")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--omega-h", type=float, default=1.0)
    p.add_argument("--omega-a", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reward_score)

    # cvqvae
    cv = sub.add_parser("cvqvae").add_subparsers(dest="tool", required=True)
    p = cv.add_parser("train")
    _common(p, data_dir=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cvqvae_train)
    for name, fn in (("encode", cmd_cvqvae_encode), ("tokens", cmd_cvqvae_tokens)):
        p = cv.add_parser(name)
        _common(p, data_dir=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    # oracle
    orc = sub.add_parser("oracle").add_subparsers(dest="tool", required=True)
    p = orc.add_parser("pretrain")
    _common(p, data_dir=False)
    p.add_argument("--episodes", required=True)
    p.add_argument("--cvqvae", required=True, help="tokenizer checkpoint directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_pretrain)
    p = orc.add_parser("predict")
    _common(p, data_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cvqvae", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_predict)
    p = orc.add_parser("score")
    _common(p, data_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cvqvae", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_score)

    # policy
    po = sub.add_parser("policy").add_subparsers(dest="tool", required=True)
    p = po.add_parser("train")
    _common(p, data_dir=False)
    p.add_argument("--dataset", required=True, help="transitions.jsonl")
    p.add_argument("--omega-q", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_policy_train)
    for name, fn in (("sample", cmd_policy_sample), ("eval", cmd_policy_eval)):
        p = po.add_parser(name)
        _common(p, data_dir=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--omega-q", type=float, help="accepted for symmetry; the checkpoint's value is used")
        p.add_argument("--gamma", type=float, help="accepted for symmetry; the checkpoint's value is used")
        if name == "sample":
            p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    # refine
    rf = sub.add_parser("refine").add_subparsers(dest="tool", required=True)
    p = rf.add_parser("train")
    _common(p, data_dir=False)
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine_train)
    p = rf.add_parser("apply")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine_apply)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError, OSError, oracle.UntrainedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
