"""Stage orchestration: data -> tokenizer -> oracle -> rewards -> transitions -> policy -> refinement -> eval.

Every stage reads and writes artifacts under one root directory (``VDRIVE_DATA_DIR``
or an explicit path) and is seeded from the master seed, so a stage can be
re-run on its own from the CLI.  Reports carry the resolved config and its hash.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corridor, cvqvae, metrics, oracle, policy, refine, reward, scene, vdtn
from .metrics import EvalReport

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-cvqvae", "pretrain-oracle", "build-rewards", "build-transitions",
          "train-policy", "train-refine", "eval")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing artifact {path}; run stage '{stage}' first")
        self.stage = stage


def default_config() -> dict:
    return {
        "scene": asdict(scene.SceneParams()),
        "data": {"train_episodes": 120, "eval_episodes": 40, "frames": 3, "preference_pairs": 16,
                 "cvqvae_episodes": 32},
        "cvqvae": asdict(cvqvae.CvqVaeConfig(steps=600)),
        "oracle": asdict(oracle.OracleConfig(steps=1000, batch=16)),
        "reward": asdict(reward.RewardConfig()),
        "transitions": {"actions_per_state": 4, "predictor": "oracle"},
        "policy": asdict(policy.PolicyConfig(steps=300, batch=128)),
        "refine": asdict(refine.RefineConfig(steps=600)),
        "eval": {"horizons": list(metrics.DEFAULT_HORIZONS), "footprint": list(metrics.DEFAULT_FOOTPRINT),
                 "plots": True},
        "pipeline": {"train": True},
    }


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; unknown keys are rejected."""
    cfg = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(raw)
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides: list[str] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        cfg = _merge(cfg, user)
    cfg = apply_overrides(cfg, list(overrides))
    validate_config(cfg)
    return _jsonable(cfg)


def _merge(base: dict, user: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in user.items():
        if k not in out:
            raise ConfigError(f"unknown config key {prefix}{k!r}")
        out[k] = _merge(out[k], v, f"{prefix}{k}.") if isinstance(out[k], dict) and isinstance(v, dict) else v
    return out


def validate_config(cfg: dict) -> None:
    try:
        scene_params(cfg).validate()
        cvqvae.CvqVaeConfig(**cfg["cvqvae"])
        oracle.OracleConfig(**cfg["oracle"])
        reward.RewardConfig(**cfg["reward"])
        policy.PolicyConfig(**cfg["policy"])
        refine.RefineConfig(**cfg["refine"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    d = cfg["data"]
    if d["frames"] < 3 or d["frames"] > cfg["scene"]["max_frames"]:
        raise ConfigError("data.frames must be >= 3 and <= scene.max_frames")
    for k in ("train_episodes", "eval_episodes", "preference_pairs", "cvqvae_episodes"):
        if d[k] < 1:
            raise ConfigError(f"data.{k} must be >= 1")
    if cfg["transitions"]["predictor"] not in ("oracle", "ground_truth"):
        raise ConfigError("transitions.predictor must be 'oracle' or 'ground_truth'")
    if any(k > cfg["scene"]["n_points"] for k in cfg["eval"]["horizons"]):
        raise ConfigError("eval horizons exceed the trajectory length")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def scene_params(cfg: dict) -> scene.SceneParams:
    s = dict(cfg["scene"])
    for k in ("corridor_width", "curvature", "speed"):
        s[k] = tuple(s[k])
    return scene.SceneParams(**s)


def data_root(path: str | os.PathLike | None = None) -> Path:
    return Path(path or os.environ.get("VDRIVE_DATA_DIR") or "vdrive_data")


def stage_seed(seed: int, stage: str) -> int:
    return scene.derive_seed(seed, STAGES.index(stage) + 1)


# ---------------------------------------------------------------------------
# artifacts


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(stage, path)
    return path


def _write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_episodes(root: Path, episodes: list[list[scene.SceneSample]], split: str) -> Path:
    rows = []
    for e, frames in enumerate(episodes):
        rows.append({"episode": e, "split": split,
                     "frames": [scene.scene_row(f, root, f"{split}{e:04d}_f{j}") for j, f in enumerate(frames)]})
    path = root / f"episodes_{split}.jsonl"
    _write_jsonl(path, rows)
    return path


def read_episodes(path: str | os.PathLike) -> list[list[scene.SceneSample]]:
    path = Path(path)
    return [[scene.load_scene(r, path.parent) for r in row["frames"]] for row in _read_jsonl(path)]


def _episodes(root: Path, split: str) -> list[list[scene.SceneSample]]:
    return read_episodes(_require(root / "data" / f"episodes_{split}.jsonl", "gen-data"))


def _tokens(root: Path, split: str) -> np.ndarray:
    return vdtn.read(_require(root / "cvqvae" / f"tokens_{split}.vdtn", "train-cvqvae")).astype(np.int64)


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg: dict, root: Path, seed: int) -> dict:
    params = scene_params(cfg)
    d = cfg["data"]
    s = stage_seed(seed, "gen-data")
    out = root / "data"
    train = [scene.generate_sequence(scene.derive_seed(s, 0, i), params, d["frames"]) for i in range(d["train_episodes"])]
    held = [scene.generate_sequence(scene.derive_seed(s, 1, i), params, d["frames"]) for i in range(d["eval_episodes"])]
    write_episodes(out, train, "train")
    write_episodes(out, held, "eval")
    scene.build_preference_dataset(d["preference_pairs"], scene.derive_seed(s, 2), out, params)
    return {"train_episodes": len(train), "eval_episodes": len(held), "preference_pairs": d["preference_pairs"]}


def train_cvqvae(cfg: dict, root: Path, seed: int) -> dict:
    train = _episodes(root, "train")
    held = _episodes(root, "eval")
    frames = [f for ep in train[: cfg["data"]["cvqvae_episodes"]] for f in ep]
    model, history = cvqvae.train(frames, cvqvae.CvqVaeConfig(**cfg["cvqvae"]), stage_seed(seed, "train-cvqvae"))
    out = root / "cvqvae"
    model.save(out)
    cvqvae.write_log(history, out / "log.jsonl")
    for split, eps in (("train", train), ("eval", held)):
        toks = np.stack([[model.tokens_for_scene(f) for f in ep] for ep in eps])
        vdtn.write(out / f"tokens_{split}.vdtn", toks.astype(np.float32))
    return cvqvae.evaluate(model, frames)


def _oracle_pairs(episodes, tokens) -> list[tuple[oracle.StateTuple, oracle.StateTuple]]:
    pairs = []
    for ep, tok in zip(episodes, tokens):
        for j in range(len(ep) - 1):
            pairs.append((oracle.state_from_scene(ep[j], tok[j], j), oracle.state_from_scene(ep[j + 1], tok[j + 1], j + 1)))
    return pairs


def pretrain_oracle(cfg: dict, root: Path, seed: int) -> dict:
    episodes = _episodes(root, "train")
    pairs = _oracle_pairs(episodes, _tokens(root, "train"))
    model, history = oracle.pretrain_tokens(pairs, oracle.OracleConfig(**cfg["oracle"]), stage_seed(seed, "pretrain-oracle"))
    out = root / "oracle"
    model.save(out)
    _write_jsonl(out / "log.jsonl", history)
    return {"final_token_ce": history[-1]["token_ce"], "final_token_accuracy": history[-1]["token_accuracy"]}


def _load_oracle(root: Path) -> oracle.TokenOracle:
    _require(root / "oracle" / "index.json", "pretrain-oracle")
    return oracle.TokenOracle.load(root / "oracle")


def build_rewards(cfg: dict, root: Path, seed: int) -> dict:
    """Score every preference scene's logged trajectory with the hybrid reward."""
    manifest = _require(root / "data" / "preferences.jsonl", "gen-data")
    config = reward.RewardConfig(**cfg["reward"])
    rows = score_manifest(manifest, config)
    _write_jsonl(root / "rewards" / "rewards.jsonl", rows)
    chosen = [r["r"] for r in rows if r["tag"] != "synthetic-risky"]
    rejected = [r["r"] for r in rows if r["tag"] == "synthetic-risky"]
    return {"mean_chosen": float(np.mean(chosen)), "mean_rejected": float(np.mean(rejected))}


def score_manifest(manifest: str | os.PathLike, config: reward.RewardConfig) -> list[dict]:
    rows = []
    for sc in scene.load_manifest(manifest):
        rec = reward.score(sc, None, config)
        rows.append({"id": sc.id, "tag": sc.tag, **rec.to_json()})
    return rows


def _predict_frames(model: oracle.TokenOracle, frames, tokens, chunk: int = 64) -> list[oracle.StateTuple]:
    prevs = [oracle.state_from_scene(f, t) for f, t in zip(frames, tokens)]
    out = []
    for i in range(0, len(prevs), chunk):
        out.extend(oracle.predict_batch(model, prevs[i:i + chunk]))
    return out


def build_transitions_stage(cfg: dict, root: Path, seed: int) -> dict:
    episodes = _episodes(root, "train")
    tokens = _tokens(root, "train")
    predictors = None
    if cfg["transitions"]["predictor"] == "oracle":
        model = _load_oracle(root)
        frames = [ep[j] for ep in episodes for j in (0, 1)]
        toks = [tok[j] for tok in tokens for j in (0, 1)]
        preds = _predict_frames(model, frames, toks)
        lookup = {id(f): p for f, p in zip(frames, preds)}
        predictors = [lambda f, _t, lk=lookup: (lk[id(f)].tokens, lk[id(f)].action, lk[id(f)].nav)] * len(episodes)
    transitions, _ = corridor.build_transitions(
        episodes, [list(t) for t in tokens], predictors, cfg["transitions"]["actions_per_state"],
        stage_seed(seed, "build-transitions"), reward.RewardConfig(**cfg["reward"]))
    per = cfg["transitions"]["actions_per_state"]
    write_transitions(root / "transitions", transitions, [i // per for i in range(len(transitions))],
                      "../data/episodes_train.jsonl")
    rs = np.array([t.r for t in transitions])
    return {"transitions": len(transitions), "mean_reward": float(rs.mean())}


def write_transitions(out: Path, transitions: list[policy.Transition], episode_index: list[int],
                      episodes_manifest: str) -> Path:
    """JSONL rows plus a ``(n, 4, cells)`` token grid: s.current, s.predicted, s'.current, s'.predicted."""
    out.mkdir(parents=True, exist_ok=True)
    grids = np.stack([[t.s.tokens_current, t.s.tokens_predicted, t.s_next.tokens_current, t.s_next.tokens_predicted]
                      for t in transitions])
    vdtn.write(out / "tokens.vdtn", grids.astype(np.float32))
    rows = [{"index": i, "episode": int(e), "a": [float(v) for v in t.a.as_array()], "r": float(t.r),
             "s_u0": [float(v) for v in t.s.u0.as_array()], "s_nav": int(t.s.nav.index),
             "s_next_u0": [float(v) for v in t.s_next.u0.as_array()], "s_next_nav": int(t.s_next.nav.index)}
            for i, (t, e) in enumerate(zip(transitions, episode_index))]
    _write_jsonl(out / "transitions.jsonl", rows)
    (out / "meta.json").write_text(json.dumps({"episodes": episodes_manifest, "tokens": "tokens.vdtn"}, sort_keys=True))
    return out / "transitions.jsonl"


def read_transitions(path: str | os.PathLike) -> tuple[list[policy.Transition], list[int], dict]:
    path = Path(path)
    meta = json.loads((path.parent / "meta.json").read_text())
    grids = vdtn.read(path.parent / meta["tokens"]).astype(np.int64)
    A, N = scene.ActionTriplet.from_array, scene.NavCommand.from_index
    out, eps = [], []
    for row in _read_jsonl(path):
        g = grids[row["index"]]
        s = policy.PolicyState(g[0], g[1], A(row["s_u0"]), N(row["s_nav"]))
        s2 = policy.PolicyState(g[2], g[3], A(row["s_next_u0"]), N(row["s_next_nav"]))
        out.append(policy.Transition(s=s, a=A(row["a"]), r=row["r"], s_next=s2))
        eps.append(row["episode"])
    return out, eps, meta


def train_policy(cfg: dict, root: Path, seed: int, out: Path | None = None) -> dict:
    path = _require(root / "transitions" / "transitions.jsonl", "build-transitions")
    transitions, _, _ = read_transitions(path)
    model, history = policy.train(transitions, policy.PolicyConfig(**cfg["policy"]), stage_seed(seed, "train-policy"))
    out = out or root / "policy"
    model.save(out)
    _write_jsonl(out / "log.jsonl", history)
    return {"final_total": history[-1]["total"] if history else None}


def train_refine(cfg: dict, root: Path, seed: int) -> dict:
    episodes = _episodes(root, "train")
    rc = refine.RefineConfig(**cfg["refine"])
    s = stage_seed(seed, "train-refine")
    C, U, G = refine.make_pairs(episodes, s, rc.jitter)
    head, history = refine.train_refinement(C, U, G, rc, s)
    out = root / "refine"
    head.save(out)
    _write_jsonl(out / "log.jsonl", history)
    return {"final_mse": history[-1]["mse"] if history else None}


def evaluate(cfg: dict, root: Path, seed: int, policy_dir: Path | None = None,
             out: Path | None = None) -> EvalReport:
    """Held-out episodes: oracle prediction -> policy action -> rollout -> refinement -> metrics."""
    episodes = _episodes(root, "eval")
    tokens = _tokens(root, "eval")
    ora = _load_oracle(root)
    policy_dir = policy_dir or root / "policy"
    _require(policy_dir / "index.json", "train-policy")
    _require(root / "refine" / "index.json", "train-refine")
    pm = policy.PolicyModel.load(policy_dir)
    head = refine.RefinementHead.load(root / "refine")
    s = stage_seed(seed, "eval")

    preds = _predict_frames(ora, [ep[0] for ep in episodes], [t[0] for t in tokens])
    states = [policy.PolicyState(t[0], p.tokens, p.action, p.nav) for t, p in zip(tokens, preds)]
    actions = pm.sample(policy.StateBatch.of(states), seed=s)
    scenes = [ep[1] for ep in episodes]
    # the oracle's trajectory is the coarse plan; the action pair steers its refinement
    coarse = np.stack([p.trajectory for p in preds])
    U = np.stack([[p.action.as_array(), scene.ActionTriplet.from_array(a).as_array()] for p, a in zip(preds, actions)])
    refined = refine.refine(coarse, U, head)
    # metrics are computed on the emitted (float32) trajectories so they can be recomputed from disk
    emitted = refined.astype(np.float32).astype(np.float64)
    gt = np.stack([sc.trajectory for sc in scenes])
    rcfg = reward.RewardConfig(**cfg["reward"])
    rewards = np.array([reward.score(sc, tr, rcfg).r for sc, tr in zip(scenes, emitted)])
    coarse32 = coarse.astype(np.float32).astype(np.float64)
    ev = cfg["eval"]
    report = EvalReport(
        l2=metrics.l2_metric(emitted, gt, ev["horizons"]),
        collision_rate=metrics.collision_rate(emitted, scenes, tuple(ev["footprint"])),
        mean_reward=float(rewards.mean()),
        n_samples=len(scenes),
        config_hash=config_hash(cfg),
        seed=int(seed),
        config=cfg,
        extra={"omega_q": float(pm.config.omega_q),
               "coarse_l2": metrics.l2_metric(coarse32, gt, ev["horizons"]),
               "coarse_reward": float(np.mean([reward.score(sc, tr, rcfg).r for sc, tr in zip(scenes, coarse32)])),
               # reward of the policy's own action rolled out in the current frame
               "action_reward": corridor.mean_policy_reward(actions, scenes, rcfg)},
    )
    out = out or root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    vdtn.write(out / "trajectories.vdtn", emitted.astype(np.float32))
    vdtn.write(out / "actions.vdtn", actions.astype(np.float32))
    if ev.get("plots", True):
        from . import plots
        plots.write_all(root, out, rewards)
    return report


STAGE_FUNCS = {
    "gen-data": gen_data,
    "train-cvqvae": train_cvqvae,
    "pretrain-oracle": pretrain_oracle,
    "build-rewards": build_rewards,
    "build-transitions": build_transitions_stage,
    "train-policy": train_policy,
    "train-refine": train_refine,
    "eval": evaluate,
}


def run_stage(stage: str, cfg: dict, root: Path, seed: int):
    log.info("stage %s", stage)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    return STAGE_FUNCS[stage](cfg, root, seed)


def run_pipeline(cfg: dict, seed: int, root: Path | None = None) -> EvalReport:
    """All stages in order; with ``pipeline.train`` false only ``eval`` runs on existing checkpoints."""
    root = data_root(root)
    stages = STAGES if cfg["pipeline"]["train"] else ("eval",)
    result = None
    for stage in stages:
        result = run_stage(stage, cfg, root, seed)
    return result


def omega_sweep(cfg: dict, seed: int, omegas=(0.0, 0.5, 1.0), root: Path | None = None) -> tuple[list[EvalReport], str]:
    """Shared upstream stages, then one policy and one report per omega_Q."""
    root = data_root(root)
    if cfg["pipeline"]["train"]:
        for stage in STAGES[:-3]:
            run_stage(stage, cfg, root, seed)
        run_stage("train-refine", cfg, root, seed)
    reports = []
    for w in omegas:
        c = copy.deepcopy(cfg)
        c["policy"]["omega_q"] = float(w)
        d = root / "sweep" / f"omega_{w:g}"
        if cfg["pipeline"]["train"]:
            train_policy(c, root, seed, out=d / "policy")
        reports.append(evaluate(c, root, seed, policy_dir=d / "policy", out=d))
    table = comparison_table(reports)
    (root / "sweep" / "comparison.md").write_text(table)
    return reports, table


def _trend(prev: float, cur: float) -> str:
    return "up" if cur > prev else ("down" if cur < prev else "flat")


def _verdict(tags: list[str]) -> str:
    if all(t in ("up", "flat") for t in tags):
        return "monotone non-decreasing"
    if all(t in ("down", "flat") for t in tags):
        return "monotone non-increasing"
    return "not monotone"


def comparison_table(reports: list[EvalReport]) -> str:
    """Markdown table ordered by omega_Q; reward columns are tagged up/down/flat against the previous row."""
    rows = sorted(reports, key=lambda r: r.extra.get("omega_q", 0.0))
    keys = sorted(rows[0].l2)
    lines = ["| omega_q | mean_reward | trend | action_reward | trend | collision_rate | "
             + " | ".join(f"l2_{k}" for k in keys) + " |",
             "|" + "---|" * (6 + len(keys))]
    emitted, action = [], []
    for i, r in enumerate(rows):
        ar = r.extra.get("action_reward", float("nan"))
        if i == 0:
            t1 = t2 = "base"
        else:
            t1 = _trend(rows[i - 1].mean_reward, r.mean_reward)
            t2 = _trend(rows[i - 1].extra.get("action_reward", float("nan")), ar)
            emitted.append(t1)
            action.append(t2)
        lines.append(f"| {r.extra.get('omega_q', 0.0):g} | {r.mean_reward:.4f} | {t1} | {ar:.4f} | {t2} | "
                     f"{r.collision_rate:.4f} | " + " | ".join(f"{r.l2[k]:.4f}" for k in keys) + " |")
    lines.append("")
    lines.append(f"reward vs omega_q: {_verdict(emitted)}")
    lines.append(f"action reward vs omega_q: {_verdict(action)}")
    return "\n".join(lines) + "\n"
