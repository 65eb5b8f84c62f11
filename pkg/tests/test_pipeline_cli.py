import json
import subprocess
import sys

import numpy as np
import pytest

from vdrive import cli, pipeline, reward, vdtn
from vdrive.metrics import EvalReport

TINY = ["data.train_episodes=12", "data.eval_episodes=6", "data.preference_pairs=4", "data.cvqvae_episodes=4",
        "cvqvae.steps=20", "oracle.steps=5", "policy.steps=5", "policy.batch=16", "refine.steps=10",
        "eval.plots=false"]


def tiny_args():
    return [a for kv in TINY for a in ("--set", kv)]


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = pipeline.load_config(None, TINY)
    report = pipeline.run_pipeline(cfg, 0, root)
    return cfg, root, report


class TestConfig:
    def test_overrides_parse_json(self):
        cfg = pipeline.load_config(None, ["policy.omega_q=0.5", "eval.horizons=[2,4]", "pipeline.train=false"])
        assert cfg["policy"]["omega_q"] == 0.5 and cfg["eval"]["horizons"] == [2, 4]
        assert cfg["pipeline"]["train"] is False

    @pytest.mark.parametrize("bad", ["policy.nope=1", "nosection.x=1", "policy", "policy.gamma=1.5"])
    def test_rejected(self, bad):
        with pytest.raises(ValueError):
            pipeline.load_config(None, [bad])

    def test_hash_canonical(self):
        a = pipeline.load_config(None, ["policy.steps=7"])
        b = json.loads(json.dumps(a, sort_keys=False))
        assert pipeline.config_hash(a) == pipeline.config_hash(b)
        assert pipeline.config_hash(a) != pipeline.config_hash(pipeline.load_config(None, ["policy.steps=8"]))

    def test_config_file_merge(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"policy": {"steps": 3}}))
        assert pipeline.load_config(p)["policy"]["steps"] == 3
        p.write_text(json.dumps({"policy": {"stepz": 3}}))
        with pytest.raises(ValueError):
            pipeline.load_config(p)

    def test_stage_seeds_differ(self):
        seeds = {pipeline.stage_seed(0, s) for s in pipeline.STAGES}
        assert len(seeds) == len(pipeline.STAGES)


class TestPipeline:
    def test_artifacts(self, built):
        _, root, report = built
        for rel in ("data/episodes_train.jsonl", "cvqvae/index.json", "oracle/index.json", "rewards/rewards.jsonl",
                    "transitions/transitions.jsonl", "policy/index.json", "refine/index.json", "eval/report.json",
                    "eval/trajectories.vdtn", "config.json"):
            assert (root / rel).exists(), rel
        assert report.n_samples == 6
        assert set(report.l2) == {"k3", "k5", "k8"}

    def test_deterministic_report(self, built, tmp_path):
        cfg, root, _ = built
        again = pipeline.run_pipeline(cfg, 0, tmp_path)
        assert (tmp_path / "eval/report.json").read_bytes() == (root / "eval/report.json").read_bytes()
        assert (tmp_path / "eval/trajectories.vdtn").read_bytes() == (root / "eval/trajectories.vdtn").read_bytes()
        assert again.config_hash == pipeline.config_hash(cfg)

    def test_reward_recomputed_from_artifacts(self, built):
        cfg, root, report = built
        trajs = vdtn.read(root / "eval/trajectories.vdtn").astype(np.float64)
        scenes = [ep[1] for ep in pipeline.read_episodes(root / "data/episodes_eval.jsonl")]
        rcfg = reward.RewardConfig(**cfg["reward"])
        again = np.mean([reward.score(s, t, rcfg).r for s, t in zip(scenes, trajs)])
        assert again == report.mean_reward

    def test_eval_only_reuses_checkpoints(self, built):
        cfg, root, report = built
        cfg2 = json.loads(json.dumps(cfg))
        cfg2["pipeline"]["train"] = False
        r2 = pipeline.run_pipeline(cfg2, 0, root)
        assert r2.mean_reward == report.mean_reward and r2.l2 == report.l2

    def test_missing_artifact_names_stage(self, tmp_path):
        cfg = pipeline.load_config(None, TINY)
        with pytest.raises(pipeline.MissingArtifact) as err:
            pipeline.run_stage("train-policy", cfg, tmp_path, 0)
        assert "build-transitions" in str(err.value)

    def test_transitions_roundtrip(self, built):
        _, root, _ = built
        trs, eps, meta = pipeline.read_transitions(root / "transitions/transitions.jsonl")
        assert len(trs) == len(eps) == 12 * 4
        assert all(np.isfinite(t.r) for t in trs)


class TestCli:
    def run(self, argv, capsys):
        code = cli.main(argv)
        return code, capsys.readouterr()

    def test_run_pipeline_matches_api(self, built, tmp_path, capsys):
        _, root, report = built
        code, out = self.run(["run-pipeline", "--data-dir", str(tmp_path)] + tiny_args(), capsys)
        assert code == 0
        assert EvalReport.from_json(out.out) == report
        assert out.out == report.to_json()

    def test_env_data_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("VDRIVE_DATA_DIR", str(tmp_path / "env"))
        code, _ = self.run(["gen-data"] + tiny_args(), capsys)
        assert code == 0
        assert (tmp_path / "env/data/episodes_train.jsonl").exists()

    def test_missing_artifact_exit(self, tmp_path, capsys):
        code, out = self.run(["eval", "--data-dir", str(tmp_path)] + tiny_args(), capsys)
        assert code == 2 and "gen-data" in out.err

    def test_bad_override_exit(self, tmp_path, capsys):
        code, out = self.run(["gen-data", "--data-dir", str(tmp_path), "--set", "policy.bogus=1"], capsys)
        assert code == 2 and "bogus" in out.err

    def test_argparse_errors_exit_2(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["no-such-verb"])
        assert err.value.code == 2

    def test_divergence_exit_3(self, built, tmp_path, capsys, monkeypatch):
        _, root, _ = built
        from vdrive import policy
        from vdrive.cvqvae import TrainingDivergence

        def boom(*a, **k):
            raise TrainingDivergence(4, "policy loss")

        monkeypatch.setattr(policy, "train", boom)
        code, out = self.run(["policy", "train", "--dataset", str(root / "transitions/transitions.jsonl"),
                              "--out", str(tmp_path / "p")], capsys)
        assert code == 3 and "diverged" in out.err

    def test_report_from_files(self, built, tmp_path, capsys):
        _, _, report = built
        paths = []
        for i, w in enumerate((0.0, 0.5, 1.0)):
            r = EvalReport(**{**report.__dict__, "mean_reward": float(i), "extra": {"omega_q": w, "action_reward": 0.0}})
            paths.append(tmp_path / f"r{i}.json")
            paths[-1].write_text(r.to_json())
        code, out = self.run(["report", "--reports"] + [str(p) for p in paths], capsys)
        assert code == 0
        assert "reward vs omega_q: monotone non-decreasing" in out.out
        assert "action reward vs omega_q: monotone non-decreasing" in out.out
        assert out.out.count("| up |") == 2

    def test_module_tools(self, built, tmp_path, capsys):
        _, root, _ = built
        eps = str(root / "data/episodes_train.jsonl")
        manifest = str(root / "data/preferences.jsonl")
        cvq = str(root / "cvqvae")
        tr = str(root / "transitions/transitions.jsonl")
        small = ["--set", "cvqvae.steps=2", "--set", "oracle.steps=2", "--set", "refine.steps=2"]

        code, out = self.run(["reward", "score", "--manifest", manifest, "--out", str(tmp_path / "r.jsonl")], capsys)
        assert code == 0 and json.loads(out.out)["scored"] == 8
        code, _ = self.run(["cvqvae", "train", "--manifest", manifest, "--out", str(tmp_path / "cv")] + small, capsys)
        assert code == 0 and (tmp_path / "cv/log.jsonl").exists()
        code, out = self.run(["cvqvae", "tokens", "--checkpoint", cvq, "--manifest", manifest,
                              "--out", str(tmp_path / "t.vdtn")], capsys)
        assert code == 0 and vdtn.read(tmp_path / "t.vdtn").shape == (8, 64)
        code, _ = self.run(["cvqvae", "encode", "--checkpoint", cvq, "--manifest", manifest,
                            "--out", str(tmp_path / "z.vdtn")], capsys)
        assert code == 0 and vdtn.read(tmp_path / "z.vdtn").shape[:3] == (8, 8, 8)
        code, _ = self.run(["oracle", "pretrain", "--episodes", eps, "--cvqvae", cvq,
                            "--out", str(tmp_path / "o")] + small, capsys)
        assert code == 0
        code, out = self.run(["oracle", "predict", "--checkpoint", str(root / "oracle"), "--cvqvae", cvq,
                              "--manifest", manifest, "--out", str(tmp_path / "pred.jsonl")], capsys)
        assert code == 0 and json.loads(out.out)["predicted"] == 8
        code, out = self.run(["oracle", "score", "--checkpoint", str(root / "oracle"), "--cvqvae", cvq,
                              "--episodes", eps, "--out", str(tmp_path / "sc.jsonl")], capsys)
        assert code == 0 and 0.0 <= json.loads(out.out)["prefers_chosen"] <= 1.0
        code, _ = self.run(["policy", "train", "--dataset", tr, "--omega-q", "0", "--steps", "2",
                            "--out", str(tmp_path / "pol")], capsys)
        assert code == 0
        code, out = self.run(["policy", "sample", "--checkpoint", str(tmp_path / "pol"), "--dataset", tr,
                              "--out", str(tmp_path / "a.jsonl")], capsys)
        assert code == 0 and json.loads(out.out)["sampled"] == 12
        code, out = self.run(["policy", "eval", "--checkpoint", str(tmp_path / "pol"), "--dataset", tr], capsys)
        assert code == 0 and json.loads(out.out)["omega_q"] == 0.0
        code, _ = self.run(["refine", "train", "--episodes", eps, "--out", str(tmp_path / "rf")] + small, capsys)
        assert code == 0
        rows = [{"trajectory": np.full((8, 2), 30.0).tolist(), "actions": [[0, 0.5, 0], [0, 0.5, 0]]}]
        (tmp_path / "in.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        code, _ = self.run(["refine", "apply", "--checkpoint", str(root / "refine"), "--input",
                            str(tmp_path / "in.jsonl"), "--out", str(tmp_path / "out.jsonl")], capsys)
        assert code == 0
        refined = json.loads((tmp_path / "out.jsonl").read_text())["refined"]
        assert np.asarray(refined).shape == (8, 2)

    def test_untrained_oracle_exit(self, built, tmp_path, capsys):
        _, root, _ = built
        from vdrive import oracle
        m = oracle.TokenOracle(oracle.OracleConfig(), np.random.default_rng(0))
        m.save(tmp_path / "raw")
        code, out = self.run(["oracle", "predict", "--checkpoint", str(tmp_path / "raw"), "--cvqvae",
                              str(root / "cvqvae"), "--manifest", str(root / "data/preferences.jsonl"),
                              "--out", str(tmp_path / "x.jsonl")], capsys)
        assert code == 2 and "untrained" in out.err


@pytest.mark.slow
def test_sweep_and_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vdrive.cli", "report", "--data-dir", str(tmp_path)] + tiny_args(),
                          capture_output=True, text=True, check=True)
    assert "omega_q" in proc.stdout and "reward vs omega_q" in proc.stdout
    for w in ("0", "0.5", "1"):
        assert (tmp_path / f"sweep/omega_{w}/report.json").exists()
    assert (tmp_path / "sweep/comparison.md").read_text() == proc.stdout
