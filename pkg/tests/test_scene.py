import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdrive import reward, scene
from vdrive.scene import ActionTriplet, NavCommand, SceneParams

from .oracles import naive_off_road


def _same(a: scene.SceneSample, b: scene.SceneSample) -> bool:
    return (np.array_equal(a.drivable_mask, b.drivable_mask) and np.array_equal(a.obstacle_mask, b.obstacle_mask)
            and a.image.tobytes() == b.image.tobytes() and a.trajectory.tobytes() == b.trajectory.tobytes()
            and a.action == b.action and a.nav == b.nav and a.boxes == b.boxes)


def test_deterministic():
    assert _same(scene.generate_scene(17), scene.generate_scene(17))
    assert not _same(scene.generate_scene(17), scene.generate_scene(18))


def test_straight_corridor_constant_x():
    p = SceneParams(curvature=(0.0, 0.0))
    for seed in range(10):
        s = scene.generate_scene(seed, p)
        assert np.all(s.trajectory[:, 0] == s.trajectory[0, 0])


def test_ground_truth_on_road_100_seeds():
    for seed in range(100):
        s = scene.generate_scene(seed)
        assert naive_off_road(s.drivable_mask.tolist(), s.trajectory.tolist()) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masks_disjoint_and_boxes_match(seed):
    s = scene.generate_scene(seed)
    assert int(np.sum(s.drivable_mask & s.obstacle_mask)) == 0
    rebuilt = np.zeros_like(s.obstacle_mask)
    for x0, y0, x1, y1 in s.boxes:
        rebuilt[y0:y1, x0:x1] = 1
    assert np.array_equal(rebuilt, s.obstacle_mask)
    assert s.image.shape == (64, 64, 1) and s.image.dtype == np.float32
    assert s.trajectory.shape == (8, 2)


def test_sequence_frame0_matches_scene():
    seq = scene.generate_sequence(5, n_frames=3)
    assert _same(seq[0], scene.generate_scene(5))
    assert [f.frame for f in seq] == [0, 1, 2]
    with pytest.raises(ValueError):
        scene.generate_sequence(5, n_frames=10)


@pytest.mark.parametrize("bad", [
    SceneParams(corridor_width=(12.0, 70.0)),
    SceneParams(height=8, width=8),
    SceneParams(corridor_width=(1.0, 4.0)),
    SceneParams(speed=(2.0, 9.0)),
])
def test_infeasible_params_rejected(bad):
    with pytest.raises(ValueError):
        scene.generate_scene(0, bad)


def test_action_triplet_ranges():
    with pytest.raises(ValueError):
        ActionTriplet(1.5, 0.5, 0.0)
    with pytest.raises(ValueError):
        ActionTriplet(0.0, -0.1, 0.0)
    a = ActionTriplet.from_array([3.0, -1.0, 0.4])
    assert a.as_array().tolist() == [1.0, 0.0, 0.4]


def test_nav_one_hot():
    for i in range(3):
        assert NavCommand.from_index(i).index == i
    with pytest.raises(ValueError):
        NavCommand((1, 1, 0))


def test_rollout_reproduces_fitted_action():
    s = scene.generate_scene(3)
    traj = scene.rollout(s.ego_start, s.ego_speed, s.action, 8)
    assert np.max(np.abs(traj - s.trajectory)) < 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_risky_variant_violates(seed, vseed):
    base = scene.generate_scene(seed)
    risky = scene.generate_risky_variant(base, vseed)
    assert risky.tag == "synthetic-risky"
    assert any(scene.point_violates(base, x, y) for x, y in risky.trajectory)
    cfg = reward.RewardConfig()
    assert reward.rule_reward(risky.drivable_mask, risky.trajectory, cfg)[2] == -cfg.beta


def test_risky_forced_clamp_path():
    # a corridor that covers the whole row range of the trajectory cannot be left by shearing inside the image
    base = scene.generate_scene(0)
    wide = replace(base, drivable_mask=np.ones_like(base.drivable_mask))
    wide.drivable_mask[:, 0] = 0
    risky = scene.generate_risky_variant(wide, 1)
    assert any(scene.point_violates(wide, x, y) for x, y in risky.trajectory)


def test_preference_dataset(tmp_path):
    pairs, manifest = scene.build_preference_dataset(1, 9, tmp_path)
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(rows) == 1
    assert len(scene.read_manifest(manifest)) == 2
    for key in ("mask_path", "obstacle_path", "image_path"):
        assert not rows[0]["chosen"][key].startswith("/")
        assert (tmp_path / rows[0]["chosen"][key]).exists()
    loaded = scene.load_manifest(manifest)
    assert _same(loaded[0], pairs[0].chosen)
    assert loaded[1].tag == "synthetic-risky"


def test_preference_pairs_separated(tmp_path):
    pairs, _ = scene.build_preference_dataset(12, 4, tmp_path)
    for p in pairs:
        assert p.chosen.id != p.rejected.id
        assert reward.off_road_penalty(p.chosen.drivable_mask, p.chosen.trajectory) == 0
        assert reward.score(p.chosen).r > reward.score(p.rejected).r


def test_manifest_bytes_independent_of_workers(tmp_path):
    _, m1 = scene.build_preference_dataset(6, 2, tmp_path / "a", workers=1)
    _, m2 = scene.build_preference_dataset(6, 2, tmp_path / "b", workers=4)
    assert m1.read_bytes() == m2.read_bytes()
    assert (tmp_path / "a/scenes/pair00003_image.vdtn").read_bytes() == (tmp_path / "b/scenes/pair00003_image.vdtn").read_bytes()


def test_manifest_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as err:
        scene.build_preference_dataset(1, 0, blocker)
    assert "file" in str(err.value)


def test_derive_seed_stable():
    assert scene.derive_seed(1, 2) == scene.derive_seed(1, 2)
    assert scene.derive_seed(1, 2) != scene.derive_seed(2, 1)
