import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from vdrive import reward, scene
from vdrive.reward import RewardConfig

from .oracles import naive_rule_reward


def random_case(rng, H=None, W=None):
    H = H or int(rng.integers(3, 24))
    W = W or int(rng.integers(3, 24))
    mask = (rng.random((H, W)) < rng.uniform(0.2, 0.9)).astype(np.uint8)
    n = int(rng.integers(1, 10))
    traj = np.stack([rng.uniform(-2, W + 2, n), rng.uniform(-2, H + 2, n)], axis=1)
    # some points exactly on row centres / integer boundaries
    for i in range(n):
        if rng.random() < 0.2:
            traj[i] = np.floor(traj[i])
    return mask, traj


class TestOffRoad:
    def test_all_ones(self):
        assert reward.off_road_indicator(np.ones((5, 5), np.uint8), (3.7, 2.2)) == 0

    def test_all_zeros(self):
        m = np.zeros((5, 5), np.uint8)
        assert all(reward.off_road_indicator(m, (x + 0.3, y + 0.6)) == 1 for x in range(5) for y in range(5))

    def test_single_pixel(self):
        m = np.zeros((3, 3), np.uint8)
        m[1, 1] = 1
        assert reward.off_road_indicator(m, (1.9, 1.9)) == 0
        assert reward.off_road_indicator(m, (2.0, 1.0)) == 1

    def test_out_of_bounds_and_nan(self):
        m = np.ones((4, 4), np.uint8)
        assert reward.off_road_indicator(m, (-0.1, 1)) == 1
        assert reward.off_road_indicator(m, (1, 4.0)) == 1
        assert reward.off_road_indicator(m, (float("nan"), 1)) == 1

    def test_penalty_counts(self):
        m = np.ones((4, 4), np.uint8)
        assert reward.off_road_penalty(m, [[10, 10]] * 8) == 8
        with pytest.raises(ValueError):
            reward.off_road_penalty(m, np.zeros((0, 2)))

    def test_ground_truth_zero(self):
        s = scene.generate_scene(11)
        assert reward.off_road_penalty(s.drivable_mask, s.trajectory) == 0


class TestRowStats:
    def test_explicit_set(self):
        m = np.zeros((1, 8), np.uint8)
        m[0, 2:5] = 1
        st_ = reward.row_stats(m, 0)
        assert (st_.mean, st_.lo, st_.hi, st_.undefined) == (3.0, 2, 4, False)

    def test_full_row(self):
        st_ = reward.row_stats(np.ones((1, 9), np.uint8), 0)
        assert st_.mean == 4.0

    def test_empty_row(self):
        assert reward.row_stats(np.zeros((2, 4), np.uint8), 1).undefined

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            reward.row_stats(np.ones((2, 2), np.uint8), 2)


class TestDeviation:
    def stats(self, cols, W=10):
        m = np.zeros((1, W), np.uint8)
        m[0, cols] = 1
        return reward.row_stats(m, 0)

    def test_at_centre(self):
        s = self.stats([2, 3, 4])
        assert reward.lateral_deviation(s, 3.0) == 0.0

    def test_at_edge(self):
        s = self.stats([2, 3, 4])
        assert reward.lateral_deviation(s, 4.0) == 1.0

    def test_row_2_to_6(self):
        s = self.stats([2, 3, 4, 5, 6])
        assert reward.lateral_deviation(s, 5.5) == pytest.approx(0.75)

    def test_degenerate(self):
        s = self.stats([4])
        assert reward.lateral_deviation(s, 4.0) == 0.0
        assert reward.lateral_deviation(s, 4.5) == reward.DEGENERATE_DEVIATION


class TestCentering:
    def test_all_centred(self):
        m = np.ones((6, 7), np.uint8)
        assert reward.centering_reward(m, [[3.0, y + 0.5] for y in range(6)], 2.0) == 1.0

    def test_single_unit_deviation(self):
        m = np.zeros((1, 5), np.uint8)
        m[0, 1:4] = 1
        assert reward.centering_reward(m, [[3.0, 0.2]], 1.0) == pytest.approx(0.3679, abs=1e-4)

    def test_two_points(self):
        m = np.zeros((2, 5), np.uint8)
        m[:, 1:4] = 1
        assert reward.centering_reward(m, [[2.0, 0.0], [3.0, 1.0]], 1.0) == pytest.approx(0.6839, abs=1e-4)

    def test_undefined_row_contributes_zero(self):
        m = np.zeros((2, 5), np.uint8)
        m[0] = 1
        assert reward.centering_reward(m, [[2.0, 1.0]], 1.0) == 0.0


class TestRuleReward:
    def test_on_road(self):
        m = np.zeros((1, 5), np.uint8)
        m[0, 1:4] = 1
        p, rc, rh = reward.rule_reward(m, [[3.0, 0.2]], RewardConfig(alpha=1.0))
        assert p == 0 and rh == rc

    def test_off_road_penalty_applies(self):
        m = np.zeros((4, 4), np.uint8)
        p, _, rh = reward.rule_reward(m, [[1, 1], [2, 2]], RewardConfig(beta=10))
        assert p == 2 and rh == -10

    def test_centred_straight(self):
        m = np.ones((8, 9), np.uint8)
        assert reward.rule_reward(m, [[4.0, y] for y in range(8)])[2] == 1.0

    def test_config_validation(self):
        for bad in (dict(alpha=0), dict(beta=-1), dict(omega_h=0, omega_a=0), dict(omega_a=-1)):
            with pytest.raises(ValueError):
                RewardConfig(**bad)


def test_oracle_equivalence_small():
    rng = np.random.default_rng(123)
    for _ in range(200):
        mask, traj = random_case(rng)
        alpha = float(rng.uniform(0.5, 4))
        p, rc, rh = reward.rule_reward(mask, traj, RewardConfig(alpha=alpha))
        q, qc, qh = naive_rule_reward(mask, traj.tolist(), alpha, 10.0)
        assert p == q
        assert rc == pytest.approx(qc, rel=1e-9, abs=1e-300)
        assert rh == pytest.approx(qh, rel=1e-9, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 7), st.floats(0.01, 3.0))
def test_centering_monotone_in_deviation(seed, i, extra):
    s = scene.generate_scene(seed)
    traj = s.trajectory.copy()
    mu = reward.row_stats(s.drivable_mask, int(traj[i, 1])).mean
    moved = traj.copy()
    sign = 1.0 if traj[i, 0] >= mu else -1.0
    moved[i, 0] = traj[i, 0] + sign * extra
    assume(reward.off_road_penalty(s.drivable_mask, moved) == 0)
    a = reward.centering_reward(s.drivable_mask, traj, 2.0)
    b = reward.centering_reward(s.drivable_mask, moved, 2.0)
    assert b <= a


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_ranges(seed):
    rng = np.random.default_rng(seed)
    s = scene.generate_scene(seed % 1000)
    traj = s.trajectory + rng.normal(0, 4, size=s.trajectory.shape)
    rec = reward.score(s, traj)
    assert 0.0 <= rec.r_a <= 5.0
    assert 0.0 <= rec.r_center <= 1.0
    assert rec.r_h == -rec.config.beta or 0.0 <= rec.r_h <= 1.0
    assert rec.r == rec.config.omega_h * rec.r_h + rec.config.omega_a * reward.signed_rating(rec.r_a)


class TestRater:
    def test_no_obstacles_uniform_straight(self):
        s = replace(scene.generate_scene(1), boxes=[])
        traj = np.array([[30.0, 60.0 - 4 * i] for i in range(8)])
        assert reward.mock_expert_rating(s, traj) <= 0.5
        assert reward.mock_expert_rating(s, traj) == 0.0

    def test_inside_obstacle_with_max_jerk(self):
        s = replace(scene.generate_scene(1), boxes=[(10, 10, 14, 14)])
        traj = np.array([[12.0, 12.0], [30.0, 20.0], [0.0, 30.0], [30.0, 40.0]])
        assert reward.mock_expert_rating(s, traj) == 5.0

    def test_obstacle_order_invariant(self):
        s = scene.generate_scene(2)
        boxes = [(3, 3, 6, 6), (40, 20, 44, 30), (20, 50, 22, 52)]
        a = reward.mock_expert_rating(replace(s, boxes=boxes), s.trajectory)
        b = reward.mock_expert_rating(replace(s, boxes=boxes[::-1]), s.trajectory)
        assert a == b


class TestHybrid:
    def test_omega_a_zero(self):
        assert reward.hybrid_reward(0.7, 3.0, RewardConfig(omega_a=0.0)) == 0.7

    def test_arithmetic(self):
        assert reward.hybrid_reward(1.0, 0.0, RewardConfig(omega_h=1, omega_a=1)) == 2.0

    def test_endpoint(self):
        assert reward.hybrid_reward(0.3, 5.0, RewardConfig(omega_h=0, omega_a=0.5)) == -0.5

    def test_rating_range(self):
        with pytest.raises(ValueError):
            reward.hybrid_reward(0.0, 5.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-10, 1), st.floats(0, 5), st.floats(0.1, 3), st.floats(0, 3))
    def test_linear(self, rh, ra, wh, wa):
        cfg = RewardConfig(omega_h=wh, omega_a=wa)
        assert math.isclose(reward.hybrid_reward(rh, ra, cfg), wh * rh + wa * (5 - 2 * ra) / 5, rel_tol=1e-12,
                            abs_tol=1e-12)


def test_record_json_roundtrip():
    rec = reward.score(scene.generate_scene(0))
    d = rec.to_json()
    assert set(d) == {"p_off", "r_center", "r_h", "r_a", "r", "config"}
    assert d["config"]["beta"] == 10.0
