import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from damot.assoc import (
    Assignment, SortTracker, emd_link_matrix, hungarian, kalman_init,
    kalman_predict, kalman_update, run_emd, run_sort, state_to_box,
)
from damot.core import BoundingBox, Detection
from damot.mot_io import RunConfig, SortConfig
from dataclasses import replace

from oracles import brute_force_assignment


class TestHungarian:
    def test_known_2x2(self):
        # min-cost assignment is the anti-diagonal: 2 + 1 = 3
        assn = hungarian([[4.0, 2.0], [1.0, 5.0]])
        assert assn.pairs == ((0, 1), (1, 0))
        assert assn.unmatched_rows == ()
        assert assn.unmatched_columns == ()

    def test_rectangular(self):
        assn = hungarian([[1.0, 9.0, 9.0], [9.0, 1.0, 9.0]])
        assert assn.pairs == ((0, 0), (1, 1))
        assert assn.unmatched_columns == (2,)

    def test_forbidden_pairs_stay_unmatched(self):
        assn = hungarian([[np.inf, np.inf], [np.inf, 1.0]])
        assert assn.pairs == ((1, 1),)
        assert assn.unmatched_rows == (0,)
        assert assn.unmatched_columns == (0,)

    def test_all_forbidden(self):
        assn = hungarian(np.full((3, 2), np.inf))
        assert assn.pairs == ()
        assert assn.unmatched_rows == (0, 1, 2)

    def test_empty(self):
        assert hungarian(np.zeros((0, 4))).pairs == ()

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            hungarian([[np.nan]])

    def test_non_2d_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros(3))

    def test_prefers_fewest_forbidden(self):
        # matching (0,0),(1,1) has cost 0+0 but uses no forbidden pairs;
        # a naive large-penalty embedding could pick (0,1),(1,0) instead.
        cost = np.array([[0.0, 1000.0], [np.inf, 0.0]])
        assn = hungarian(cost)
        assert assn.pairs == ((0, 0), (1, 1))

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10 ** 6))
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force(self, m, n, seed):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(0.0, 10.0, size=(m, n))
        cost[rng.random((m, n)) < 0.25] = np.inf
        pairs, total = brute_force_assignment(cost)
        assn = hungarian(cost)
        assert len(assn.pairs) == len(pairs)
        got = sum(cost[r, c] for r, c in assn.pairs)
        assert got == pytest.approx(total, abs=1e-9)


class TestEmdLinkMatrix:
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10 ** 6))
    @settings(max_examples=60, deadline=None)
    def test_agrees_with_hungarian(self, m, n, seed):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(0.0, 10.0, size=(m, n))
        cost[rng.random((m, n)) < 0.2] = np.inf
        a = hungarian(cost)
        b = emd_link_matrix(cost)
        assert len(a.pairs) == len(b.pairs)
        ca = sum(cost[r, c] for r, c in a.pairs)
        cb = sum(cost[r, c] for r, c in b.pairs)
        assert ca == pytest.approx(cb, abs=1e-7)


class TestKalman:
    def test_init_reproduces_box(self):
        box = BoundingBox(10, 20, 4, 8)
        st0 = kalman_init(box)
        out = state_to_box(st0)
        assert (out.x, out.y, out.w, out.h) == pytest.approx(
            (box.x, box.y, box.w, box.h))

    def test_stationary_prediction(self):
        st0 = kalman_init(BoundingBox(10, 20, 4, 8))
        st1 = kalman_predict(st0)
        out = state_to_box(st1)
        # zero initial velocity: position unchanged under prediction
        assert (out.x, out.y) == pytest.approx((10, 20))

    def test_constant_velocity_learned(self):
        state = kalman_init(BoundingBox(0, 0, 4, 4))
        for step in range(1, 8):
            state = kalman_predict(state)
            state = kalman_update(state, BoundingBox(2.0 * step, 0, 4, 4))
        pred = state_to_box(kalman_predict(state))
        # after several updates at speed 2/frame the filter extrapolates
        assert pred.x == pytest.approx(16.0, abs=0.6)

    def test_update_pulls_toward_observation(self):
        state = kalman_init(BoundingBox(0, 0, 4, 4))
        state = kalman_predict(state)
        before = state_to_box(state)
        after = state_to_box(kalman_update(state, BoundingBox(3, 0, 4, 4)))
        assert before.x < after.x <= 3.0

    def test_covariance_grows_without_updates(self):
        state = kalman_init(BoundingBox(0, 0, 4, 4))
        tr0 = np.trace(state.covariance)
        for _ in range(5):
            state = kalman_predict(state)
        assert np.trace(state.covariance) > tr0


def det(frame, x, y=0.0, w=4.0, h=4.0):
    return Detection(frame, BoundingBox(x, y, w, h))


def cfg_min_hits(n, max_age=3):
    return replace(RunConfig(), sort=SortConfig(max_age=max_age, min_hits=n))


class TestSort:
    def test_single_object_tracked(self):
        dets = [[det(f, 2.0 * f)] for f in range(1, 8)]
        seq = run_sort(dets, cfg_min_hits(1))
        assert len(seq.tracks) == 1
        assert len(seq.tracks[0]) == 7

    def test_min_hits_delays_reporting(self):
        dets = [[det(f, 2.0 * f)] for f in range(1, 8)]
        seq = run_sort(dets, cfg_min_hits(3))
        assert len(seq.tracks) == 1
        assert seq.tracks[0].frames[0] == 3

    def test_track_terminates_after_max_age(self):
        dets = ([[det(f, 0.0)] for f in range(1, 4)]
                + [[] for _ in range(4, 9)]
                + [[det(9, 100.0)]])
        tracker = SortTracker(cfg_min_hits(1, max_age=2))
        for frame, d in enumerate(dets, start=1):
            tracker.step(d, frame)
        seq = tracker.to_sequence("s", len(dets))
        # the reborn object must get a fresh id
        assert len(seq.tracks) == 2
        assert seq.tracks[0].frames[-1] <= 3

    def test_two_crossing_objects_keep_ids(self):
        dets = [[det(f, 2.0 * f, 0.0), det(f, 30.0 - 2.0 * f, 40.0)]
                for f in range(1, 10)]
        seq = run_sort(dets, cfg_min_hits(1))
        assert len(seq.tracks) == 2
        for t in seq.tracks:
            assert len(t) == 9

    def test_deterministic(self):
        dets = [[det(f, 2.0 * f), det(f, 50.0 - f, 20.0)] for f in range(1, 6)]
        assert run_sort(dets) == run_sort(dets)


class TestEmd:
    def test_single_object_tracked(self):
        dets = [[det(f, 2.0 * f)] for f in range(1, 8)]
        seq = run_emd(dets)
        assert len(seq.tracks) == 1
        assert len(seq.tracks[0]) == 7

    def test_gate_breaks_link(self):
        cfg = RunConfig()
        jump = cfg.emd.gate_distance * 3
        dets = [[det(1, 0.0)], [det(2, jump)]]
        seq = run_emd(dets, cfg)
        assert len(seq.tracks) == 2

    def test_two_objects(self):
        dets = [[det(f, 2.0 * f, 0.0), det(f, 100.0 - 2.0 * f, 80.0)]
                for f in range(1, 8)]
        seq = run_emd(dets)
        assert len(seq.tracks) == 2
        for t in seq.tracks:
            assert len(t) == 7


class TestAssignmentType:
    def test_duplicate_row_rejected(self):
        with pytest.raises(ValueError):
            Assignment(pairs=((0, 0), (0, 1)), unmatched_rows=(),
                       unmatched_columns=())
