import math

import numpy as np
import pytest

from damot.autodiff import Tensor, grad_check, grl
from damot.danet import (
    FrameOutput, GlobalDiscriminator, InputError, LocalDiscriminator,
    LossBreakdown, NumericError, ToyTracker, ToyTrackerConfig,
    TrackDiscriminator, dense_detection_loss, forward_hooks, global_loss,
    local_loss, match_to_gt, total_loss, toy_mot_loss, track_loss,
)
from damot.mot_io import RunConfig
from dataclasses import replace

RNG = np.random.default_rng(7)
LN2 = math.log(2.0)


def const_prob(shape, value=0.5):
    return Tensor(np.full(shape, value))


# ---------------------------------------------------------------------------
# closed-form loss values
# ---------------------------------------------------------------------------

class TestLossClosedForms:
    def test_local_loss_at_half(self):
        # D = 0.5 everywhere: 0.5^2 + 0.5^2 = 0.5 per step, 2 steps, x 1/4
        d = [const_prob((2, 1, 4, 4)) for _ in range(2)]
        assert float(local_loss(d, d).data) == pytest.approx(0.25, abs=1e-12)

    def test_global_loss_at_half(self):
        # -(1-p)^gamma log p at p=0.5, gamma=2: 0.25*ln2 per domain side,
        # two sides and two steps, x 1/4 -> 0.25*ln2
        p = [const_prob((3,)) for _ in range(2)]
        assert float(global_loss(p, p, 2.0).data) == pytest.approx(
            0.25 * LN2, abs=1e-12)

    def test_track_loss_at_half(self):
        q = [const_prob((5,)) for _ in range(2)]
        assert float(track_loss(q, q, 2.0).data) == pytest.approx(
            0.25 * LN2, abs=1e-12)

    def test_total_loss_weighting_exact(self):
        cfg = RunConfig()   # gamma 2, all lambdas 100
        l_mot = Tensor(0.37)
        d = [const_prob((1, 1, 2, 2)) for _ in range(2)]
        p = [const_prob((2,)) for _ in range(2)]
        q = [const_prob((3,)) for _ in range(2)]
        total, bd = total_loss(l_mot, local_loss(d, d),
                               global_loss(p, p, cfg.gamma),
                               track_loss(q, q, cfg.gamma), cfg)
        expected = 0.37 + 100.0 * 0.25 + 100.0 * (0.25 * LN2) + 100.0 * (0.25 * LN2)
        assert float(total.data) == expected          # bitwise
        assert bd.total == float(total.data)
        assert bd.recompute_total() == pytest.approx(bd.total, abs=1e-12)

    def test_gamma_validated(self):
        p = [const_prob((2,)) for _ in range(2)]
        with pytest.raises(InputError):
            global_loss(p, p, 0.0)
        with pytest.raises(InputError):
            track_loss(p, p, -1.0)

    def test_two_steps_required(self):
        p = [const_prob((2,))]
        with pytest.raises(InputError):
            local_loss(p, p)
        with pytest.raises(InputError):
            global_loss(p, p, 2.0)

    def test_empty_queries_rejected(self):
        good = [const_prob((3,)) for _ in range(2)]
        empty = [const_prob((0,)), const_prob((3,))]
        with pytest.raises(InputError):
            track_loss(empty, good, 2.0)

    def test_non_finite_component_rejected(self):
        cfg = RunConfig()
        with pytest.raises(NumericError):
            total_loss(Tensor(np.nan), Tensor(0.0), Tensor(0.0), Tensor(0.0), cfg)

    def test_focal_weights_hard_examples(self):
        # a confidently-wrong source score (pushed towards 1, sitting at 0.1)
        # must cost more than a correct one at 0.9
        easy = [Tensor(np.array([0.9])), Tensor(np.array([0.9]))]
        hard = [Tensor(np.array([0.1])), Tensor(np.array([0.1]))]
        tgt = [Tensor(np.array([0.1])), Tensor(np.array([0.1]))]
        assert float(global_loss(hard, tgt, 2.0).data) > \
            float(global_loss(easy, tgt, 2.0).data)


# ---------------------------------------------------------------------------
# discriminator shape laws
# ---------------------------------------------------------------------------

class TestDiscriminatorShapes:
    def test_local_preserves_spatial_shape(self):
        d = LocalDiscriminator(16, np.random.default_rng(0))
        d.set_training(False)
        for h, w in [(4, 4), (7, 5), (16, 16)]:
            out = d(Tensor(RNG.standard_normal((2, 16, h, w))))
            assert out.shape == (2, 1, h, w)
            assert np.all((out.data > 0) & (out.data < 1))

    @pytest.mark.parametrize("hw", [12, 13, 16, 20])
    def test_global_scalar_per_image(self, hw):
        d = GlobalDiscriminator(32, np.random.default_rng(0))
        d.set_training(False)
        out = d(Tensor(RNG.standard_normal((3, 32, hw, hw))))
        assert out.shape == (3,)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_track_softmax_sums_to_one(self):
        d = TrackDiscriminator(np.random.default_rng(0))
        d.set_training(False)
        q = Tensor(RNG.standard_normal((6, 128)))
        probs = d.class_probs(q)
        assert probs.shape == (6, 2)
        assert np.max(np.abs(probs.data.sum(axis=1) - 1.0)) < 1e-12
        assert np.array_equal(d(q).data, probs.data[:, 1])


# ---------------------------------------------------------------------------
# gradient checks through the discriminators and losses
# ---------------------------------------------------------------------------

class TestDiscriminatorGradients:
    TOL = 1e-6

    def test_local_pipeline(self):
        d = LocalDiscriminator(4, np.random.default_rng(1))
        d.set_training(False)
        x = Tensor(RNG.standard_normal((1, 4, 3, 3)), requires_grad=True)

        def fn(a):
            out = d(a)
            return local_loss([out, out], [out, out])
        assert grad_check(fn, [x]) < self.TOL

    def test_global_pipeline(self):
        d = GlobalDiscriminator(4, np.random.default_rng(1))
        d.set_training(False)
        x = Tensor(RNG.standard_normal((2, 4, 13, 13)), requires_grad=True)

        def fn(a):
            out = d(a)
            return global_loss([out, out], [out, out], 2.0)
        assert grad_check(fn, [x], h=1e-6) < 1e-5

    def test_track_pipeline(self):
        d = TrackDiscriminator(np.random.default_rng(1), in_features=16)
        d.set_training(False)
        q = Tensor(RNG.standard_normal((4, 16)), requires_grad=True)

        def fn(a):
            out = d(a)
            return track_loss([out, out], [out, out], 2.0)
        assert grad_check(fn, [q]) < self.TOL

    def test_grl_reverses_pipeline_gradient(self):
        d = TrackDiscriminator(np.random.default_rng(1), in_features=16)
        d.set_training(False)
        data = RNG.standard_normal((4, 16))

        def run(scale=None):
            q = Tensor(data.copy(), requires_grad=True)
            h = grl(q, scale) if scale is not None else q
            out = d(h)
            track_loss([out, out], [out, out], 2.0).backward()
            return q.grad

        plain = run()
        for scale in (0.5, 1.0, 2.0):
            assert np.max(np.abs(run(scale) + scale * plain)) < 1e-12


# ---------------------------------------------------------------------------
# toy tracker
# ---------------------------------------------------------------------------

def small_cfg():
    return ToyTrackerConfig(channels=(4, 8, 8, 16), n_object_queries=4,
                            query_dim=32, frame_size=32)


class TestToyTracker:
    def test_output_shapes(self):
        cfg = small_cfg()
        tracker = ToyTracker(cfg, np.random.default_rng(0))
        tracker.set_training(False)
        out = tracker.forward(Tensor(RNG.standard_normal((2, 1, 32, 32))))
        assert out.f_local.data.shape[1] == cfg.local_channels
        assert out.f_global.data.shape[1] == cfg.global_channels
        assert out.aux.data.shape[1] == 5
        assert len(out.per_sample) == 2
        s = out.per_sample[0]
        assert s.embeddings.shape == (4, 32)
        assert s.boxes.shape == (4, 4)
        assert s.exist_logits.shape == (4,)
        assert s.n_track_queries == 0

    def test_boxes_normalized(self):
        tracker = ToyTracker(small_cfg(), np.random.default_rng(0))
        tracker.set_training(False)
        out = tracker.forward(Tensor(RNG.standard_normal((1, 1, 32, 32))))
        b = out.per_sample[0].boxes.data
        assert np.all(b >= 0.0) and np.all(b <= 1.0)

    def test_track_queries_prepended(self):
        tracker = ToyTracker(small_cfg(), np.random.default_rng(0))
        tracker.set_training(False)
        x = Tensor(RNG.standard_normal((1, 1, 32, 32)))
        tq = Tensor(RNG.standard_normal((2, 32)))
        out = tracker.forward(x, [(tq, (7, 9))])
        s = out.per_sample[0]
        assert s.n_track_queries == 2
        assert s.track_ids == (7, 9)
        assert s.embeddings.shape == (6, 32)

    def test_track_query_count_mismatch(self):
        tracker = ToyTracker(small_cfg(), np.random.default_rng(0))
        x = Tensor(RNG.standard_normal((2, 1, 32, 32)))
        with pytest.raises(InputError):
            tracker.forward(x, [None])

    def test_non_4d_rejected(self):
        tracker = ToyTracker(small_cfg(), np.random.default_rng(0))
        with pytest.raises(InputError):
            tracker.forward(Tensor(RNG.standard_normal((1, 32, 32))))

    def test_forward_hooks_pair(self):
        tracker = ToyTracker(small_cfg(), np.random.default_rng(0))
        tracker.set_training(False)
        x1 = Tensor(RNG.standard_normal((1, 1, 32, 32)))
        x2 = Tensor(RNG.standard_normal((1, 1, 32, 32)))
        hooks = forward_hooks(tracker, (x1, x2))
        assert set(hooks) == {"t1", "t2"}
        with pytest.raises(InputError):
            forward_hooks(tracker, (x1, Tensor(RNG.standard_normal((1, 1, 16, 16)))))

    def test_deterministic(self):
        x = RNG.standard_normal((1, 1, 32, 32))
        outs = []
        for _ in range(2):
            tracker = ToyTracker(small_cfg(), np.random.default_rng(3))
            tracker.set_training(False)
            outs.append(tracker.forward(Tensor(x.copy())).per_sample[0])
        assert np.array_equal(outs[0].boxes.data, outs[1].boxes.data)
        assert np.array_equal(outs[0].exist_logits.data, outs[1].exist_logits.data)


# ---------------------------------------------------------------------------
# supervised losses
# ---------------------------------------------------------------------------

def frame_output(boxes, logits, n_track=0, ids=()):
    boxes = Tensor(np.asarray(boxes, dtype=np.float64))
    logits = Tensor(np.asarray(logits, dtype=np.float64))
    return FrameOutput(embeddings=Tensor(np.zeros((boxes.shape[0], 8))),
                       boxes=boxes, exist_logits=logits,
                       n_track_queries=n_track, track_ids=ids)


class TestMatching:
    def test_matches_nearest_boxes(self):
        out = frame_output([[0.1, 0.1, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]],
                           [0.0, 0.0])
        gt = np.array([[0.82, 0.8, 0.1, 0.1], [0.1, 0.12, 0.1, 0.1]])
        match = match_to_gt(out, gt)
        assert match == {0: 1, 1: 0}

    def test_pre_matched_rows_fixed(self):
        out = frame_output([[0.1, 0.1, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]],
                           [0.0, 0.0])
        gt = np.array([[0.1, 0.1, 0.1, 0.1]])
        match = match_to_gt(out, gt, pre_matched={0: None})
        # row 0 is pinned to no-object; the free query takes the GT
        assert match[0] is None
        assert match[1] == 0

    def test_more_queries_than_gt(self):
        out = frame_output([[0.1] * 4, [0.5] * 4, [0.9] * 4], [0.0] * 3)
        gt = np.array([[0.5, 0.5, 0.5, 0.5]])
        match = match_to_gt(out, gt)
        assert sum(1 for v in match.values() if v is not None) == 1


class TestToyMotLoss:
    def test_perfect_prediction_small_loss(self):
        gt = np.array([[0.5, 0.5, 0.2, 0.2]])
        good = frame_output([[0.5, 0.5, 0.2, 0.2]], [10.0])
        bad = frame_output([[0.9, 0.1, 0.05, 0.6]], [-10.0])
        assert float(toy_mot_loss(good, gt).data) < float(toy_mot_loss(bad, gt).data)

    def test_no_gt_pushes_existence_down(self):
        out = frame_output([[0.5, 0.5, 0.2, 0.2]], [3.0])
        loss_confident = float(toy_mot_loss(out, np.zeros((0, 4))).data)
        out2 = frame_output([[0.5, 0.5, 0.2, 0.2]], [-3.0])
        loss_suppressed = float(toy_mot_loss(out2, np.zeros((0, 4))).data)
        assert loss_suppressed < loss_confident

    def test_terminated_track_query_full_weight(self):
        # a track query whose identity ended pays more than an unmatched
        # plain object query at the same logit
        loss_track = toy_mot_loss(
            frame_output([[0.5] * 4], [2.0], n_track=1, ids=(4,)),
            np.zeros((0, 4)), pre_matched={0: None})
        loss_object = toy_mot_loss(
            frame_output([[0.5] * 4], [2.0]), np.zeros((0, 4)))
        assert float(loss_track.data) > float(loss_object.data)

    def test_gradcheck_through_loss(self):
        gt = np.array([[0.4, 0.6, 0.2, 0.1], [0.7, 0.2, 0.15, 0.25]])
        boxes = Tensor(RNG.uniform(0.2, 0.8, (3, 4)), requires_grad=True)
        logits = Tensor(RNG.standard_normal(3), requires_grad=True)

        def fn(b, lg):
            out = FrameOutput(embeddings=Tensor(np.zeros((3, 8))), boxes=b,
                              exist_logits=lg, n_track_queries=0, track_ids=())
            return toy_mot_loss(out, gt)
        assert grad_check(fn, [boxes, logits]) < 1e-6


class TestDenseDetectionLoss:
    def test_zero_targets_drive_logits_down(self):
        low = Tensor(np.concatenate([np.full((1, 4, 4), -8.0), np.zeros((4, 4, 4))]))
        high = Tensor(np.concatenate([np.full((1, 4, 4), 8.0), np.zeros((4, 4, 4))]))
        gt = np.zeros((0, 4))
        assert float(dense_detection_loss(low, gt).data) < \
            float(dense_detection_loss(high, gt).data)

    def test_gradcheck(self):
        gt = np.array([[0.3, 0.6, 0.2, 0.2]])
        aux = Tensor(RNG.standard_normal((5, 4, 4)), requires_grad=True)
        assert grad_check(lambda a: dense_detection_loss(a, gt), [aux]) < 1e-6

    def test_positive_cell_location(self):
        # the positive cell is (row, col) = (int(cy*h), int(cx*w))
        gt = np.array([[0.8, 0.1, 0.2, 0.2]])
        aux_data = np.zeros((5, 4, 4))
        aux_data[0] = -9.0
        aux_data[0, 0, 3] = 9.0   # row 0 (cy=0.1), col 3 (cx=0.8)
        right = float(dense_detection_loss(Tensor(aux_data), gt).data)
        aux_data2 = np.zeros((5, 4, 4))
        aux_data2[0] = -9.0
        aux_data2[0, 3, 0] = 9.0
        wrong = float(dense_detection_loss(Tensor(aux_data2), gt).data)
        assert right < wrong
