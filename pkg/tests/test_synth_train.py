import io
import math

import numpy as np
import pytest
from dataclasses import replace

from damot.mot_io import RunConfig, TrainerConfig
from damot.synth import (
    SOURCE_SPEC, TARGET_SPEC, AgentAppearance, DomainSpec, GenerationError,
    gen_synthetic_sequence,
)
from damot.danet import ToyTrackerConfig
from damot.train import (
    DaModel, DiagnosticsError, ScheduleError, alignment_diagnostics,
    default_schedule, evaluate_toy, gaussian_mmd, run_toy_tracker,
    schedule_lookup, train,
)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

class TestSynth:
    def test_deterministic_per_seed(self):
        a_img, a_seq = gen_synthetic_sequence(SOURCE_SPEC, 5, 42)
        b_img, b_seq = gen_synthetic_sequence(SOURCE_SPEC, 5, 42)
        assert np.array_equal(a_img, b_img)
        assert a_seq == b_seq

    def test_seed_changes_content(self):
        a_img, _ = gen_synthetic_sequence(SOURCE_SPEC, 5, 1)
        b_img, _ = gen_synthetic_sequence(SOURCE_SPEC, 5, 2)
        assert not np.array_equal(a_img, b_img)

    def test_shapes_and_range(self):
        images, seq = gen_synthetic_sequence(SOURCE_SPEC, 6, 0)
        assert images.shape == (6, 1, SOURCE_SPEC.frame_size, SOURCE_SPEC.frame_size)
        assert images.min() >= 0.0 and images.max() <= 1.0
        assert seq.frame_count == 6
        lo, hi = SOURCE_SPEC.agent_count_range
        assert lo <= len(seq.tracks) <= hi

    def test_boxes_enclose_agents(self):
        images, seq = gen_synthetic_sequence(SOURCE_SPEC, 3, 7)
        bg = SOURCE_SPEC.background_level
        for f in range(1, 4):
            img = images[f - 1, 0]
            for _, box in seq.boxes_at(f):
                x0 = max(int(box.x), 0)
                y0 = max(int(box.y), 0)
                x1 = min(int(np.ceil(box.right)), img.shape[1])
                y1 = min(int(np.ceil(box.bottom)), img.shape[0])
                assert img[y0:y1, x0:x1].max() > bg + 0.1

    def test_tracks_full_length(self):
        _, seq = gen_synthetic_sequence(TARGET_SPEC, 8, 3, domain="target")
        for t in seq.tracks:
            assert len(t) == 8
        assert seq.domain == "target"

    def test_domains_differ_visibly(self):
        src, _ = gen_synthetic_sequence(SOURCE_SPEC, 2, 5)
        tgt, _ = gen_synthetic_sequence(TARGET_SPEC, 2, 5, domain="target")
        assert abs(src.mean() - tgt.mean()) > 0.02

    def test_too_few_frames(self):
        with pytest.raises(GenerationError):
            gen_synthetic_sequence(SOURCE_SPEC, 1, 0)

    def test_infeasible_density(self):
        spec = DomainSpec(appearance=AgentAppearance(radius=20.0),
                          agent_count_range=(4, 4))
        with pytest.raises(GenerationError):
            gen_synthetic_sequence(spec, 3, 0)

    def test_bad_spec_values(self):
        with pytest.raises(ValueError):
            DomainSpec(background="gradient")
        with pytest.raises(ValueError):
            DomainSpec(pause_probability=1.5)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

class TestSchedule:
    def test_thirty_epochs_phases(self):
        sched = default_schedule(30)
        assert [e.epoch_range for e in sched] == [
            (0, 5), (5, 10), (10, 15), (15, 30)]
        assert sched[0].false_track_query_prob == 1.0
        assert sched[2].false_positive_prob == 0.8

    def test_six_epochs_compressed(self):
        sched = default_schedule(6)
        assert [e.epoch_range for e in sched] == [
            (0, 1), (1, 2), (2, 3), (3, 6)]

    def test_four_epochs_minimum(self):
        sched = default_schedule(4)
        assert sched[-1].epoch_range == (3, 4)

    def test_too_few_epochs(self):
        with pytest.raises(ScheduleError):
            default_schedule(3)

    def test_lookup_covers_all_epochs(self):
        sched = default_schedule(12)
        for epoch in range(12):
            entry = schedule_lookup(sched, epoch)
            assert entry.epoch_range[0] <= epoch < entry.epoch_range[1]
        with pytest.raises(ScheduleError):
            schedule_lookup(sched, 12)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

class TestDiagnostics:
    def test_mmd_identical_sets_zero(self):
        x = np.random.default_rng(0).standard_normal((10, 6))
        assert gaussian_mmd(x, x.copy()) < 1e-9

    def test_mmd_separated_sets_positive(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 6))
        y = rng.standard_normal((12, 6)) + 5.0
        near = gaussian_mmd(x, x + 0.01 * rng.standard_normal((12, 6)))
        far = gaussian_mmd(x, y)
        assert far > near >= 0.0

    def test_mmd_symmetric(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((8, 4)), rng.standard_normal((8, 4)) + 1.0
        assert gaussian_mmd(x, y) == pytest.approx(gaussian_mmd(y, x))

    def test_probe_chance_on_identical_domains(self):
        cfg = ToyTrackerConfig(channels=(4, 8, 8, 8), n_object_queries=4,
                               query_dim=32, frame_size=32)
        model = DaModel(cfg, np.random.default_rng(0))
        imgs = np.random.default_rng(3).random((8, 1, 32, 32))
        diag = alignment_diagnostics(model, imgs, imgs.copy())
        assert diag["probe_accuracy"] == pytest.approx(0.5)
        assert diag["feature_mmd"] < 1e-9

    def test_minimum_frames_enforced(self):
        cfg = ToyTrackerConfig(channels=(4, 8, 8, 8), n_object_queries=4,
                               query_dim=32, frame_size=32)
        model = DaModel(cfg, np.random.default_rng(0))
        imgs = np.zeros((3, 1, 32, 32))
        with pytest.raises(DiagnosticsError):
            alignment_diagnostics(model, imgs, np.zeros((8, 1, 32, 32)))


# ---------------------------------------------------------------------------
# training loop contracts (small budgets)
# ---------------------------------------------------------------------------

def tiny_tracker_cfg():
    return ToyTrackerConfig(channels=(4, 8, 8, 16), n_object_queries=6,
                            query_dim=32)


def tiny_data(n_frames=6):
    spec_s = replace(SOURCE_SPEC, agent_count_range=(1, 2))
    spec_t = replace(TARGET_SPEC, agent_count_range=(1, 2))
    src = [gen_synthetic_sequence(spec_s, n_frames, 10 + i, name=f"s{i}")
           for i in range(2)]
    tgt = [gen_synthetic_sequence(spec_t, n_frames, 20 + i, name=f"t{i}",
                                  domain="target") for i in range(2)]
    return src, [im for im, _ in tgt], tgt


def tiny_cfg(seed=0, **kw):
    base = RunConfig()
    trainer = TrainerConfig(epochs=4, steps_per_epoch=2, learning_rate=1e-3,
                            seed=seed)
    return replace(base, trainer=trainer, **kw)


class TestTrainLoop:
    def test_returns_model_and_history(self):
        src, tgt_imgs, _ = tiny_data()
        model, hist = train(tiny_cfg(), src, tgt_imgs,
                            tracker_cfg=tiny_tracker_cfg())
        assert isinstance(model, DaModel)
        assert len(hist.epochs) == 4
        csv = hist.to_csv()
        assert csv.splitlines()[0] == (
            "epoch,l_mot,l_local,l_global,l_track,total,probe_acc,mmd,target_mota")
        assert len(csv.splitlines()) == 5

    def test_empty_domain_rejected(self):
        src, tgt_imgs, _ = tiny_data()
        with pytest.raises(ValueError):
            train(tiny_cfg(), [], tgt_imgs)
        with pytest.raises(ValueError):
            train(tiny_cfg(), src, [])

    def test_deterministic_same_seed(self):
        src, tgt_imgs, _ = tiny_data()
        runs = []
        for _ in range(2):
            model, hist = train(tiny_cfg(seed=3), src, tgt_imgs,
                                tracker_cfg=tiny_tracker_cfg())
            runs.append((model, hist))
        a, b = runs
        assert a[1].to_csv() == b[1].to_csv()
        pa, pb = a[0].parameters(), b[0].parameters()
        assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)

    def test_lambda_zero_freezes_discriminators(self):
        src, tgt_imgs, _ = tiny_data()
        cfg = tiny_cfg(lambda_local=0.0, lambda_global=0.0, lambda_track=0.0)
        model, hist = train(cfg, src, tgt_imgs, tracker_cfg=tiny_tracker_cfg())
        # discriminator losses must be exactly zero in every epoch record
        for e in hist.epochs:
            assert e.l_local == 0.0 and e.l_global == 0.0 and e.l_track == 0.0
        # and no gradient ever reached a discriminator parameter
        for p in model.discriminator_parameters().values():
            assert p.grad is None

    def test_unsupervised_contract_target_labels_unused(self):
        # training must be bitwise identical whether or not target GT exists:
        # the training API only ever receives target images
        src, tgt_imgs, tgt_with_labels = tiny_data()
        _, hist_images_only = train(tiny_cfg(seed=5), src, tgt_imgs,
                                    tracker_cfg=tiny_tracker_cfg())
        stripped = [im.copy() for im, _ in tgt_with_labels]
        _, hist_stripped = train(tiny_cfg(seed=5), src, stripped,
                                 tracker_cfg=tiny_tracker_cfg())
        assert hist_images_only.to_csv() == hist_stripped.to_csv()

    def test_step_fn_breakdown_replays_total(self):
        src, tgt_imgs, _ = tiny_data()
        seen = []
        train(tiny_cfg(), src, tgt_imgs, tracker_cfg=tiny_tracker_cfg(),
              step_fn=lambda step, bd: seen.append((step, bd)))
        assert [s for s, _ in seen] == list(range(8))
        for _, bd in seen:
            assert bd.recompute_total() == pytest.approx(bd.total, abs=1e-12)


class TestToyInference:
    def test_tracker_output_valid_sequence(self):
        src, tgt_imgs, _ = tiny_data()
        model, _ = train(tiny_cfg(), src, tgt_imgs,
                         tracker_cfg=tiny_tracker_cfg())
        images, gt = src[0]
        pred = run_toy_tracker(model, images, name="p",
                               existence_threshold=0.5)
        assert pred.frame_count == images.shape[0]
        for t in pred.tracks:
            assert t.id >= 1

    def test_evaluate_toy_report(self):
        src, tgt_imgs, _ = tiny_data()
        model, _ = train(tiny_cfg(), src, tgt_imgs,
                         tracker_cfg=tiny_tracker_cfg())
        rep = evaluate_toy(model, src)
        assert set(rep.per_sequence) == {"s0", "s1"}
        assert rep.combined[0].mota <= 1.0
