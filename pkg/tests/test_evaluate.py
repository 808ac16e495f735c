from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsn.evaluate import (
    ClipResult,
    EvalConfig,
    EvalReport,
    ablation_frame_count,
    center_cells,
    evaluate,
    mean_kernel_offset,
    offset_tracking,
    weight_profile,
)
from stsn.model import ModelConfig, init_params
from stsn.synthvid import ClipConfig, generate_dataset


@pytest.fixture(scope="module")
def small_config():
    return ModelConfig(
        feature_channels=4, backbone_depth=3, head_stride=2, image_h=32, image_w=32,
        subnet_channels=(4, 4, 6), head_channels=4, K=1,
    )


def noisy_params(config, seed=0, scale=0.3):
    """Random parameters with every layer (offsets included) perturbed away from init."""
    rng = np.random.default_rng(seed)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in init_params(config, seed=seed).items()}


@pytest.fixture(scope="module")
def clips():
    return generate_dataset(ClipConfig(frames=7, image_h=32, image_w=32, seed=5), 4)


@pytest.fixture(scope="module")
def static_clips():
    return generate_dataset(ClipConfig(frames=7, image_h=32, image_w=32, identical_frames=True, seed=6), 3)


class TestEvalConfig:
    @pytest.mark.parametrize("kw", [{"score_threshold": 1.5}, {"nms_threshold": -0.1}, {"iou_threshold": 2.0},
                                    {"K_eval": -1}, {"temporal_stride": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            EvalConfig(**kw)

    def test_defaults(self):
        cfg = EvalConfig()
        assert cfg.nms_threshold == 0.3 and cfg.iou_threshold == 0.5


class TestEvaluate:
    def test_report_contents(self, small_config, clips):
        rep = evaluate(noisy_params(small_config), small_config, clips, EvalConfig(K_eval=2))
        assert 0.0 <= rep.mAP <= 1.0
        assert all(0.0 <= ap <= 1.0 for ap in rep.per_class_ap.values())
        assert [k for k, _ in rep.weight_profile] == [-2, -1, 0, 1, 2]
        assert sum(w for _, w in rep.weight_profile) == pytest.approx(1.0, abs=1e-6)
        assert len(rep.detections) == len(clips) and len(rep.mean_offsets) == 5

    def test_stride_labels(self, small_config, clips):
        rep = evaluate(noisy_params(small_config), small_config, clips, EvalConfig(K_eval=1, temporal_stride=3))
        assert [k for k, _ in rep.weight_profile] == [-3, 0, 3]

    def test_workers_do_not_change_results(self, small_config, clips):
        p = noisy_params(small_config)
        a = evaluate(p, small_config, clips, EvalConfig(K_eval=1))
        b = evaluate(p, small_config, clips, EvalConfig(K_eval=1, workers=3))
        assert a.mAP == b.mAP and a.weight_profile == b.weight_profile
        assert [[(d.box, d.score) for d in c] for c in a.detections] == [[(d.box, d.score) for d in c] for c in b.detections]

    def test_zero_init_offsets(self, small_config, clips):
        rep = evaluate(init_params(small_config), small_config, clips, EvalConfig(K_eval=1))
        assert rep.mean_offset_magnitude == 0.0
        assert all(dy == 0.0 and dx == 0.0 for _, dy, dx in rep.mean_offsets)

    def test_motions_are_true_displacements(self, small_config, clips):
        rep = evaluate(init_params(small_config), small_config, clips, EvalConfig(K_eval=1))
        clip, res = clips[0], rep.clip_results[0]
        t = clip.reference_frame
        np.testing.assert_allclose(res.motions[:, 2], clip.centers(t + 1) - clip.centers(t))
        np.testing.assert_array_equal(res.motions[:, 1], 0.0)


class TestAblations:
    def test_single_K_equals_plain_eval(self, small_config, clips):
        p = noisy_params(small_config)
        curve = ablation_frame_count(p, small_config, clips, [0])
        assert curve == {0: evaluate(p, small_config, clips, EvalConfig(K_eval=0)).mAP}

    def test_identical_frames_no_temporal_signal(self, small_config, static_clips):
        p = noisy_params(small_config, seed=2)
        curve = ablation_frame_count(p, small_config, static_clips, [0, 1, 2, 3])
        for K in (1, 2, 3):
            assert curve[K] == pytest.approx(curve[0], abs=1e-9)

    @pytest.mark.parametrize("K", [1, 2, 3])
    def test_identical_frames_uniform_profile(self, small_config, static_clips, K):
        prof = weight_profile(noisy_params(small_config, seed=2), small_config, static_clips, K)
        assert len(prof) == 2 * K + 1
        for _, w in prof:
            assert w == pytest.approx(1 / (2 * K + 1), abs=1e-6)


class TestHelpers:
    def test_center_cells_clamped(self, small_config, clips):
        h, w = small_config.feature_hw
        for clip in clips:
            for i, j in center_cells(clip, clip.reference_frame, small_config):
                assert 0 <= i < h and 0 <= j < w

    def test_mean_kernel_offset(self):
        o = np.zeros((18, 3, 3))
        o[0::2, 1, 2] = 1.0
        o[1::2, 1, 2] = np.arange(9)
        np.testing.assert_allclose(mean_kernel_offset(o, 1, 2), [1.0, 4.0])


def report_with(offsets, motions):
    offsets = np.asarray(offsets, dtype=float)[None, :, :]
    motions = np.asarray(motions, dtype=float)[None, :, :]
    cr = ClipResult([], np.zeros(offsets.shape[:2]), offsets, motions, 0.0)
    return EvalReport(0.0, {}, 1, 1, clip_results=[cr])


class TestOffsetTracking:
    def test_hand_cases(self):
        # aligned hit, opposite miss, slow motion skipped, zero offset miss
        rep = report_with([[1, 1], [-2, 0], [1, 0], [0, 0]], [[4, 4], [5, 0], [1, 1], [0, 6]])
        frac, n = offset_tracking(rep, min_motion=4.0)
        assert n == 3 and frac == pytest.approx(1 / 3)

    def test_no_cases(self):
        frac, n = offset_tracking(report_with([[1, 0]], [[0, 0]]))
        assert n == 0 and np.isnan(frac)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-np.pi, np.pi), st.floats(4.0, 20.0), st.floats(0.1, 5.0))
    def test_cosine_threshold(self, angle, speed, length):
        m = speed * np.array([np.cos(0.0), np.sin(0.0)])
        v = length * np.array([np.cos(angle), np.sin(angle)])
        frac, _ = offset_tracking(report_with([v], [m]))
        cos = np.cos(angle)
        if abs(cos - 0.5) > 1e-9:
            assert frac == (1.0 if cos > 0.5 else 0.0)
