import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsn.synthvid import (
    SHAPES,
    ClipConfig,
    DatasetError,
    _trajectories,
    apply_degradation,
    generate_clip,
    generate_dataset,
    read_dataset,
    read_tensor,
    render_object,
    write_dataset,
    write_tensor,
)


def box_area(b):
    return max(b[2] - b[0], 0) * max(b[3] - b[1], 0)


def overlap(a, b):
    return box_area((max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])))


@pytest.fixture(scope="module")
def small_set():
    return generate_dataset(ClipConfig(frames=5, image_h=32, image_w=32, half_size=(3, 5)), 4, base_seed=10)


class TestRender:
    @pytest.mark.parametrize("shape", SHAPES)
    @pytest.mark.parametrize("r", [3, 5, 8])
    def test_mask_bounds_equal_box(self, shape, r):
        m = render_object(shape, 20, 24, r, 48, 48)
        ys, xs = np.nonzero(m)
        assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (24 - r, 20 - r, 24 + r, 20 + r)

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            render_object("hexagon", 5, 5, 2, 10, 10)


class TestGenerate:
    def test_same_seed_identical(self):
        cfg = ClipConfig(seed=42)
        assert generate_clip(cfg).equals(generate_clip(cfg))

    def test_different_seed_differs(self):
        assert not generate_clip(ClipConfig(seed=1)).equals(generate_clip(ClipConfig(seed=2)))

    def test_constant_velocity(self):
        obj = {"cy": 20, "cx": 10, "r": 4, "v": (0, 2)}
        c = _trajectories([obj], ClipConfig(frames=3))
        assert list(c[:, 0, 1]) == [10, 12, 14]
        assert list(c[:, 0, 0]) == [20, 20, 20]

    def test_motion_matches_boxes(self, small_set):
        for clip in small_set:
            for t in range(clip.num_frames - 1):
                np.testing.assert_array_equal(clip.centers(t + 1) - clip.centers(t), clip.motion[t])

    def test_boxes_inside_frame(self):
        for clip in generate_dataset(ClipConfig(), 20, base_seed=3):
            assert clip.boxes[..., :2].min() >= 0
            assert clip.boxes[..., 2].max() <= 64 and clip.boxes[..., 3].max() <= 64

    def test_speed_in_range(self):
        for clip in generate_dataset(ClipConfig(velocity=(2.0, 3.0)), 10, base_seed=5):
            speed = np.hypot(clip.motion[..., 0], clip.motion[..., 1])
            # a step that bounces off the border is shortened, never lengthened
            assert speed.max() <= 3.0 + 1e-12
            assert np.median(speed) >= 2.0 - 1e-12

    def test_only_reference_degraded(self):
        for clip in generate_dataset(ClipConfig(occlusion_prob=1.0), 10, base_seed=0):
            assert clip.degraded[clip.reference_frame]
            assert clip.degraded.sum() == 1

    def test_full_occlusion_probability(self):
        for clip in generate_dataset(ClipConfig(occlusion_prob=1.0, blur_prob=0.0), 30, base_seed=100):
            ref = clip.reference_frame
            rect = clip.occluders[ref]
            cover = max(overlap(rect, b) / box_area(b) for b in clip.boxes[ref])
            assert cover >= 0.5

    def test_no_degradation(self):
        clip = generate_clip(ClipConfig(occlusion_prob=0.0, blur_prob=0.0, seed=3))
        assert not clip.degraded.any() and not clip.occluders

    def test_identical_frames(self):
        clip = generate_clip(ClipConfig(identical_frames=True, seed=9))
        for t in range(1, clip.num_frames):
            np.testing.assert_array_equal(clip.frames[t], clip.frames[0])
        assert not clip.motion.any()

    def test_frames_in_unit_range(self, small_set):
        for clip in small_set:
            assert clip.frames.dtype == np.float32
            assert 0.0 <= clip.frames.min() and clip.frames.max() <= 1.0

    @pytest.mark.parametrize(
        "kw", [{"frames": 0}, {"occlusion_prob": 1.5}, {"num_objects": (0, 2)}, {"velocity": (3, 1)}, {"noise_std": -1}]
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            ClipConfig(**kw)

    def test_unsatisfiable_spawn(self):
        with pytest.raises(ValueError):
            generate_clip(ClipConfig(image_h=8, image_w=8, half_size=(5, 6)))


class TestDegradation:
    def test_blur_constant_frame(self):
        f = np.full((16, 16), 0.37)
        out, rect = apply_degradation(f, "blur", 0)
        np.testing.assert_allclose(out, f, atol=1e-15)
        assert rect is None

    def test_blur_preserves_mean_of_interior_content(self):
        # borders stay constant beyond the filter reach, so reflection cannot leak mass
        f = np.full((32, 32), 0.2)
        f[10:20, 12:22] = 0.9
        out, _ = apply_degradation(f, "blur", 0)
        assert out.mean() == pytest.approx(f.mean(), abs=1e-6)

    def test_blur_smooths(self, rng):
        f = rng.uniform(0, 1, (32, 32))
        out, _ = apply_degradation(f, "blur", 0)
        assert out.std() < 0.5 * f.std()

    def test_full_cover_hides_object(self):
        f = np.full((1, 32, 32), 0.1)
        box = (8, 8, 20, 20)
        f[0, 8:20, 8:20] = 0.8
        out, rect = apply_degradation(f, "occlusion", 5, box=box, background=0.1, coverage=1.0)
        np.testing.assert_array_equal(out[0, 8:20, 8:20], 0.1)
        assert overlap(rect, box) == box_area(box)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.5, 0.7))
    def test_partial_cover_fraction(self, seed, coverage):
        f = np.zeros((40, 40))
        box = (10, 12, 24, 26)
        _, rect = apply_degradation(f, "occlusion", seed, box=box, coverage=coverage)
        frac = overlap(rect, box) / box_area(box)
        assert coverage <= frac < coverage + 0.1

    def test_occlusion_needs_box(self):
        with pytest.raises(ValueError):
            apply_degradation(np.zeros((8, 8)), "occlusion", 0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            apply_degradation(np.zeros((8, 8)), "rain", 0)


class TestTensorFile:
    def test_round_trip(self, tmp_path, rng):
        a = rng.standard_normal((2, 1, 3, 4)).astype(np.float32)
        write_tensor(tmp_path / "a.stsn", a)
        np.testing.assert_array_equal(read_tensor(tmp_path / "a.stsn"), a)

    def test_header_layout(self, tmp_path):
        write_tensor(tmp_path / "a.stsn", np.zeros((9, 1, 8, 8), dtype=np.float32))
        raw = (tmp_path / "a.stsn").read_bytes()
        assert raw[:4] == b"STSN"
        assert struct.unpack_from("<HH4I", raw, 4) == (1, 4, 9, 1, 8, 8)
        assert len(raw) == 8 + 16 + 4 * 9 * 64 + 4

    def test_corrupted_byte(self, tmp_path, rng):
        p = tmp_path / "a.stsn"
        write_tensor(p, rng.standard_normal((3, 3)))
        raw = bytearray(p.read_bytes())
        raw[20] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(DatasetError, match="checksum"):
            read_tensor(p)

    def test_truncated(self, tmp_path, rng):
        p = tmp_path / "a.stsn"
        write_tensor(p, rng.standard_normal((3, 3)))
        p.write_bytes(p.read_bytes()[:-6])
        with pytest.raises(DatasetError):
            read_tensor(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.stsn"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DatasetError):
            read_tensor(p)


class TestDataset:
    def test_round_trip(self, tmp_path, small_set):
        write_dataset(small_set, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        assert len(back) == len(small_set)
        for a, b in zip(small_set, back):
            assert a.equals(b)

    def test_manifest_contents(self, tmp_path, small_set):
        write_dataset(small_set, tmp_path / "d")
        m = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert m["clip_count"] == 4
        assert all(r["frames"] == 5 for r in m["clips"])
        row = m["clips"][0]["boxes"][0].split(",")
        assert len(row) == 6

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)

    def test_corrupted_clip(self, tmp_path, small_set):
        write_dataset(small_set, tmp_path / "d")
        p = tmp_path / "d" / "clip_0001.stsn"
        raw = bytearray(p.read_bytes())
        raw[100] ^= 0x01
        p.write_bytes(bytes(raw))
        with pytest.raises(DatasetError):
            read_dataset(tmp_path / "d")

    def test_malformed_manifest(self, tmp_path, small_set):
        write_dataset(small_set, tmp_path / "d")
        (tmp_path / "d" / "manifest.json").write_text('{"format": "stsn-synthvid", "version": 1}')
        with pytest.raises(DatasetError):
            read_dataset(tmp_path / "d")
