import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cifield.data import (
    PRESETS,
    FrameObservation,
    SceneDataset,
    load_scene,
    merge_scenes,
    preset,
    read_image_ppm,
    read_mask_pgm,
    synth_scene,
    visibility_filter,
    write_image_ppm,
    write_mask_pgm,
    write_scene,
    zigzag_merge,
)
from cifield.errors import (
    DataError,
    DimensionMismatchError,
    ImageFormatError,
    LabelOverflowError,
    MissingManifestError,
    UnsupportedFormatError,
)
from cifield.metrics import panoptic_map
from cifield.splat import render_reference

from conftest import camera


class TestNetpbm:
    def test_white_pixel_bytes(self, tmp_path):
        write_image_ppm(tmp_path / "a.ppm", np.ones((1, 1, 3)))
        assert (tmp_path / "a.ppm").read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        write_image_ppm(tmp_path / "a.ppm", img)
        assert np.array_equal(read_image_ppm(tmp_path / "a.ppm"), img)
        mask = rng.integers(0, 256, (4, 3))
        write_mask_pgm(tmp_path / "m.pgm", mask)
        assert np.array_equal(read_mask_pgm(tmp_path / "m.pgm"), mask)

    def test_float_quantisation(self, tmp_path):
        write_image_ppm(tmp_path / "a.ppm", np.full((1, 1, 3), 0.5))
        assert read_image_ppm(tmp_path / "a.ppm")[0, 0, 0] == 128

    def test_comments_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x01\x02")
        assert read_mask_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]

    def test_unsupported_maxval(self, tmp_path):
        (tmp_path / "b.ppm").write_bytes(b"P6\n1 1\n65535\n" + b"\0" * 6)
        with pytest.raises(UnsupportedFormatError):
            read_image_ppm(tmp_path / "b.ppm")

    @pytest.mark.parametrize("raw", [b"P3\n1 1\n255\n1 2 3", b"P6\n1\n", b"P6\n1 1\n255\n\x00", b"P6\nx 1\n255\n"])
    def test_malformed(self, tmp_path, raw):
        (tmp_path / "b.ppm").write_bytes(raw)
        with pytest.raises(ImageFormatError):
            read_image_ppm(tmp_path / "b.ppm")


def frames_of(view, t_count, labels=None, size=4):
    out = []
    for j in range(t_count):
        mask = np.zeros((size, size), dtype=np.int64)
        for i, lab in enumerate(labels or []):
            mask[i % size, i // size] = lab
        out.append(FrameObservation(j / max(t_count - 1, 1), view, np.zeros((size, size, 3)), mask,
                                    view=view, name=f"{view}:{j}"))
    return out


class TestZigzag:
    def test_two_views(self):
        v1, v2 = frames_of(0, 3), frames_of(1, 3)
        out = zigzag_merge([v1, v2])
        assert [f.name for f in out] == ["0:0", "0:1", "0:2", "1:2", "1:1", "1:0"]
        assert out[3].camera == 1 and out[3].time == 1.0

    def test_single_view(self):
        v = frames_of(0, 4)
        assert zigzag_merge([v]) == v

    def test_three_views(self):
        out = zigzag_merge([frames_of(0, 2), frames_of(1, 2), frames_of(2, 2)])
        assert [f.name for f in out] == ["0:0", "0:1", "1:1", "1:0", "2:0", "2:1"]

    def test_unequal(self):
        with pytest.raises(DataError):
            zigzag_merge([frames_of(0, 2), frames_of(1, 3)])

    @given(st.integers(1, 5), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_multiset_and_length(self, n, t):
        views = [frames_of(v, t) for v in range(n)]
        out = zigzag_merge(views)
        assert len(out) == n * t
        assert sorted(f.name for f in out) == sorted(f.name for v in views for f in v)


class TestVisibility:
    def test_filter(self):
        v1 = frames_of(0, 2, labels=[1, 2, 3])
        v2 = frames_of(1, 2, labels=[1, 3])
        out, kept = visibility_filter(v1 + v2)
        assert kept == [1, 3]
        assert all(set(np.unique(f.mask)) <= {0, 1, 2} for f in out)
        # old label 3 became 2, old label 2 became background
        assert out[0].mask[2, 0] == 2 and out[0].mask[1, 0] == 0

    def test_idempotent(self):
        frames = frames_of(0, 2, labels=[2, 5]) + frames_of(1, 2, labels=[5, 4])
        once, _ = visibility_filter(frames)
        twice, kept = visibility_filter(once)
        assert kept == [1]
        assert all(np.array_equal(a.mask, b.mask) for a, b in zip(once, twice))


def tiny_scene(k=2, label=1):
    cam = camera(8)
    frames = [FrameObservation(0.0, 0, np.full((8, 8, 3), 0.2), np.full((8, 8), label), "train", 0, "a"),
              FrameObservation(1.0, 0, np.full((8, 8, 3), 0.4), np.zeros((8, 8), int), "test", 0, "b")]
    return SceneDataset(frames, [cam], k, np.array([[-1.0] * 3, [1.0] * 3]))


class TestSceneIO:
    def test_round_trip(self, tmp_path):
        sc = tiny_scene()
        write_scene(sc, tmp_path)
        back = load_scene(tmp_path)
        assert back.k == 2 and len(back.frames) == 2
        assert back.test_indices == [1]
        write_scene(back, tmp_path / "again")
        for sub in ("rgb/a.ppm", "mask/a.pgm", "rgb/b.ppm"):
            assert (tmp_path / sub).read_bytes() == (tmp_path / "again" / sub).read_bytes()
        np.testing.assert_allclose(back.cameras[0].extrinsics, sc.cameras[0].extrinsics)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingManifestError):
            load_scene(tmp_path)

    def test_label_overflow(self, tmp_path):
        write_scene(tiny_scene(k=5, label=7), tmp_path)
        with pytest.raises(LabelOverflowError):
            load_scene(tmp_path)

    def test_dimension_mismatch(self, tmp_path):
        write_scene(tiny_scene(), tmp_path)
        man = json.loads((tmp_path / "scene.json").read_text())
        man["cameras"][0]["width"] = 9
        (tmp_path / "scene.json").write_text(json.dumps(man))
        with pytest.raises(DimensionMismatchError):
            load_scene(tmp_path)

    def test_k_from_masks_and_times_normalised(self, tmp_path):
        write_scene(tiny_scene(label=3), tmp_path)
        man = json.loads((tmp_path / "scene.json").read_text())
        del man["k"]
        for f, t in zip(man["frames"], (10.0, 30.0)):
            f["time"] = t
            del f["split"]
        (tmp_path / "scene.json").write_text(json.dumps(man))
        sc = load_scene(tmp_path)
        assert sc.k == 3
        assert [f.time for f in sc.frames] == [0.0, 1.0]
        assert sc.test_indices == [0]

    def test_minimal_single_frame(self, tmp_path):
        sc = tiny_scene()
        sc.frames = sc.frames[:1]
        write_scene(sc, tmp_path)
        assert len(load_scene(tmp_path).frames) == 1


class TestMerge:
    def test_two_views(self, tmp_path):
        a = tiny_scene()
        b = tiny_scene()
        b.frames[1].mask = np.full((8, 8), 1)
        merged = merge_scenes([a, b])
        assert len(merged.frames) == 4
        assert [f.view for f in merged.frames] == [0, 0, 1, 1]
        assert merged.frames[2].image[0, 0, 0] == 0.4
        assert merged.k == 1


class TestSynth:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_self_consistent(self, name):
        res = synth_scene(preset(name))
        sc = res.scene
        for i in range(0, len(sc.frames), 7):
            fr = sc.frames[i]
            buf = render_reference(res.gaussians, res.deform, sc.cameras[fr.camera], fr.time)
            assert np.array_equal(panoptic_map(buf), fr.mask)
        assert sc.test_indices == list(range(0, len(sc.frames), 8))

    def test_static_blob(self):
        sc = synth_scene(preset("blob1-static")).scene
        assert len(sc.frames) == 4 and sc.k == 1
        spec = preset("blob1-static")
        spec.orbit_azimuth_deg = (0.0, 0.0)
        sc = synth_scene(spec).scene
        for f in sc.frames[1:]:
            assert np.array_equal(f.image, sc.frames[0].image)
            assert np.array_equal(f.mask, sc.frames[0].mask)
        assert set(np.unique(sc.frames[0].mask)) == {0, 1}

    def test_occlusion_preset(self):
        res = synth_scene(preset("blobs3-occlude"))
        sc = res.scene
        assert sc.k == 3 and len(sc.frames) == 60
        assert sc.cameras[0].width == 64 and sc.cameras[0].height == 64
        assert res.occlusion.max() >= 0.5

    def test_out_of_bounds(self):
        spec = preset("blobs2")
        spec.blobs[0].end = (5.0, 0.0, 0.0)
        with pytest.raises(DataError):
            synth_scene(spec)

    def test_unknown_preset(self):
        with pytest.raises(DataError):
            preset("nope")

    def test_write_and_load(self, tmp_path):
        res = synth_scene(preset("blobs2"))
        write_scene(res.scene, tmp_path)
        back = load_scene(tmp_path)
        assert back.k == 2
        assert np.array_equal(back.frames[3].mask, res.scene.frames[3].mask)
        assert np.array_equal(back.frames[3].image, res.scene.frames[3].image)
