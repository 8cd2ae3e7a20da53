import hashlib

import numpy as np
import pytest

from trajseg.config import RunConfig
from trajseg.errors import FormatError, InputError, ShapeError
from trajseg.language import default_vocabulary
from trajseg.synthetic import (
    BACKGROUND,
    COLOR_RGB,
    MovingObject,
    SceneSpec,
    generate_dataset,
    generate_scene,
    image_to_pseudo_video,
    list_samples,
    quantize,
    rasterize,
    read_ppm,
    read_sample,
    render_scene,
    write_ppm,
    write_sample,
)

VOCAB = default_vocabulary()


class TestRasterize:
    def test_square_pixel_count_exact(self):
        hit = rasterize("square", (8.0, 8.0), 3.0, (16, 16))
        # |x + 0.5 - 8| <= 3 admits x in 5..10: six columns, six rows
        assert hit.sum() == 36
        ys, xs = np.nonzero(hit)
        assert xs.min() == 5 and xs.max() == 10 and ys.min() == 5 and ys.max() == 10

    def test_circle_area_near_analytic(self):
        for r in (4.0, 6.0, 9.0):
            hit = rasterize("circle", (16.0, 16.0), r, (32, 32))
            assert abs(hit.sum() - np.pi * r * r) <= 8 * r

    def test_triangle_area_near_analytic(self):
        s = 6.0
        hit = rasterize("triangle", (16.0, 16.0), s, (32, 32))
        assert abs(hit.sum() - 2 * s * s) <= 6 * s

    def test_circle_symmetry_at_grid_center(self):
        hit = rasterize("circle", (8.0, 8.0), 5.0, (16, 16))
        np.testing.assert_array_equal(hit, hit[::-1])
        np.testing.assert_array_equal(hit, hit[:, ::-1])
        np.testing.assert_array_equal(hit, hit.T)

    def test_unknown_shape(self):
        with pytest.raises(InputError):
            rasterize("hexagon", (4, 4), 2, (8, 8))


def still_object(**overrides):
    base = dict(shape="square", color="red", half_size=3.0, start=(10.0, 10.0))
    base.update(overrides)
    return MovingObject(**base)


class TestRenderScene:
    def test_presence_matches_window(self):
        target = still_object(entry=2, exit=5)
        sample = render_scene(SceneSpec((24, 24), 6, target, ()), key_frame_count=3)
        assert sample.presence == (0, 0, 1, 1, 1, 0)
        assert sample.masks[1].sum() == 0 and sample.masks[3].sum() == 36

    def test_target_drawn_over_distractor(self):
        target = still_object()
        distractor = still_object(color="blue", shape="circle", half_size=5.0)
        sample = render_scene(SceneSpec((24, 24), 2, target, (distractor,)), 1)
        raster = rasterize("square", (10.0, 10.0), 3.0, (24, 24))
        np.testing.assert_array_equal(sample.masks[0], raster)
        # every target pixel carries the target color, not the distractor's
        np.testing.assert_array_equal(
            sample.frames[0][raster], np.tile(COLOR_RGB["red"], (raster.sum(), 1))
        )

    def test_linear_motion_moves_the_mask(self):
        target = still_object(motion="linear", direction="right", velocity=(2.0, 0.0))
        sample = render_scene(SceneSpec((24, 24), 3, target, ()), 1)
        xs0 = np.nonzero(sample.masks[0])[1]
        xs2 = np.nonzero(sample.masks[2])[1]
        assert xs2.min() - xs0.min() == 4

    def test_description_is_in_vocabulary(self):
        target = still_object(motion="sine", direction="up", wobble_amp=2.0)
        sample = render_scene(SceneSpec((24, 24), 2, target, ()), 1)
        assert sample.description == "red square weaving up"
        assert len(VOCAB.encode(sample.description)) == 4


class TestGenerateScene:
    def test_properties_hold_over_many_seeds(self):
        descriptions = set()
        for seed in range(40):
            rng = np.random.default_rng(seed)
            s = generate_scene(rng, hw=(32, 32), frames=6, key_frames=3, size_range=(4, 7))
            assert s.frames.shape == (6, 32, 32, 3)
            assert s.masks.dtype == np.bool_
            assert sum(s.presence) >= 3
            assert s.presence == tuple(int(m.any()) for m in s.masks)
            assert len(s.key_frames) == 3
            VOCAB.encode(s.description)  # must not raise
            descriptions.add(s.description)
        assert len(descriptions) > 10  # generator actually varies content

    def test_target_identity_unique_in_scene(self):
        for seed in range(40):
            rng = np.random.default_rng(seed)
            s = generate_scene(rng, hw=(32, 32), frames=6, size_range=(4, 7))
            target, distractors = s.spec.target, s.spec.distractors
            assert len(distractors) >= 1
            assert all(d.identity() != target.identity() for d in distractors)

    def test_same_seed_same_bytes(self):
        a = generate_scene(np.random.default_rng(11), hw=(32, 32), frames=6, size_range=(4, 7))
        b = generate_scene(np.random.default_rng(11), hw=(32, 32), frames=6, size_range=(4, 7))
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.masks, b.masks)
        assert a.description == b.description

    def test_seeds_give_distinct_scenes(self):
        digests = set()
        for seed in range(60):
            s = generate_scene(np.random.default_rng(seed), hw=(32, 32), frames=6, size_range=(4, 7))
            digests.add(hashlib.sha256(quantize(s.frames).tobytes()).hexdigest())
        assert len(digests) == 60

    def test_stills_have_no_motion_words(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            s = generate_scene(rng, hw=(32, 32), frames=1, absence_fraction=0.0,
                               allow_motion=False, size_range=(4, 7))
            assert s.kind == "still"
            assert s.description.endswith("staying still")
            assert s.presence == (1,)


class TestPseudoVideo:
    def test_shifts_accumulate_from_identity(self, rng):
        still = generate_scene(rng, hw=(32, 32), frames=1, absence_fraction=0.0,
                               allow_motion=False, size_range=(4, 7))
        video = image_to_pseudo_video(still, 5, np.random.default_rng(3), key_frames=2)
        assert video.kind == "video"
        assert video.frames.shape == (5, 32, 32, 3)
        np.testing.assert_array_equal(video.frames[0], still.frames[0])
        assert video.masks[1].sum() <= still.masks[0].sum()  # clipping only removes
        assert video.presence == tuple(int(m.any()) for m in video.masks)
        assert video.key_frames == (0, 2)

    def test_rejects_multi_frame_source(self, rng):
        video = generate_scene(rng, hw=(32, 32), frames=4, size_range=(4, 7))
        with pytest.raises(InputError):
            image_to_pseudo_video(video, 5, rng)


class TestPpm:
    def test_round_trip(self, tmp_path, rng):
        image = rng.integers(0, 256, size=(9, 13, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, image)
        np.testing.assert_array_equal(read_ppm(path), image)
        assert path.read_bytes().startswith(b"P6\n13 9\n255\n")

    def test_write_rejects_float(self, tmp_path):
        with pytest.raises(ShapeError):
            write_ppm(tmp_path / "x.ppm", np.zeros((4, 4, 3)))

    @pytest.mark.parametrize("blob", [b"P5\n2 2\n255\n" + b"\0" * 4, b"P6\n2 2\n65535\n", b"P6\n2 2\n255\n\0\0"])
    def test_read_rejects_malformed(self, tmp_path, blob):
        path = tmp_path / "bad.ppm"
        path.write_bytes(blob)
        with pytest.raises(FormatError):
            read_ppm(path)


class TestSampleDirs:
    def test_round_trip(self, tmp_path, rng):
        sample = generate_scene(rng, hw=(32, 32), frames=4, key_frames=2, size_range=(4, 7))
        write_sample(tmp_path / "s0", sample)
        loaded = read_sample(tmp_path / "s0")
        assert loaded.kind == "video"
        assert loaded.description == sample.description
        assert loaded.presence == sample.presence
        assert loaded.key_frames == sample.key_frames
        np.testing.assert_array_equal(loaded.masks, sample.masks)
        np.testing.assert_array_equal(loaded.frames, quantize(sample.frames) / 255.0)

    def test_manifest_key_check(self, tmp_path, rng):
        sample = generate_scene(rng, hw=(32, 32), frames=2, size_range=(4, 7))
        write_sample(tmp_path / "s0", sample)
        manifest = tmp_path / "s0" / "manifest.txt"
        manifest.write_text(manifest.read_text() + "extra=1\n")
        with pytest.raises(FormatError):
            read_sample(tmp_path / "s0")


def small_run_config(**overrides):
    base = dict(
        frame_size=32, frames_per_video=4, key_frames=2, n_train=3, n_val=2,
        n_stage1=2, min_size=4, max_size=7, seed=5,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestGenerateDataset:
    def tree_digest(self, root):
        out = {}
        for path in sorted(root.rglob("*")):
            if path.is_file():
                out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
        return out

    def test_layout_and_thread_invariance(self, tmp_path):
        cfg = small_run_config()
        counts = generate_dataset(tmp_path / "one", cfg, threads=1)
        assert counts == {"train": 3, "val": 2, "stage1": 2}
        generate_dataset(tmp_path / "four", cfg, threads=4)
        single = self.tree_digest(tmp_path / "one")
        pooled = self.tree_digest(tmp_path / "four")
        assert single == pooled and len(single) > 0

    def test_splits_load(self, tmp_path):
        cfg = small_run_config()
        generate_dataset(tmp_path, cfg)
        train = list_samples(tmp_path, "train")
        assert [p.name for p in train] == ["sample_00000", "sample_00001", "sample_00002"]
        loaded = read_sample(train[0])
        assert loaded.frames.shape == (4, 32, 32, 3)
        still = read_sample(list_samples(tmp_path, "stage1")[0])
        assert still.kind == "still" and still.frames.shape[0] == 1

    def test_pseudo_video_fraction(self, tmp_path):
        cfg = small_run_config(pseudo_video_fraction=0.5)
        generate_dataset(tmp_path, cfg)
        kinds = [read_sample(p).kind for p in list_samples(tmp_path, "stage1")]
        assert kinds == ["video", "still"]

    def test_missing_split_errors(self, tmp_path):
        with pytest.raises(InputError):
            list_samples(tmp_path, "train")
