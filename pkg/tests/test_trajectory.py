import numpy as np
import pytest

from trajseg.autodiff import Linear, Tensor
from trajseg.errors import InputError, ShapeError
from trajseg.language import default_vocabulary
from trajseg.ops import grad_check
from trajseg.trajectory import (
    ObjectTrajectory,
    TrajectoryEncoder,
    boxes_from_masks,
    insert_placeholder,
    uniform_indices,
)


def make_traj(n_frames, present, box=(0.25, 0.25, 0.75, 0.75)):
    presence = tuple(t in present for t in range(n_frames))
    return ObjectTrajectory({t: box for t in present}, presence)


class TestUniformIndices:
    def test_even_spread(self):
        assert uniform_indices(10, 5) == [0, 2, 4, 6, 8]

    def test_count_capped_at_total(self):
        assert uniform_indices(3, 5) == [0, 1, 2]

    def test_identity_when_equal(self):
        assert uniform_indices(4, 4) == [0, 1, 2, 3]

    def test_single(self):
        assert uniform_indices(9, 1) == [0]

    def test_bad_arguments(self):
        with pytest.raises(InputError):
            uniform_indices(0, 3)


class TestObjectTrajectory:
    def test_requires_a_present_frame(self):
        with pytest.raises(InputError):
            ObjectTrajectory({}, (False, False))

    def test_boxes_must_match_presence(self):
        with pytest.raises(InputError):
            ObjectTrajectory({0: (0.1, 0.1, 0.5, 0.5)}, (True, True))

    def test_degenerate_box_rejected(self):
        with pytest.raises(InputError):
            ObjectTrajectory({0: (0.5, 0.1, 0.5, 0.9)}, (True,))

    def test_n_present(self):
        traj = make_traj(5, [1, 3])
        assert traj.n_present == 2


class TestBoxesFromMasks:
    def test_tight_box_normalization(self):
        masks = np.zeros((2, 8, 8), dtype=bool)
        masks[0, 2:5, 1:4] = True  # rows 2..4, cols 1..3
        traj = boxes_from_masks(masks)
        assert traj.presence == (True, False)
        assert traj.boxes[0] == (1 / 8, 2 / 8, 4 / 8, 5 / 8)

    def test_full_frame_box(self):
        masks = np.ones((1, 4, 4), dtype=bool)
        assert boxes_from_masks(masks).boxes[0] == (0.0, 0.0, 1.0, 1.0)

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            boxes_from_masks(np.zeros((4, 4), dtype=bool))


class TestTrajectoryEncoder:
    def test_zero_features_map_to_zero(self, rng):
        enc = TrajectoryEncoder(channels=3, roi_size=2, n_slots=4, rng=rng)
        feats = [Tensor(np.zeros((4, 4, 3))) for _ in range(2)]
        out = enc(feats, make_traj(2, [0, 1]))
        assert np.allclose(out.data, 0.0)  # bias starts at zero

    def test_single_constant_frame_matches_linear_oracle(self, rng):
        c = 3
        enc = TrajectoryEncoder(channels=c, roi_size=2, n_slots=4, rng=rng)
        feats = [Tensor(np.full((4, 4, c), 2.5))]
        out = enc(feats, make_traj(1, [0]))
        packed = np.zeros(4 * c)
        packed[:c] = 2.5  # slot 0 pooled vector; slots 1..3 zero-padded
        expected = packed @ enc.proj.weight.data + enc.proj.bias.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_two_identical_frames_match_oracle_composition(self, rng):
        c = 2
        enc = TrajectoryEncoder(channels=c, roi_size=2, n_slots=2, rng=rng)
        fmap = rng.normal(size=(4, 4, c))
        feats = [Tensor(fmap.copy()), Tensor(fmap.copy())]
        out = enc(feats, make_traj(2, [0, 1]))

        from oracles import roi_align_oracle

        roi = roi_align_oracle(fmap, (0.25, 0.25, 0.75, 0.75), 2)
        pooled = roi.reshape(4, c).mean(axis=0)
        packed = np.concatenate([pooled, pooled])
        expected = packed @ enc.proj.weight.data + enc.proj.bias.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_uniform_slot_subsampling_when_crowded(self, rng):
        enc = TrajectoryEncoder(channels=2, roi_size=2, n_slots=2, rng=rng)
        # 4 present frames, 2 slots -> frames 0 and 2 selected
        values = [1.0, 2.0, 3.0, 4.0]
        feats = [Tensor(np.full((4, 4, 2), v)) for v in values]
        out = enc(feats, make_traj(4, [0, 1, 2, 3]))
        packed = np.array([1.0, 1.0, 3.0, 3.0])
        expected = packed @ enc.proj.weight.data + enc.proj.bias.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_invariant_to_features_outside_box(self, rng):
        # box (0.25,0.25,0.75,0.75) on an 8x8 grid with roi_size 4 samples at
        # integer coordinates 2..5 only, so the exterior is never touched
        enc = TrajectoryEncoder(channels=2, roi_size=4, n_slots=2, rng=rng)
        base = rng.normal(size=(8, 8, 2))
        noisy = rng.normal(size=(8, 8, 2))
        noisy[2:6, 2:6] = base[2:6, 2:6]
        traj = make_traj(1, [0])
        a = enc([Tensor(base)], traj)
        b = enc([Tensor(noisy)], traj)
        assert np.abs(a.data - b.data).max() < 1e-10

    def test_absent_frame_features_are_ignored(self, rng):
        enc = TrajectoryEncoder(channels=2, roi_size=2, n_slots=3, rng=rng)
        traj = make_traj(4, [1, 3])
        feats = [Tensor(rng.normal(size=(4, 4, 2))) for _ in range(4)]
        out_a = enc(feats, traj)
        swapped = list(feats)
        swapped[0], swapped[2] = Tensor(rng.normal(size=(4, 4, 2))), Tensor(rng.normal(size=(4, 4, 2)))
        out_b = enc(swapped, traj)
        assert np.array_equal(out_a.data, out_b.data)

    def test_frame_count_mismatch(self, rng):
        enc = TrajectoryEncoder(channels=2, roi_size=2, n_slots=2, rng=rng)
        with pytest.raises(ShapeError):
            enc([Tensor(np.zeros((4, 4, 2)))], make_traj(2, [0, 1]))

    def test_flatten_mode_dimensions(self, rng):
        enc = TrajectoryEncoder(channels=2, roi_size=2, n_slots=2, rng=rng, mode="flatten")
        assert enc.proj.weight.shape == (2 * 2 * 2 * 2, 2)
        out = enc([Tensor(rng.normal(size=(4, 4, 2)))], make_traj(1, [0]))
        assert out.shape == (2,)

    def test_gradcheck_wrt_frame_features(self, rng):
        enc = TrajectoryEncoder(channels=2, roi_size=2, n_slots=2, rng=rng)
        feats = [Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True) for _ in range(2)]
        traj = make_traj(2, [0, 1])
        weights = rng.standard_normal(2)
        report = grad_check(
            lambda: (enc(feats, traj) * weights).sum(),
            {"f0": feats[0], "f1": feats[1]},
            name="trajectory_encoder",
        )
        assert report.passed, str(report)


class TestInsertPlaceholder:
    def test_non_placeholder_rows_bitwise_equal(self, rng):
        vocab = default_vocabulary()
        table = Tensor(rng.normal(size=(len(vocab), 5)))
        proj = Linear(5, 5, rng)
        ids = vocab.encode("Can you describe <PLH> in this video?")
        traj_feat = Tensor(rng.normal(size=5))
        out = insert_placeholder(ids, vocab, table, traj_feat, proj)
        assert out.shape == (7, 5)
        for pos in (0, 1, 2, 4, 5, 6):
            assert np.array_equal(out.data[pos], table.data[ids[pos]])

    def test_zero_feature_zero_bias_gives_zero_slot(self, rng):
        vocab = default_vocabulary()
        table = Tensor(rng.normal(size=(len(vocab), 4)))
        proj = Linear(4, 4, rng)  # bias starts at zero
        ids = [vocab.plh_id]
        out = insert_placeholder(ids, vocab, table, Tensor(np.zeros(4)), proj)
        assert np.allclose(out.data, 0.0)

    def test_slot_matches_matrix_vector_oracle(self, rng):
        vocab = default_vocabulary()
        table = Tensor(rng.normal(size=(len(vocab), 4)))
        proj = Linear(4, 4, rng)
        ids = vocab.encode("Can you describe <PLH> in this video?")
        feat = rng.normal(size=4)
        out = insert_placeholder(ids, vocab, table, Tensor(feat), proj)
        assert np.allclose(out.data[3], feat @ proj.weight.data + proj.bias.data, atol=1e-12)

    def test_zero_or_multiple_placeholders_rejected(self, rng):
        vocab = default_vocabulary()
        table = Tensor(rng.normal(size=(len(vocab), 4)))
        proj = Linear(4, 4, rng)
        feat = Tensor(np.zeros(4))
        with pytest.raises(InputError):
            insert_placeholder(vocab.encode("Can you segment"), vocab, table, feat, proj)
        with pytest.raises(InputError):
            insert_placeholder([vocab.plh_id, vocab.plh_id], vocab, table, feat, proj)
