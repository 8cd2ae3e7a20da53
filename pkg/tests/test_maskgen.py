import numpy as np
import pytest

from oracles import attention_oracle, upsample_oracle
from trajseg.autodiff import Tensor
from trajseg.errors import InputError, ShapeError, StateError
from trajseg.maskgen import (
    MaskGenerator,
    MemoryBank,
    MemoryEntry,
    MemoryPrompt,
    TokenPrompt,
)
from trajseg.ops import grad_check


def entry(idx, is_key=False, n=4, c=3, fill=0.0):
    return MemoryEntry(idx, Tensor(np.full((n, c), fill)), is_key)


class TestMemoryBank:
    def test_fifo_eviction_of_non_key(self):
        bank = MemoryBank(capacity=2)
        for i in (1, 2, 3):
            bank.add(entry(i))
        assert bank.frame_indices == {2, 3}

    def test_key_entries_never_evicted(self):
        bank = MemoryBank(capacity=2)
        for i in range(10):
            bank.add(entry(i, is_key=True))
        assert len(bank) == 10
        assert bank.non_key_count == 0

    def test_keys_do_not_count_against_capacity(self):
        bank = MemoryBank(capacity=2)
        bank.add(entry(0, is_key=True))
        for i in (1, 2, 3):
            bank.add(entry(i))
        assert bank.frame_indices == {0, 2, 3}

    def test_duplicate_frame_index_rejected(self):
        bank = MemoryBank(capacity=2)
        bank.add(entry(5))
        with pytest.raises(StateError):
            bank.add(entry(5, is_key=True))

    def test_empty_bank_has_no_features(self):
        with pytest.raises(StateError):
            MemoryBank(capacity=2).stacked_features()

    def test_random_schedules_respect_policy(self, rng):
        # mirrors the acceptance criterion at smaller volume
        for _ in range(100):
            cap = int(rng.integers(1, 5))
            bank = MemoryBank(capacity=cap)
            reference_non_key = []
            keys_written = set()
            for idx in range(int(rng.integers(1, 30))):
                is_key = bool(rng.random() < 0.4)
                bank.add(entry(idx, is_key=is_key))
                if is_key:
                    keys_written.add(idx)
                else:
                    reference_non_key.append(idx)
                    if len(reference_non_key) > cap:
                        reference_non_key.pop(0)  # strictly oldest-first
                assert bank.non_key_count <= cap
                assert {e.frame_index for e in bank.entries if e.is_key} == keys_written
                assert [e.frame_index for e in bank.entries if not e.is_key] == reference_non_key


@pytest.fixture
def gen(rng):
    return MaskGenerator(channels=3, grid_hw=(2, 2), patch=2, rng=rng)


class TestEncodePrompt:
    def test_token_prompt_passes_through(self, gen, rng):
        token = Tensor(rng.normal(size=3))
        feats = Tensor(rng.normal(size=(4, 3)))
        tokens, conditioned = gen.encode_prompt(TokenPrompt(token), feats)
        assert tokens.shape == (1, 3)
        assert np.array_equal(tokens.data[0], token.data)
        assert conditioned is feats  # bitwise pass-through

    def test_memory_prompt_matches_attention_oracle(self, gen, rng):
        # one stored entry: every memory row shares one age and one key flag,
        # the bias is uniform and cancels in the softmax, so the plain oracle applies
        feats = rng.normal(size=(4, 3))
        bank = MemoryBank(capacity=2)
        bank.add(MemoryEntry(0, Tensor(feats.copy()), True))
        tokens, conditioned = gen.encode_prompt(MemoryPrompt(bank, 1), Tensor(feats))
        q = feats @ gen.mem_q.weight.data + gen.mem_q.bias.data
        k = feats @ gen.mem_k.weight.data + gen.mem_k.bias.data
        v = feats @ gen.mem_v.weight.data + gen.mem_v.bias.data
        read = attention_oracle(q, k, v)
        expected = feats + read @ gen.mem_out.weight.data + gen.mem_out.bias.data
        assert np.abs(conditioned.data - expected).max() < 1e-10
        assert np.array_equal(tokens.data[0], gen.query_token.data)

    def test_memory_read_prefers_recent_entries(self, gen, rng):
        # with a steep decay rate, reads should collapse onto the newest entry
        feats = rng.normal(size=(4, 3))
        old = rng.normal(size=(4, 3))
        new = rng.normal(size=(4, 3))
        bank = MemoryBank(capacity=3)
        bank.add(MemoryEntry(0, Tensor(old), True))
        bank.add(MemoryEntry(1, Tensor(new), False))
        gen.recency.data = np.array(30.0)  # softplus(30) ~ 30 >> score spread
        _, conditioned = gen.encode_prompt(MemoryPrompt(bank, 2), Tensor(feats))
        q = feats @ gen.mem_q.weight.data + gen.mem_q.bias.data
        k = new @ gen.mem_k.weight.data + gen.mem_k.bias.data
        v = new @ gen.mem_v.weight.data + gen.mem_v.bias.data
        newest_only = attention_oracle(q, k, v)
        expected = feats + newest_only @ gen.mem_out.weight.data + gen.mem_out.bias.data
        assert np.abs(conditioned.data - expected).max() < 1e-9

    def test_memory_read_can_anchor_on_key_entries(self, gen, rng):
        # zero decay plus a steep key boost: reads collapse onto the key entry
        # even when a non-key entry is newer
        feats = rng.normal(size=(4, 3))
        key = rng.normal(size=(4, 3))
        recent = rng.normal(size=(4, 3))
        bank = MemoryBank(capacity=3)
        bank.add(MemoryEntry(0, Tensor(key), True))
        bank.add(MemoryEntry(1, Tensor(recent), False))
        gen.recency.data = np.array(-40.0)  # softplus(-40) ~ 0
        gen.key_boost.data = np.array(30.0)
        _, conditioned = gen.encode_prompt(MemoryPrompt(bank, 2), Tensor(feats))
        q = feats @ gen.mem_q.weight.data + gen.mem_q.bias.data
        k = key @ gen.mem_k.weight.data + gen.mem_k.bias.data
        v = key @ gen.mem_v.weight.data + gen.mem_v.bias.data
        key_only = attention_oracle(q, k, v)
        expected = feats + key_only @ gen.mem_out.weight.data + gen.mem_out.bias.data
        assert np.abs(conditioned.data - expected).max() < 1e-9

    def test_memory_prompt_empty_bank_is_state_error(self, gen, rng):
        with pytest.raises(StateError):
            gen.encode_prompt(MemoryPrompt(MemoryBank(2), 0), Tensor(rng.normal(size=(4, 3))))

    def test_feature_shape_checked(self, gen, rng):
        with pytest.raises(ShapeError):
            gen.encode_prompt(TokenPrompt(Tensor(np.zeros(3))), Tensor(rng.normal(size=(5, 3))))


class TestDecodeMask:
    def test_all_zero_weights_give_zero_logits_and_half_presence(self, rng):
        gen = MaskGenerator(channels=3, grid_hw=(2, 2), patch=2, rng=rng)
        for p in gen.parameters():
            p.data[...] = 0.0
        pred = gen.decode_mask(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros((1, 3))))
        assert np.array_equal(pred.logits.data, np.zeros((4, 4)))
        assert float(pred.presence.data) == pytest.approx(0.5)

    def test_patch_logits_upsample_matches_oracle(self, rng):
        gen = MaskGenerator(channels=3, grid_hw=(2, 2), patch=2, rng=rng, use_positions=False)
        # silence the attention mixing so patch logits equal a crafted channel
        for lin in (gen.f2t_v, gen.hyper):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0
        gen.hyper.bias.data[0] = 1.0  # hyper vector = e0 -> logit = feature channel 0
        grid = np.array([[0.0, 1.0], [0.0, 0.0]])
        feats = np.zeros((4, 3))
        feats[:, 0] = grid.reshape(-1)
        pred = gen.decode_mask(Tensor(feats), Tensor(rng.normal(size=(1, 3))))
        assert np.allclose(pred.patch_logits.data, grid, atol=1e-12)
        assert np.allclose(pred.logits.data, upsample_oracle(grid, 2), atol=1e-12)

    def test_positionless_head_is_permutation_equivariant(self, rng):
        gen = MaskGenerator(channels=3, grid_hw=(2, 2), patch=2, rng=rng, use_positions=False)
        feats = rng.normal(size=(4, 3))
        token = Tensor(rng.normal(size=(1, 3)))
        perm = rng.permutation(4)
        plain = gen.decode_mask(Tensor(feats), token).patch_logits.data.reshape(-1)
        permuted = gen.decode_mask(Tensor(feats[perm]), token).patch_logits.data.reshape(-1)
        unpermuted = np.empty(4)
        unpermuted[perm] = permuted
        assert np.abs(plain - unpermuted).max() < 1e-12

    def test_prompt_token_shape_checked(self, gen, rng):
        with pytest.raises(ShapeError):
            gen.decode_mask(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros(3)))


class TestMemoryWrite:
    def test_zero_mask_stores_features_unchanged(self, gen, rng):
        bank = MemoryBank(2)
        feats = Tensor(rng.normal(size=(4, 3)))
        gen.memory_write(bank, feats, Tensor(np.zeros((4, 4))), is_key=False, frame_index=0)
        assert np.array_equal(bank.entries[0].features.data, feats.data)

    def test_mask_mixes_in_learned_channel_direction(self, gen, rng):
        bank = MemoryBank(2)
        feats = Tensor(np.zeros((4, 3)))
        gen.memory_write(bank, feats, Tensor(np.ones((4, 4))), is_key=True, frame_index=1)
        assert np.allclose(bank.entries[0].features.data, np.tile(gen.mask_embed.data, (4, 1)))


class TestSegmentVideo:
    def make_inputs(self, rng, t_total, keys):
        feats = [Tensor(rng.normal(size=(4, 3))) for _ in range(t_total)]
        tokens = {k: Tensor(rng.normal(size=3)) for k in keys}
        return feats, tokens

    def test_single_frame_equals_plain_decode(self, gen, rng):
        feats, tokens = self.make_inputs(rng, 1, [0])
        traj = gen.segment_video(feats, tokens, [0])
        direct = gen.decode_mask(feats[0], tokens[0].reshape(1, 3))
        assert np.array_equal(traj.predictions[0].logits.data, direct.logits.data)
        assert traj.predictions[0].presence.data == direct.presence.data

    def test_all_key_frames_independent_of_capacity(self, gen, rng):
        feats, tokens = self.make_inputs(rng, 4, range(4))
        a = gen.segment_video(feats, tokens, range(4), capacity=1)
        b = gen.segment_video(feats, tokens, range(4), capacity=100)
        for pa, pb in zip(a.predictions, b.predictions):
            assert np.array_equal(pa.logits.data, pb.logits.data)

    def test_rerun_is_bit_identical(self, gen, rng):
        feats, tokens = self.make_inputs(rng, 5, [0, 2])
        a = gen.segment_video(feats, tokens, [0, 2])
        b = gen.segment_video(feats, tokens, [0, 2])
        for pa, pb in zip(a.predictions, b.predictions):
            assert np.array_equal(pa.logits.data, pb.logits.data)
            assert pa.presence.data == pb.presence.data

    def test_covers_frames_before_first_key(self, gen, rng):
        feats, tokens = self.make_inputs(rng, 6, [3])
        traj = gen.segment_video(feats, tokens, [3])
        assert len(traj.predictions) == 6
        assert all(p.logits.shape == (4, 4) for p in traj.predictions)

    def test_no_key_frames_rejected(self, gen, rng):
        feats, _ = self.make_inputs(rng, 3, [])
        with pytest.raises(InputError):
            gen.segment_video(feats, {}, [])
        with pytest.raises(InputError):
            gen.segment_video(feats, {}, [7])

    def test_missing_frame_token_rejected(self, gen, rng):
        feats, tokens = self.make_inputs(rng, 3, [0])
        with pytest.raises(InputError):
            gen.segment_video(feats, tokens, [0, 2])

    def test_presence_gating_zeroes_masks_exactly(self, gen, rng):
        gen.presence_head.bias.data[:] = -50.0  # p-hat ~ 0 on every frame
        feats, tokens = self.make_inputs(rng, 3, [0])
        traj = gen.segment_video(feats, tokens, [0])
        probs = traj.probabilities()
        assert np.array_equal(probs, np.zeros_like(probs))
        assert not traj.binary().any()

    def test_three_frame_gradcheck_end_to_end(self, rng):
        gen = MaskGenerator(channels=2, grid_hw=(2, 2), patch=2, rng=rng, capacity=2)
        feats = [Tensor(rng.normal(size=(4, 2)), requires_grad=True) for _ in range(3)]
        token = Tensor(rng.normal(size=2), requires_grad=True)
        target = (rng.random((3, 4, 4)) < 0.5).astype(float)

        def loss():
            traj = gen.segment_video(feats, {0: token}, [0])
            total = None
            for t, pred in enumerate(traj.predictions):
                term = ((pred.logits.sigmoid() - target[t]) ** 2).mean() + pred.presence
                total = term if total is None else total + term
            return total

        params = {"token": token, "f0": feats[0], "f1": feats[1],
                  "mask_embed": gen.mask_embed, "mem_v": gen.mem_v.weight,
                  "hyper": gen.hyper.weight, "query": gen.query_token,
                  "presence": gen.presence_head.weight}
        report = grad_check(loss, params, name="segment_video")
        assert report.passed, str(report)
