"""Unified mask generator: one prompt-encoder/decoder for every frame.

Key frames are prompted with their frame-level token. Non-key frames are
prompted from a memory bank: their features are conditioned by cross-
attention against every stored entry, and a learned query token takes the
prompt slot. The decoder is a single two-way attention block followed by
a per-location dot-product head at patch resolution, bilinearly upsampled
to pixels, plus a presence logit read from the prompt token.

Memory policy: every prediction is written back as a mask-conditioned
copy of the frame's features. Key-frame entries are kept forever;
non-key entries live in a FIFO of capacity R. Reads decay with entry
age at a learned rate, so the latest prediction anchors the next frame
and propagation stays temporally smooth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, concat
from .errors import InputError, ShapeError, StateError
from .ops import bilinear_upsample, downsample_mean, scaled_dot_attention


@dataclass
class TokenPrompt:
    token: Tensor  # (C,)


@dataclass
class MemoryPrompt:
    bank: "MemoryBank"
    frame_index: int  # frame being decoded; sets the age of each stored entry


@dataclass
class MemoryEntry:
    frame_index: int
    features: Tensor  # (N, C), mask-conditioned
    is_key: bool


class MemoryBank:
    """Insertion-ordered store; non-key entries FIFO-bounded by capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InputError(f"memory capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_indices(self) -> set[int]:
        return {e.frame_index for e in self.entries}

    @property
    def non_key_count(self) -> int:
        return sum(not e.is_key for e in self.entries)

    def add(self, entry: MemoryEntry) -> None:
        if entry.frame_index in self.frame_indices:
            raise StateError(f"frame {entry.frame_index} already stored")
        self.entries.append(entry)
        while self.non_key_count > self.capacity:
            for i, e in enumerate(self.entries):  # oldest non-key first
                if not e.is_key:
                    del self.entries[i]
                    break

    def stacked_features(self) -> Tensor:
        if not self.entries:
            raise StateError("memory bank is empty")
        return concat([e.features for e in self.entries], axis=0)


@dataclass
class MaskPrediction:
    logits: Tensor  # (H, W)
    presence: Tensor  # scalar in (0, 1)
    patch_logits: Tensor | None = None  # (h, w) pre-upsampling
    presence_logit: Tensor | None = None  # pre-sigmoid, used for temporal chaining


@dataclass
class MaskTrajectory:
    """Per-frame predictions plus the presence gate applied on read-out."""

    predictions: list[MaskPrediction]
    threshold: float = 0.5

    def presence_scores(self) -> np.ndarray:
        return np.array([float(p.presence.data) for p in self.predictions])

    def probabilities(self) -> np.ndarray:
        """Sigmoid masks, exactly zeroed on frames gated absent."""
        out = []
        for pred in self.predictions:
            if float(pred.presence.data) < self.threshold:
                out.append(np.zeros(pred.logits.shape))
            else:
                out.append(1.0 / (1.0 + np.exp(-pred.logits.data)))
        return np.stack(out)

    def binary(self) -> np.ndarray:
        return self.probabilities() > 0.5


class MaskGenerator(Module):
    def __init__(
        self,
        channels: int,
        grid_hw: tuple[int, int],
        patch: int,
        rng: np.random.Generator,
        capacity: int = 6,
        use_positions: bool = True,
        presence_threshold: float = 0.5,
    ):
        self.channels = channels
        self.grid_hw = tuple(grid_hw)
        self.patch = patch
        self.capacity = capacity
        self.presence_threshold = presence_threshold
        c = channels
        n = self.grid_hw[0] * self.grid_hw[1]
        std = 1.0 / math.sqrt(c)
        # memory conditioning (prompt encoder, memory branch)
        self.mem_q = Linear(c, c, rng)
        self.mem_k = Linear(c, c, rng)
        self.mem_v = Linear(c, c, rng)
        self.mem_out = Linear(c, c, rng)
        # temporally structured reads: scores decay with entry age at a learned
        # non-negative rate (softplus, init rate 1) while key-frame entries get
        # a learned flat boost, so reads stay anchored on prompted frames
        # instead of drifting along their own recent predictions
        self.recency = Tensor(np.array(math.log(math.e - 1.0)), requires_grad=True)
        self.key_boost = Tensor(np.array(1.0), requires_grad=True)
        self.query_token = Tensor(rng.normal(0.0, std, size=c), requires_grad=True)
        # memory encoder: how a predicted mask is folded into stored features
        self.mask_embed = Tensor(rng.normal(0.0, std, size=c), requires_grad=True)
        # two-way decoder
        self.positions = (
            Tensor(rng.normal(0.0, std, size=(n, c)), requires_grad=True) if use_positions else None
        )
        self.t2f_q = Linear(c, c, rng)
        self.t2f_k = Linear(c, c, rng)
        self.t2f_v = Linear(c, c, rng)
        self.f2t_q = Linear(c, c, rng)
        self.f2t_k = Linear(c, c, rng)
        self.f2t_v = Linear(c, c, rng)
        self.hyper = Linear(c, c, rng)
        self.logit_bias = Tensor(np.zeros(()), requires_grad=True)
        self.presence_head = Linear(c, 1, rng)
        # temporal residual for memory-prompted frames: the previous frame's
        # patch logits and presence logit carry over through learned gates
        # (sigmoid, init 0.5), a first-order mask-propagation prior
        self.carry_gate = Tensor(np.zeros(()), requires_grad=True)
        self.presence_carry_gate = Tensor(np.zeros(()), requires_grad=True)

    # -- prompt encoding -------------------------------------------------------

    def encode_prompt(self, prompt, features: Tensor):
        """Returns (prompt tokens (k, C), conditioned features (N, C))."""
        self._check_features(features)
        if isinstance(prompt, TokenPrompt):
            return prompt.token.reshape(1, self.channels), features
        if isinstance(prompt, MemoryPrompt):
            memory = prompt.bank.stacked_features()
            n = self.grid_hw[0] * self.grid_hw[1]
            ages = np.repeat(
                [abs(prompt.frame_index - e.frame_index) for e in prompt.bank.entries], n
            ).astype(np.float64)
            keyed = np.repeat(
                [float(e.is_key) for e in prompt.bank.entries], n
            )
            rate = (self.recency.exp() + 1.0).log()
            read = scaled_dot_attention(
                self.mem_q(features), self.mem_k(memory), self.mem_v(memory),
                bias=rate * (-ages) + self.key_boost * keyed,
            )
            conditioned = features + self.mem_out(read)
            return self.query_token.reshape(1, self.channels), conditioned
        raise InputError(f"unknown prompt type {type(prompt).__name__}")

    # -- decoding ----------------------------------------------------------------

    def decode_mask(
        self, features: Tensor, prompt_tokens: Tensor, previous: MaskPrediction | None = None
    ) -> MaskPrediction:
        self._check_features(features)
        if prompt_tokens.ndim != 2 or prompt_tokens.shape[1] != self.channels:
            raise ShapeError(f"prompt tokens {prompt_tokens.shape} must be (k, {self.channels})")
        h, w = self.grid_hw
        feats = features if self.positions is None else features + self.positions
        tokens = prompt_tokens + scaled_dot_attention(
            self.t2f_q(prompt_tokens), self.t2f_k(feats), self.t2f_v(feats)
        )
        feats = feats + scaled_dot_attention(
            self.f2t_q(feats), self.f2t_k(tokens), self.f2t_v(tokens)
        )
        first = tokens[0]
        patch_logits = (feats @ self.hyper(first) + self.logit_bias).reshape(h, w)
        presence_logit = self.presence_head(first).reshape(())
        if previous is not None:
            patch_logits = patch_logits + self.carry_gate.sigmoid() * previous.patch_logits
            presence_logit = (
                presence_logit
                + self.presence_carry_gate.sigmoid() * previous.presence_logit
            )
        logits = bilinear_upsample(patch_logits, self.patch)
        return MaskPrediction(logits, presence_logit.sigmoid(), patch_logits, presence_logit)

    # -- memory ---------------------------------------------------------------------

    def memory_write(
        self,
        bank: MemoryBank,
        features: Tensor,
        mask_probs: Tensor,
        is_key: bool,
        frame_index: int,
    ) -> None:
        """Fold the predicted soft mask into the frame features and store."""
        self._check_features(features)
        small = downsample_mean(mask_probs, self.patch)
        n = self.grid_hw[0] * self.grid_hw[1]
        conditioned = features + small.reshape(n, 1) * self.mask_embed
        bank.add(MemoryEntry(frame_index, conditioned, is_key))

    # -- full-video pass ----------------------------------------------------------------

    def segment_video(
        self,
        frame_features,
        frame_tokens: dict[int, Tensor],
        key_indices,
        capacity: int | None = None,
    ) -> MaskTrajectory:
        """Segment every frame of a video.

        frame_features: sequence of (N, C) feature matrices, one per frame.
        frame_tokens: frame index -> frame-level token for key frames.
        Processing starts at the earliest key frame and runs forward; the
        frames before it are handled by a backward sweep with a fresh bank
        seeded by that first key frame's prediction.
        """
        keys = sorted(set(int(k) for k in key_indices))
        t_total = len(frame_features)
        if not keys:
            raise InputError("at least one key frame is required")
        if keys[0] < 0 or keys[-1] >= t_total:
            raise InputError(f"key indices {keys} out of range for {t_total} frames")
        missing = [k for k in keys if k not in frame_tokens]
        if missing:
            raise InputError(f"no frame tokens for key frames {missing}")
        cap = self.capacity if capacity is None else capacity
        key_set = set(keys)
        first_key = keys[0]
        predictions: dict[int, MaskPrediction] = {}

        bank = MemoryBank(cap)
        for t in range(first_key, t_total):
            previous = predictions.get(t - 1)
            pred = self._predict_frame(
                bank, frame_features[t], frame_tokens, t, t in key_set, previous
            )
            predictions[t] = pred
            self.memory_write(bank, frame_features[t], pred.logits.sigmoid(), t in key_set, t)

        if first_key > 0:
            back = MemoryBank(cap)
            seed = predictions[first_key]
            self.memory_write(
                back, frame_features[first_key], seed.logits.sigmoid(), True, first_key
            )
            for t in range(first_key - 1, -1, -1):
                pred = self._predict_frame(
                    back, frame_features[t], frame_tokens, t, False, predictions[t + 1]
                )
                predictions[t] = pred
                self.memory_write(back, frame_features[t], pred.logits.sigmoid(), False, t)

        ordered = [predictions[t] for t in range(t_total)]
        return MaskTrajectory(ordered, self.presence_threshold)

    def _predict_frame(self, bank, features, frame_tokens, t, is_key, previous=None) -> MaskPrediction:
        if is_key:
            tokens, conditioned = self.encode_prompt(TokenPrompt(frame_tokens[t]), features)
            return self.decode_mask(conditioned, tokens)
        tokens, conditioned = self.encode_prompt(MemoryPrompt(bank, t), features)
        return self.decode_mask(conditioned, tokens, previous)

    def _check_features(self, features: Tensor) -> None:
        n = self.grid_hw[0] * self.grid_hw[1]
        if features.ndim != 2 or features.shape != (n, self.channels):
            raise ShapeError(
                f"expected ({n}, {self.channels}) features, got {features.shape}"
            )
