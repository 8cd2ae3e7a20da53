"""Full pipeline assembly: pixels in, text and mask trajectories out.

The stand-in vision backbone is a per-patch MLP; key-frame features are
mean-pooled to one visual token each for the reasoner. A grounding or
captioning stream is teacher-forced through the reasoner to produce text
logits and the trajectory token; frame integration adapts that token per
key frame; the mask generator segments every frame. Tracking samples
bypass the reasoner entirely and exercise only the memory path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, concat, no_grad, stack
from .errors import InputError, ShapeError
from .frame_integration import FrameIntegrator
from .language import Sample, Vocabulary
from .maskgen import MaskGenerator, MaskTrajectory, MemoryBank, MemoryPrompt
from .reasoner import Reasoner, ReasonerConfig, extract_trj_token
from .trajectory import ObjectTrajectory, TrajectoryEncoder, insert_placeholder, uniform_indices


@dataclass
class ModelConfig:
    vocab_size: int
    channels: int = 64
    attn_dim: int = 64
    patch: int = 8
    frame_hw: tuple[int, int] = (64, 64)
    roi_size: int = 4
    n_slots: int = 8
    memory_capacity: int = 6
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 128
    use_fci: bool = True
    use_positions: bool = True
    presence_threshold: float = 0.5
    head_init: str = "normal"
    traj_mode: str = "pooled"

    def __post_init__(self):
        h, w = self.frame_hw
        if h % self.patch or w % self.patch:
            raise InputError(f"frame size {self.frame_hw} not divisible by patch {self.patch}")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return (self.frame_hw[0] // self.patch, self.frame_hw[1] // self.patch)


class PatchEncoder(Module):
    """Two-layer tanh MLP applied to each patch independently."""

    def __init__(self, patch: int, channels: int, rng: np.random.Generator):
        self.patch = patch
        self.inner = Linear(patch * patch * 3, channels, rng)
        self.outer = Linear(channels, channels, rng)

    def __call__(self, frame: np.ndarray) -> Tensor:
        """frame: (H, W, 3) floats in [0, 1] -> (N, C) patch features."""
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) frame, got {frame.shape}")
        h, w, _ = frame.shape
        p = self.patch
        patches = (
            frame.reshape(h // p, p, w // p, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape((h // p) * (w // p), p * p * 3)
        )
        return self.outer(self.inner(Tensor(patches)).tanh())


@dataclass
class ReasonedSample:
    """Everything the losses need from one grounding/captioning forward."""

    supervised_logits: Tensor  # (n_supervised, V)
    labels: np.ndarray  # (n_supervised,)
    traj_token: Tensor  # (C,) the trajectory-level target token
    visual_tokens: Tensor


class VideoSegmenter(Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, rng: np.random.Generator):
        self.config = config
        self.vocab = vocab
        c = config.channels
        self.patch_encoder = PatchEncoder(config.patch, c, rng)
        self.reasoner = Reasoner(
            ReasonerConfig(
                vocab_size=config.vocab_size,
                width=c,
                n_layers=config.n_layers,
                n_heads=config.n_heads,
                max_len=config.max_len,
                head_init=config.head_init,
            ),
            rng,
        )
        self.traj_encoder = TrajectoryEncoder(c, config.roi_size, config.n_slots, rng, config.traj_mode)
        self.plh_projector = Linear(c, c, rng)
        self.integrator = FrameIntegrator(c, config.attn_dim, rng)
        self.maskgen = MaskGenerator(
            c,
            config.grid_hw,
            config.patch,
            rng,
            capacity=config.memory_capacity,
            use_positions=config.use_positions,
            presence_threshold=config.presence_threshold,
        )

    # -- feature extraction ------------------------------------------------------

    def frame_features(self, frames: np.ndarray) -> list[Tensor]:
        """frames: (T, H, W, 3) in [0, 1] -> list of (N, C) feature maps."""
        if frames.ndim != 4:
            raise ShapeError(f"expected (T, H, W, 3) frames, got {frames.shape}")
        return [self.patch_encoder(frames[t]) for t in range(frames.shape[0])]

    def feature_grid(self, features: Tensor) -> Tensor:
        h, w = self.config.grid_hw
        return features.reshape(h, w, self.config.channels)

    def visual_tokens(self, features: list[Tensor], key_indices) -> Tensor:
        """One mean-pooled token per key frame, stacked to (K, C)."""
        return stack([features[t].mean(axis=0) for t in key_indices], axis=0)

    # -- reasoning ---------------------------------------------------------------

    def reason(self, sample: Sample, features: list[Tensor]) -> ReasonedSample:
        """Teacher-forced pass for grounding/captioning samples."""
        if sample.kind not in ("grounding", "captioning"):
            raise InputError(f"reason() does not handle {sample.kind!r} samples")
        vis = self.visual_tokens(features, sample.key_frames) if sample.key_frames else None
        n_vis = 0 if vis is None else vis.shape[0]
        input_ids = list(sample.input_ids)
        target_ids = list(sample.target_ids)

        if sample.kind == "captioning":
            traj_feature = self.traj_encoder(
                [self.feature_grid(f) for f in features], sample.trajectory
            )
            instr_emb = insert_placeholder(
                input_ids, self.vocab, self.reasoner.token_embeddings, traj_feature, self.plh_projector
            )
            bos_emb = self.reasoner.embed_tokens([self.vocab.bos_id])
            tgt_emb = self.reasoner.embed_tokens(target_ids)
            text_emb = concat([bos_emb, instr_emb, tgt_emb], axis=0)
        else:
            text_emb = self.reasoner.embed_tokens([self.vocab.bos_id] + input_ids + target_ids)

        logits, hidden = self.reasoner.forward(vis, text_emb)
        first_supervised = n_vis + len(input_ids)  # position of the last instruction token
        labels = np.array(target_ids + [self.vocab.eos_id], dtype=np.int64)
        supervised = logits[first_supervised : first_supervised + len(labels)]
        target_offset = n_vis + 1 + len(input_ids)
        traj_token = extract_trj_token(
            hidden, target_ids, self.vocab.trj_id, target_offset, self.reasoner.trj_proj
        )
        return ReasonedSample(supervised, labels, traj_token, vis)

    # -- mask pipeline -------------------------------------------------------------

    def frame_tokens(self, traj_token: Tensor, features: list[Tensor], key_indices) -> dict[int, Tensor]:
        """Per-key-frame tokens; identity copies when integration is off."""
        keys = list(key_indices)
        if self.config.use_fci:
            tokens = self.integrator(traj_token, [features[t] for t in keys])
        else:
            tokens = [traj_token for _ in keys]
        return dict(zip(keys, tokens))

    def segment(self, traj_token: Tensor, features: list[Tensor], key_indices) -> MaskTrajectory:
        tokens = self.frame_tokens(traj_token, features, key_indices)
        return self.maskgen.segment_video(features, tokens, list(key_indices))

    def track_from_mask(self, features: list[Tensor], seed_mask: np.ndarray, seed_frame: int):
        """Memory-only propagation from a ground-truth mask (tracking samples).

        Returns {frame index -> MaskPrediction} for frames after seed_frame.
        """
        if not 0 <= seed_frame < len(features):
            raise InputError(f"seed frame {seed_frame} out of range")
        bank = MemoryBank(self.config.memory_capacity)
        self.maskgen.memory_write(
            bank, features[seed_frame], Tensor(seed_mask.astype(np.float64)), True, seed_frame
        )
        out = {}
        for t in range(seed_frame + 1, len(features)):
            tokens, conditioned = self.maskgen.encode_prompt(MemoryPrompt(bank, t), features[t])
            pred = self.maskgen.decode_mask(conditioned, tokens)
            out[t] = pred
            self.maskgen.memory_write(bank, features[t], pred.logits.sigmoid(), False, t)
        return out

    # -- inference ----------------------------------------------------------------------

    def infer(self, frames: np.ndarray, instruction_ids, n_key_frames: int):
        """Greedy-decode the response, then segment. Returns
        (generated token ids, MaskTrajectory)."""
        t_total = frames.shape[0]
        keys = uniform_indices(t_total, max(1, n_key_frames))
        with no_grad():
            features = self.frame_features(frames)
            vis = self.visual_tokens(features, keys)
            generated, hidden = self.reasoner.generate(vis, instruction_ids, self.vocab)
            base = vis.shape[0] + 1 + len(list(instruction_ids))
            if self.vocab.trj_id in generated:
                pos = base + generated.index(self.vocab.trj_id)
            else:
                # degenerate decode (early training): fall back to the last
                # hidden state so inference still yields a trajectory
                pos = hidden.shape[0] - 1
            traj_token = self.reasoner.trj_proj(hidden[pos])
            trajectory = self.segment(traj_token, features, keys)
        return generated, trajectory
