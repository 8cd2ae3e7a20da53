"""Two-stage training loop, checkpointing, and split evaluation.

Stage 1 fits stills (grounding/captioning text plus single-frame masks).
Stage 2 fits videos with the presence-gated objective over a fixed task
mix: tracking samples exercise only the memory path, grounding and
captioning run the full reasoner. Everything is seeded; rerunning a stage
with the same config and data produces byte-identical curves and
checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .config import RunConfig, parse_config, serialize_config
from .errors import ConfigError, FormatError, InputError, NumericError
from .evaluation import MetricReport, build_report
from .language import Sample, Vocabulary, build_sample, default_vocabulary, grounding_instruction
from .losses import LossBreakdown, LossWeights, stage1_loss, stage2_loss
from .model import ModelConfig, VideoSegmenter
from .synthetic import LoadedSample, list_samples, read_sample
from .trajectory import boxes_from_masks, uniform_indices


class AdamW:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- task mix ---------------------------------------------------------------------


def mix_counts(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of n items over the fractions."""
    if n < 0 or any(f < 0 for f in fractions):
        raise InputError("need n >= 0 and nonnegative fractions")
    total = sum(fractions)
    if abs(total - 1.0) > 1e-9:
        raise InputError(f"fractions sum to {total}, expected 1")
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    leftovers = sorted(
        range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i)
    )
    for i in leftovers[: n - sum(counts)]:
        counts[i] += 1
    return counts


def assign_kinds(n: int, fractions, rng: np.random.Generator) -> list[str]:
    """One task kind per sample index, shuffled."""
    counts = mix_counts(n, fractions)
    kinds = ["tracking"] * counts[0] + ["grounding"] * counts[1] + ["captioning"] * counts[2]
    return [kinds[i] for i in rng.permutation(n)]


# -- per-sample forward ------------------------------------------------------------


def model_config_from_run(config: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        channels=config.channels,
        attn_dim=config.attn_dim,
        patch=config.patch,
        frame_hw=(config.frame_size, config.frame_size),
        roi_size=config.roi_size,
        n_slots=config.n_slots,
        memory_capacity=config.memory_capacity,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        max_len=config.max_len,
        use_fci=config.use_fci,
        use_positions=config.use_positions,
        presence_threshold=config.presence_threshold,
    )


def build_model(config: RunConfig, vocab: Vocabulary, rng: np.random.Generator) -> VideoSegmenter:
    return VideoSegmenter(model_config_from_run(config, len(vocab)), vocab, rng)


def loss_weights(config: RunConfig) -> LossWeights:
    return LossWeights(
        text=config.lambda_text,
        mask=config.lambda_mask,
        cls=config.lambda_cls,
        bce=config.lambda_bce,
        dice=config.lambda_dice,
    )


def make_sample(item: LoadedSample, kind: str, vocab: Vocabulary) -> Sample:
    trajectory = boxes_from_masks(item.masks) if kind == "captioning" else None
    return build_sample(
        kind,
        description=item.description,
        vocab=vocab,
        video_ref=item.path,
        trajectory=trajectory,
        key_frames=item.key_frames,
    )


def sample_forward(model: VideoSegmenter, item: LoadedSample, kind: str, stage: int,
                   weights: LossWeights):
    """Forward one sample under its task kind; returns (loss Tensor, LossBreakdown)."""
    features = model.frame_features(item.frames)
    gts = [m.astype(np.float64) for m in item.masks]

    if kind == "tracking":
        if stage == 1:
            raise InputError("tracking samples are a video-stage task")
        present = [t for t, p in enumerate(item.presence) if p]
        t0 = present[0]
        if t0 == len(gts) - 1:
            raise InputError(f"{item.path}: tracking needs frames after the seed frame")
        preds = model.track_from_mask(features, item.masks[t0], t0)
        later = range(t0 + 1, len(gts))
        return stage2_loss(
            None,
            None,
            [preds[t].presence for t in later],
            [item.presence[t] for t in later],
            [preds[t].logits for t in later],
            [gts[t] for t in later],
            weights,
        )

    sample = make_sample(item, kind, model.vocab)
    reasoned = model.reason(sample, features)
    trajectory = model.segment(reasoned.traj_token, features, sample.key_frames)
    logits = [p.logits for p in trajectory.predictions]
    if stage == 1:
        return stage1_loss(reasoned.supervised_logits, reasoned.labels, logits, gts, weights)
    return stage2_loss(
        reasoned.supervised_logits,
        reasoned.labels,
        [p.presence for p in trajectory.predictions],
        list(item.presence),
        logits,
        gts,
        weights,
    )


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: VideoSegmenter, config: RunConfig) -> None:
    blocks = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for text in (serialize_config(config), "\n".join(model.vocab.tokens) + "\n"):
            raw = text.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(blocks)))
        for name, param in blocks:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", param.data.ndim))
            fh.write(struct.pack(f"<{param.data.ndim}I", *param.data.shape))
            fh.write(np.ascontiguousarray(param.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[VideoSegmenter, RunConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    pos = 4

    def take(fmt):
        nonlocal pos
        try:
            out = struct.unpack_from(fmt, blob, pos)
        except struct.error:
            raise FormatError(f"{path}: truncated checkpoint") from None
        pos += struct.calcsize(fmt)
        return out

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        raw = blob[pos : pos + n]
        pos += n
        return raw

    def take_text():
        (n,) = take("<I")
        return take_bytes(n).decode("utf-8")

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = parse_config(take_text())
    vocab = Vocabulary(take_text().splitlines())
    model = build_model(config, vocab, np.random.default_rng(0))
    expected = dict(model.named_parameters())
    (n_blocks,) = take("<I")
    seen = set()
    for _ in range(n_blocks):
        (name_len,) = take("<H")
        name = take_bytes(name_len).decode("utf-8")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take_bytes(4 * count), dtype="<f4", count=count)
        if name not in expected:
            raise FormatError(f"{path}: unexpected weight block {name!r}")
        param = expected[name]
        if tuple(shape) != param.data.shape:
            raise FormatError(f"{path}: {name} has shape {shape}, expected {param.data.shape}")
        param.data[...] = data.reshape(shape).astype(np.float64)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise FormatError(f"{path}: missing weight blocks {sorted(missing)}")
    return model, config


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    curve: Path
    final_loss: float


def _cache_split(root, split: str) -> list[LoadedSample]:
    """Load a split once, frames kept as uint8 to bound memory."""
    out = []
    for path in list_samples(root, split):
        item = read_sample(path)
        out.append(replace(item, frames=np.round(item.frames * 255.0).astype(np.uint8)))
    return out


def _as_float(item: LoadedSample) -> LoadedSample:
    return replace(item, frames=item.frames.astype(np.float64) / 255.0)


def train(
    data_root,
    config: RunConfig,
    stage: int,
    out_dir,
    resume=None,
    log=None,
) -> TrainResult:
    if stage not in (1, 2):
        raise InputError(f"stage must be 1 or 2, got {stage}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = default_vocabulary()
    if resume is not None:
        model, resumed_config = load_checkpoint(resume)
        if serialize_config(resumed_config) != serialize_config(config):
            raise ConfigError(f"{resume}: checkpoint config does not match the requested run")
    else:
        model = build_model(config, vocab, np.random.default_rng(np.random.SeedSequence(
            entropy=(config.seed, 40))))

    split = "stage1" if stage == 1 else "train"
    items = _cache_split(data_root, split)
    if stage == 1:
        fractions = (0.0, 0.5, 0.5) if config.use_bi_align else (0.0, 1.0, 0.0)
    else:
        fractions = config.effective_mix()
    steps = config.stage1_steps if stage == 1 else config.stage2_steps
    weights = loss_weights(config)
    optimizer = AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 41, stage)))

    curve_rows = ["step,total,text,cls,bce,dice"]
    queue: list[tuple[int, str]] = []
    final_loss = float("nan")
    for step in range(1, steps + 1):
        batch: list[tuple[int, str]] = []
        while len(batch) < config.batch_size:
            if not queue:
                kinds = assign_kinds(len(items), fractions, rng)
                order = rng.permutation(len(items))
                queue = [(int(j), kinds[j]) for j in order]
            batch.append(queue.pop())
        outcomes = []
        for j, kind in batch:
            item = _as_float(items[j])
            if stage == 2 and kind != "tracking":
                # Resample how many frames are key frames, up to the configured
                # budget. Key frames are a sparse subset by design: training
                # sweeps 1..key_frames so sparse schedules stay in distribution
                # and the memory path sees most frames, while denser schedules
                # remain an extrapolation.
                total_frames = item.frames.shape[0]
                top = min(config.key_frames, total_frames)
                count = int(rng.integers(1, top + 1))
                item = replace(item, key_frames=tuple(uniform_indices(total_frames, count)))
            outcomes.append(sample_forward(model, item, kind, stage, weights))
        total = sum(o[0] for o in outcomes) * (1.0 / len(outcomes))
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite training loss at step {step}")
        optimizer.zero_grad()
        total.backward()
        optimizer.lr = config.learning_rate * (
            1.0 - (1.0 - config.lr_decay) * (step - 1) / max(steps - 1, 1)
        )
        optimizer.step()
        final_loss = float(total.data)
        curve_rows.append(
            f"{step},{final_loss:.6f},"
            + ",".join(
                f"{np.mean([getattr(o[1], k) for o in outcomes]):.6f}"
                for k in ("text", "cls", "bce", "dice")
            )
        )
        if log is not None and (step % 50 == 0 or step == steps):
            log(f"stage {stage} step {step}/{steps} loss {final_loss:.4f}")

    curve_path = out_dir / f"curve_stage{stage}.csv"
    curve_path.write_text("\n".join(curve_rows) + "\n", encoding="utf-8")
    ckpt_path = out_dir / f"stage{stage}.ckpt"
    save_checkpoint(ckpt_path, model, config)
    return TrainResult(ckpt_path, curve_path, final_loss)


# -- inference / evaluation glue ------------------------------------------------------


def predict_sample(model: VideoSegmenter, item: LoadedSample, n_key_frames: int):
    """Grounding-style inference: returns (response text, binary masks, trajectory)."""
    instruction = model.vocab.encode(grounding_instruction(item.description))
    generated, trajectory = model.infer(item.frames, instruction, n_key_frames)
    return model.vocab.decode(generated), trajectory.binary(), trajectory


def evaluate_split(model: VideoSegmenter, root, split: str, n_key_frames: int,
                   threads: int = 1) -> MetricReport:
    paths = list_samples(root, split)

    def one(path):
        item = read_sample(path)
        with no_grad():
            _, binary, _ = predict_sample(model, item, n_key_frames)
        return (path.name, binary, item.masks)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            items = list(pool.map(one, paths))
    else:
        items = [one(p) for p in paths]
    return build_report(items)
