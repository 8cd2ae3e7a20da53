"""Run configuration: one flat key=value file drives data, model, training.

Format: UTF-8 lines of ``key=value``; blank lines and anything after a
``#`` are ignored. Every key must be a known field; values are coerced by
the field's declared type (bools are ``true``/``false``). Serialization
uses ``repr`` for floats so that parse(serialize(c)) == c exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError, InputError


@dataclass
class RunConfig:
    # model geometry
    channels: int = 64
    attn_dim: int = 64
    patch: int = 8
    frame_size: int = 64
    roi_size: int = 4
    n_slots: int = 8
    memory_capacity: int = 6
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 128
    presence_threshold: float = 0.5
    use_fci: bool = True
    use_positions: bool = True
    # data generation
    frames_per_video: int = 10
    key_frames: int = 5
    n_train: int = 512
    n_val: int = 64
    n_stage1: int = 256
    min_size: int = 8
    max_size: int = 16
    max_distractors: int = 2
    absence_fraction: float = 0.35
    pseudo_video_fraction: float = 0.0
    # training
    stage1_steps: int = 300
    stage2_steps: int = 1200
    batch_size: int = 8
    learning_rate: float = 3e-4
    lr_decay: float = 1.0  # final-step lr as a fraction of learning_rate, linear ramp
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_text: float = 1.0
    lambda_mask: float = 1.0
    lambda_cls: float = 0.5
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    mix_tracking: float = 0.2
    mix_grounding: float = 0.4
    mix_captioning: float = 0.4
    use_bi_align: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.frame_size % self.patch:
            raise InputError(f"frame_size {self.frame_size} not divisible by patch {self.patch}")
        if self.min_size > self.max_size:
            raise InputError(f"min_size {self.min_size} exceeds max_size {self.max_size}")
        mix = (self.mix_tracking, self.mix_grounding, self.mix_captioning)
        if any(m < 0 for m in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise InputError(f"sample mix {mix} must be non-negative and sum to 1")
        for name in ("batch_size", "frames_per_video", "key_frames", "n_train", "n_val"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be at least 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InputError(f"lr_decay {self.lr_decay} must be in (0, 1]")

    def effective_mix(self) -> tuple[float, float, float]:
        """(tracking, grounding, captioning) fractions actually trained on.

        Without bidirectional alignment there is no captioning task; its
        share folds into grounding.
        """
        if self.use_bi_align:
            return (self.mix_tracking, self.mix_grounding, self.mix_captioning)
        return (self.mix_tracking, self.mix_grounding + self.mix_captioning, 0.0)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(raw: str, field: dataclasses.Field):
    if field.type in ("bool", bool):
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{field.name}: expected true/false, got {raw!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{field.name}: cannot parse {raw!r} as {field.type}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, _FIELDS[key])
    try:
        return RunConfig(**values)
    except InputError as exc:
        raise ConfigError(str(exc)) from None


def serialize_config(config: RunConfig) -> str:
    lines = [
        f"{f.name}={_format_value(getattr(config, f.name))}"
        for f in dataclasses.fields(RunConfig)
    ]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, config: RunConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_config(config))
