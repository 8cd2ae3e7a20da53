"""Closed vocabulary, whitespace tokenization, and instruction templates.

Tokenization is word-level over a fixed ~60-word vocabulary: split on
whitespace, look every word up, fail loudly on anything else. Punctuation
is part of the word it touches ("Sure,", "video?"), except the sentence-
final "." of a response, which follows the trajectory token as its own
token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InputError, TokenizationError

RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<TRJ>", "<PLH>")

COLORS = (
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange",
    "purple", "teal", "pink", "white", "gray", "brown", "olive",
)
SHAPES = ("circle", "square", "triangle")
DIRECTIONS = ("left", "right", "up", "down")
MOTION_WORDS = ("moving", "weaving", "staying", "still")
TEMPLATE_WORDS = (
    "Can", "you", "segment", "describe", "the", "in", "this", "video?", "Sure,", ".",
)
FILLER_WORDS = (
    "small", "large", "bright", "dark", "fast", "slow", "object",
    "shape", "drifting", "gliding", "one", "a",
)


class Vocabulary:
    """Bijective token string <-> id table with a fixed reserved prefix."""

    def __init__(self, tokens):
        tokens = tuple(tokens)
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise InputError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def trj_id(self) -> int:
        return 3

    @property
    def plh_id(self) -> int:
        return 4

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        return cls(RESERVED_TOKENS + tuple(words))

    def encode(self, text: str) -> list[int]:
        out = []
        for word in text.split():
            if word not in self.ids:
                raise TokenizationError(f"out-of-vocabulary word {word!r}")
            out.append(self.ids[word])
        return out

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise TokenizationError(f"unknown token id {i}")
            words.append(self.tokens[i])
        return " ".join(words)

    # -- file format: one token per line, line index == id ----------------------

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = f.read().splitlines()
        return cls(tokens)


def default_vocabulary() -> Vocabulary:
    return Vocabulary.from_words(
        TEMPLATE_WORDS + COLORS + SHAPES + MOTION_WORDS + DIRECTIONS + FILLER_WORDS
    )


def grounding_instruction(description: str) -> str:
    return f"Can you segment the {description} in this video?"


def captioning_instruction() -> str:
    return "Can you describe <PLH> in this video?"


def response_text(description: str) -> str:
    return f"Sure, {description} <TRJ> ."


@dataclass(frozen=True)
class Sample:
    """One training/inference item; tracking has empty token streams."""

    kind: str
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    video_ref: str = ""
    trajectory: object = None
    key_frames: tuple[int, ...] = field(default_factory=tuple)


def build_sample(
    kind: str,
    description: str = "",
    vocab: Vocabulary | None = None,
    video_ref: str = "",
    trajectory=None,
    key_frames=(),
) -> Sample:
    """Assemble a Sample from the templates for the given kind."""
    key_frames = tuple(int(k) for k in key_frames)
    if kind == "tracking":
        return Sample("tracking", (), (), video_ref, None, key_frames)
    if vocab is None:
        raise InputError(f"{kind} samples need a vocabulary")
    if kind == "grounding":
        input_ids = vocab.encode(grounding_instruction(description))
        target_ids = vocab.encode(response_text(description))
        return Sample("grounding", tuple(input_ids), tuple(target_ids), video_ref, None, key_frames)
    if kind == "captioning":
        if trajectory is None:
            raise InputError("captioning samples need an object trajectory")
        input_ids = vocab.encode(captioning_instruction())
        target_ids = vocab.encode(response_text(description))
        return Sample(
            "captioning", tuple(input_ids), tuple(target_ids), video_ref, trajectory, key_frames
        )
    raise InputError(f"unknown sample kind {kind!r}")
