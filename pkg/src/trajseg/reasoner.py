"""A small decoder-only transformer over [visual tokens ; text tokens].

Stands in for the full multimodal language model: causal self-attention,
pre-norm blocks, tanh MLPs, learned positions. Text supervision is
teacher-forced next-token cross-entropy; the hidden state at the
trajectory-token position, passed through a learned projection, is the
trajectory-level target token handed to the downstream mask pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, concat, layer_norm, no_grad
from .errors import CapacityError, InputError
from .language import Vocabulary
from .ops import scaled_dot_attention


@dataclass
class ReasonerConfig:
    vocab_size: int
    width: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 128
    head_init: str = "normal"  # "zero" makes all logits start at 0

    def __post_init__(self):
        if self.width % self.n_heads:
            raise InputError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.head_init not in ("normal", "zero"):
            raise InputError(f"unknown head_init {self.head_init!r}")


class Block(Module):
    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.ln1_gain = Tensor(np.ones(width), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(width), requires_grad=True)
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        self.ln2_gain = Tensor(np.ones(width), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(width), requires_grad=True)
        self.mlp_in = Linear(width, 4 * width, rng)
        self.mlp_out = Linear(4 * width, width, rng)

    def __call__(self, x: Tensor, causal_bias: np.ndarray) -> Tensor:
        length, width = x.shape
        head_dim = width // self.n_heads
        h = layer_norm(x, self.ln1_gain, self.ln1_bias)

        def split(t: Tensor) -> Tensor:  # (L, C) -> (heads, L, head_dim)
            return t.reshape(length, self.n_heads, head_dim).transpose(1, 0, 2)

        attended = scaled_dot_attention(
            split(self.wq(h)), split(self.wk(h)), split(self.wv(h)), bias=causal_bias
        )
        merged = attended.transpose(1, 0, 2).reshape(length, width)
        x = x + self.wo(merged)
        h2 = layer_norm(x, self.ln2_gain, self.ln2_bias)
        return x + self.mlp_out(self.mlp_in(h2).tanh())


class Reasoner(Module):
    def __init__(self, config: ReasonerConfig, rng: np.random.Generator):
        self.config = config
        c = config.width
        std = 1.0 / np.sqrt(c)
        self.token_embeddings = Tensor(
            rng.normal(0.0, std, size=(config.vocab_size, c)), requires_grad=True
        )
        self.position_embeddings = Tensor(
            rng.normal(0.0, std, size=(config.max_len, c)), requires_grad=True
        )
        self.visual_proj = Linear(c, c, rng)
        self.blocks = [Block(c, config.n_heads, rng) for _ in range(config.n_layers)]
        self.final_gain = Tensor(np.ones(c), requires_grad=True)
        self.final_bias = Tensor(np.zeros(c), requires_grad=True)
        self.head = Linear(c, config.vocab_size, rng)
        if config.head_init == "zero":
            self.head.weight.data[:] = 0.0
        self.trj_proj = Linear(c, c, rng)

    def forward(self, visual_tokens: Tensor | None, text_embeddings: Tensor):
        """Run the causal stack; returns (logits (L, V), hidden (L, C)).

        visual_tokens: optional (K, C) matrix prepended to the text stream.
        """
        parts = []
        if visual_tokens is not None:
            parts.append(self.visual_proj(visual_tokens))
        parts.append(text_embeddings)
        x = concat(parts, axis=0) if len(parts) > 1 else parts[0]
        length = x.shape[0]
        if length > self.config.max_len:
            raise CapacityError(f"sequence length {length} exceeds {self.config.max_len}")
        x = x + self.position_embeddings[:length]
        causal_bias = np.triu(np.full((length, length), -1e9), k=1)
        for block in self.blocks:
            x = block(x, causal_bias)
        hidden = layer_norm(x, self.final_gain, self.final_bias)
        return self.head(hidden), hidden

    def embed_tokens(self, ids) -> Tensor:
        return self.token_embeddings[np.asarray(list(ids), dtype=np.int64)]

    def generate(self, visual_tokens: Tensor | None, input_ids, vocab: Vocabulary, max_new: int = 24):
        """Greedy decoding from [bos] + instruction; returns generated ids
        (without the terminating eos) and the final hidden matrix."""
        ids = [vocab.bos_id] + list(input_ids)
        generated: list[int] = []
        with no_grad():
            while len(generated) < max_new:
                logits, hidden = self.forward(visual_tokens, self.embed_tokens(ids + generated))
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == vocab.eos_id:
                    break
                generated.append(nxt)
            _, hidden = self.forward(visual_tokens, self.embed_tokens(ids + generated))
        return generated, hidden


def extract_trj_token(
    hidden: Tensor, target_ids, trj_id: int, target_offset: int, projector: Linear
) -> Tensor:
    """Hidden state at the trajectory-token position, projected to width C.

    `target_offset` is the stream position of target_ids[0] within the
    sequence that produced `hidden`.
    """
    target_ids = list(target_ids)
    hits = [i for i, tok in enumerate(target_ids) if tok == trj_id]
    if len(hits) != 1:
        raise InputError(f"expected exactly one trajectory token, found {len(hits)}")
    return projector(hidden[target_offset + hits[0]])
