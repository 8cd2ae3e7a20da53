"""Per-frame adaptation of the trajectory token.

One residual cross-attention read per key frame: the trajectory token
queries the frame's patch features and absorbs what it finds, so each key
frame gets its own frame-level token. The value/output branch is bias
free on purpose: with the value weights at zero the op is exactly the
identity on the trajectory token.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Linear, Module, Tensor
from .errors import ShapeError
from .ops import scaled_dot_attention


def integrate_token(traj_token: Tensor, frame_features: Tensor, w_q, w_k, w_v, out_map) -> Tensor:
    """traj_token (C,) + frame_features (N, C) -> adapted token (C,)."""
    channels = traj_token.shape[0]
    if frame_features.ndim != 2 or frame_features.shape[1] != channels:
        raise ShapeError(
            f"frame features {frame_features.shape} incompatible with token width {channels}"
        )
    if not (w_q.shape == w_k.shape == w_v.shape):
        raise ShapeError(
            f"attention weights disagree: {w_q.shape} / {w_k.shape} / {w_v.shape}"
        )
    if w_q.shape[0] != channels:
        raise ShapeError(f"weights expect width {w_q.shape[0]}, token has {channels}")
    q = traj_token.reshape(1, channels) @ w_q
    read = scaled_dot_attention(q, frame_features @ w_k, frame_features @ w_v)
    return traj_token + out_map(read).reshape(channels)


class FrameIntegrator(Module):
    """Expand one trajectory token into per-key-frame tokens."""

    def __init__(self, channels: int, attn_dim: int, rng: np.random.Generator):
        std = 1.0 / math.sqrt(channels)
        self.w_q = Tensor(rng.normal(0.0, std, size=(channels, attn_dim)), requires_grad=True)
        self.w_k = Tensor(rng.normal(0.0, std, size=(channels, attn_dim)), requires_grad=True)
        self.w_v = Tensor(rng.normal(0.0, std, size=(channels, attn_dim)), requires_grad=True)
        self.out_map = Linear(attn_dim, channels, rng, bias=False)

    def __call__(self, traj_token: Tensor, key_frame_features) -> list[Tensor]:
        """key_frame_features: sequence of (N, C) matrices, one per key frame."""
        return [
            integrate_token(traj_token, feats, self.w_q, self.w_k, self.w_v, self.out_map)
            for feats in key_frame_features
        ]
