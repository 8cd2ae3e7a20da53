"""Object trajectories and their encoding into a single feature vector.

A trajectory is the per-frame normalized box of one object plus presence
flags. The encoder ROI-pools each present frame's features, mean-pools
every ROI to a channel vector, packs those vectors into a fixed number of
slots (uniform subsampling when there are too many present frames, zero
padding when too few), concatenates, and applies one linear map. The
result is the object's trajectory feature; a second small projection
splices it into a captioning instruction at the placeholder token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, concat
from .errors import InputError, ShapeError
from .language import Vocabulary
from .ops import roi_align


def uniform_indices(total: int, count: int) -> list[int]:
    """`count` evenly spread indices into range(total); floor convention."""
    if total <= 0 or count <= 0:
        raise InputError(f"need positive total/count, got {total}/{count}")
    count = min(count, total)
    return [i * total // count for i in range(count)]


@dataclass(frozen=True)
class ObjectTrajectory:
    """Normalized boxes for the frames where the object is present.

    boxes: frame index -> (x0, y0, x1, y1) in [0, 1]; keys must be exactly
    the frames whose presence flag is true, and at least one frame must be
    present.
    """

    boxes: dict[int, tuple[float, float, float, float]]
    presence: tuple[bool, ...]

    def __post_init__(self):
        present = {t for t, p in enumerate(self.presence) if p}
        if not present:
            raise InputError("trajectory has no present frames")
        if set(self.boxes) != present:
            raise InputError(
                f"boxes exist for frames {sorted(self.boxes)} but presence marks {sorted(present)}"
            )
        for t, (x0, y0, x1, y1) in self.boxes.items():
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise InputError(f"frame {t}: malformed box {(x0, y0, x1, y1)}")

    @property
    def n_present(self) -> int:
        return len(self.boxes)


def boxes_from_masks(masks: np.ndarray) -> ObjectTrajectory:
    """Tight normalized bounding boxes from a (T, H, W) binary mask stack."""
    masks = np.asarray(masks).astype(bool)
    if masks.ndim != 3:
        raise ShapeError(f"expected (T, H, W) masks, got shape {masks.shape}")
    t_total, h, w = masks.shape
    boxes = {}
    presence = []
    for t in range(t_total):
        ys, xs = np.nonzero(masks[t])
        presence.append(ys.size > 0)
        if ys.size:
            boxes[t] = (xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)
    return ObjectTrajectory(boxes, tuple(presence))


class TrajectoryEncoder(Module):
    """ROI-pool present frames into slots and project to one C-vector."""

    def __init__(
        self,
        channels: int,
        roi_size: int,
        n_slots: int,
        rng: np.random.Generator,
        mode: str = "pooled",
    ):
        if mode not in ("pooled", "flatten"):
            raise InputError(f"unknown trajectory encoder mode {mode!r}")
        self.channels = channels
        self.roi_size = roi_size
        self.n_slots = n_slots
        self.mode = mode
        slot_dim = channels if mode == "pooled" else roi_size * roi_size * channels
        self.slot_dim = slot_dim
        self.proj = Linear(n_slots * slot_dim, channels, rng)

    def __call__(self, frame_features, traj: ObjectTrajectory) -> Tensor:
        """frame_features: sequence of (H', W', C) Tensors, one per frame."""
        if len(frame_features) != len(traj.presence):
            raise ShapeError(
                f"{len(frame_features)} feature maps for {len(traj.presence)} frames"
            )
        present = sorted(traj.boxes)
        picked = [present[i] for i in uniform_indices(len(present), self.n_slots)]
        slots = []
        for t in picked:
            roi = roi_align(frame_features[t], traj.boxes[t], self.roi_size)
            if self.mode == "pooled":
                slots.append(roi.reshape(self.roi_size * self.roi_size, self.channels).mean(axis=0))
            else:
                slots.append(roi.reshape(self.slot_dim))
        while len(slots) < self.n_slots:
            slots.append(Tensor(np.zeros(self.slot_dim)))
        return self.proj(concat(slots, axis=0))


def insert_placeholder(
    input_ids,
    vocab: Vocabulary,
    token_embeddings: Tensor,
    traj_feature: Tensor,
    projector: Linear,
) -> Tensor:
    """Embed instruction ids, replacing the single placeholder slot with
    the projected trajectory feature. Returns an (L, C) embedding matrix."""
    ids = list(input_ids)
    hits = [i for i, tok in enumerate(ids) if tok == vocab.plh_id]
    if len(hits) != 1:
        raise InputError(f"expected exactly one placeholder token, found {len(hits)}")
    pos = hits[0]
    emb = token_embeddings[np.asarray(ids, dtype=np.int64)]
    slot = projector(traj_feature).reshape(1, token_embeddings.shape[1])
    pieces = []
    if pos > 0:
        pieces.append(emb[:pos])
    pieces.append(slot)
    if pos + 1 < len(ids):
        pieces.append(emb[pos + 1 :])
    return concat(pieces, axis=0)
