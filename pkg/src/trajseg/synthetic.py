"""Procedural scenes: colored shapes drifting over a dark canvas.

Every scene has one target object plus a few distractors; the target is
drawn last so its mask is exactly its own rasterization. The target's
(color, shape, motion phrase) triple is unique in the scene, which makes
the generated description unambiguous. Rasterization is hard (no
anti-aliasing) at pixel centers, so masks are reproducible bit for bit.

On-disk layout, one directory per sample::

    frame_000.ppm ...   binary P6, 8-bit
    mask_000.rle ...    run-length masks, one per frame
    manifest.txt        kind / description / presence / key_frames
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import FormatError, GenerationError, InputError, ShapeError
from .language import COLORS, DIRECTIONS, SHAPES
from .trajectory import uniform_indices

BACKGROUND = (0.08, 0.09, 0.11)

COLOR_RGB = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.92, 0.88, 0.10),
    "cyan": (0.10, 0.85, 0.85),
    "magenta": (0.88, 0.12, 0.85),
    "orange": (0.95, 0.55, 0.08),
    "purple": (0.55, 0.15, 0.80),
    "teal": (0.10, 0.55, 0.50),
    "pink": (0.98, 0.60, 0.75),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.55, 0.55, 0.55),
    "brown": (0.55, 0.32, 0.12),
    "olive": (0.50, 0.50, 0.12),
}

_DIR_VECTORS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}


@dataclass(frozen=True)
class MovingObject:
    shape: str
    color: str
    half_size: float
    start: tuple[float, float]  # center (cx, cy) in pixels at t = 0
    velocity: tuple[float, float] = (0.0, 0.0)  # pixels per frame
    motion: str = "still"  # "still" | "linear" | "sine"
    direction: str = ""
    wobble_amp: float = 0.0
    wobble_period: float = 8.0
    wobble_phase: float = 0.0
    entry: int = 0
    exit: int = 1 << 30  # present while entry <= t < exit

    def center_at(self, t: int) -> tuple[float, float]:
        cx = self.start[0] + self.velocity[0] * t
        cy = self.start[1] + self.velocity[1] * t
        if self.motion == "sine":
            # wobble perpendicular to the drift direction
            dx, dy = _DIR_VECTORS[self.direction]
            off = self.wobble_amp * math.sin(2 * math.pi * t / self.wobble_period + self.wobble_phase)
            cx += -dy * off
            cy += dx * off
        return cx, cy

    def motion_phrase(self) -> str:
        if self.motion == "still":
            return "staying still"
        verb = "moving" if self.motion == "linear" else "weaving"
        return f"{verb} {self.direction}"

    def description(self) -> str:
        return f"{self.color} {self.shape} {self.motion_phrase()}"

    def identity(self) -> tuple[str, str, str]:
        return (self.color, self.shape, self.motion_phrase())


@dataclass(frozen=True)
class SceneSpec:
    hw: tuple[int, int]
    frames: int
    target: MovingObject
    distractors: tuple[MovingObject, ...]


@dataclass
class RenderedSample:
    kind: str  # "video" or "still"
    frames: np.ndarray  # (T, H, W, 3) float64 in [0, 1]
    masks: np.ndarray  # (T, H, W) bool, target only
    description: str
    presence: tuple[int, ...]
    key_frames: tuple[int, ...]
    spec: SceneSpec | None = None


def rasterize(shape: str, center: tuple[float, float], half_size: float, hw) -> np.ndarray:
    h, w = hw
    cx, cy = center
    px = np.arange(w) + 0.5 - cx
    py = (np.arange(h) + 0.5 - cy)[:, None]
    s = half_size
    if shape == "circle":
        return px * px + py * py <= s * s
    if shape == "square":
        return np.maximum(np.abs(px), np.abs(py)) <= s
    if shape == "triangle":  # isoceles, apex up
        inside_y = (py >= -s) & (py <= s)
        return inside_y & (np.abs(px) <= (py + s) / 2)
    raise InputError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec, key_frame_count: int) -> RenderedSample:
    h, w = spec.hw
    frames = np.empty((spec.frames, h, w, 3))
    frames[:] = BACKGROUND
    masks = np.zeros((spec.frames, h, w), dtype=bool)
    for t in range(spec.frames):
        for obj in spec.distractors + (spec.target,):
            if not obj.entry <= t < obj.exit:
                continue
            hit = rasterize(obj.shape, obj.center_at(t), obj.half_size, spec.hw)
            frames[t][hit] = COLOR_RGB[obj.color]
            if obj is spec.target:
                masks[t] = hit
    presence = tuple(int(m.any()) for m in masks)
    return RenderedSample(
        kind="video" if spec.frames > 1 else "still",
        frames=frames,
        masks=masks,
        description=spec.target.description(),
        presence=presence,
        key_frames=tuple(uniform_indices(spec.frames, min(key_frame_count, spec.frames))),
        spec=spec,
    )


# -- sampling ------------------------------------------------------------------


def _feasible_start(rng, extent, margin, deltas) -> float:
    """Start coordinate keeping center+delta inside [margin, extent-margin]."""
    lo = margin - min(deltas)
    hi = extent - margin - max(deltas)
    if hi < lo:
        raise GenerationError("no feasible start for requested motion")
    return rng.uniform(lo, hi)


def _sample_object(rng, hw, frames, size_range, window, allow_motion) -> MovingObject:
    h, w = hw
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    half = float(rng.uniform(*size_range))
    entry, exit_ = window
    if allow_motion:
        u = rng.random()
        motion = "still" if u < 0.2 else ("linear" if u < 0.6 else "sine")
    else:
        motion = "still"
    direction = DIRECTIONS[rng.integers(len(DIRECTIONS))] if motion != "still" else ""
    speed = float(rng.uniform(0.8, 2.0)) if motion != "still" else 0.0
    vec = _DIR_VECTORS.get(direction, (0.0, 0.0))
    velocity = (vec[0] * speed, vec[1] * speed)
    amp = float(rng.uniform(2.0, 5.0)) if motion == "sine" else 0.0
    period = float(rng.uniform(6.0, 12.0)) if motion == "sine" else 8.0
    phase = float(rng.uniform(0.0, 2 * math.pi)) if motion == "sine" else 0.0

    # keep the center (plus wobble) in frame for every present timestep, so
    # presence is exactly the requested window
    steps = range(entry, min(exit_, frames))
    margin = 2.0 + amp
    dxs = [velocity[0] * t for t in steps]
    dys = [velocity[1] * t for t in steps]
    cx = _feasible_start(rng, w, margin, dxs)
    cy = _feasible_start(rng, h, margin, dys)
    return MovingObject(
        shape=shape,
        color=color,
        half_size=half,
        start=(cx, cy),
        velocity=velocity,
        motion=motion,
        direction=direction,
        wobble_amp=amp,
        wobble_period=period,
        wobble_phase=phase,
        entry=entry,
        exit=exit_,
    )


def _sample_window(rng, frames, absence_fraction) -> tuple[int, int]:
    """Presence window [entry, exit) for the target, at least 3 frames."""
    if frames < 4 or rng.random() >= absence_fraction:
        return 0, frames
    if rng.random() < 0.5:
        return int(rng.integers(1, frames - 2)), frames
    return 0, int(rng.integers(3, frames))


def generate_scene(
    rng: np.random.Generator,
    *,
    hw=(64, 64),
    frames=10,
    key_frames=5,
    size_range=(8.0, 16.0),
    max_distractors=2,
    absence_fraction=0.35,
    allow_motion=True,
) -> RenderedSample:
    for _ in range(20):
        try:
            window = _sample_window(rng, frames, absence_fraction)
            target = _sample_object(rng, hw, frames, size_range, window, allow_motion)
            distractors = []
            n_distractors = int(rng.integers(1, max_distractors + 1)) if max_distractors else 0
            for _ in range(n_distractors):
                for _attempt in range(20):
                    cand = _sample_object(rng, hw, frames, size_range, (0, frames), allow_motion)
                    if cand.identity() != target.identity():
                        distractors.append(cand)
                        break
                else:
                    raise GenerationError("could not draw a distractor distinct from the target")
        except GenerationError:
            continue
        sample = render_scene(SceneSpec(hw, frames, target, tuple(distractors)), key_frames)
        if sum(sample.presence) >= min(3, frames):
            return sample
    raise GenerationError("could not produce a usable scene in 20 attempts")


def image_to_pseudo_video(
    still: RenderedSample, frames: int, rng, key_frames: int = 5, max_step: int = 2
) -> RenderedSample:
    """Animate a one-frame sample by cumulative integer-pixel shifts."""
    if still.frames.shape[0] != 1:
        raise InputError("pseudo-video source must have exactly one frame")
    h, w = still.frames.shape[1:3]
    out_frames = np.empty((frames, h, w, 3))
    out_masks = np.zeros((frames, h, w), dtype=bool)
    dy = dx = 0
    for t in range(frames):
        out_frames[t] = _shift(still.frames[0], dy, dx, BACKGROUND)
        out_masks[t] = _shift(still.masks[0], dy, dx, False)
        dy += int(rng.integers(-max_step, max_step + 1))
        dx += int(rng.integers(-max_step, max_step + 1))
    presence = tuple(int(m.any()) for m in out_masks)
    return replace(
        still,
        kind="video",
        frames=out_frames,
        masks=out_masks,
        presence=presence,
        key_frames=tuple(uniform_indices(frames, min(key_frames, frames))),
    )


def _shift(plane: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    out = np.empty_like(plane)
    out[:] = fill
    h, w = plane.shape[:2]
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    src_ys = slice(max(-dy, 0), min(h - dy, h))
    src_xs = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = plane[src_ys, src_xs]
    return out


# -- PPM image files --------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    match = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not match:
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise FormatError(f"{path}: unsupported max value {maxval}")
    data = blob[match.end() :]
    if len(data) != h * w * 3:
        raise FormatError(f"{path}: expected {h * w * 3} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


# -- sample directories ------------------------------------------------------------


@dataclass
class LoadedSample:
    kind: str
    frames: np.ndarray  # (T, H, W, 3) float64 in [0, 1]
    masks: np.ndarray  # (T, H, W) bool
    description: str
    presence: tuple[int, ...]
    key_frames: tuple[int, ...]
    path: str = ""


def write_sample(dirpath, sample: RenderedSample) -> None:
    from . import rle

    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for t in range(sample.frames.shape[0]):
        write_ppm(dirpath / f"frame_{t:03d}.ppm", quantize(sample.frames[t]))
        rle.write_mask(dirpath / f"mask_{t:03d}.rle", sample.masks[t])
    manifest = (
        f"kind={sample.kind}\n"
        f"description={sample.description}\n"
        f"presence={''.join(str(p) for p in sample.presence)}\n"
        f"key_frames={','.join(str(k) for k in sample.key_frames)}\n"
    )
    (dirpath / "manifest.txt").write_text(manifest, encoding="utf-8")


def read_sample(dirpath) -> LoadedSample:
    from . import rle

    dirpath = Path(dirpath)
    manifest = {}
    for line in (dirpath / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{dirpath}: bad manifest line {line!r}")
        key, value = line.split("=", 1)
        manifest[key] = value
    expected = {"kind", "description", "presence", "key_frames"}
    if set(manifest) != expected:
        raise FormatError(f"{dirpath}: manifest keys {sorted(manifest)} != {sorted(expected)}")
    frame_paths = sorted(dirpath.glob("frame_*.ppm"))
    if not frame_paths:
        raise FormatError(f"{dirpath}: no frames")
    frames = np.stack([read_ppm(p) for p in frame_paths]).astype(np.float64) / 255.0
    masks = np.stack([rle.read_mask(dirpath / f"mask_{t:03d}.rle") for t in range(len(frame_paths))])
    presence = tuple(int(c) for c in manifest["presence"])
    if len(presence) != len(frame_paths) or any(p not in (0, 1) for p in presence):
        raise FormatError(f"{dirpath}: bad presence string {manifest['presence']!r}")
    key_frames = tuple(int(k) for k in manifest["key_frames"].split(",") if k != "")
    return LoadedSample(
        kind=manifest["kind"],
        frames=frames,
        masks=masks,
        description=manifest["description"],
        presence=presence,
        key_frames=key_frames,
        path=str(dirpath),
    )


# -- dataset builder --------------------------------------------------------------------


def _build_one(root: Path, split: str, index: int, config: RunConfig, split_id: int) -> None:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, split_id, index)))
    hw = (config.frame_size, config.frame_size)
    common = dict(
        hw=hw,
        key_frames=config.key_frames,
        size_range=(float(config.min_size), float(config.max_size)),
        max_distractors=config.max_distractors,
    )
    if split == "stage1":
        still = generate_scene(
            rng, frames=1, absence_fraction=0.0, allow_motion=False, **common
        )
        n_pseudo = round(config.pseudo_video_fraction * config.n_stage1)
        if index < n_pseudo:
            sample = image_to_pseudo_video(
                still, config.frames_per_video, rng, key_frames=config.key_frames
            )
        else:
            sample = still
    else:
        sample = generate_scene(
            rng,
            frames=config.frames_per_video,
            absence_fraction=config.absence_fraction,
            **common,
        )
    write_sample(root / split / f"sample_{index:05d}", sample)


def generate_dataset(root, config: RunConfig, threads: int = 1) -> dict[str, int]:
    """Write train/, val/ and stage1/ under root. Sample bytes depend only
    on (config.seed, split, index), never on thread count."""
    root = Path(root)
    plan = [("train", 0, config.n_train), ("val", 1, config.n_val), ("stage1", 2, config.n_stage1)]
    jobs = [
        (split, split_id, i) for split, split_id, count in plan for i in range(count)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_build_one, root, split, i, config, split_id)
                for split, split_id, i in jobs
            ]
            for fut in futures:
                fut.result()
    else:
        for split, split_id, i in jobs:
            _build_one(root, split, i, config, split_id)
    return {split: count for split, _, count in plan}


def list_samples(root, split: str) -> list[Path]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise InputError(f"no {split!r} split under {root}")
    dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not dirs:
        raise InputError(f"{split_dir} contains no samples")
    return dirs
