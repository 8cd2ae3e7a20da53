"""Mask quality metrics: region overlap, boundary agreement, stability.

Conventions, applied per frame:
 - IoU of two empty masks is 1.0; empty against non-empty is 0.0.
 - A boundary pixel is a mask pixel with a 4-neighbor off the mask or
   off the image. Boundary F matches within a pixel radius of
   ceil(0.008 * image diagonal).
 - Temporal stability is the mean IoU of consecutive predictions, and
   the population variance of per-frame quality, both on a 0..100 scale.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError


def frame_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def _shifted(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift with False fill (no wrap-around)."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    out[ys, xs] = mask[slice(max(-dy, 0), min(h - dy, h)), slice(max(-dx, 0), min(w - dx, w))]
    return out


def boundary_map(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    eroded = (
        mask
        & _shifted(mask, 1, 0)
        & _shifted(mask, -1, 0)
        & _shifted(mask, 0, 1)
        & _shifted(mask, 0, -1)
    )
    return mask & ~eroded


def default_radius(h: int, w: int) -> int:
    return math.ceil(0.008 * math.hypot(h, w))


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx <= radius * radius:
                out |= _shifted(mask, dy, dx)
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, radius: int | None = None) -> float:
    pred_b = boundary_map(pred)
    gt_b = boundary_map(np.asarray(gt, dtype=bool))
    if pred_b.shape != gt_b.shape:
        raise ShapeError(f"mask shapes differ: {pred_b.shape} vs {gt_b.shape}")
    if radius is None:
        radius = default_radius(*pred_b.shape)
    n_pred = int(pred_b.sum())
    n_gt = int(gt_b.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    precision = int((pred_b & _dilate(gt_b, radius)).sum()) / n_pred
    recall = int((gt_b & _dilate(pred_b, radius)).sum()) / n_gt
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def temporal_stability(preds: np.ndarray, gts: np.ndarray) -> tuple[float, float]:
    """(mean adjacent-frame IoU, population variance of per-frame quality),
    both scaled to 0..100. Needs at least two frames."""
    preds = np.asarray(preds, dtype=bool)
    gts = np.asarray(gts, dtype=bool)
    if preds.shape[0] < 2:
        raise InputError("adjacent-frame stability needs at least two frames")
    adjacent = [frame_iou(preds[t], preds[t + 1]) for t in range(preds.shape[0] - 1)]
    quality = np.array([frame_iou(p, g) for p, g in zip(preds, gts)])
    return 100.0 * float(np.mean(adjacent)), 100.0 * float(quality.var())


@dataclass
class VideoMetrics:
    name: str
    n_frames: int
    j: float  # mean region IoU, percent
    f: float  # mean boundary F, percent
    jf: float  # (j + f) / 2
    avg_adjacent: float | None  # None for single-frame videos
    quality_variance: float


def evaluate_video(name: str, pred: np.ndarray, gt: np.ndarray) -> VideoMetrics:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
    if pred.ndim != 3:
        raise ShapeError(f"{name}: expected (T, H, W) masks, got {pred.shape}")
    j = 100.0 * float(np.mean([frame_iou(p, g) for p, g in zip(pred, gt)]))
    f = 100.0 * float(np.mean([boundary_f(p, g) for p, g in zip(pred, gt)]))
    if pred.shape[0] >= 2:
        avg_adjacent, variance = temporal_stability(pred, gt)
    else:
        avg_adjacent = None
        variance = 100.0 * float(np.var([frame_iou(pred[0], gt[0])]))
    return VideoMetrics(name, pred.shape[0], j, f, (j + f) / 2.0, avg_adjacent, variance)


@dataclass
class MetricReport:
    videos: list[VideoMetrics]

    def __post_init__(self):
        if not self.videos:
            raise InputError("report needs at least one video")

    def mean(self, attr: str) -> float | None:
        values = [getattr(v, attr) for v in self.videos if getattr(v, attr) is not None]
        return float(np.mean(values)) if values else None

    def length_buckets(self, edges=(1, 5, 10, 20)) -> list[tuple[str, int, float]]:
        """(label, count, mean J&F) for each non-empty frame-count bucket."""
        edges = sorted(edges)
        out = []
        for i, lo in enumerate(edges):
            hi = edges[i + 1] - 1 if i + 1 < len(edges) else None
            label = f"{lo}-{hi}" if hi is not None else f"{lo}+"
            members = [
                v for v in self.videos if v.n_frames >= lo and (hi is None or v.n_frames <= hi)
            ]
            if members:
                out.append((label, len(members), float(np.mean([v.jf for v in members]))))
        return out

    def to_csv(self) -> str:
        def fmt(x):
            return "" if x is None else f"{x:.4f}"

        lines = ["video,frames,J,F,JF,avg_iou_adj,t_iou_var"]
        for v in self.videos:
            lines.append(
                f"{v.name},{v.n_frames},{fmt(v.j)},{fmt(v.f)},{fmt(v.jf)},"
                f"{fmt(v.avg_adjacent)},{fmt(v.quality_variance)}"
            )
        lines.append(
            f"mean,{sum(v.n_frames for v in self.videos)},{fmt(self.mean('j'))},"
            f"{fmt(self.mean('f'))},{fmt(self.mean('jf'))},{fmt(self.mean('avg_adjacent'))},"
            f"{fmt(self.mean('quality_variance'))}"
        )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:7.2f}"

        header = f"{'video':<16}{'frames':>7}{'J':>8}{'F':>8}{'J&F':>8}{'adjIoU':>8}{'qVar':>8}"
        rows = [header, "-" * len(header)]
        for v in self.videos:
            rows.append(
                f"{v.name:<16}{v.n_frames:>7}{fmt(v.j):>8}{fmt(v.f):>8}{fmt(v.jf):>8}"
                f"{fmt(v.avg_adjacent):>8}{fmt(v.quality_variance):>8}"
            )
        rows.append("-" * len(header))
        rows.append(
            f"{'mean':<16}{sum(v.n_frames for v in self.videos):>7}{fmt(self.mean('j')):>8}"
            f"{fmt(self.mean('f')):>8}{fmt(self.mean('jf')):>8}"
            f"{fmt(self.mean('avg_adjacent')):>8}{fmt(self.mean('quality_variance')):>8}"
        )
        buckets = self.length_buckets()
        if buckets:
            rows.append("")
            rows.append("frames bucket   count    J&F")
            for label, count, jf in buckets:
                rows.append(f"{label:<15}{count:>6}{jf:>8.2f}")
        return "\n".join(rows) + "\n"


def build_report(items, threads: int = 1) -> MetricReport:
    """items: iterable of (name, predicted masks, ground-truth masks)."""
    items = list(items)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            videos = list(pool.map(lambda it: evaluate_video(*it), items))
    else:
        videos = [evaluate_video(*item) for item in items]
    return MetricReport(videos)
