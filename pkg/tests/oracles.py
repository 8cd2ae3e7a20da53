"""Independent brute-force oracles, written against the op contracts only.

Everything here is scalar-loop python over plain numpy arrays: no Tensor,
no code shared with the package. Deliberately slow and obvious.
"""

import math

import numpy as np


def attention_oracle(q, k, v):
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, d = q.shape
    m, dv = v.shape
    out = np.zeros((n, dv))
    for i in range(n):
        scores = []
        for j in range(m):
            s = 0.0
            for t in range(d):
                s += q[i, t] * k[j, t]
            scores.append(s / math.sqrt(d))
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        z = sum(exps)
        for j in range(m):
            w = exps[j] / z
            for c in range(dv):
                out[i, c] += w * v[j, c]
    return out


def bilinear_at(grid, fy, fx):
    """Edge-clamped bilinear read of a 2-d grid at fractional coordinates."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    fy = min(max(fy, 0.0), h - 1.0)
    fx = min(max(fx, 0.0), w - 1.0)
    y0 = min(int(math.floor(fy)), h - 1)
    x0 = min(int(math.floor(fx)), w - 1)
    y1 = min(y0 + 1, h - 1)
    x1 = min(x0 + 1, w - 1)
    dy = fy - y0
    dx = fx - x0
    return (
        grid[y0, x0] * (1 - dy) * (1 - dx)
        + grid[y0, x1] * (1 - dy) * dx
        + grid[y1, x0] * dy * (1 - dx)
        + grid[y1, x1] * dy * dx
    )


def roi_align_oracle(features, box, out_size):
    features = np.asarray(features, dtype=np.float64)
    h, w, c = features.shape
    x0, y0, x1, y1 = box
    p = out_size
    out = np.zeros((p, p, c))
    for i in range(p):
        for j in range(p):
            cy = y0 + (i + 0.5) * (y1 - y0) / p
            cx = x0 + (j + 0.5) * (x1 - x0) / p
            for ch in range(c):
                out[i, j, ch] = bilinear_at(features[:, :, ch], cy * h - 0.5, cx * w - 0.5)
    return out


def upsample_oracle(grid, factor):
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    out = np.zeros((h * factor, w * factor))
    for i in range(h * factor):
        for j in range(w * factor):
            out[i, j] = bilinear_at(grid, (i + 0.5) / factor - 0.5, (j + 0.5) / factor - 0.5)
    return out


def iou_oracle(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    inter = 0
    union = 0
    for pa, pb in zip(a.reshape(-1), b.reshape(-1)):
        if pa and pb:
            inter += 1
        if pa or pb:
            union += 1
    if union == 0:
        return 1.0
    if inter == 0 and (not a.any() or not b.any()):
        return 0.0
    return inter / union


def boundary_pixels_oracle(mask):
    """Set of (y, x) on the 4-neighborhood erosion-difference boundary."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if ny < 0 or ny >= h or nx < 0 or nx >= w or not mask[ny, nx]:
                    out.add((y, x))
                    break
    return out


def boundary_f_oracle(pred, gt, radius):
    pred_b = boundary_pixels_oracle(pred)
    gt_b = boundary_pixels_oracle(gt)
    if not pred_b and not gt_b:
        return 1.0
    if not pred_b or not gt_b:
        return 0.0

    def matched(src, dst):
        hits = 0
        for (y, x) in src:
            for (gy, gx) in dst:
                if (y - gy) ** 2 + (x - gx) ** 2 <= radius ** 2:
                    hits += 1
                    break
        return hits

    precision = matched(pred_b, gt_b) / len(pred_b)
    recall = matched(gt_b, pred_b) / len(gt_b)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def tolerance_radius_oracle(h, w):
    return math.ceil(0.008 * math.sqrt(h * h + w * w))


def temporal_oracle(preds, gts):
    preds = [np.asarray(p).astype(bool) for p in preds]
    gts = [np.asarray(g).astype(bool) for g in gts]
    adj = [iou_oracle(preds[t], preds[t + 1]) for t in range(len(preds) - 1)]
    avg_adj = 100.0 * (sum(adj) / len(adj))  # mean first, then scale
    quality = [iou_oracle(p, g) for p, g in zip(preds, gts)]
    mean_q = sum(quality) / len(quality)
    var_q = sum((q - mean_q) ** 2 for q in quality) / len(quality)
    return avg_adj, 100.0 * var_q
