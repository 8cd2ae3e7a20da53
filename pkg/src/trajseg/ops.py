"""Differentiable kernels shared across the pipeline.

Attention, ROI feature pooling, bilinear resampling, the two mask losses,
token cross-entropy, and the central-difference gradient checker. All
spatial resampling (ROI pooling, upsampling) is expressed as matmuls with
constant interpolation matrices, so the autodiff engine differentiates
them with no custom adjoints. Boxes and ground-truth masks are data, not
parameters: nothing here is differentiable w.r.t. geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, no_grad
from .errors import InputError, NumericError, ShapeError

# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
    """softmax(q k^T / sqrt(d) [+ bias]) v over the last two axes.

    q: (..., n, d), k: (..., m, d), v: (..., m, dv) -> (..., n, dv).
    `bias` is an optional additive score offset (e.g. a causal mask of 0 /
    -1e9 values) broadcastable to (..., n, m).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("attention operands must be at least 2-d")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k inner dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v row counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    d = q.shape[-1]
    kt_axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = (q @ k.transpose(kt_axes)) * (1.0 / math.sqrt(d))
    if bias is not None:
        scores = scores + as_tensor(bias)
    return scores.softmax(axis=-1) @ v


# ---------------------------------------------------------------------------
# bilinear resampling as constant matrices


def _interp_matrix(coords: np.ndarray, n: int) -> np.ndarray:
    """Rows of bilinear weights: out[i] = sum_j A[i, j] * src[j].

    Coordinates are in source index space and get clamped to [0, n-1];
    at the clamp the two taps coincide and their weights still sum to 1.
    """
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1.0)
    lo = np.minimum(np.floor(c).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = c - lo
    a = np.zeros((c.size, n))
    rows = np.arange(c.size)
    np.add.at(a, (rows, lo), 1.0 - w)
    np.add.at(a, (rows, hi), w)
    return a


def roi_align(features: Tensor, box, out_size: int) -> Tensor:
    """Pool a normalized box from an (H, W, C) feature map to (P, P, C).

    One bilinear sample per output bin, taken at the bin center, with the
    half-pixel convention fy = cy * H - 0.5 and edge clamping. The result
    is differentiable w.r.t. `features` only; the box is data.
    """
    features = as_tensor(features)
    if features.ndim != 3:
        raise ShapeError(f"expected (H, W, C) features, got shape {features.shape}")
    x0, y0, x1, y1 = (float(b) for b in box)
    if not (0.0 <= x0 <= 1.0 and 0.0 <= y0 <= 1.0 and x1 <= 1.0 and y1 <= 1.0):
        raise InputError(f"box {box} not within the unit square")
    if not (x1 > x0 and y1 > y0):
        raise InputError(f"degenerate box {box}")
    h, w, c = features.shape
    p = int(out_size)
    centers = (np.arange(p) + 0.5) / p
    fy = (y0 + centers * (y1 - y0)) * h - 0.5
    fx = (x0 + centers * (x1 - x0)) * w - 0.5
    sampler = np.kron(_interp_matrix(fy, h), _interp_matrix(fx, w))  # (p*p, h*w)
    pooled = Tensor(sampler) @ features.reshape(h * w, c)
    return pooled.reshape(p, p, c)


_UPSAMPLE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _upsample_matrix(n_src: int, factor: int) -> np.ndarray:
    key = (n_src, factor)
    mat = _UPSAMPLE_CACHE.get(key)
    if mat is None:
        coords = (np.arange(n_src * factor) + 0.5) / factor - 0.5
        mat = _interp_matrix(coords, n_src)
        _UPSAMPLE_CACHE[key] = mat
    return mat


def bilinear_upsample(grid: Tensor, factor: int) -> Tensor:
    """Upsample an (h, w) map to (h*factor, w*factor) bilinearly."""
    grid = as_tensor(grid)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2-d grid, got shape {grid.shape}")
    h, w = grid.shape
    rows = Tensor(_upsample_matrix(h, factor))
    cols = Tensor(_upsample_matrix(w, factor))
    return rows @ grid @ cols.T


def downsample_mean(grid: Tensor, factor: int) -> Tensor:
    """Average-pool an (H, W) map by an integer factor."""
    grid = as_tensor(grid)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2-d grid, got shape {grid.shape}")
    hi, wi = grid.shape
    if hi % factor or wi % factor:
        raise ShapeError(f"shape {grid.shape} not divisible by factor {factor}")
    return grid.reshape(hi // factor, factor, wi // factor, factor).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# losses


def dice_loss(pred: Tensor, gt: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - (2|pred*gt| + s) / (|pred| + |gt| + s); 0 for identical masks."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    inter = (pred * Tensor(gt)).sum()
    total = pred.sum() + float(gt.sum())
    return 1.0 - (2.0 * inter + smooth) / (total + smooth)


def bce_loss(pred: Tensor, gt: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with predictions clipped to [clamp, 1-clamp]."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred.clip(clamp, 1.0 - clamp)
    gt_t = Tensor(gt)
    return -(gt_t * p.log() + (1.0 - gt_t) * (1.0 - p).log()).mean()


def bce_with_logits(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against gt, evaluated
    in logit space. Unlike the clipped probability form, the gradient
    sigmoid(x) - gt never collapses to exactly zero, so a mask head that
    saturates on the wrong side can still recover."""
    logits = as_tensor(logits)
    gt = np.asarray(gt, dtype=np.float64)
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {logits.shape} vs gt {gt.shape}")
    x = logits.data
    value = np.maximum(x, 0.0) - x * gt + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(value.mean())

    def backward(g):
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x))
            logits._accumulate((sig - gt) * (g / x.size))

    return Tensor._make(out_data, (logits,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy in nats; logits (L, V), targets (L,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    logp = logits.log_softmax(axis=-1)
    picked = logp[np.arange(targets.shape[0]), targets]
    return -picked.mean()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Result of one central-difference check.

    `param_errors` maps parameter name to its max relative error
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """

    name: str
    param_errors: dict[str, float]
    max_rel_error: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.1e}) {status}"


def grad_check(
    fn,
    params,
    name: str = "fn",
    epsilon: float = 1e-3,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    coord_limit: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare fn()'s reverse-mode gradients against central differences.

    `fn` takes no arguments, closes over `params` (dict name -> Tensor, or
    a sequence), and returns a scalar Tensor. Every coordinate of every
    parameter is perturbed by +/- epsilon unless `coord_limit` caps the
    number of coordinates per parameter (sampled with `rng`, needed for
    end-to-end checks where full sweeps are too slow).
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        if not p.data.flags.c_contiguous:  # the flat view below must alias the buffer
            p.data = np.ascontiguousarray(p.data)
        p.grad = None
    out = fn()
    if out.size != 1:
        raise InputError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError(f"{name}: non-finite function value {out.data!r}")
    out.backward()
    analytic = {
        key: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for key, p in params.items()
    }

    errors: dict[str, float] = {}
    with no_grad():
        for key, p in params.items():
            flat = p.data.reshape(-1)
            grads = analytic[key].reshape(-1)
            indices = range(flat.size)
            if coord_limit is not None and flat.size > coord_limit:
                sampler = rng if rng is not None else np.random.default_rng(0)
                indices = sampler.choice(flat.size, size=coord_limit, replace=False)
            worst = 0.0
            for i in indices:
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = float(fn().data)
                flat[i] = orig - epsilon
                f_minus = float(fn().data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"{name}: non-finite value near {key}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                rel = abs(grads[i] - numeric) / max(abs(grads[i]), abs(numeric), floor)
                if rel > worst:
                    worst = rel
            errors[key] = worst
    max_err = max(errors.values()) if errors else 0.0
    return GradCheckReport(name, errors, max_err, tolerance, max_err <= tolerance)
