"""Reconstruction losses and direct per-glyph optimization of the shape parameters."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .grad import (
    DEFAULT_DIVERGENCE_RATIO,
    AdamState,
    NonFiniteError,
    Params,
    adam_step,
    check_divergence,
    compute_context,
    soft_field_mse,
    weight_loss_and_grad,
)
from .kernel import GlyphShapeParams, curve_features, eval_shape_soft
from .raster import RasterImage, pixel_centers

log = logging.getLogger(__name__)

TRACE_HEADER = ("iteration", "loss_rec", "loss_w", "loss_hard", "total")

# Sample points count as ink when their target is below this value.
INK_LEVEL = 0.5
DEFAULT_HARD_MARGIN = 0.02


@dataclass
class SampleBatch:
    """Sample locations in [-1, 1]^2 paired with target pixel values."""

    points: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if len(self.points) == 0:
            raise ValueError("a sample batch must not be empty")
        if len(self.points) != len(self.targets):
            raise ValueError("points and targets differ in length")
        if np.any(np.abs(self.points) > 1):
            raise ValueError("sample points must lie in [-1, 1]^2")

    def __len__(self) -> int:
        return len(self.targets)

    @cached_property
    def features(self) -> np.ndarray:
        return curve_features(self.points)


def make_batch(img: RasterImage, n: int, seed: int = 0) -> SampleBatch:
    """``n`` distinct pixel centers with their values; ``n == H*W`` gives the full grid in row-major order."""
    total = img.height * img.width
    if n < 1:
        raise ValueError("batch size must be at least 1")
    if n > total:
        raise ValueError(f"cannot draw {n} distinct pixels from a {img.height}x{img.width} image")
    pts = pixel_centers(img.height, img.width).reshape(-1, 2)
    vals = img.pixels.reshape(-1)
    if n == total:
        return SampleBatch(pts, vals)
    idx = np.random.default_rng(seed).choice(total, size=n, replace=False)
    return SampleBatch(pts[idx], vals[idx])


def loss_rec(params: GlyphShapeParams, batch: SampleBatch) -> float:
    """Mean squared difference between the soft field and the targets."""
    res = eval_shape_soft(params, batch.points) - batch.targets
    return float(np.mean(res * res))


def loss_w(W) -> float:
    return float(np.abs(np.asarray(W, dtype=float) - 1).sum())


def _oriented_values(P, sigma, feats) -> np.ndarray:
    """``sigma_ij * d_ij`` at every sample, shape (N, v, p)."""
    v, p = sigma.shape
    d = feats @ P.reshape(-1, 6).T
    return d.reshape(len(feats), v, p) * sigma


def _hinge_parts(u: np.ndarray, targets: np.ndarray, margin: float):
    """Hard field ``min_i max_j u_ij`` per sample, its arg indices, and the signed hinge arguments."""
    jmax = u.argmax(axis=-1)
    m = np.take_along_axis(u, jmax[..., None], axis=-1)[..., 0]
    imin = m.argmin(axis=-1)
    h = np.take_along_axis(m, imin[:, None], axis=-1)[:, 0]
    ink = targets < INK_LEVEL
    arg = np.where(ink, h + margin, margin - h)
    return h, jmax, imin, ink, arg


def loss_hard(params: GlyphShapeParams, batch: SampleBatch, margin: float = DEFAULT_HARD_MARGIN) -> float:
    """Mean hinge pulling the hard field below ``-margin`` on ink samples and above ``margin`` elsewhere."""
    u = _oriented_values(params.P, params.sigma, batch.features)
    arg = _hinge_parts(u, batch.targets, margin)[-1]
    return float(np.mean(np.maximum(arg, 0.0)))


def total_loss(
    params: GlyphShapeParams, batch: SampleBatch, lambda_w: float = 0.1, lambda_hard: float = 1.0,
    margin: float = DEFAULT_HARD_MARGIN,
) -> float:
    out = loss_rec(params, batch) + lambda_w * loss_w(params.W)
    if lambda_hard:
        out += lambda_hard * loss_hard(params, batch, margin)
    return out


def shape_to_params(shape: GlyphShapeParams) -> Params:
    return {"P": shape.P, "sigma": shape.sigma, "W": shape.W}


def params_to_shape(params: Params) -> GlyphShapeParams:
    return GlyphShapeParams(
        np.asarray(params["P"], dtype=float),
        np.asarray(params["sigma"], dtype=float),
        np.asarray(params["W"], dtype=float),
    )


def hard_loss_and_grad(P, sigma, feats, targets, margin: float = DEFAULT_HARD_MARGIN):
    """``loss_hard`` with gradients ``(gP, gsigma)``; each sample's gradient reaches only its active curve."""
    v, p = sigma.shape
    N = len(feats)
    u = _oriented_values(P, sigma, feats)
    _, jmax, imin, ink, arg = _hinge_parts(u, targets, margin)
    active = arg > 0
    gh = np.where(active, np.where(ink, 1.0, -1.0), 0.0) / N
    j = jmax[np.arange(N), imin]
    flat = imin * p + j
    gu = np.zeros((N, v * p), dtype=u.dtype)
    gu[np.arange(N), flat] = gh
    d = feats @ P.reshape(-1, 6).T
    gsigma = np.einsum("nk,nk->k", gu, d).reshape(v, p)
    gP = (gu * sigma.reshape(-1)).T @ feats
    return float(np.mean(np.maximum(arg, 0.0))), gP.reshape(v, p, 6), gsigma


def shape_loss_and_grad(
    params: Params, batch: SampleBatch, lambda_w: float = 0.1, lambda_hard: float = 1.0,
    margin: float = DEFAULT_HARD_MARGIN,
):
    """Returns ``(total, grads, (loss_rec, loss_w, loss_hard))`` for the fitting objective."""
    dtype = params["P"].dtype
    feats = batch.features.astype(dtype, copy=False)
    targets = batch.targets.astype(dtype, copy=False)
    rec, gP, gsigma, gW = soft_field_mse(params["P"][None], params["sigma"], params["W"], feats, targets[None])
    lw, gw_reg = weight_loss_and_grad(params["W"])
    grads = {"P": gP[0], "sigma": gsigma, "W": gW + lambda_w * gw_reg}
    lh = 0.0
    if lambda_hard:
        lh, hP, hsigma = hard_loss_and_grad(params["P"], params["sigma"], feats, targets, margin)
        grads["P"] = grads["P"] + lambda_hard * hP
        grads["sigma"] = grads["sigma"] + lambda_hard * hsigma
    return rec + lambda_w * lw + lambda_hard * lh, grads, (rec, lw, lh)


def shape_objective(lambda_w: float = 0.1, lambda_hard: float = 1.0):
    """Objective ``(params, batch) -> (loss, grads)`` for :func:`grad.compute_gradients`."""

    def objective(params: Params, batch: SampleBatch):
        loss, grads, _ = shape_loss_and_grad(params, batch, lambda_w, lambda_hard)
        return loss, grads

    return objective


def _top_two_gap(x: np.ndarray) -> np.ndarray:
    """Gap between the two largest entries along the last axis (0 when there is only one)."""
    if x.shape[-1] < 2:
        return np.ones(x.shape[:-1])
    part = np.sort(x, axis=-1)
    return part[..., -1] - part[..., -2]


def shape_kinks(params: Params, batch: SampleBatch, margin: float | None = DEFAULT_HARD_MARGIN) -> np.ndarray:
    """Arguments of every relu, clamp, |.|, max and min in the objective (for finite-difference guarding).

    Pass ``margin=None`` when the hard-field hinge is off.
    """
    P, sigma, W = (np.asarray(params[k], dtype=float) for k in ("P", "sigma", "W"))
    u = _oriented_values(P, sigma, curve_features(batch.points))
    S = (1 - np.maximum(u, 0).sum(-1)) @ W
    parts = [u.ravel(), S, S - 1, W - 1]
    if margin is not None:
        arg = _hinge_parts(u, batch.targets, margin)[-1]
        parts += [arg, _top_two_gap(u).ravel(), _top_two_gap(-u.max(axis=-1))]
    return np.concatenate(parts)


def default_constant_offset(v: int, p: int) -> float:
    """Constant-term offset that starts ``sum_i W_i (1 - D_i)`` near 0.5, inside the clamp's active range."""
    return (1.0 - 0.5 / v) / p


def init_shape_params(v: int, p: int, rng: np.random.Generator, init_scale: float = 0.1) -> GlyphShapeParams:
    """Near-degenerate half-planes with gentle curvature, ``sigma = 1``, ``W = 1``."""
    P = np.empty((v, p, 6))
    P[..., :3] = rng.normal(0.0, 0.2 * init_scale, size=(v, p, 3))
    P[..., 3:] = rng.normal(0.0, init_scale, size=(v, p, 3))
    P[..., 5] += default_constant_offset(v, p)
    return GlyphShapeParams(P, np.ones((v, p)), np.ones(v))


@dataclass
class FitConfig:
    iterations: int = 20000
    batch_size: int | None = None
    lambda_w: float = 0.1
    lambda_hard: float = 1.0  # hard-field hinge; 0 gives the plain reconstruction objective
    hard_margin: float = DEFAULT_HARD_MARGIN
    seed: int = 0
    init_scale: float = 0.1
    resolution: int | None = None
    v: int = 16
    p: int = 6
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"
    deterministic: bool = True
    divergence_ratio: float | None = DEFAULT_DIVERGENCE_RATIO

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.lambda_w < 0 or self.lambda_hard < 0:
            raise ValueError("lambda_w and lambda_hard must be non-negative")
        if self.hard_margin < 0:
            raise ValueError("hard_margin must be non-negative")


@dataclass
class FitResult:
    params: GlyphShapeParams
    trace: np.ndarray = field(repr=False)


def _resample(img: RasterImage, resolution: int) -> RasterImage:
    if img.height == resolution and img.width == resolution:
        return img
    from PIL import Image

    im = Image.fromarray(img.to_bytes()).resize((resolution, resolution), Image.Resampling.BOX)
    return RasterImage(np.asarray(im, dtype=float) / 255.0)


def fit_glyph(img: RasterImage, cfg: FitConfig | None = None, init: GlyphShapeParams | None = None) -> FitResult:
    """Optimize curve coefficients, sigma and W with Adam against ``img``.

    The trace has one row per iteration: (iteration, loss_rec, loss_w, loss_hard, total),
    evaluated at the parameters before that iteration's update.
    """
    cfg = cfg or FitConfig()
    if cfg.resolution:
        img = _resample(img, cfg.resolution)
    rng = np.random.default_rng(cfg.seed)
    shape = init if init is not None else init_shape_params(cfg.v, cfg.p, rng, cfg.init_scale)
    dtype = np.dtype(cfg.dtype)
    params = {k: a.astype(dtype) for k, a in shape_to_params(shape).items()}
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    total = img.height * img.width
    n = total if cfg.batch_size is None else min(cfg.batch_size, total)
    batch = make_batch(img, n, cfg.seed)
    trace = np.zeros((cfg.iterations, len(TRACE_HEADER)))
    with compute_context(cfg.deterministic):
        for it in range(cfg.iterations):
            if n < total and it:
                batch = make_batch(img, n, cfg.seed + it)
            try:
                loss, grads, (rec, lw, lh) = shape_loss_and_grad(
                    params, batch, cfg.lambda_w, cfg.lambda_hard, cfg.hard_margin
                )
                trace[it] = (it, rec, lw, lh, loss)
                check_divergence(loss, trace[0, -1], cfg.divergence_ratio, it)
                params, state = adam_step(state, params, grads)
                if not all(np.all(np.isfinite(a)) for a in params.values()):
                    raise NonFiniteError(f"parameters diverged at iteration {it}")
            except NonFiniteError as err:
                err.trace = trace[: it + 1]
                raise
            if it % 1000 == 0:
                log.debug("iteration %d: total %.6f (rec %.6f, W %.4f, hard %.5f)", it, loss, rec, lw, lh)
    return FitResult(params_to_shape(params), trace)


def write_trace_csv(trace: np.ndarray, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for row in trace:
            writer.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
