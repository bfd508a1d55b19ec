"""Closed-form evaluation of the implicit glyph field.

A glyph is a union of ``v`` primitives; primitive ``i`` is the intersection
of the negative half-regions of ``p`` quadratic curves

    d_ij(x, y) = a x^2 + b xy + c y^2 + d x + e y + f

Two families of evaluators live here:

* hard composition: ``max`` over the curves of a primitive, ``min`` over
  primitives.  ``<= 0`` is inside, boundary included.
* soft composition (trainable): ``D_i = sum_j relu(sigma_ij * d_ij)`` and
  ``1 - clamp(sum_i W_i (1 - D_i), 0, 1)``, which is ``0`` inside and in
  ``(0, 1]`` outside.

Every function takes points as an array of shape ``(..., 2)`` and returns
values of shape ``(...)``.  Coordinates are normalized to ``[-1, 1]`` with
``y`` pointing down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

_F = npt.NDArray[np.floating]

DEFAULT_W_MIN = 0.5


class EmptyShapeError(ValueError):
    """Raised when no primitive survives the weight filter."""


@dataclass
class GlyphShapeParams:
    """Curve coefficients ``P`` (v, p, 6), scales ``sigma`` (v, p), weights ``W`` (v)."""

    P: _F
    sigma: _F
    W: _F

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=float)
        v, p = self.P.shape[:2] if self.P.ndim == 3 else (0, 0)
        if self.P.ndim != 3 or self.P.shape[2] != 6 or v < 1 or p < 1:
            raise ValueError(f"P must have shape (v, p, 6) with v, p >= 1, got {self.P.shape}")
        self.sigma = np.asarray(self.sigma, dtype=self.P.dtype)
        self.W = np.asarray(self.W, dtype=self.P.dtype)
        if self.sigma.shape != (v, p):
            raise ValueError(f"sigma must have shape {(v, p)}, got {self.sigma.shape}")
        if self.W.shape != (v,):
            raise ValueError(f"W must have shape {(v,)}, got {self.W.shape}")
        for name in ("P", "sigma", "W"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def v(self) -> int:
        return self.P.shape[0]

    @property
    def p(self) -> int:
        return self.P.shape[1]

    @classmethod
    def from_curves(cls, P, sigma=None, W=None) -> GlyphShapeParams:
        """Build params with ``sigma = 1`` and ``W = 1`` unless given."""
        P = np.asarray(P, dtype=float)
        if sigma is None:
            sigma = np.ones(P.shape[:2])
        if W is None:
            W = np.ones(P.shape[0])
        return cls(P, sigma, W)

    def copy(self) -> GlyphShapeParams:
        return GlyphShapeParams(self.P.copy(), self.sigma.copy(), self.W.copy())


def curve_features(pts) -> _F:
    """Monomials ``[x^2, xy, y^2, x, y, 1]`` for every point, shape (..., 6)."""
    pts = np.asarray(pts, dtype=float)
    x = pts[..., 0]
    y = pts[..., 1]
    return np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=-1)


def _dot6(feats, coeffs) -> _F:
    # Fixed left-to-right summation, so a point's value never depends on
    # which other points or curves share the call (BLAS blocking would).
    out = feats[..., 0] * coeffs[..., 0]
    for k in range(1, 6):
        out = out + feats[..., k] * coeffs[..., k]
    return out


def eval_curve(coeffs, pts) -> _F:
    """Algebraic value ``a x^2 + b xy + c y^2 + d x + e y + f`` of one curve at ``pts``."""
    return _dot6(curve_features(pts), np.asarray(coeffs, dtype=float))


def curve_values(P, pts) -> _F:
    """All curve values, shape (..., v, p), for ``P`` of shape (v, p, 6)."""
    P = np.asarray(P, dtype=float)
    return _dot6(curve_features(pts)[..., None, None, :], P)


def eval_primitive_hard(curves, pts) -> _F:
    """``max_j d_j`` over the curves (p, 6) of one primitive."""
    curves = np.asarray(curves, dtype=float)
    return curve_values(curves[None], pts)[..., 0, :].max(axis=-1)


def eval_shape_hard(params: GlyphShapeParams, pts) -> _F:
    """``min_i max_j d_ij`` on the raw coefficients; sigma and W are ignored."""
    return curve_values(params.P, pts).max(axis=-1).min(axis=-1)


def eval_primitive_soft(curves, sigma_row, pts) -> _F:
    """``sum_j relu(sigma_j d_j)``; zero exactly when every scaled curve is <= 0."""
    curves = np.asarray(curves, dtype=float)
    d = curve_values(curves[None], pts)[..., 0, :]
    return np.maximum(np.asarray(sigma_row, dtype=float) * d, 0.0).sum(axis=-1)


def primitive_soft_values(params: GlyphShapeParams, pts) -> _F:
    """``D_i^+`` for every primitive, shape (..., v)."""
    d = curve_values(params.P, pts)
    return np.maximum(params.sigma * d, 0.0).sum(axis=-1)


def eval_shape_soft(params: GlyphShapeParams, pts) -> _F:
    """Approximate occupancy ``1 - clamp(sum_i W_i (1 - D_i^+), 0, 1)`` in [0, 1]."""
    D = primitive_soft_values(params, pts)
    return 1.0 - np.clip((1.0 - D) @ params.W, 0.0, 1.0)


def active_primitives(params: GlyphShapeParams, w_min: float = DEFAULT_W_MIN) -> npt.NDArray[np.intp]:
    """Indices of primitives whose weight is at least ``w_min``."""
    if not 0.0 <= w_min <= 1.0:
        raise ValueError(f"w_min must lie in [0, 1], got {w_min}")
    idx = np.flatnonzero(params.W >= w_min)
    if idx.size == 0:
        raise EmptyShapeError(f"no primitive has weight >= {w_min}")
    return idx


def hard_field(params: GlyphShapeParams, pts, w_min: float = DEFAULT_W_MIN) -> _F:
    """Sigma-oriented, weight-filtered hard field: ``min_{W_i >= w_min} max_j sigma_ij d_ij``."""
    idx = active_primitives(params, w_min)
    d = curve_values(params.P[idx], pts) * params.sigma[idx]
    return d.max(axis=-1).min(axis=-1)


def occupancy_hard(params: GlyphShapeParams, pts, w_min: float = DEFAULT_W_MIN):
    """True where ``hard_field <= 0``."""
    return hard_field(params, pts, w_min) <= 0.0


def curve_matrix(coeffs) -> _F:
    """Symmetric 3x3 form ``M`` with ``d(x, y) = [x, y, 1] M [x, y, 1]^T``."""
    a, b, c, d, e, f = np.moveaxis(np.asarray(coeffs, dtype=float), -1, 0)
    rows = [
        [a, b / 2, d / 2],
        [b / 2, c, e / 2],
        [d / 2, e / 2, f],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def matrix_to_coeffs(M) -> _F:
    M = np.asarray(M, dtype=float)
    return np.stack(
        [
            M[..., 0, 0],
            M[..., 0, 1] + M[..., 1, 0],
            M[..., 1, 1],
            M[..., 0, 2] + M[..., 2, 0],
            M[..., 1, 2] + M[..., 2, 1],
            M[..., 2, 2],
        ],
        axis=-1,
    )


def transform_curves(coeffs, A, b) -> _F:
    """Coefficients ``Q`` such that ``eval(Q, x) == eval(coeffs, A @ x + b)``.

    Works on any leading shape of ``coeffs`` (..., 6).
    """
    T = np.eye(3)
    T[:2, :2] = np.asarray(A, dtype=float)
    T[:2, 2] = np.asarray(b, dtype=float)
    M = curve_matrix(coeffs)
    return matrix_to_coeffs(T.T @ M @ T)
