"""Hand-written reverse-mode derivatives, dense MLPs and Adam.

Parameter sets are flat ``dict[str, ndarray]``; gradient bundles use the same
keys and shapes.  Subgradient conventions are fixed:

* relu'(0) = 0
* clamp'(s) = 1 on the closed interval [0, 1], 0 strictly outside
* |.|'(0) = 0
"""

from __future__ import annotations

import contextlib
import os
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

THREADS_ENV = "IMPLICIT_GLYPH_THREADS"

Params = dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf.

    ``sample`` identifies the offending sample (index into the batch) when
    it can be located; ``trace`` carries the loss history up to the failure.
    """

    def __init__(self, message: str, sample=None, trace=None):
        super().__init__(message)
        self.sample = sample
        self.trace = trace


class DivergenceError(NonFiniteError):
    """The loss grew past the divergence guard (a finite but runaway optimization)."""


DEFAULT_DIVERGENCE_RATIO = 1e4


def check_divergence(loss: float, initial: float, ratio: float | None, iteration: int) -> None:
    """Raise when ``loss`` exceeds ``ratio`` times the first iteration's loss."""
    if ratio is not None and loss > ratio * max(initial, 1e-12):
        raise DivergenceError(
            f"loss {loss:.6g} at iteration {iteration} exceeds {ratio:g} x the initial loss {initial:.6g}"
        )


@contextlib.contextmanager
def compute_context(deterministic: bool = True) -> Iterator[None]:
    """Pin BLAS to one thread when deterministic, else honour ``IMPLICIT_GLYPH_THREADS``."""
    if deterministic:
        limit = 1
    else:
        env = os.environ.get(THREADS_ENV)
        limit = int(env) if env else None
    if limit is None:
        yield
        return
    with threadpool_limits(limits=limit):
        yield


# ---------------------------------------------------------------------------
# Dense MLP
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("relu", "linear")


@dataclass
class MlpWeights:
    """Dense layers; ``weights[k]`` is (out, in), ``biases[k]`` is (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for act in (self.hidden_activation, self.output_activation):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} emits "
                    f"{self.weights[k - 1].shape[0]}"
                )

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def to_params(self, prefix: str) -> Params:
        out: Params = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{k}"] = w
            out[f"{prefix}.b{k}"] = b
        return out

    def with_params(self, params: Params, prefix: str) -> MlpWeights:
        n = len(self.weights)
        return MlpWeights(
            [params[f"{prefix}.w{k}"] for k in range(n)],
            [params[f"{prefix}.b{k}"] for k in range(n)],
            self.hidden_activation,
            self.output_activation,
        )

    def astype(self, dtype) -> MlpWeights:
        return MlpWeights(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )


def mlp_init(dims: list[int], seed: int) -> MlpWeights:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least an input and an output dimension")
    if min(dims) < 1:
        raise ValueError(f"layer widths must be positive, got {list(dims)}")
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)) for n_in, n_out in zip(dims, dims[1:])]
    biases = [np.zeros(n_out) for n_out in dims[1:]]
    return MlpWeights(weights, biases)


def _activate(x: np.ndarray, act: str) -> np.ndarray:
    return np.maximum(x, 0.0) if act == "relu" else x


def mlp_forward_cached(w: MlpWeights, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass on (in,) or (B, in); the cache holds each layer's input and pre-activation."""
    x = np.asarray(x)
    if x.shape[-1] != w.dims[0]:
        raise ValueError(f"MLP expects input width {w.dims[0]}, got {x.shape[-1]}")
    cache = []
    h = x
    n = len(w.weights)
    for k, (W, b) in enumerate(zip(w.weights, w.biases)):
        pre = h @ W.T + b
        cache.append(h)
        cache.append(pre)
        h = _activate(pre, w.hidden_activation if k < n - 1 else w.output_activation)
    return h, cache


def mlp_forward(w: MlpWeights, x) -> np.ndarray:
    return mlp_forward_cached(w, x)[0]


def mlp_backward(w: MlpWeights, cache: list[np.ndarray], grad_out: np.ndarray):
    """Returns ``(grad_weights, grad_biases, grad_input)`` for a cached forward pass."""
    n = len(w.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    g = grad_out
    for k in reversed(range(n)):
        h, pre = cache[2 * k], cache[2 * k + 1]
        act = w.hidden_activation if k < n - 1 else w.output_activation
        if act == "relu":
            g = g * (pre > 0)
        if g.ndim == 1:
            gw[k] = np.outer(g, h)
            gb[k] = g.copy()
        else:
            gw[k] = g.T @ h
            gb[k] = g.sum(axis=0)
        g = g @ w.weights[k]
    return gw, gb, g


def mlp_grads_to_params(gw, gb, prefix: str) -> Params:
    out: Params = {}
    for k, (a, b) in enumerate(zip(gw, gb)):
        out[f"{prefix}.w{k}"] = a
        out[f"{prefix}.b{k}"] = b
    return out


# ---------------------------------------------------------------------------
# Soft implicit field
# ---------------------------------------------------------------------------


@dataclass
class SoftFieldCache:
    feats: np.ndarray
    d: np.ndarray
    relu: np.ndarray
    D: np.ndarray
    S: np.ndarray
    sigma: np.ndarray
    W: np.ndarray


def soft_field_forward(P, sigma, W, feats) -> tuple[np.ndarray, SoftFieldCache]:
    """Soft occupancy for ``P`` of shape ([B,] v, p, 6) at ``feats`` (N, 6).

    Returns values of shape ([B,] N).  ``sigma`` and ``W`` are shared across
    the optional batch axis.  Curve values are kept flat as (..., N, v*p).
    """
    v, p = sigma.shape
    lead = P.shape[:-3]
    Pf = P.reshape(lead + (v * p, 6))
    d = feats @ np.swapaxes(Pf, -1, -2)
    r = d * sigma.reshape(-1)
    np.maximum(r, 0, out=r)
    D = r.reshape(r.shape[:-1] + (v, p)) @ np.ones(p, dtype=r.dtype)
    S = (1 - D) @ W
    out = 1 - np.clip(S, 0, 1)
    return out, SoftFieldCache(feats, d, r, D, S, sigma, W)


def soft_field_backward(cache: SoftFieldCache, grad_out: np.ndarray):
    """Returns ``(gP, gsigma, gW)``; ``gP`` keeps the batch axis, the others are summed."""
    c = cache
    v, p = c.sigma.shape
    gS = np.where((c.S >= 0) & (c.S <= 1), -grad_out, 0)
    lead_axes = tuple(range(gS.ndim))
    gW = np.tensordot(gS, 1 - c.D, axes=(lead_axes, lead_axes))
    gD = gS[..., None] * -c.W
    gu = (c.relu > 0) * np.repeat(gD, p, axis=-1)
    gsigma = np.einsum("nk,nk->k", gu.reshape(-1, v * p), c.d.reshape(-1, v * p)).reshape(v, p)
    gu *= c.sigma.reshape(-1)
    gP = np.swapaxes(gu, -1, -2) @ c.feats
    return gP.reshape(gP.shape[:-2] + (v, p, 6)), gsigma, gW


def soft_field_mse(P, sigma, W, feats, targets, chunk: int = 2):
    """Mean squared error of the soft field against ``targets`` with its gradients.

    ``P`` is (B, v, p, 6) and ``targets`` (B, N).  Glyphs are processed a few
    at a time, which keeps the (N, v*p) intermediates cache-resident; the
    reduction order is fixed.  Returns ``(loss, gP, gsigma, gW)``.
    """
    B = P.shape[0]
    scale = 2.0 / targets.size
    total = 0.0
    gP = np.empty_like(P)
    gsigma = np.zeros_like(sigma)
    gW = np.zeros_like(W)
    for i in range(0, B, chunk):
        out, cache = soft_field_forward(P[i : i + chunk], sigma, W, feats)
        res = out - targets[i : i + chunk]
        sq = res * res
        part = float(sq.sum(dtype=np.float64))
        if not np.isfinite(part):
            bad = np.flatnonzero(~np.isfinite(sq.reshape(-1)))
            sample = (i + int(bad[0]) // sq.shape[-1], int(bad[0]) % sq.shape[-1]) if bad.size else None
            raise NonFiniteError(f"non-finite reconstruction loss (glyph, pixel) = {sample}", sample=sample)
        total += part
        gP[i : i + chunk], gs, gw = soft_field_backward(cache, res * scale)
        gsigma += gs
        gW += gw
    return total / targets.size, gP, gsigma, gW


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------


def _raise_non_finite(per_sample: np.ndarray, what: str) -> None:
    flat = np.asarray(per_sample).reshape(-1)
    bad = np.flatnonzero(~np.isfinite(flat))
    sample = int(bad[0]) if bad.size else None
    raise NonFiniteError(f"non-finite {what} (first offending sample: {sample})", sample=sample)


def mse_and_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries."""
    res = pred - target
    sq = res * res
    loss = float(sq.mean())
    if not np.isfinite(loss):
        _raise_non_finite(sq, "reconstruction loss")
    return loss, res * (2.0 / res.size)


def l1_mean_and_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """``mean |a - b|`` and its gradient with respect to ``a`` (sign, 0 at 0)."""
    diff = a - b
    loss = float(np.abs(diff).mean())
    if not np.isfinite(loss):
        _raise_non_finite(diff, "L1 loss")
    return loss, np.sign(diff) / diff.size


def weight_loss_and_grad(W: np.ndarray) -> tuple[float, np.ndarray]:
    """``sum_i |W_i - 1|``."""
    dev = W - 1
    return float(np.abs(dev).sum()), np.sign(dev)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_and_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of (B, C) logits against integer labels."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    logp = log_softmax(logits)
    rows = np.arange(len(labels))
    nll = -logp[rows, labels]
    loss = float(nll.mean())
    if not np.isfinite(loss):
        _raise_non_finite(nll, "cross-entropy")
    g = np.exp(logp)
    g[rows, labels] -= 1
    return loss, g / len(labels)


# ---------------------------------------------------------------------------
# Gradient driver, Adam, finite differences
# ---------------------------------------------------------------------------

Objective = Callable[[Params, object], tuple[float, Params]]


def compute_gradients(objective: Objective, params: Params, batch, deterministic: bool = True) -> tuple[float, Params]:
    """Evaluate ``objective(params, batch) -> (loss, grads)`` and validate the result."""
    with compute_context(deterministic):
        loss, grads = objective(params, batch)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    for k, g in grads.items():
        if g.shape != np.shape(params[k]):
            raise ValueError(f"gradient {k} has shape {g.shape}, parameter has {np.shape(params[k])}")
    return loss, grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    lr_scale: dict[str, float] = field(default_factory=dict)  # per-key multiplier on lr

    def __post_init__(self) -> None:
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lr < 0 or any(s < 0 for s in self.lr_scale.values()):
            raise ValueError("learning rates must be non-negative")


def adam_step(state: AdamState, params: Params, grads: Params) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1 - b1**t)
    bc2 = 1 - b2**t
    new_params = dict(params)
    new_m = dict(state.m)
    new_v = dict(state.v)
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * (g * g) if v is None else b2 * v + (1 - b2) * (g * g)
        new_m[k] = m
        new_v[k] = v
        lr_k = step_size * state.lr_scale.get(k, 1.0)
        new_params[k] = params[k] - lr_k * m / (np.sqrt(v / bc2) + state.eps)
    return new_params, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v, state.lr_scale)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_key: str | None
    checked: int
    skipped: int


def check_gradients(
    loss_fn: Callable[[Params], float],
    params: Params,
    grads: Params,
    h: float = 1e-5,
    coords_per_key: int | None = None,
    seed: int = 0,
    kinks: Callable[[Params], np.ndarray] | None = None,
    kink_tol: float = 1e-7,
) -> GradCheckReport:
    """Compare ``grads`` with central differences of ``loss_fn``.

    Error per coordinate is ``|g - fd| / max(1, |fd|)``.  When ``kinks``
    returns the arguments of every non-smooth operation, a coordinate is
    skipped if any argument sits within ``kink_tol`` of zero or changes sign
    between the two probes.
    """
    rng = np.random.default_rng(seed)
    base_signs = None
    if kinks is not None:
        k0 = kinks(params)
        if np.any(np.abs(k0) < kink_tol):
            return GradCheckReport(0.0, None, 0, sum(np.size(p) for p in params.values()))
        base_signs = k0 > 0
    worst, worst_key, checked, skipped = 0.0, None, 0, 0
    for key in sorted(params):
        arr = np.asarray(params[key], dtype=float)
        n = arr.size
        idx = np.arange(n) if coords_per_key is None or coords_per_key >= n else rng.choice(n, coords_per_key, replace=False)
        for i in idx:
            probes = []
            for s in (h, -h):
                pert = arr.copy().reshape(-1)
                pert[i] += s
                q = dict(params)
                q[key] = pert.reshape(arr.shape)
                probes.append(q)
            if base_signs is not None and any(np.any((kinks(q) > 0) != base_signs) for q in probes):
                skipped += 1
                continue
            fd = (loss_fn(probes[0]) - loss_fn(probes[1])) / (2 * h)
            err = abs(float(np.asarray(grads[key]).reshape(-1)[i]) - fd) / max(1.0, abs(fd))
            checked += 1
            if err > worst:
                worst, worst_key = err, key
    return GradCheckReport(worst, worst_key, checked, skipped)
