"""One-shot style transfer in latent space.

``M_sep`` splits a glyph code into a style vector ``f`` and a content vector
``h``; ``M_merge`` maps ``concat(f, h)`` back to a code.  A linear classifier
on codes predicts the character.  Training draws triplets (s1, c1), (s2, c2),
(s1, c2) from the training fonts of a trained manifold and optimizes

    L_rec + lw L_W + l_cont L_cont + l_style L_style + l_latent L_latent + l_cate L_cate + L_c

where L_rec compares the decoded transfer result with the true (s1, c2) glyph.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .datasets import LETTERS, FontDataset
from .grad import (
    DEFAULT_DIVERGENCE_RATIO,
    AdamState,
    MlpWeights,
    NonFiniteError,
    Params,
    adam_step,
    check_divergence,
    compute_context,
    cross_entropy_and_grad,
    l1_mean_and_grad,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_grads_to_params,
    mlp_init,
    soft_field_forward,
    soft_field_mse,
    weight_loss_and_grad,
)
from .manifold import (
    DecoderModel,
    InferConfig,
    LatentTable,
    decode,
    grid_features,
    infer_latent,
)
from .raster import RasterImage, render_soft

log = logging.getLogger(__name__)

STYLE_DIM = 128
N_CLASSES = len(LETTERS)
LOSS_NAMES = ("rec", "w", "cont", "style", "latent", "cate", "c")
TRACE_HEADER = ("iteration", "total") + LOSS_NAMES


@dataclass
class TransferModel:
    sep: MlpWeights
    merge: MlpWeights
    classifier: MlpWeights
    style_dim: int = STYLE_DIM
    lambda_w: float = 0.1
    lambda_cont: float = 0.1
    lambda_style: float = 0.1
    lambda_latent: float = 0.1
    lambda_cate: float = 0.05

    def __post_init__(self) -> None:
        L = self.sep.dims[0]
        if not 0 < self.style_dim < self.sep.dims[-1]:
            raise ValueError("style_dim must split the M_sep output into two nonempty parts")
        if self.merge.dims[0] != self.sep.dims[-1] or self.merge.dims[-1] != L:
            raise ValueError(f"M_merge must map {self.sep.dims[-1]} values back to a {L}-dim code")
        if self.classifier.dims[0] != L or self.classifier.dims[-1] != N_CLASSES:
            raise ValueError(f"the classifier must map a {L}-dim code to {N_CLASSES} logits")
        if any(v < 0 for v in self.lambdas().values()):
            raise ValueError("loss weights must be non-negative")

    @property
    def latent_dim(self) -> int:
        return self.sep.dims[0]

    def lambdas(self) -> dict[str, float]:
        return {
            "lambda_w": self.lambda_w,
            "lambda_cont": self.lambda_cont,
            "lambda_style": self.lambda_style,
            "lambda_latent": self.lambda_latent,
            "lambda_cate": self.lambda_cate,
        }

    def loss_weights(self) -> dict[str, float]:
        return {
            "rec": 1.0,
            "w": self.lambda_w,
            "cont": self.lambda_cont,
            "style": self.lambda_style,
            "latent": self.lambda_latent,
            "cate": self.lambda_cate,
            "c": 1.0,
        }

    def to_params(self) -> Params:
        return {**self.sep.to_params("sep"), **self.merge.to_params("merge"), **self.classifier.to_params("cls")}

    def with_params(self, params: Params) -> TransferModel:
        return TransferModel(
            self.sep.with_params(params, "sep"),
            self.merge.with_params(params, "merge"),
            self.classifier.with_params(params, "cls"),
            self.style_dim,
            **self.lambdas(),
        )

    def astype(self, dtype) -> TransferModel:
        return TransferModel(
            self.sep.astype(dtype), self.merge.astype(dtype), self.classifier.astype(dtype), self.style_dim, **self.lambdas()
        )


def init_transfer_model(
    latent_dim: int = 256,
    hidden: int = 256,
    style_dim: int = STYLE_DIM,
    seed: int = 0,
    **lambdas: float,
) -> TransferModel:
    """``M_sep`` L->hidden->2*style_dim, ``M_merge`` 2*style_dim->hidden->hidden->L, linear classifier L->26."""
    return TransferModel(
        mlp_init([latent_dim, hidden, 2 * style_dim], seed),
        mlp_init([2 * style_dim, hidden, hidden, latent_dim], seed + 1),
        mlp_init([latent_dim, N_CLASSES], seed + 2),
        style_dim,
        **lambdas,
    )


def separate(z, m: TransferModel) -> tuple[np.ndarray, np.ndarray]:
    out = mlp_forward(m.sep, np.asarray(z, dtype=float))
    return out[..., : m.style_dim], out[..., m.style_dim :]


def merge(f, h, m: TransferModel) -> np.ndarray:
    return mlp_forward(m.merge, np.concatenate([np.asarray(f, dtype=float), np.asarray(h, dtype=float)], axis=-1))


def classify_latent(z, m: TransferModel) -> np.ndarray:
    return mlp_forward(m.classifier, np.asarray(z, dtype=float))


def transfer_latent(z_style, z_content, m: TransferModel) -> np.ndarray:
    """``merge(f(z_style), h(z_content))``."""
    f, _ = separate(z_style, m)
    _, h = separate(z_content, m)
    return merge(f, h, m)


def classifier_accuracy(m: TransferModel, Z, labels) -> float:
    return float(np.mean(np.argmax(classify_latent(Z, m), axis=-1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class TripletBatch:
    """Codes of glyphs (s1, c1), (s2, c2), (s1, c2), the labels, and the (s1, c2) images (B, N) or None."""

    z_s1c1: np.ndarray
    z_s2c2: np.ndarray
    z_s1c2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.z_s1c1, self.z_s2c2, self.z_s1c2 = (np.atleast_2d(z) for z in (self.z_s1c1, self.z_s2c2, self.z_s1c2))
        self.c1 = np.atleast_1d(np.asarray(self.c1, dtype=np.intp))
        self.c2 = np.atleast_1d(np.asarray(self.c2, dtype=np.intp))
        B = len(self.c2)
        if not (self.z_s1c1.shape == self.z_s2c2.shape == self.z_s1c2.shape) or len(self.z_s1c1) != B or len(self.c1) != B:
            raise ValueError("triplet batch members disagree in shape")
        if self.targets is not None:
            self.targets = np.atleast_2d(self.targets)
            if len(self.targets) != B:
                raise ValueError("one target image per triplet is required")

    def __len__(self) -> int:
        return len(self.c2)


def transfer_losses(z_s1c1, z_s2c2, z_s1c2, m: TransferModel, c1=None, c2=None) -> dict[str, float]:
    """Latent-space loss components for one triplet (or a batch of them).

    ``cate`` needs ``c2`` and ``c`` needs both labels; they are omitted otherwise.
    """
    f1, _ = separate(z_s1c1, m)
    _, h2 = separate(z_s2c2, m)
    f3, h3 = separate(z_s1c2, m)
    z_hat = merge(f1, h2, m)
    out = {
        "cont": float(np.mean(np.abs(h3 - h2))),
        "style": float(np.mean(np.abs(f1 - f3))),
        "latent": float(np.mean(np.abs(np.asarray(z_s1c2) - z_hat))),
    }
    if c2 is not None:
        out["cate"] = cross_entropy_and_grad(classify_latent(z_hat, m), c2)[0]
        if c1 is not None:
            Z = np.concatenate([np.atleast_2d(z_s1c1), np.atleast_2d(z_s2c2), np.atleast_2d(z_s1c2)])
            labels = np.concatenate([np.atleast_1d(c1), np.atleast_1d(c2), np.atleast_1d(c2)])
            out["c"] = cross_entropy_and_grad(classify_latent(Z, m), labels)[0]
    return out


def _decoder_keys(params: Params) -> bool:
    return "sigma" in params


def transfer_loss_and_grad(
    params: Params,
    batch: TripletBatch,
    template: TransferModel,
    decoder: DecoderModel,
    feats: np.ndarray | None,
    weights: dict[str, float] | None = None,
    detach_classifier: bool = True,
):
    """Weighted transfer objective and its gradients.

    ``params`` holds the ``sep.*``, ``merge.*`` and ``cls.*`` arrays, plus the
    decoder's (``param.*``, ``sigma``, ``W``) when the decoder is trained.
    With ``detach_classifier`` the category loss on the generated code does
    not update the classifier, which is then trained by ``L_c`` alone.
    Returns ``(total, grads, components)``.
    """
    w = template.loss_weights() if weights is None else {k: float(weights.get(k, 0.0)) for k in LOSS_NAMES}
    sep = template.sep.with_params(params, "sep")
    mrg = template.merge.with_params(params, "merge")
    cls = template.classifier.with_params(params, "cls")
    F = template.style_dim
    B = len(batch)
    comps: dict[str, float] = {}

    Zin = np.concatenate([batch.z_s1c1, batch.z_s2c2, batch.z_s1c2])
    out, sep_cache = mlp_forward_cached(sep, Zin)
    f1, h2 = out[:B, :F], out[B : 2 * B, F:]
    f3, h3 = out[2 * B :, :F], out[2 * B :, F:]
    g_sep = np.zeros_like(out)

    comps["cont"], g = l1_mean_and_grad(h3, h2)
    g_sep[2 * B :, F:] += w["cont"] * g
    g_sep[B : 2 * B, F:] -= w["cont"] * g
    comps["style"], g = l1_mean_and_grad(f1, f3)
    g_sep[:B, :F] += w["style"] * g
    g_sep[2 * B :, :F] -= w["style"] * g

    z_hat, merge_cache = mlp_forward_cached(mrg, np.concatenate([f1, h2], axis=-1))
    comps["latent"], g = l1_mean_and_grad(z_hat, batch.z_s1c2)
    g_zhat = w["latent"] * g

    logits, cls_cache = mlp_forward_cached(cls, z_hat)
    comps["cate"], g = cross_entropy_and_grad(logits, batch.c2)
    cw, cb, gz = mlp_backward(cls, cls_cache, w["cate"] * g)
    g_zhat = g_zhat + gz
    if detach_classifier:
        cw = [np.zeros_like(a) for a in cw]
        cb = [np.zeros_like(a) for a in cb]

    logits_gt, gt_cache = mlp_forward_cached(cls, Zin)
    labels = np.concatenate([batch.c1, batch.c2, batch.c2])
    comps["c"], g = cross_entropy_and_grad(logits_gt, labels)
    cw2, cb2, _ = mlp_backward(cls, gt_cache, w["c"] * g)
    grads = mlp_grads_to_params([a + b for a, b in zip(cw, cw2)], [a + b for a, b in zip(cb, cb2)], "cls")

    train_decoder = _decoder_keys(params)
    dparams = params if train_decoder else decoder.to_params()
    comps["w"], g_wreg = weight_loss_and_grad(dparams["W"])
    if batch.targets is not None:
        dmlp = decoder.mlp.with_params(dparams, "param")
        flat, dcache = mlp_forward_cached(dmlp, z_hat)
        P = flat.reshape(flat.shape[:-1] + (decoder.v, decoder.p, 6))
        comps["rec"], gP, gsigma, gW = soft_field_mse(P, dparams["sigma"], dparams["W"], feats, batch.targets)
        dw, db, gz = mlp_backward(dmlp, dcache, w["rec"] * gP.reshape(flat.shape))
        g_zhat = g_zhat + gz
        if train_decoder:
            grads.update(mlp_grads_to_params(dw, db, "param"))
            grads["sigma"] = w["rec"] * gsigma
            grads["W"] = w["rec"] * gW + w["w"] * g_wreg
    elif train_decoder:
        grads.update({k: np.zeros_like(v) for k, v in decoder.mlp.to_params("param").items()})
        grads["sigma"] = np.zeros_like(dparams["sigma"])
        grads["W"] = w["w"] * g_wreg

    mw, mb, g_cat = mlp_backward(mrg, merge_cache, g_zhat)
    grads.update(mlp_grads_to_params(mw, mb, "merge"))
    g_sep[:B, :F] += g_cat[:, :F]
    g_sep[B : 2 * B, F:] += g_cat[:, F:]
    sw, sb, _ = mlp_backward(sep, sep_cache, g_sep)
    grads.update(mlp_grads_to_params(sw, sb, "sep"))

    total = sum(w[k] * v for k, v in comps.items())
    return total, grads, comps


def _hidden_pre(cache: list[np.ndarray]) -> list[np.ndarray]:
    return [a.ravel() for a in cache[1:-2:2]]


def transfer_kinks(params: Params, batch: TripletBatch, template: TransferModel, decoder: DecoderModel, feats) -> np.ndarray:
    """Arguments of every relu, clamp and |.| in ``transfer_loss_and_grad`` (for finite-difference guarding)."""
    sep = template.sep.with_params(params, "sep")
    mrg = template.merge.with_params(params, "merge")
    F, B = template.style_dim, len(batch)
    out, sep_cache = mlp_forward_cached(sep, np.concatenate([batch.z_s1c1, batch.z_s2c2, batch.z_s1c2]))
    f1, h2 = out[:B, :F], out[B : 2 * B, F:]
    f3, h3 = out[2 * B :, :F], out[2 * B :, F:]
    z_hat, merge_cache = mlp_forward_cached(mrg, np.concatenate([f1, h2], axis=-1))
    parts = _hidden_pre(sep_cache) + _hidden_pre(merge_cache)
    parts += [(h3 - h2).ravel(), (f1 - f3).ravel(), (z_hat - batch.z_s1c2).ravel()]
    dparams = params if _decoder_keys(params) else decoder.to_params()
    parts.append(np.asarray(dparams["W"]).ravel() - 1)
    if batch.targets is not None:
        dmlp = decoder.mlp.with_params(dparams, "param")
        flat, dcache = mlp_forward_cached(dmlp, z_hat)
        P = flat.reshape(flat.shape[:-1] + (decoder.v, decoder.p, 6))
        _, fc = soft_field_forward(P, dparams["sigma"], dparams["W"], feats)
        parts += _hidden_pre(dcache) + [(fc.d * np.asarray(dparams["sigma"]).reshape(-1)).ravel(), fc.S.ravel(), fc.S.ravel() - 1]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TransferConfig:
    iterations: int = 10000
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    hidden: int = 256
    style_dim: int = STYLE_DIM
    lambda_w: float = 0.1
    lambda_cont: float = 0.1
    lambda_style: float = 0.1
    lambda_latent: float = 0.1
    lambda_cate: float = 0.05
    finetune_decoder: bool = True
    detach_classifier: bool = True
    dtype: str = "float32"
    deterministic: bool = True
    divergence_ratio: float | None = DEFAULT_DIVERGENCE_RATIO

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if min(self.lambda_w, self.lambda_cont, self.lambda_style, self.lambda_latent, self.lambda_cate) < 0:
            raise ValueError("loss weights must be non-negative")

    def lambdas(self) -> dict[str, float]:
        return {
            "lambda_w": self.lambda_w,
            "lambda_cont": self.lambda_cont,
            "lambda_style": self.lambda_style,
            "lambda_latent": self.lambda_latent,
            "lambda_cate": self.lambda_cate,
        }


@dataclass
class TransferResult:
    model: TransferModel
    decoder: DecoderModel
    trace: np.ndarray = field(repr=False)


def _font_index(data: FontDataset, table: LatentTable) -> tuple[list[str], np.ndarray]:
    names = [f.name for f in data.train if all((f.name, c) in table for c in range(N_CLASSES))]
    if len(names) < 2:
        raise ValueError("transfer training needs at least two training fonts with codes for every character")
    idx = np.array([[table.index_of((n, c)) for c in range(N_CLASSES)] for n in names])
    return names, idx


def train_transfer(
    data: FontDataset,
    table: LatentTable,
    decoder: DecoderModel,
    cfg: TransferConfig | None = None,
) -> TransferResult:
    """Optimize ``M_sep``, ``M_merge`` and the classifier (and the decoder unless frozen) on random triplets.

    Glyph codes stay fixed.  Trace rows: iteration, total, then the components
    in ``LOSS_NAMES`` order, all evaluated before the update.
    """
    cfg = cfg or TransferConfig()
    names, idx = _font_index(data, table)
    dtype = np.dtype(cfg.dtype)
    images = np.stack([data.font(n).images for n in names])
    size = images.shape[-1]
    targets = images.reshape(len(names), N_CLASSES, -1).astype(dtype)
    feats = grid_features(size, dtype)
    codes = table.codes.astype(dtype)
    template = init_transfer_model(decoder.latent_dim, cfg.hidden, cfg.style_dim, cfg.seed, **cfg.lambdas())
    decoder32 = decoder.astype(dtype)
    params = {k: np.asarray(a, dtype=dtype) for k, a in template.to_params().items()}
    if cfg.finetune_decoder:
        params.update(decoder32.to_params())
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(cfg.lr)
    nf, B = len(names), cfg.batch_size
    trace = np.zeros((cfg.iterations, 2 + len(LOSS_NAMES)))
    with compute_context(cfg.deterministic):
        for it in range(cfg.iterations):
            s1 = rng.integers(nf, size=B)
            s2 = (s1 + rng.integers(1, nf, size=B)) % nf
            c1 = rng.integers(N_CLASSES, size=B)
            c2 = rng.integers(N_CLASSES, size=B)
            batch = TripletBatch(codes[idx[s1, c1]], codes[idx[s2, c2]], codes[idx[s1, c2]], c1, c2, targets[s1, c2])
            try:
                total, grads, comps = transfer_loss_and_grad(
                    params, batch, template, decoder32, feats, detach_classifier=cfg.detach_classifier
                )
                if not np.isfinite(total):
                    raise NonFiniteError(f"non-finite transfer loss at iteration {it}")
                trace[it] = (it, total, *(comps[k] for k in LOSS_NAMES))
                check_divergence(total, trace[0, 1], cfg.divergence_ratio, it)
                params, state = adam_step(state, params, grads)
            except NonFiniteError as err:
                err.trace = trace[: it + 1]
                raise
            if it % 500 == 0:
                log.info("transfer iteration %d: total %.5f (rec %.5f, cate %.4f, c %.4f)", it, total, comps["rec"], comps["cate"], comps["c"])
    model = template.with_params(params).astype(float)
    out_decoder = decoder32.with_params(params).astype(float) if cfg.finetune_decoder else decoder
    return TransferResult(model, out_decoder, trace)


def smoothed(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    values = np.asarray(values, dtype=float)
    window = max(1, min(window, len(values)))
    c = np.cumsum(np.concatenate([[0.0], values]))
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------------------
# One-shot generation
# ---------------------------------------------------------------------------


@dataclass
class GlyphModels:
    """Everything one-shot generation needs: codes of known glyphs, decoder, transfer heads.

    ``latent_decoder`` is the decoder the codes were learned against; images are
    embedded with it.  It differs from ``decoder`` once transfer training has
    fine-tuned the latter, and defaults to it.
    """

    table: LatentTable
    decoder: DecoderModel
    transfer: TransferModel
    infer: InferConfig = field(default_factory=InferConfig)
    latent_decoder: DecoderModel | None = None

    def embed(self, img: RasterImage) -> np.ndarray:
        return infer_latent(img, self.latent_decoder or self.decoder, self.infer)


def resolve_latent(item, models: GlyphModels) -> np.ndarray:
    """A code for ``item``: a glyph id or (font, char) key in the table, an image to embed, or a code itself."""
    if isinstance(item, RasterImage):
        return models.embed(item)
    if isinstance(item, (str, tuple)):
        return models.table[item]
    z = np.asarray(item, dtype=float)
    if z.shape != (models.decoder.latent_dim,):
        raise ValueError(f"expected a glyph id, an image or a {models.decoder.latent_dim}-dim code")
    return z


def transfer_one_shot(style, content, models: GlyphModels, size: int = 64) -> RasterImage:
    """Render the glyph with the style of ``style`` and the character of ``content``."""
    z = transfer_latent(resolve_latent(style, models), resolve_latent(content, models), models.transfer)
    return render_soft(decode(z, models.decoder), size)


def generate_font(style, contents: Sequence, models: GlyphModels, size: int = 64) -> list[RasterImage]:
    """One output per content reference (normally the 26 glyphs of a reference font), all in ``style``."""
    z_style = resolve_latent(style, models)
    f, _ = separate(z_style, models.transfer)
    out = []
    for item in contents:
        _, h = separate(resolve_latent(item, models), models.transfer)
        out.append(render_soft(decode(merge(f, h, models.transfer), models.decoder), size))
    return out
