"""Auto-decoder over a font dataset.

Every training glyph owns a free latent code; a shared MLP maps codes to
curve coefficients, and ``sigma``/``W`` are global.  Codes and decoder are
optimized jointly, and unseen images are embedded by optimizing a fresh code
against the frozen decoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import LETTERS, FontDataset, char_index
from .fitting import default_constant_offset
from .grad import (
    DEFAULT_DIVERGENCE_RATIO,
    AdamState,
    MlpWeights,
    NonFiniteError,
    Params,
    adam_step,
    check_divergence,
    compute_context,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_grads_to_params,
    mlp_init,
    soft_field_mse,
    weight_loss_and_grad,
)
from .kernel import GlyphShapeParams, curve_features
from .raster import RasterImage, pixel_centers, render_soft, ssim

log = logging.getLogger(__name__)

LATENT_DIM = 256


@dataclass
class DecoderModel:
    """``M_param`` (latent -> 6vp coefficients) plus global ``sigma`` and ``W``."""

    mlp: MlpWeights
    sigma: np.ndarray
    W: np.ndarray

    def __post_init__(self) -> None:
        v, p = self.sigma.shape
        if self.W.shape != (v,):
            raise ValueError(f"W must have shape ({v},)")
        if self.mlp.dims[-1] != 6 * v * p:
            raise ValueError(f"M_param must emit {6 * v * p} values, emits {self.mlp.dims[-1]}")

    @property
    def v(self) -> int:
        return self.sigma.shape[0]

    @property
    def p(self) -> int:
        return self.sigma.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.mlp.dims[0]

    def to_params(self) -> Params:
        return {**self.mlp.to_params("param"), "sigma": self.sigma, "W": self.W}

    def with_params(self, params: Params) -> DecoderModel:
        return DecoderModel(self.mlp.with_params(params, "param"), params["sigma"], params["W"])

    def astype(self, dtype) -> DecoderModel:
        return DecoderModel(self.mlp.astype(dtype), self.sigma.astype(dtype), self.W.astype(dtype))


def init_decoder(
    v: int = 16,
    p: int = 6,
    latent_dim: int = LATENT_DIM,
    hidden: int = 256,
    seed: int = 0,
    init_scale: float = 0.1,
) -> DecoderModel:
    """He-initialized ``M_param`` whose output bias is a random starting shape.

    The output layer is scaled down so that every code initially decodes to
    roughly that shape, which starts inside the soft clamp's active range.
    """
    mlp = mlp_init([latent_dim, hidden, 6 * v * p], seed)
    rng = np.random.default_rng(seed + 1)
    bias = np.empty((v, p, 6))
    bias[..., :3] = rng.normal(0.0, 0.2 * init_scale, size=(v, p, 3))
    bias[..., 3:] = rng.normal(0.0, init_scale, size=(v, p, 3))
    bias[..., 5] += default_constant_offset(v, p)
    mlp.weights[-1] *= init_scale
    mlp.biases[-1] = bias.reshape(-1)
    return DecoderModel(mlp, np.ones((v, p)), np.ones(v))


def decode(z, model: DecoderModel) -> GlyphShapeParams:
    z = np.asarray(z, dtype=float)
    P = mlp_forward(model.mlp, z).reshape(model.v, model.p, 6)
    return GlyphShapeParams(P, model.sigma, model.W)


@dataclass
class LatentTable:
    keys: list[tuple[str, int]]
    codes: np.ndarray

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=float)
        if self.codes.shape[0] != len(self.keys):
            raise ValueError("one code per key is required")
        self._index = {k: i for i, k in enumerate(self.keys)}
        if len(self._index) != len(self.keys):
            raise ValueError("latent table keys must be unique")

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return _norm_key(key) in self._index

    def __getitem__(self, key) -> np.ndarray:
        return self.codes[self.index_of(key)]

    def index_of(self, key) -> int:
        return self._index[_norm_key(key)]


def _norm_key(key) -> tuple[str, int]:
    if isinstance(key, str):
        return parse_glyph_id(key)
    font, char = key
    return font, char_index(char)


def glyph_id(font: str, char: int) -> str:
    return f"{font}/{LETTERS[char]}"


def parse_glyph_id(text: str) -> tuple[str, int]:
    """``"font/A"`` -> ``("font", 0)``."""
    font, sep, ch = text.rpartition("/")
    if not sep or not font:
        raise KeyError(f"glyph id {text!r} must look like '<font>/<letter>'")
    return font, char_index(ch)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class ManifoldConfig:
    iterations: int = 5000
    batch_glyphs: int = 32
    lr: float = 1e-4
    latent_lr: float | None = 1e-3  # None means lr
    lambda_w: float = 0.1
    seed: int = 0
    v: int = 16
    p: int = 6
    latent_dim: int = LATENT_DIM
    hidden: int = 256
    latent_init_std: float = 0.01
    init_scale: float = 0.1
    warm_start_iterations: int = 3000  # fit the output bias to the mean glyph first; 0 disables
    warm_start_lr: float = 1e-4
    dtype: str = "float32"
    deterministic: bool = True
    checkpoint_path: str | None = None
    divergence_ratio: float | None = DEFAULT_DIVERGENCE_RATIO

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_glyphs < 1:
            raise ValueError("iterations must be >= 0 and batch_glyphs >= 1")
        if self.lambda_w < 0:
            raise ValueError("lambda_w must be non-negative")


@dataclass
class ManifoldResult:
    table: LatentTable
    model: DecoderModel
    trace: np.ndarray = field(repr=False)


def grid_features(size: int, dtype=np.float64) -> np.ndarray:
    return curve_features(pixel_centers(size, size).reshape(-1, 2)).astype(dtype)


def decoder_loss_and_grad(params: Params, Z: np.ndarray, targets: np.ndarray, feats: np.ndarray, template: DecoderModel, lambda_w: float):
    """Reconstruction objective for a batch of codes ``Z`` (B, L) against ``targets`` (B, N).

    Returns ``(total, grads, grad_Z, (loss_rec, loss_w))``; ``grads`` covers the decoder parameters.
    """
    mlp = template.mlp.with_params(params, "param")
    v, p = template.sigma.shape
    flat, cache = mlp_forward_cached(mlp, Z)
    P = flat.reshape(flat.shape[:-1] + (v, p, 6))
    rec, gP, gsigma, gW = soft_field_mse(P, params["sigma"], params["W"], feats, targets)
    gw, gb, gZ = mlp_backward(mlp, cache, gP.reshape(flat.shape))
    lw, gw_reg = weight_loss_and_grad(params["W"])
    grads = mlp_grads_to_params(gw, gb, "param")
    grads["sigma"] = gsigma
    grads["W"] = gW + lambda_w * gw_reg
    return rec + lambda_w * lw, grads, gZ, (rec, lw)


def _training_glyphs(data: FontDataset) -> tuple[list[tuple[str, int]], np.ndarray]:
    fonts = data.train
    if not fonts:
        raise ValueError("the dataset has no training fonts")
    keys = [(f.name, c) for f in fonts for c in range(len(LETTERS))]
    images = np.concatenate([f.images for f in fonts])
    return keys, images


def train_autodecoder(data: FontDataset, cfg: ManifoldConfig | None = None) -> ManifoldResult:
    """Jointly optimize per-glyph codes, ``M_param``, ``sigma`` and ``W``.

    Trace rows: (iteration, loss_rec, loss_w, total).
    """
    cfg = cfg or ManifoldConfig()
    keys, images = _training_glyphs(data)
    dtype = np.dtype(cfg.dtype)
    size = images.shape[1]
    targets = images.reshape(len(keys), -1).astype(dtype)
    feats = grid_features(size, dtype)
    rng = np.random.default_rng(cfg.seed)
    model = init_decoder(cfg.v, cfg.p, cfg.latent_dim, cfg.hidden, cfg.seed, cfg.init_scale)
    if cfg.warm_start_iterations > 0:
        model = _warm_start(model, images.mean(axis=0), cfg)
    codes = rng.normal(0.0, cfg.latent_init_std, size=(len(keys), cfg.latent_dim))
    params = {**model.to_params(), "latents": codes}
    params = {k: np.asarray(a, dtype=dtype) for k, a in params.items()}
    latent_lr = cfg.lr if cfg.latent_lr is None else cfg.latent_lr
    state = AdamState(cfg.lr, lr_scale={"latents": latent_lr / cfg.lr if cfg.lr else 0.0})
    B = min(cfg.batch_glyphs, len(keys))
    trace = np.zeros((cfg.iterations, 4))
    order = rng.permutation(len(keys))
    cursor = 0
    with compute_context(cfg.deterministic):
        for it in range(cfg.iterations):
            if cursor + B > len(keys):
                order = rng.permutation(len(keys))
                cursor = 0
            idx = order[cursor : cursor + B]
            cursor += B
            try:
                loss, grads, gZ, (rec, lw) = decoder_loss_and_grad(
                    params, params["latents"][idx], targets[idx], feats, model, cfg.lambda_w
                )
                g_lat = np.zeros_like(params["latents"])
                g_lat[idx] = gZ
                grads["latents"] = g_lat
                trace[it] = (it, rec, lw, loss)
                check_divergence(loss, trace[0, 3], cfg.divergence_ratio, it)
                new_params, state = adam_step(state, params, grads)
                if not all(np.all(np.isfinite(a)) for a in new_params.values()):
                    raise NonFiniteError(f"parameters diverged at iteration {it}")
            except NonFiniteError as err:
                err.trace = trace[: it + 1]
                if cfg.checkpoint_path:
                    from .checkpoint import save_manifold

                    save_manifold(cfg.checkpoint_path, _table(keys, params), model.with_params(params).astype(float))
                raise
            params = new_params
            if it % 500 == 0:
                log.info("manifold iteration %d: rec %.5f, W %.4f", it, rec, lw)
    return ManifoldResult(_table(keys, params), model.with_params(params).astype(float), trace)


def _warm_start(model: DecoderModel, mean_image: np.ndarray, cfg: ManifoldConfig) -> DecoderModel:
    """Fit a single shape to the mean glyph and make it the decoder's output bias.

    Every code then starts out decoding to a plausible glyph-sized blob whose
    boundary lies in the soft clamp's active range, instead of a random shape
    that the first few updates tend to push entirely outside the clamp.
    """
    from .fitting import FitConfig, fit_glyph

    v, p = model.v, model.p
    init = GlyphShapeParams(model.mlp.biases[-1].reshape(v, p, 6), model.sigma, model.W)
    fit_cfg = FitConfig(
        iterations=cfg.warm_start_iterations, v=v, p=p, lr=cfg.warm_start_lr, lambda_w=cfg.lambda_w, lambda_hard=0.0,
        seed=cfg.seed, dtype=cfg.dtype, deterministic=cfg.deterministic,
    )
    shape = fit_glyph(RasterImage(np.clip(mean_image, 0, 1)), fit_cfg, init=init).params
    mlp = MlpWeights([w.copy() for w in model.mlp.weights], [b.copy() for b in model.mlp.biases])
    mlp.biases[-1] = shape.P.reshape(-1)
    return DecoderModel(mlp, shape.sigma, shape.W)


def _table(keys, params: Params) -> LatentTable:
    return LatentTable(list(keys), np.asarray(params["latents"], dtype=float))


@dataclass
class InferConfig:
    iterations: int = 300
    lr: float = 1e-2
    lambda_w: float = 0.1
    dtype: str = "float32"
    deterministic: bool = True


def infer_latent(img: RasterImage, model: DecoderModel, cfg: InferConfig | None = None) -> np.ndarray:
    """Embed ``img`` by optimizing a code (initialized at zero) against the frozen decoder."""
    cfg = cfg or InferConfig()
    dtype = np.dtype(cfg.dtype)
    z = np.zeros((1, model.latent_dim), dtype=dtype)
    if cfg.iterations <= 0:
        return z[0].astype(float)
    params = {k: np.asarray(a, dtype=dtype) for k, a in model.to_params().items()}
    feats = grid_features(img.height, dtype) if img.height == img.width else None
    if feats is None:
        raise ValueError("latent inference expects square images")
    target = img.pixels.reshape(1, -1).astype(dtype)
    state = AdamState(cfg.lr)
    best, best_loss = z.copy(), np.inf
    with compute_context(cfg.deterministic):
        for _ in range(cfg.iterations):
            loss, _, gZ, _ = decoder_loss_and_grad(params, z, target, feats, model, cfg.lambda_w)
            if loss < best_loss:
                best, best_loss = z.copy(), loss
            upd, state = adam_step(state, {"z": z}, {"z": gZ})
            z = upd["z"]
        loss = decoder_loss_and_grad(params, z, target, feats, model, cfg.lambda_w)[0]
        if loss < best_loss:
            best = z
    return best[0].astype(float)


def interpolate(z1, z2, t: float) -> np.ndarray:
    """``(1 - t) z1 + t z2``; the endpoints are returned bit-exactly."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter must lie in [0, 1], got {t}")
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if t == 0.0:
        return z1.copy()
    if t == 1.0:
        return z2.copy()
    return (1.0 - t) * z1 + t * z2


def reconstruct(z, model: DecoderModel, size: int = 64) -> RasterImage:
    return render_soft(decode(z, model), size)


def reconstruction_ssim(table: LatentTable, model: DecoderModel, data: FontDataset) -> np.ndarray:
    """SSIM of every training glyph's decoded render against its image, in table order."""
    scores = []
    for font, c in table.keys:
        img = data.font(font).images[c]
        scores.append(ssim(reconstruct(table[(font, c)], model, img.shape[0]), img))
    return np.asarray(scores)
