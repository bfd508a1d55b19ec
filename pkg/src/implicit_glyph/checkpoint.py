"""Versioned single-file checkpoints.

Layout::

    IGCKPT <version>\\n
    <header JSON, one line>\\n
    <payload: raw little-endian arrays, concatenated in header order>

The header holds ``kind`` ("shape", "manifold" or "transfer"), a ``meta``
object, the ordered ``arrays`` list (name, dtype, shape), the payload length
and its CRC-32.  Truncated or altered files are rejected.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grad import MlpWeights
from .kernel import GlyphShapeParams
from .raster import atomic_write

MAGIC = b"IGCKPT"
VERSION = 1
KINDS = ("shape", "manifold", "transfer")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    arrays: dict[str, np.ndarray]


def encode_checkpoint(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    blobs, entries = [], []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        entries.append({"name": name, "dtype": "<f8", "shape": list(a.shape)})
        blobs.append(a.tobytes())
    payload = b"".join(blobs)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": entries,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + b" %d\n" % VERSION + head + b"\n" + payload


def decode_checkpoint(data: bytes) -> Checkpoint:
    first, sep, rest = data.partition(b"\n")
    if not sep or not first.startswith(MAGIC + b" "):
        raise CheckpointError("not a checkpoint file")
    try:
        version = int(first[len(MAGIC) + 1 :])
    except ValueError:
        raise CheckpointError("malformed checkpoint version") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    head, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(head)
        kind, meta, entries = header["kind"], header["meta"], header["arrays"]
        size, crc = int(header["payload_bytes"]), int(header["crc32"])
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointError(f"malformed checkpoint header: {err}") from None
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    if len(payload) != size:
        raise CheckpointError(f"checkpoint payload has {len(payload)} bytes, header says {size} (truncated?)")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint payload checksum mismatch")
    arrays, pos = {}, 0
    for e in entries:
        shape = tuple(int(n) for n in e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if e.get("dtype") != "<f8" or end > size:
            raise CheckpointError(f"bad array entry {e.get('name')!r}")
        arrays[e["name"]] = np.frombuffer(payload[pos:end], dtype="<f8").reshape(shape).astype(float)
        pos = end
    if pos != size:
        raise CheckpointError("checkpoint payload has trailing bytes")
    return Checkpoint(kind, meta, arrays)


def write_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(kind, meta, arrays))


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err.strerror or err}") from None
    return decode_checkpoint(data)


# ---------------------------------------------------------------------------
# Typed helpers.  Field order per kind:
#   shape:    P (v,p,6), sigma (v,p), W (v)
#   manifold: param.w0, param.b0, param.w1, ...; sigma; W; latents (n, L)
#   transfer: the manifold fields, then sep.*, merge.*, cls.* (w/b interleaved per layer),
#             then gen.param.*, gen.sigma, gen.W when the decoder was fine-tuned
# ---------------------------------------------------------------------------


def shape_arrays(shape: GlyphShapeParams) -> dict[str, np.ndarray]:
    return {"P": shape.P, "sigma": shape.sigma, "W": shape.W}


def save_shape(path, shape: GlyphShapeParams, meta: dict | None = None) -> None:
    write_checkpoint(path, "shape", {"v": shape.v, "p": shape.p, **(meta or {})}, shape_arrays(shape))


def _mlp_meta(mlp: MlpWeights) -> dict:
    return {"dims": mlp.dims, "hidden": mlp.hidden_activation, "output": mlp.output_activation}


def _mlp_from(ckpt: Checkpoint, prefix: str) -> MlpWeights:
    info = ckpt.meta.get(prefix)
    if not isinstance(info, dict) or "dims" not in info:
        raise CheckpointError(f"checkpoint lacks the {prefix!r} network")
    n = len(info["dims"]) - 1
    try:
        return MlpWeights(
            [ckpt.arrays[f"{prefix}.w{k}"] for k in range(n)],
            [ckpt.arrays[f"{prefix}.b{k}"] for k in range(n)],
            info.get("hidden", "relu"),
            info.get("output", "linear"),
        )
    except KeyError as err:
        raise CheckpointError(f"checkpoint lacks array {err}") from None
    except ValueError as err:
        raise CheckpointError(str(err)) from None


def load_shape(path) -> GlyphShapeParams:
    ckpt = read_checkpoint(path)
    if ckpt.kind == "shape":
        try:
            return GlyphShapeParams(ckpt.arrays["P"], ckpt.arrays["sigma"], ckpt.arrays["W"])
        except (KeyError, ValueError) as err:
            raise CheckpointError(f"bad shape checkpoint: {err}") from None
    raise CheckpointError(f"expected a shape checkpoint, found {ckpt.kind!r}")


def manifold_meta_and_arrays(table, model) -> tuple[dict, dict[str, np.ndarray]]:
    from .manifold import glyph_id

    meta = {
        "v": model.v,
        "p": model.p,
        "latent_dim": model.latent_dim,
        "param": _mlp_meta(model.mlp),
        "glyphs": [glyph_id(f, c) for f, c in table.keys],
    }
    arrays = {**model.mlp.to_params("param"), "sigma": model.sigma, "W": model.W, "latents": table.codes}
    return meta, arrays


def save_manifold(path, table, model, meta: dict | None = None) -> None:
    m, arrays = manifold_meta_and_arrays(table, model)
    write_checkpoint(path, "manifold", {**m, **(meta or {})}, arrays)


def _manifold_from(ckpt: Checkpoint):
    from .manifold import DecoderModel, LatentTable, parse_glyph_id

    try:
        model = DecoderModel(_mlp_from(ckpt, "param"), ckpt.arrays["sigma"], ckpt.arrays["W"])
        keys = [parse_glyph_id(g) for g in ckpt.meta["glyphs"]]
        table = LatentTable(keys, ckpt.arrays["latents"])
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"bad manifold checkpoint: {err}") from None
    return table, model


def load_manifold(path):
    """``(LatentTable, DecoderModel)`` from a manifold or transfer checkpoint."""
    ckpt = read_checkpoint(path)
    if ckpt.kind not in ("manifold", "transfer"):
        raise CheckpointError(f"expected a manifold checkpoint, found {ckpt.kind!r}")
    return _manifold_from(ckpt)


def save_transfer(path, table, decoder, model, meta: dict | None = None, gen_decoder=None) -> None:
    """``decoder`` defines the latent space of ``table``; ``gen_decoder`` is the fine-tuned copy used for generation."""
    m, arrays = manifold_meta_and_arrays(table, decoder)
    m.update({
        "sep": _mlp_meta(model.sep),
        "merge": _mlp_meta(model.merge),
        "cls": _mlp_meta(model.classifier),
        "lambdas": model.lambdas(),
        "style_dim": model.style_dim,
    })
    arrays.update(model.to_params())
    if gen_decoder is not None:
        m["gen.param"] = _mlp_meta(gen_decoder.mlp)
        arrays.update(gen_decoder.mlp.to_params("gen.param"))
        arrays["gen.sigma"] = gen_decoder.sigma
        arrays["gen.W"] = gen_decoder.W
    write_checkpoint(path, "transfer", {**m, **(meta or {})}, arrays)


def load_transfer(path):
    """A ``GlyphModels`` bundle: latent table, generation decoder, transfer heads and the latent-space decoder."""
    from .manifold import DecoderModel
    from .transfer import GlyphModels, TransferModel

    ckpt = read_checkpoint(path)
    if ckpt.kind != "transfer":
        raise CheckpointError(f"expected a transfer checkpoint, found {ckpt.kind!r}")
    table, decoder = _manifold_from(ckpt)
    try:
        model = TransferModel(
            _mlp_from(ckpt, "sep"),
            _mlp_from(ckpt, "merge"),
            _mlp_from(ckpt, "cls"),
            style_dim=int(ckpt.meta["style_dim"]),
            **{k: float(v) for k, v in ckpt.meta["lambdas"].items()},
        )
        gen = decoder
        if "gen.param" in ckpt.meta:
            gen = DecoderModel(_mlp_from(ckpt, "gen.param"), ckpt.arrays["gen.sigma"], ckpt.arrays["gen.W"])
    except (KeyError, ValueError, TypeError) as err:
        raise CheckpointError(f"bad transfer checkpoint: {err}") from None
    return GlyphModels(table, gen, model, latent_decoder=decoder)
