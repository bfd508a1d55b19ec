"""Command-line entry point.

Every command prints one JSON summary on stdout and sends diagnostics to
stderr.  Exit status: 0 success, 1 usage or I/O error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np

from .checkpoint import (
    CheckpointError,
    load_manifold,
    load_shape,
    load_transfer,
    read_checkpoint,
    save_manifold,
    save_shape,
    save_transfer,
)
from .config import ConfigError, RunConfig, load_config
from .contours import export_svg, extract_contours
from .datasets import (
    LETTERS,
    TOY_FONTS,
    TOY_VALIDATION,
    DatasetError,
    build_dataset,
    load_dataset,
    save_dataset,
)
from .fitting import FitConfig, fit_glyph, write_trace_csv
from .grad import NonFiniteError
from .kernel import DEFAULT_W_MIN, GlyphShapeParams
from .manifold import (
    InferConfig,
    ManifoldConfig,
    decode,
    glyph_id,
    infer_latent,
    interpolate,
    reconstruction_ssim,
    train_autodecoder,
)
from .raster import (
    ImageFormatError,
    atomic_write,
    compare,
    load_image,
    render_hard,
    render_soft,
    save_image,
)
from .transfer import (
    TRACE_HEADER,
    TransferConfig,
    generate_font,
    train_transfer,
    transfer_one_shot,
)

log = logging.getLogger("implicit_glyph")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def _sha256_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            h.update(str(q.relative_to(p) if p.is_dir() else q.name).encode())
            h.update(q.read_bytes())
    return h.hexdigest()


def _summary(command: str, cfg: RunConfig, inputs, outputs: dict, metrics: dict | None = None, **extra) -> dict:
    return {
        "command": command,
        "status": "ok",
        "seed": cfg.seed,
        "config": cfg.as_dict(),
        "config_hash": cfg.digest(),
        "input_hash": _sha256_files(inputs),
        "outputs": outputs,
        "metrics": metrics or {},
        **extra,
    }


def _glyph_shape(path, glyph: str | None) -> GlyphShapeParams:
    """A shape from a shape checkpoint, or one glyph of a manifold/transfer checkpoint."""
    kind = read_checkpoint(path).kind
    if kind == "shape":
        if glyph:
            raise UsageError("--glyph only applies to manifold checkpoints")
        return load_shape(path)
    if not glyph:
        raise UsageError(f"{kind} checkpoints need --glyph <font>/<letter>")
    table, model = load_manifold(path)
    return decode(table[glyph], model)


def _trace_path(out: str, given: str | None) -> Path:
    return Path(given) if given else Path(out).with_suffix(".csv")


def _write_csv(path: Path, header, rows: np.ndarray) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([str(int(row[0]))] + [repr(float(x)) for x in row[1:]]))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args, cfg: RunConfig) -> dict:
    img = load_image(args.image, invert=args.invert)
    fc = FitConfig(
        iterations=cfg.get("iterations", 20000),
        batch_size=cfg.batch_size,
        lambda_w=cfg.get("lambda_w", 0.1),
        lambda_hard=cfg.get("lambda_hard", 1.0),
        seed=cfg.get("seed", 0),
        resolution=cfg.resolution,
        v=cfg.get("v", 16),
        p=cfg.get("p", 6),
        lr=cfg.get("lr", 1e-4),
        deterministic=cfg.get("deterministic", True),
    )
    res = fit_glyph(img, fc)
    save_shape(args.output, res.params, {"seed": fc.seed, "iterations": fc.iterations})
    trace = _trace_path(args.output, args.trace)
    write_trace_csv(res.trace, trace)
    target = img if fc.resolution in (None, img.height) else None
    metrics = {"loss_total": float(res.trace[-1, -1]), "loss_rec": float(res.trace[-1, 1])}
    if target is not None and img.height == img.width:
        metrics["ssim"] = compare(render_soft(res.params, img.height, img.width), img).ssim
    return _summary("fit", cfg, [args.image], {"checkpoint": str(args.output), "trace": str(trace)}, metrics)


def cmd_render(args, cfg: RunConfig) -> dict:
    shape = _glyph_shape(args.checkpoint, args.glyph)
    size = cfg.get("size", 64)
    if args.mode == "soft":
        img = render_soft(shape, size)
    else:
        img = render_hard(shape, size, w_min=cfg.get("w_min", DEFAULT_W_MIN), mode=args.hard_mode)
    save_image(img, args.output)
    return _summary("render", cfg, [args.checkpoint], {"image": str(args.output)}, {"size": size, "mode": args.mode})


def cmd_interp(args, cfg: RunConfig) -> dict:
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    table, model = load_manifold(args.checkpoint)
    for gid in (args.glyph_a, args.glyph_b):
        if gid not in table:
            raise KeyError(f"glyph {gid!r} is not in the latent table")
    z1, z2 = table[args.glyph_a], table[args.glyph_b]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.get("size", 64)
    files = []
    for k in range(args.steps + 1):
        t = 1.0 if k == args.steps else k / args.steps
        path = out / f"interp_{k:03d}.pgm"
        save_image(render_soft(decode(interpolate(z1, z2, t), model), size), path)
        files.append(str(path))
    return _summary("interp", cfg, [args.checkpoint], {"images": files}, {"steps": args.steps})


def _dataset(path) -> Any:
    if path is None:
        raise UsageError("a dataset directory is required")
    ds = load_dataset(path)
    if not ds.train:
        raise DatasetError(f"dataset {path} has no training fonts")
    return ds


def cmd_train(args, cfg: RunConfig) -> dict:
    ds = _dataset(args.dataset or cfg.dataset)
    mc = ManifoldConfig(
        iterations=cfg.get("iterations", 5000),
        batch_glyphs=cfg.get("batch_size", 32),
        lr=cfg.get("lr", 1e-4),
        latent_lr=cfg.get("latent_lr", 1e-3),
        lambda_w=cfg.get("lambda_w", 0.1),
        seed=cfg.get("seed", 0),
        v=cfg.get("v", 16),
        p=cfg.get("p", 6),
        warm_start_iterations=cfg.get("warm_start_iterations", 3000),
        deterministic=cfg.get("deterministic", True),
        checkpoint_path=str(args.output),
    )
    res = train_autodecoder(ds, mc)
    save_manifold(args.output, res.table, res.model, {"seed": mc.seed, "iterations": mc.iterations})
    trace = _trace_path(args.output, args.trace)
    write_trace_csv(res.trace, trace)
    scores = reconstruction_ssim(res.table, res.model, ds)
    metrics = {"reconstruction_ssim_mean": float(scores.mean()), "reconstruction_ssim_min": float(scores.min()), "glyphs": len(scores)}
    return _summary("train", cfg, [args.dataset or cfg.dataset], {"checkpoint": str(args.output), "trace": str(trace)}, metrics)


def cmd_transfer(args, cfg: RunConfig) -> dict:
    ds = _dataset(args.dataset or cfg.dataset)
    table, decoder = load_manifold(args.manifold)
    tc = TransferConfig(
        iterations=cfg.get("iterations", 10000),
        batch_size=cfg.get("batch_size", 32),
        lr=cfg.get("lr", 1e-4),
        seed=cfg.get("seed", 0),
        lambda_w=cfg.get("lambda_w", 0.1),
        lambda_cont=cfg.get("lambda_cont", 0.1),
        lambda_style=cfg.get("lambda_style", 0.1),
        lambda_latent=cfg.get("lambda_latent", 0.1),
        lambda_cate=cfg.get("lambda_cate", 0.05),
        finetune_decoder=cfg.get("finetune_decoder", True),
        deterministic=cfg.get("deterministic", True),
    )
    res = train_transfer(ds, table, decoder, tc)
    save_transfer(args.output, table, decoder, res.model, {"seed": tc.seed, "iterations": tc.iterations},
                  gen_decoder=res.decoder if tc.finetune_decoder else None)
    trace = _trace_path(args.output, args.trace)
    _write_csv(trace, TRACE_HEADER, res.trace)
    metrics = {"loss_total_first": float(res.trace[0, 1]) if len(res.trace) else None,
               "loss_total_last": float(res.trace[-1, 1]) if len(res.trace) else None}
    return _summary("transfer", cfg, [args.dataset or cfg.dataset, args.manifold], {"checkpoint": str(args.output), "trace": str(trace)}, metrics)


def _infer_cfg(cfg: RunConfig) -> InferConfig:
    return InferConfig(
        iterations=cfg.get("infer_iterations", 300),
        lr=cfg.get("infer_lr", 1e-2),
        lambda_w=cfg.get("lambda_w", 0.1),
        deterministic=cfg.get("deterministic", True),
    )


def cmd_infer(args, cfg: RunConfig) -> dict:
    img = load_image(args.image, invert=args.invert)
    _, model = load_manifold(args.checkpoint)
    z = infer_latent(img, model, _infer_cfg(cfg))
    shape = decode(z, model)
    save_shape(args.output, shape)
    outputs = {"checkpoint": str(args.output)}
    if args.latent:
        atomic_write(args.latent, ("\n".join(repr(float(x)) for x in z) + "\n").encode())
        outputs["latent"] = str(args.latent)
    metrics = {"ssim": compare(render_soft(shape, img.height, img.width), img).ssim}
    return _summary("infer", cfg, [args.checkpoint, args.image], outputs, metrics)


def _reference(item: str, table):
    """A glyph id in the table, else an image path."""
    if "/" in item and not Path(item).exists():
        return item
    if Path(item).exists():
        return load_image(item)
    if item in table:
        return item
    raise FileNotFoundError(f"{item!r} is neither a known glyph id nor an image file")


def cmd_generate(args, cfg: RunConfig) -> dict:
    models = load_transfer(args.checkpoint)
    models.infer = _infer_cfg(cfg)
    table = models.table
    size = cfg.get("size", 64)
    style = _reference(args.style, table)
    if args.content:
        img = transfer_one_shot(style, _reference(args.content, table), models, size)
        save_image(img, args.output)
        outputs: dict = {"image": str(args.output)}
    else:
        font = args.content_font
        contents = [glyph_id(font, c) for c in range(len(LETTERS))]
        missing = [c for c in contents if c not in table]
        if missing:
            raise KeyError(f"content font {font!r} lacks codes for {', '.join(missing)}")
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for ch, img in zip(LETTERS, generate_font(style, contents, models, size)):
            save_image(img, out / f"{ch}.pgm")
            files.append(str(out / f"{ch}.pgm"))
        outputs = {"images": files}
    inputs = [args.checkpoint] + [p for p in (args.style, args.content) if p and Path(p).exists()]
    return _summary("generate", cfg, inputs, outputs)


def cmd_export_svg(args, cfg: RunConfig) -> dict:
    shape = _glyph_shape(args.checkpoint, args.glyph)
    contours = extract_contours(shape, cfg.get("grid_res", 512), cfg.get("w_min", DEFAULT_W_MIN))
    atomic_write(args.output, export_svg(contours, args.view_size).encode())
    return _summary("export-svg", cfg, [args.checkpoint], {"svg": str(args.output)}, {"contours": len(contours)})


def _image_files(path: Path) -> dict[str, Path]:
    if path.is_file():
        return {path.name: path}
    if not path.is_dir():
        raise FileNotFoundError(f"{path} does not exist")
    return {str(q.relative_to(path)): q for q in sorted(path.rglob("*")) if q.suffix.lower() in (".pgm", ".png")}


def cmd_eval(args, cfg: RunConfig) -> dict:
    a, b = Path(args.reference), Path(args.candidate)
    fa, fb = _image_files(a), _image_files(b)
    if a.is_file() and b.is_file():
        pairs = [(a.name, a, b)]
    else:
        names = sorted(set(fa) & set(fb))
        if set(fa) != set(fb):
            raise UsageError(f"image sets differ: {sorted(set(fa) ^ set(fb))[:5]}")
        pairs = [(n, fa[n], fb[n]) for n in names]
    if not pairs:
        raise UsageError("no images to compare")
    per = {}
    for name, pa, pb in pairs:
        rep = compare(load_image(pa), load_image(pb))
        per[name] = {"ssim": rep.ssim, "l1": rep.l1}
    metrics = {
        "ssim": float(np.mean([m["ssim"] for m in per.values()])),
        "l1": float(np.mean([m["l1"] for m in per.values()])),
        "images": len(per),
    }
    return _summary("eval", cfg, [a, b], {}, metrics, per_image=per)


def cmd_make_dataset(args, cfg: RunConfig) -> dict:
    specs = TOY_FONTS if not args.fonts else [s for s in TOY_FONTS if s.name in set(args.fonts.split(","))]
    if not specs:
        raise UsageError("no fonts selected")
    ds = build_dataset(specs, TOY_VALIDATION)
    save_dataset(ds, args.output)
    return _summary("make-dataset", cfg, [], {"dataset": str(args.output)}, {"fonts": len(ds.fonts), "train": len(ds.train)})


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-style key = value file; flags override it")
    p.add_argument("--seed", type=int)
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                     help="single-threaded, bit-reproducible (default)")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                     help="allow multi-threaded BLAS (see IMPLICIT_GLYPH_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-w", type=float)
    p.add_argument("--trace", help="loss trace CSV (default: output with .csv suffix)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="implicit-glyph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one glyph image")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--v", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--invert", action="store_true", help="image is white ink on black")
    p.add_argument("--lambda-hard", type=float, help="weight of the hard-field hinge (0 disables it)")
    _train_flags(p)
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a checkpoint to PGM")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--mode", choices=("soft", "hard"), default="soft")
    p.add_argument("--hard-mode", choices=("occupancy", "threshold"), default="occupancy")
    p.add_argument("--w-min", type=float)
    p.add_argument("--glyph", help="glyph id <font>/<letter> for manifold checkpoints")
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("interp", help="render a latent interpolation between two glyphs")
    p.add_argument("checkpoint")
    p.add_argument("glyph_a")
    p.add_argument("glyph_b")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--size", type=int)
    p.add_argument("-o", "--output", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("train", help="train the auto-decoder on a font dataset")
    p.add_argument("dataset", nargs="?")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--latent-lr", type=float)
    p.add_argument("--v", type=int)
    p.add_argument("--p", type=int)
    _train_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="train the style-transfer heads on a trained manifold")
    p.add_argument("dataset")
    p.add_argument("manifold", help="manifold checkpoint")
    p.add_argument("-o", "--output", required=True)
    for name in ("cont", "style", "latent", "cate"):
        p.add_argument(f"--lambda-{name}", type=float)
    fz = p.add_mutually_exclusive_group()
    fz.add_argument("--freeze-decoder", dest="finetune_decoder", action="store_false", default=None)
    fz.add_argument("--finetune-decoder", dest="finetune_decoder", action="store_true")
    _train_flags(p)
    _common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("infer", help="embed an image with a trained decoder")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True, help="shape checkpoint of the decoded glyph")
    p.add_argument("--latent", help="also write the code, one value per line")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--infer-iterations", type=int)
    p.add_argument("--infer-lr", type=float)
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("generate", help="one-shot transfer with a transfer checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--style", required=True, help="glyph id or image path")
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--content", help="glyph id or image path")
    grp.add_argument("--content-font", help="font in the table whose 26 glyphs are the content references")
    p.add_argument("--size", type=int)
    p.add_argument("--infer-iterations", type=int)
    p.add_argument("-o", "--output", required=True, help="image (with --content) or directory")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("export-svg", help="trace the hard field into an SVG outline")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--grid-res", type=int)
    p.add_argument("--view-size", type=float, default=512.0)
    p.add_argument("--w-min", type=float)
    p.add_argument("--glyph")
    _common(p)
    p.set_defaults(func=cmd_export_svg)

    p = sub.add_parser("eval", help="SSIM and L1 between two images or two image directories")
    p.add_argument("reference")
    p.add_argument("candidate")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-dataset", help="render the toy font dataset from installed fonts")
    p.add_argument("output")
    p.add_argument("--fonts", help="comma-separated subset of the toy font names")
    _common(p)
    p.set_defaults(func=cmd_make_dataset)
    return parser


_OVERRIDES = (
    "seed", "deterministic", "v", "p", "iterations", "lr", "latent_lr", "batch_size", "resolution", "size",
    "grid_res", "w_min", "lambda_w", "lambda_hard", "lambda_cont", "lambda_style", "lambda_latent", "lambda_cate",
    "infer_iterations", "infer_lr", "finetune_decoder",
)


def _run(argv, emit: Callable[[str], None]) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        base = load_config(args.config) if args.config else RunConfig()
        cfg = base.merged({k: getattr(args, k, None) for k in _OVERRIDES})
        summary = args.func(args, cfg)
    except NonFiniteError as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, DatasetError, ImageFormatError, KeyError, ValueError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {err.strerror or err}: {err.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_USAGE
    emit(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    return _run(argv, print)


if __name__ == "__main__":
    sys.exit(main())
