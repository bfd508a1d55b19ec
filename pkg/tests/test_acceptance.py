"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints under
"acceptance criteria".  The heavy fixtures (ten default single-glyph fits,
the toy manifold and two transfer runs) are built once per module.
"""

from __future__ import annotations

import io
import json
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE

from implicit_glyph.cli import main
from implicit_glyph.contours import export_svg, extract_contours
from implicit_glyph.datasets import CONTENT_REFERENCE_FONT, LETTERS, save_dataset
from implicit_glyph.fitting import (
    FitConfig,
    SampleBatch,
    fit_glyph,
    shape_kinks,
    shape_loss_and_grad,
)
from implicit_glyph.grad import check_gradients
from implicit_glyph.kernel import (
    GlyphShapeParams,
    eval_primitive_hard,
    eval_primitive_soft,
    eval_shape_hard,
    eval_shape_soft,
    occupancy_hard,
    transform_curves,
)
from implicit_glyph.manifold import (
    ManifoldConfig,
    decode,
    grid_features,
    infer_latent,
    init_decoder,
    interpolate,
    reconstruct,
    reconstruction_ssim,
    train_autodecoder,
)
from implicit_glyph.raster import (
    box_downsample,
    l1_metric,
    pixel_centers,
    render_hard,
    render_soft,
    ssim,
)
from implicit_glyph.transfer import (
    LOSS_NAMES,
    TransferConfig,
    TripletBatch,
    classifier_accuracy,
    init_transfer_model,
    smoothed,
    train_transfer,
    transfer_kinks,
    transfer_latent,
    transfer_loss_and_grad,
)

FIT_LETTERS = LETTERS[:10]


def record(n: int, passed: bool, detail: str, part: str = "") -> None:
    line = f"criterion {n}{part}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[f"{n} {part}"] = line
    print(line)


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sans_fits(toy_dataset):
    """Default fits of ten glyphs of the held-out sans-serif font, with per-glyph wall time."""
    font = toy_dataset.font(CONTENT_REFERENCE_FONT)
    assert font.split == "validation"
    out = []
    for ch in FIT_LETTERS:
        img = font.image(ch)
        t0 = time.perf_counter()
        res = fit_glyph(img, FitConfig())
        out.append((ch, img, res.params, time.perf_counter() - t0))
    return out


@pytest.fixture(scope="module")
def toy_manifold(toy_dataset):
    t0 = time.perf_counter()
    res = train_autodecoder(toy_dataset, ManifoldConfig())
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy_transfers(toy_dataset, toy_manifold):
    res, _ = toy_manifold
    runs = {}
    for lam in (0.05, 0.0):
        runs[lam] = train_transfer(toy_dataset, res.table, res.model, TransferConfig(lambda_cate=lam))
    return runs


# ---------------------------------------------------------------------------
# 1. Gradient fidelity
# ---------------------------------------------------------------------------


def _transfer_instance(rng, seed: int):
    L, S, B = 8, 6, 3
    dec = init_decoder(2, 2, L, 6, seed=seed, init_scale=0.3)
    model = init_transfer_model(L, 6, 3, seed=seed)
    tb = TripletBatch(rng.normal(size=(B, L)), rng.normal(size=(B, L)), rng.normal(size=(B, L)),
                      rng.integers(26, size=B), rng.integers(26, size=B), rng.uniform(size=(B, S * S)))
    feats = grid_features(S)
    prm = {**model.to_params(), **dec.to_params()}
    prm["W"] = prm["W"] + rng.normal(0, 0.2, size=prm["W"].shape)
    prm["sigma"] = prm["sigma"] + rng.normal(0, 0.2, size=prm["sigma"].shape)
    reports = []
    for name in LOSS_NAMES:
        w = {name: 1.0}
        _, g, _ = transfer_loss_and_grad(prm, tb, model, dec, feats, w, detach_classifier=False)
        reports.append(check_gradients(
            lambda q: transfer_loss_and_grad(q, tb, model, dec, feats, w, False)[0], prm, g, h=1e-5,
            coords_per_key=2, seed=seed, kinks=lambda q: transfer_kinks(q, tb, model, dec, feats),
        ))
    return reports


def test_criterion_1_gradient_fidelity():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst, checked, skipped, redrawn = 0.0, 0, 0, 0
    for inst in range(100):
        v, p = (int(x) for x in rng.integers(1, 5, size=2))
        params = {
            "P": rng.normal(0, 0.5, size=(v, p, 6)),
            "sigma": rng.normal(0, 1, size=(v, p)),
            "W": rng.uniform(0, 2, size=v),
        }
        batch = SampleBatch(rng.uniform(-1, 1, size=(32, 2)), rng.uniform(size=32))
        _, g, _ = shape_loss_and_grad(params, batch, 0.1)
        rep = check_gradients(lambda q: shape_loss_and_grad(q, batch, 0.1)[0], params, g, h=1e-5, seed=inst,
                              kinks=lambda q: shape_kinks(q, batch))
        assert rep.checked, f"shape instance {inst} lies on a kink"
        worst, checked, skipped = max(worst, rep.max_rel_error), checked + rep.checked, skipped + rep.skipped

        # an instance with every coordinate on a kink (say, an all-dead ReLU layer) is redrawn
        for attempt in range(20):
            reports = _transfer_instance(rng, 1000 * attempt + inst)
            if all(r.checked for r in reports):
                break
            redrawn += 1
        for rep in reports:
            worst, checked, skipped = max(worst, rep.max_rel_error), checked + rep.checked, skipped + rep.skipped
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60 and checked > 10000
    record(1, ok, f"max rel err {worst:.2e} over {checked} coords in 100 instances x 8 losses "
                  f"({redrawn} transfer instances redrawn off kinks), {elapsed:.1f}s")
    assert worst <= 1e-4
    assert checked > 10000
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. Kernel invariants
# ---------------------------------------------------------------------------


def _random_shapes(rng, n, v_range=(1, 4), p_range=(1, 4), unit=True):
    for _ in range(n):
        v = int(rng.integers(v_range[0], v_range[1] + 1))
        p = int(rng.integers(p_range[0], p_range[1] + 1))
        P = rng.normal(0, 1, size=(v, p, 6))
        if unit:
            yield GlyphShapeParams.from_curves(P)
        else:
            yield GlyphShapeParams(P, rng.normal(0, 1, size=(v, p)), rng.uniform(-2, 2, size=v))


def test_criterion_2_kernel_invariants():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    n_shapes, n_pts = 1000, 128
    counts = {}

    # containment, as stated: hard <= 0 implies soft == 0 under sigma = 1, W = 1
    pairs = inside = violations = 0
    example = None
    for shape in _random_shapes(rng, n_shapes):
        pts = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
        ins = eval_shape_hard(shape, pts) <= 0
        bad = ins & (eval_shape_soft(shape, pts) != 0)
        pairs, inside, violations = pairs + n_pts, inside + int(ins.sum()), violations + int(bad.sum())
        if bad.any() and example is None:
            example = (shape.v, eval_shape_soft(shape, pts[bad][:1])[0])
    counts["containment"] = (pairs, violations)
    n_inside = inside

    # the part that does hold: the containing primitive's own soft term is zero, and v = 1 is exact
    pairs1 = bad1 = 0
    for shape in _random_shapes(rng, n_shapes):
        pts = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
        hard_i = np.stack([eval_primitive_hard(shape.P[i], pts) for i in range(shape.v)], -1)
        soft_i = np.stack([eval_primitive_soft(shape.P[i], shape.sigma[i], pts) for i in range(shape.v)], -1)
        k = hard_i.argmin(-1)
        ins = hard_i.min(-1) <= 0
        bad1 += int((ins & (soft_i[np.arange(n_pts), k] != 0)).sum())
        pairs1 += n_pts
    for shape in _random_shapes(rng, n_shapes, v_range=(1, 1)):
        pts = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
        ins = eval_shape_hard(shape, pts) <= 0
        bad1 += int((ins & (eval_shape_soft(shape, pts) != 0)).sum())
        pairs1 += n_pts
    counts["containment per primitive / v=1"] = (pairs1, bad1)

    pairs = bad = 0
    for shape in _random_shapes(rng, n_shapes, unit=False):
        pts = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
        s = eval_shape_soft(shape, pts)
        bad += int(np.sum((s < 0) | (s > 1)))
        pairs += n_pts
    counts["soft range"] = (pairs, bad)

    pairs = bad = 0
    for shape in _random_shapes(rng, n_shapes):
        pts = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
        extra = rng.normal(0, 1, size=6)
        grown = np.concatenate([shape.P[0], extra[None]])
        bad += int(np.sum(eval_primitive_hard(grown, pts) < eval_primitive_hard(shape.P[0], pts)))
        more = GlyphShapeParams.from_curves(np.concatenate([shape.P, np.repeat(extra[None, None], shape.p, axis=1)]))
        bad += int(np.sum(eval_shape_hard(more, pts) > eval_shape_hard(shape, pts)))
        pairs += n_pts
    counts["monotonicity"] = (pairs, bad)

    pairs = bad = 0
    for shape in _random_shapes(rng, n_shapes):
        pts = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
        A = rng.normal(0, 1, size=(2, 2))
        b = rng.normal(0, 1, size=2)
        mapped = pts @ A.T + b
        lhs = eval_shape_hard(GlyphShapeParams.from_curves(transform_curves(shape.P, A, b)), pts)
        rhs = eval_shape_hard(shape, mapped)
        scale = 1 + np.abs(shape.P).sum() * (1 + np.abs(mapped).max()) ** 2
        bad += int(np.sum(np.abs(lhs - rhs) > 1e-10 * scale))
        pairs += n_pts
    counts["affine equivariance"] = (pairs, bad)

    elapsed = time.perf_counter() - t0
    held = {k: v for k, v in counts.items() if k != "containment"}
    for name, (n, nbad) in counts.items():
        extra = f" ({n_inside} of them hard-inside)" if name == "containment" else ""
        record(2, nbad == 0 and n >= 100_000, f"{nbad} violations in {n} pairs{extra}", part=f" [{name}]")
    detail = f"containment counterexample with v={example[0]}, soft={example[1]:.3f}" if example else "no counterexample"
    record(2, all(b == 0 for _, b in counts.values()) and elapsed < 60, f"overall: {detail}; {elapsed:.1f}s")
    assert all(n >= 100_000 for n, _ in counts.values())
    assert all(b == 0 for _, b in held.values()), held
    assert elapsed < 60
    # the literal statement is false for v >= 2 (see the kernel tests for a minimal counterexample)
    assert counts["containment"][1] == 0, f"containment fails on {counts['containment'][1]} hard-inside pairs"


# ---------------------------------------------------------------------------
# 3-5. Single-glyph fitting, resolution consistency, vector round trip
# ---------------------------------------------------------------------------


def test_criterion_3_single_glyph_fitting(sans_fits):
    scores = [ssim(render_soft(shape, img.height), img) for _, img, shape, _ in sans_fits]
    times = [t for *_, t in sans_fits]
    mean = float(np.mean(scores))
    ok = mean >= 0.85 and max(times) <= 300
    record(3, ok, f"mean SSIM {mean:.4f} on {''.join(FIT_LETTERS)} (min {min(scores):.4f}), "
                  f"max {max(times):.0f}s/glyph")
    assert mean >= 0.85
    assert max(times) <= 300


def test_criterion_4_resolution_consistency(sans_fits):
    diffs, exact = [], True
    rng = np.random.default_rng(4)
    for _, _, shape, _ in sans_fits:
        big = box_downsample(render_hard(shape, 1024), 16).pixels
        thr = render_hard(shape, 64, mode="threshold").pixels
        diffs.append(float(np.mean(np.abs(big - thr))))
        # a 64-grid pixel center is also the center of pixel 3c+1 on the 192 grid
        exact &= np.array_equal(render_hard(shape, 64).pixels, render_hard(shape, 192).pixels[1::3, 1::3])
        centers = pixel_centers(64, 64).reshape(-1, 2)
        pick = rng.choice(len(centers), 50, replace=False)
        single = np.array([occupancy_hard(shape, centers[i]) for i in pick])
        exact &= np.array_equal(single, occupancy_hard(shape, centers)[pick])
    worst = max(diffs)
    record(4, worst <= 0.1 and exact, f"max mean-abs diff {worst:.4f} (mean {np.mean(diffs):.4f}); "
                                      f"pointwise queries exact: {exact}")
    assert worst <= 0.1
    assert exact


def _svg_iou(shape: GlyphShapeParams, res: int = 512) -> float:
    import cairosvg
    from PIL import Image

    svg = export_svg(extract_contours(shape, grid_res=res), view_size=res)
    png = cairosvg.svg2png(bytestring=svg.encode(), output_width=res, output_height=res, background_color="white")
    with Image.open(io.BytesIO(png)) as im:
        ink_svg = np.asarray(im.convert("L"), dtype=float) < 128
    ink_ref = render_hard(shape, res).pixels == 0
    union = np.logical_or(ink_svg, ink_ref).sum()
    return float(np.logical_and(ink_svg, ink_ref).sum() / union) if union else 1.0


def test_criterion_5_vector_round_trip(sans_fits):
    ious = [_svg_iou(shape) for _, _, shape, _ in sans_fits]
    record(5, min(ious) >= 0.95, f"IoU min {min(ious):.4f}, mean {np.mean(ious):.4f} over {len(ious)} glyphs")
    assert min(ious) >= 0.95


# ---------------------------------------------------------------------------
# 6-7. Manifold and transfer on the toy corpus
# ---------------------------------------------------------------------------


def test_criterion_6_toy_manifold(toy_dataset, toy_manifold):
    res, elapsed = toy_manifold
    n_fonts = len(toy_dataset.train)
    scores = reconstruction_ssim(res.table, res.model, toy_dataset)
    rng = np.random.default_rng(6)
    exact, in_range = True, True
    for _ in range(10):
        i, j = rng.choice(len(res.table), 2, replace=False)
        z1, z2 = res.table.codes[i], res.table.codes[j]
        exact &= interpolate(z1, z2, 0.0).tobytes() == z1.tobytes()
        exact &= interpolate(z1, z2, 1.0).tobytes() == z2.tobytes()
        exact &= reconstruct(interpolate(z1, z2, 0.0), res.model).pixels.tobytes() == reconstruct(z1, res.model).pixels.tobytes()
        for t in np.linspace(0, 1, 11):
            px = reconstruct(interpolate(z1, z2, float(t)), res.model).pixels
            in_range &= bool(np.all((px >= 0) & (px <= 1)))
    mean = float(scores.mean())
    ok = n_fonts >= 20 and mean >= 0.8 and exact and in_range and elapsed <= 3600
    record(6, ok, f"{n_fonts} training fonts, mean reconstruction SSIM {mean:.4f}, endpoints exact {exact}, "
                  f"renders in [0,1] {in_range}, {elapsed:.0f}s")
    assert n_fonts >= 20 and mean >= 0.8
    assert exact and in_range
    assert elapsed <= 3600


def _reference_codes(toy_dataset, model):
    ref = toy_dataset.font(CONTENT_REFERENCE_FONT)
    assert ref.split == "validation"
    return np.stack([infer_latent(ref.image(c), model) for c in range(26)])


def _generated_accuracy(run, table, train_fonts, zc) -> float:
    styles = [table[(f.name, 0)] for f in train_fonts]
    zhat = np.stack([transfer_latent(zs, zc[c], run.model) for zs in styles for c in range(26)])
    return classifier_accuracy(run.model, zhat, np.tile(np.arange(26), len(styles)))


def test_criterion_7_transfer(toy_dataset, toy_manifold, toy_transfers):
    res, _ = toy_manifold
    table, base = res.table, res.model
    run = toy_transfers[0.05]
    n_train, n_held = len(toy_dataset.train), len(toy_dataset.validation)

    sm = smoothed(run.trace[:, 1], 500)
    a_ok = sm[-1] < sm[0]
    record(7, a_ok, f"smoothed total loss {sm[0]:.4f} -> {sm[-1]:.4f} "
                  f"({n_train} training fonts, {n_held} held out)", part="a")

    zc = _reference_codes(toy_dataset, base)
    acc = classifier_accuracy(run.model, zc, np.arange(26))
    b_ok = acc > 3 / 26
    record(7, b_ok, f"held-out content-reference accuracy {acc:.4f} (chance {1 / 26:.4f})", part="b")

    rec, self_t = [], []
    for font, c in table.keys:
        img = toy_dataset.font(font).images[c]
        z = table[(font, c)]
        rec.append(ssim(render_soft(decode(z, base), 64), img))
        self_t.append(ssim(render_soft(decode(transfer_latent(z, z, run.model), run.decoder), 64), img))
    gap = float(np.mean(self_t) - np.mean(rec))
    c_ok = abs(gap) <= 0.05
    record(7, c_ok, f"self-transfer SSIM {np.mean(self_t):.4f} vs reconstruction {np.mean(rec):.4f}", part="c")

    abl = toy_transfers[0.0]
    gen_full = _generated_accuracy(run, table, toy_dataset.train, zc)
    gen_abl = _generated_accuracy(abl, table, toy_dataset.train, zc)
    ref_abl = classifier_accuracy(abl.model, zc, np.arange(26))
    d_ok = gen_abl <= gen_full and ref_abl <= acc
    record(7, d_ok, f"accuracy on generated codes: lambda_cate=0.05 {gen_full:.4f}, lambda_cate=0 {gen_abl:.4f}; "
                    f"on reference codes {acc:.4f} vs {ref_abl:.4f}", part="d")
    assert n_train >= 20
    assert a_ok and b_ok and c_ok and d_ok


# ---------------------------------------------------------------------------
# 8. CLI determinism
# ---------------------------------------------------------------------------


def _cli(capsys, *argv) -> str:
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    assert code == 0, err
    return out


def test_criterion_8_cli_determinism(capsys, tmp_path, toy_dataset):
    small = toy_dataset.subset(["dejavu-sans-bold", "cm-roman", "dejavu-sans"])
    data = tmp_path / "data"
    save_dataset(small, data)
    glyph = data / "dejavu-sans" / "R.pgm"
    cfg = tmp_path / "run.ini"
    cfg.write_text("seed = 7\ndeterministic = true\nv = 4\np = 3\nwarm_start_iterations = 50\n")
    w = tmp_path / "w"
    w.mkdir()
    commands = [
        ("make-dataset", [w / "ds", "--fonts", "cm-sans,stix"], [w / "ds"]),
        ("fit", [glyph, "-o", w / "g.ckpt", "--iterations", 200], [w / "g.ckpt", w / "g.csv"]),
        ("render", [w / "g.ckpt", "-o", w / "g.pgm"], [w / "g.pgm"]),
        ("render", [w / "g.ckpt", "-o", w / "h.pgm", "--mode", "hard", "--size", 256], [w / "h.pgm"]),
        ("export-svg", [w / "g.ckpt", "-o", w / "g.svg"], [w / "g.svg"]),
        ("train", [data, "-o", w / "m.ckpt", "--iterations", 30], [w / "m.ckpt", w / "m.csv"]),
        ("interp", [w / "m.ckpt", "cm-roman/A", "dejavu-sans-bold/B", "--steps", 3, "-o", w / "interp"], [w / "interp"]),
        ("infer", [w / "m.ckpt", glyph, "-o", w / "i.ckpt", "--latent", w / "z.txt", "--infer-iterations", 20],
         [w / "i.ckpt", w / "z.txt"]),
        ("transfer", [data, w / "m.ckpt", "-o", w / "t.ckpt", "--iterations", 20, "--batch-size", 8],
         [w / "t.ckpt", w / "t.csv"]),
        ("generate", [w / "t.ckpt", "--style", "cm-roman/C", "--content", glyph, "-o", w / "gen.pgm",
                      "--infer-iterations", 20], [w / "gen.pgm"]),
        ("generate", [w / "t.ckpt", "--style", "cm-roman/C", "--content-font", "dejavu-sans-bold", "-o", w / "font"],
         [w / "font"]),
        ("eval", [data / "cm-roman", data / "dejavu-sans-bold"], []),
    ]

    def snapshot(paths):
        blobs = []
        for p in paths:
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            blobs += [(str(q), q.read_bytes()) for q in files]
        return blobs

    differing = []
    for name, args, outputs in commands:
        runs = []
        for _ in range(2):
            stdout = _cli(capsys, name, *args, "--config", cfg, "--seed", 7, "--deterministic")
            assert json.loads(stdout)["status"] == "ok"
            runs.append((stdout, snapshot(outputs)))
        if runs[0] != runs[1]:
            differing.append(name)
    ok = not differing
    record(8, ok, f"{len(commands)} commands each run twice, outputs and stdout byte-identical" if ok else f"outputs differ for {differing}")
    assert ok, differing


# ---------------------------------------------------------------------------
# 9. Metrics
# ---------------------------------------------------------------------------


def test_criterion_9_metrics():
    x = np.random.default_rng(9).uniform(size=(64, 64))
    zeros, ones = np.zeros((64, 64)), np.ones((64, 64))
    c1 = 0.01**2
    s_self = ssim(x, x)
    s_01 = ssim(zeros, ones)
    l1 = l1_metric(zeros, ones)
    ok = s_self == 1.0 and abs(s_01 - c1 / (1 + c1)) <= 1e-8 and l1 == 255.0
    record(9, ok, f"ssim(x,x)={s_self!r}, ssim(0,1)={s_01:.10f} (closed form {c1 / (1 + c1):.10f}), l1={l1!r}")
    assert s_self == 1.0
    assert abs(s_01 - c1 / (1 + c1)) <= 1e-8
    assert l1 == 255.0
