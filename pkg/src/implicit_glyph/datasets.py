"""Font datasets: 26 uppercase glyph images per font, stored as PGM files.

On-disk layout::

    <root>/index.txt            one "<font_name> <train|validation>" per line
    <root>/<font_name>/A.pgm    64x64 P5, ink = 0
    ...
    <root>/<font_name>/Z.pgm
"""

from __future__ import annotations

import importlib.util
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import RasterImage, load_image, save_image

log = logging.getLogger(__name__)

LETTERS = tuple(chr(ord("A") + i) for i in range(26))
GLYPH_SIZE = 64
INDEX_FILE = "index.txt"
SPLITS = ("train", "validation")


class DatasetError(ValueError):
    pass


@dataclass
class FontGlyphs:
    name: str
    images: np.ndarray  # (26, H, W), ink = 0
    split: str = "train"

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 3 or self.images.shape[0] != len(LETTERS):
            raise DatasetError(f"font {self.name!r} must have {len(LETTERS)} glyph images")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r} for font {self.name!r}")

    def image(self, char: int | str) -> RasterImage:
        return RasterImage(self.images[char_index(char)])


@dataclass
class FontDataset:
    fonts: list[FontGlyphs] = field(default_factory=list)

    def split(self, name: str) -> list[FontGlyphs]:
        return [f for f in self.fonts if f.split == name]

    @property
    def train(self) -> list[FontGlyphs]:
        return self.split("train")

    @property
    def validation(self) -> list[FontGlyphs]:
        return self.split("validation")

    def font(self, name: str) -> FontGlyphs:
        for f in self.fonts:
            if f.name == name:
                return f
        raise KeyError(name)

    def subset(self, names) -> FontDataset:
        return FontDataset([self.font(n) for n in names])


def char_index(char: int | str) -> int:
    if isinstance(char, str):
        if char not in LETTERS:
            raise KeyError(f"unknown character {char!r}")
        return LETTERS.index(char)
    if not 0 <= char < len(LETTERS):
        raise KeyError(f"character index {char} out of range")
    return int(char)


def load_dataset(root) -> FontDataset:
    """Read a dataset directory.  Without an index file every font is a training font."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    index = root / INDEX_FILE
    entries: list[tuple[str, str]] = []
    if index.exists():
        for lineno, line in enumerate(index.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise DatasetError(f"{index}:{lineno}: expected '<font_name> <train|validation>'")
            entries.append((parts[0], parts[1]))
    else:
        entries = [(p.name, "train") for p in sorted(root.iterdir()) if p.is_dir()]
    fonts = []
    for name, split in entries:
        folder = root / name
        missing = [c for c in LETTERS if not (folder / f"{c}.pgm").exists()]
        if missing:
            raise DatasetError(f"font {name!r} is missing glyphs {''.join(missing)}")
        images = [load_image(folder / f"{c}.pgm").pixels for c in LETTERS]
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise DatasetError(f"font {name!r} mixes image sizes {sorted(shapes)}")
        fonts.append(FontGlyphs(name, np.stack(images), split))
    return FontDataset(fonts)


def save_dataset(ds: FontDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for font in ds.fonts:
        folder = root / font.name
        folder.mkdir(exist_ok=True)
        for c, img in zip(LETTERS, font.images):
            save_image(RasterImage(img), folder / f"{c}.pgm")
    (root / INDEX_FILE).write_text("".join(f"{f.name} {f.split}\n" for f in ds.fonts))


# ---------------------------------------------------------------------------
# Rendering TrueType fonts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FontSpec:
    """A font file plus an optional synthetic restyling."""

    name: str
    file: str
    x_scale: float = 1.0
    embolden: int = 0


def font_search_dirs() -> list[Path]:
    dirs = [Path("/usr/share/fonts"), Path("/usr/local/share/fonts"), Path.home() / ".fonts"]
    spec = importlib.util.find_spec("matplotlib")
    if spec is not None and spec.origin:
        dirs.append(Path(spec.origin).parent / "mpl-data" / "fonts" / "ttf")
    return [d for d in dirs if d.is_dir()]


def find_font_file(filename: str) -> Path:
    p = Path(filename)
    if p.is_file():
        return p
    for d in font_search_dirs():
        hits = sorted(d.rglob(filename))
        if hits:
            return hits[0]
    raise FileNotFoundError(f"font file {filename!r} not found in {[str(d) for d in font_search_dirs()]}")


def render_font(spec: FontSpec, size: int = GLYPH_SIZE, margin: int = 6) -> np.ndarray:
    """Render A..Z centered in ``size x size`` images, one point size for the whole font."""
    from PIL import Image, ImageDraw, ImageFilter, ImageFont

    path = find_font_file(spec.file)
    big = 4 * size

    def draw(ch: str) -> Image.Image:
        font = ImageFont.truetype(str(path), big)
        im = Image.new("L", (3 * big, 3 * big), 255)
        ImageDraw.Draw(im).text((big, big), ch, font=font, fill=0)
        if spec.x_scale != 1.0:
            im = im.resize((max(1, round(im.width * spec.x_scale)), im.height), Image.Resampling.LANCZOS)
        if spec.embolden:
            im = im.filter(ImageFilter.MinFilter(spec.embolden))
        box = Image.eval(im, lambda v: 255 - v).getbbox()
        if box is None:
            raise DatasetError(f"{spec.file} has no glyph for {ch!r}")
        return im.crop(box)

    crops = [draw(ch) for ch in LETTERS]
    extent = max(max(c.size) for c in crops)
    scale = (size - 2 * margin) / extent
    out = np.empty((len(LETTERS), size, size))
    for k, crop in enumerate(crops):
        w = max(1, round(crop.width * scale))
        h = max(1, round(crop.height * scale))
        small = crop.resize((w, h), Image.Resampling.BOX)
        canvas = Image.new("L", (size, size), 255)
        canvas.paste(small, ((size - w) // 2, (size - h) // 2))
        out[k] = np.asarray(canvas, dtype=float) / 255.0
    return out


def build_dataset(specs, validation=()) -> FontDataset:
    validation = set(validation)
    fonts = []
    for spec in specs:
        log.info("rendering %s", spec.name)
        fonts.append(FontGlyphs(spec.name, render_font(spec), "validation" if spec.name in validation else "train"))
    return FontDataset(fonts)


# Fonts shipped with common Linux images and matplotlib, plus synthetic variants.
TOY_FONTS = (
    FontSpec("dejavu-sans", "DejaVuSans.ttf"),
    FontSpec("dejavu-sans-bold", "DejaVuSans-Bold.ttf"),
    FontSpec("dejavu-sans-oblique", "DejaVuSans-Oblique.ttf"),
    FontSpec("dejavu-sans-boldoblique", "DejaVuSans-BoldOblique.ttf"),
    FontSpec("dejavu-mono", "DejaVuSansMono.ttf"),
    FontSpec("dejavu-mono-bold", "DejaVuSansMono-Bold.ttf"),
    FontSpec("dejavu-mono-oblique", "DejaVuSansMono-Oblique.ttf"),
    FontSpec("dejavu-mono-boldoblique", "DejaVuSansMono-BoldOblique.ttf"),
    FontSpec("dejavu-serif", "DejaVuSerif.ttf"),
    FontSpec("dejavu-serif-bold", "DejaVuSerif-Bold.ttf"),
    FontSpec("dejavu-serif-italic", "DejaVuSerif-Italic.ttf"),
    FontSpec("dejavu-serif-bolditalic", "DejaVuSerif-BoldItalic.ttf"),
    FontSpec("stix", "STIXGeneral.ttf"),
    FontSpec("stix-bold", "STIXGeneralBol.ttf"),
    FontSpec("stix-italic", "STIXGeneralItalic.ttf"),
    FontSpec("stix-bolditalic", "STIXGeneralBolIta.ttf"),
    FontSpec("cm-roman", "cmr10.ttf"),
    FontSpec("cm-bold", "cmb10.ttf"),
    FontSpec("cm-sans", "cmss10.ttf"),
    FontSpec("cm-typewriter", "cmtt10.ttf"),
    FontSpec("cm-math-italic", "cmmi10.ttf"),
    FontSpec("dejavu-sans-condensed", "DejaVuSans.ttf", x_scale=0.7),
    FontSpec("dejavu-serif-wide", "DejaVuSerif.ttf", x_scale=1.3),
    FontSpec("cm-sans-heavy", "cmss10.ttf", embolden=9),
)

# The sans-serif content-reference font is held out, with three more unseen styles.
TOY_VALIDATION = ("dejavu-sans", "stix-italic", "cm-sans-heavy", "dejavu-mono-oblique")
CONTENT_REFERENCE_FONT = "dejavu-sans"
