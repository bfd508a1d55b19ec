from __future__ import annotations

import numpy as np
import pytest

from implicit_glyph.datasets import (
    LETTERS,
    TOY_FONTS,
    TOY_VALIDATION,
    FontDataset,
    FontGlyphs,
    build_dataset,
    save_dataset,
)


@pytest.fixture(scope="session")
def toy_dataset() -> FontDataset:
    """The 24-font toy corpus, rendered once per session."""
    return build_dataset(TOY_FONTS, TOY_VALIDATION)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory, toy_dataset):
    root = tmp_path_factory.mktemp("toy")
    save_dataset(toy_dataset, root)
    return root


def blob_font(name: str, size: int = 16, seed: int = 0, split: str = "train") -> FontGlyphs:
    """A tiny synthetic font: one filled ellipse per letter, varying with the letter and seed."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size]
    xs = (2 * xs + 1) / size - 1
    ys = (2 * ys + 1) / size - 1
    images = []
    for k in range(len(LETTERS)):
        a = 0.3 + 0.4 * ((k * 7) % 26) / 26 + 0.05 * rng.uniform()
        b = 0.3 + 0.4 * ((k * 11) % 26) / 26 + 0.05 * rng.uniform()
        images.append(np.where((xs / a) ** 2 + (ys / b) ** 2 <= 1, 0.0, 1.0))
    return FontGlyphs(name, np.stack(images), split)


@pytest.fixture
def tiny_dataset() -> FontDataset:
    return FontDataset([blob_font("a", seed=0), blob_font("b", seed=1), blob_font("c", seed=2, split="validation")])


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
