"""Zero-set extraction by marching squares, and SVG export."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .kernel import DEFAULT_W_MIN, EmptyShapeError, GlyphShapeParams, hard_field


@dataclass
class ContourSet:
    """Closed polylines in normalized coordinates; the closing edge is implicit."""

    polylines: list[np.ndarray] = field(default_factory=list)
    orientations: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.polylines)

    def signed_areas(self) -> list[float]:
        return [polygon_area(p) for p in self.polylines]


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise order in an x-right, y-up frame."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


# corner k of a cell, as (row, col) offsets, walked clockwise on screen
_CORNERS = ((0, 0), (0, 1), (1, 1), (1, 0))


def marching_squares(
    values: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    center_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> ContourSet:
    """Trace the ``values <= 0`` region of a sampled field into closed polylines.

    ``values[r, c]`` is the field at ``(xs[c], ys[r])``.  Saddle cells are
    resolved by ``center_fn`` evaluated at the cell center (the mean of the
    corners when it is None).  Regions touching the grid border are left
    open; pad the grid with positive values to close them.
    """
    inside = values <= 0
    quad = (
        inside[:-1, :-1].astype(np.int8)
        + inside[:-1, 1:]
        + inside[1:, 1:]
        + inside[1:, :-1]
    )
    rows, cols = np.nonzero((quad > 0) & (quad < 4))
    if rows.size == 0:
        return ContourSet()

    saddle_center = {}
    corner_in = np.stack([inside[rows + dr, cols + dc] for dr, dc in _CORNERS], axis=1)
    saddle = (quad[rows, cols] == 2) & (corner_in[:, 0] == corner_in[:, 2])
    if np.any(saddle):
        sr, sc = rows[saddle], cols[saddle]
        centers = np.stack([(xs[sc] + xs[sc + 1]) / 2, (ys[sr] + ys[sr + 1]) / 2], axis=-1)
        if center_fn is not None:
            cv = np.asarray(center_fn(centers))
        else:
            cv = (values[sr, sc] + values[sr, sc + 1] + values[sr + 1, sc] + values[sr + 1, sc + 1]) / 4
        saddle_center = {(int(r), int(c)): bool(v <= 0) for r, c, v in zip(sr, sc, cv)}

    points: dict[tuple, tuple[float, float]] = {}

    def crossing(n0: tuple[int, int], n1: tuple[int, int]) -> tuple:
        key = (n0, n1) if n0 < n1 else (n1, n0)
        if key not in points:
            (r0, c0), (r1, c1) = key
            v0, v1 = values[r0, c0], values[r1, c1]
            t = v0 / (v0 - v1)
            points[key] = (
                xs[c0] + t * (xs[c1] - xs[c0]),
                ys[r0] + t * (ys[r1] - ys[r0]),
            )
        return key

    successor: dict[tuple, tuple] = {}
    for r, c in zip(rows.tolist(), cols.tolist()):
        nodes = [(r + dr, c + dc) for dr, dc in _CORNERS]
        ins = [bool(inside[n]) for n in nodes]
        enters, exits = [], []
        for k in range(4):
            a, b = nodes[k], nodes[(k + 1) % 4]
            if ins[k] != ins[(k + 1) % 4]:
                (enters if ins[(k + 1) % 4] else exits).append((k, crossing(a, b)))
        if len(enters) == 1:
            successor[enters[0][1]] = exits[0][1]
            continue
        # saddle: with an inside center each outside corner is cut off on its own,
        # so an entry pairs with the exit just before it; otherwise just after it
        center_in = saddle_center[(r, c)]
        for k, key in enters:
            if center_in:
                partner = max((e for e in exits if e[0] < k), default=max(exits), key=lambda e: e[0])
            else:
                partner = min((e for e in exits if e[0] > k), default=min(exits), key=lambda e: e[0])
            successor[key] = partner[1]

    contours = ContourSet()
    seen: set = set()
    for start in sorted(successor):
        if start in seen:
            continue
        loop = []
        key = start
        while key is not None and key not in seen:
            seen.add(key)
            loop.append(points[key])
            key = successor.get(key)
        if key == start and len(loop) >= 3:
            poly = np.asarray(loop)
            contours.polylines.append(poly)
            contours.orientations.append("ccw" if polygon_area(poly) > 0 else "cw")
    return contours


def extract_contours(params: GlyphShapeParams, grid_res: int = 512, w_min: float = DEFAULT_W_MIN) -> ContourSet:
    """Contours of the hard field sampled at the pixel centers of a ``grid_res`` grid.

    The grid is padded with one ring of outside samples so that shapes
    touching the domain edge still produce closed loops.
    """
    if grid_res < 8:
        raise ValueError(f"grid_res must be at least 8, got {grid_res}")
    try:
        field_fn = lambda pts: hard_field(params, pts, w_min)
        field_fn(np.zeros((1, 2)))
    except EmptyShapeError:
        return ContourSet()
    k = np.arange(-1, grid_res + 1)
    coords = (2 * k + 1) / grid_res - 1
    values = np.empty((grid_res + 2, grid_res + 2))
    inner = coords[1:-1]
    for r0 in range(0, grid_res, 64):
        ys = inner[r0 : r0 + 64]
        X, Y = np.meshgrid(inner, ys)
        values[1 + r0 : 1 + r0 + len(ys), 1:-1] = field_fn(np.stack([X, Y], axis=-1))
    pad = max(1.0, float(np.abs(values[1:-1, 1:-1]).max()))
    values[0, :] = values[-1, :] = pad
    values[:, 0] = values[:, -1] = pad
    return marching_squares(values, coords, coords, center_fn=field_fn)


def _fmt(v: float) -> str:
    s = f"{v:.4f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def export_svg(contours: ContourSet, view_size: float = 512.0) -> str:
    """SVG 1.1 document with a single even-odd path holding every contour."""
    scale = view_size / 2.0
    parts = []
    for poly in contours.polylines:
        X = (poly[:, 0] + 1) * scale
        Y = (poly[:, 1] + 1) * scale
        coords = " L ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in zip(X, Y))
        parts.append(f"M {coords} Z")
    size = _fmt(view_size)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'  <path fill="#000000" fill-rule="evenodd" d="{" ".join(parts)}"/>\n'
        "</svg>\n"
    )
