"""Procedural captioned shapes: the synthetic stand-in corpus.

Five categories, each a connected solid with parameter jitter.  Captions
come from three fixed paraphrase templates over the category name and two
attribute words derived from the sampled parameters, so the text always
carries recoverable geometry.
"""
from __future__ import annotations

import numpy as np

from .errors import EmptyShape, UnknownCategory
from .voxel import empty_grid

CATEGORIES = ("box_table", "cross_plane", "sphere_pod", "l_bracket", "ring")

_CATEGORY_WORDS = {
    "box_table": "box table",
    "cross_plane": "cross plane",
    "sphere_pod": "sphere pod",
    "l_bracket": "l bracket",
    "ring": "ring",
}

_TEMPLATES = (
    "a {a1} {a2} {name}",
    "3d model of a {a1} {name} that is {a2}",
    "this is a {a2} {name} in a {a1} size",
)

MIN_FILL = 0.01
MAX_FILL = 0.60


def sample_params(category: str, grid_n: int, rng: np.random.Generator) -> dict:
    """Draw generator parameters (in cells) for one shape on an N^3 grid."""
    n = grid_n
    if category == "box_table":
        return {
            "top_half": int(rng.integers(round(0.28 * n), round(0.42 * n) + 1)),
            "top_thick": max(1, int(rng.integers(round(0.06 * n), round(0.12 * n) + 1))),
            "leg_height": int(rng.integers(round(0.25 * n), round(0.55 * n) + 1)),
            "leg_thick": max(1, round(0.08 * n)),
        }
    if category == "cross_plane":
        return {
            "span": int(rng.integers(round(0.30 * n), round(0.45 * n) + 1)),
            "thick": max(1, int(rng.integers(round(0.04 * n), round(0.10 * n) + 1))),
            "height": max(2, round(0.30 * n)),
        }
    if category == "sphere_pod":
        return {"radius": int(rng.integers(round(0.17 * n), round(0.30 * n) + 1))}
    if category == "l_bracket":
        return {
            "thick": max(2, int(rng.integers(round(0.09 * n), round(0.16 * n) + 1))),
            "width": max(2, round(0.25 * n)),
            "arm": int(rng.integers(round(0.50 * n), round(0.80 * n) + 1)),
        }
    if category == "ring":
        return {
            "major": int(rng.integers(round(0.22 * n), round(0.32 * n) + 1)),
            "minor": max(2, int(rng.integers(round(0.06 * n), round(0.12 * n) + 1))),
        }
    raise UnknownCategory(f"unknown category {category!r}")


def _size_word(value: float, lo: float, hi: float) -> str:
    t = (value - lo) / max(hi - lo, 1e-9)
    if t < 1 / 3:
        return "small"
    if t < 2 / 3:
        return "midsize"
    return "large"


def _box_table(grid, n, p, jitter):
    cx, cy = n // 2 + jitter[0], n // 2 + jitter[1]
    half, thick = p["top_half"], p["top_thick"]
    legs, lt = p["leg_height"], p["leg_thick"]
    z0 = max(0, min(n - thick, legs))
    x0, x1 = max(0, cx - half), min(n, cx + half)
    y0, y1 = max(0, cy - half), min(n, cy + half)
    grid[x0:x1, y0:y1, z0 : z0 + thick] = True
    for lx in (x0, x1 - lt):
        for ly in (y0, y1 - lt):
            grid[lx : lx + lt, ly : ly + lt, 0:z0] = True
    a2 = "low" if legs < 0.4 * n else "tall"
    return _size_word(half, 0.28 * n, 0.42 * n), a2


def _cross_plane(grid, n, p, jitter):
    c = (n // 2 + jitter[0], n // 2 + jitter[1], n // 2 + jitter[2])
    span, thick, height = p["span"], p["thick"], p["height"]
    x0, x1 = max(0, c[0] - span), min(n, c[0] + span)
    y0, y1 = max(0, c[1] - span), min(n, c[1] + span)
    z0, z1 = max(0, c[2] - height), min(n, c[2] + height)
    ty0, ty1 = max(0, c[1] - thick), min(n, c[1] + thick)
    tx0, tx1 = max(0, c[0] - thick), min(n, c[0] + thick)
    grid[x0:x1, ty0:ty1, z0:z1] = True
    grid[tx0:tx1, y0:y1, z0:z1] = True
    a2 = "thin" if thick < 0.07 * n else "thick"
    return _size_word(span, 0.30 * n, 0.45 * n), a2


def _sphere_pod(grid, n, p, jitter):
    r = p["radius"]
    if r <= 0:
        raise EmptyShape(f"sphere_pod radius must be positive, got {r}")
    margin = n // 2 - r - 1
    if margin < 0:
        raise EmptyShape(f"radius {r} does not fit a {n}^3 grid")
    j = np.clip(jitter, -margin, margin)
    center = np.array([n // 2, n // 2, n // 2]) + j
    idx = np.indices(grid.shape)
    dist2 = sum((idx[i] - center[i]) ** 2 for i in range(3))
    grid |= dist2 <= r * r
    a2 = "centered" if int(np.abs(j).sum()) <= 1 else "offset"
    return _size_word(r, 0.17 * n, 0.30 * n), a2


def _l_bracket(grid, n, p, jitter):
    t, width, arm = p["thick"], p["width"], p["arm"]
    x0 = max(0, n // 2 - arm // 2 + jitter[0])
    y0 = max(0, n // 2 - width // 2 + jitter[1])
    z0 = max(0, n // 2 - arm // 2 + jitter[2])
    arm_x = min(arm, n - x0)
    arm_z = min(arm, n - z0)
    y1 = min(n, y0 + width)
    grid[x0 : x0 + t, y0:y1, z0 : z0 + arm_z] = True
    grid[x0 : x0 + arm_x, y0:y1, z0 : z0 + t] = True
    a2 = "thin" if t < 0.125 * n else "thick"
    return _size_word(arm, 0.50 * n, 0.80 * n), a2


def _ring(grid, n, p, jitter):
    R, r = p["major"], p["minor"]
    if R + r >= n // 2:
        R = n // 2 - r - 1
    if R <= 0 or r <= 0:
        raise EmptyShape(f"degenerate ring radii R={R}, r={r}")
    center = np.array([n // 2, n // 2, n // 2]) + np.clip(jitter, -1, 1)
    idx = np.indices(grid.shape).astype(np.float64)
    radial = np.sqrt((idx[0] - center[0]) ** 2 + (idx[1] - center[1]) ** 2)
    grid |= (radial - R) ** 2 + (idx[2] - center[2]) ** 2 <= r * r
    a2 = "narrow" if r < 0.09 * n else "wide"
    return _size_word(R, 0.22 * n, 0.32 * n), a2


_BUILDERS = {
    "box_table": _box_table,
    "cross_plane": _cross_plane,
    "sphere_pod": _sphere_pod,
    "l_bracket": _l_bracket,
    "ring": _ring,
}


def generate_shape(
    category: str, params: dict, rng: np.random.Generator, grid_n: int = 32
) -> tuple[np.ndarray, list[str]]:
    """Build one shape and its three caption paraphrases.

    Deterministic in (category, params, rng state).  The generated region
    is connected and fills between 1% and 60% of the grid.
    """
    if category not in _BUILDERS:
        raise UnknownCategory(f"unknown category {category!r}")
    grid = empty_grid((grid_n, grid_n, grid_n))
    jitter = rng.integers(-max(1, grid_n // 16), max(1, grid_n // 16) + 1, size=3)
    a1, a2 = _BUILDERS[category](grid, grid_n, params, jitter)
    fill = np.count_nonzero(grid) / grid.size
    if fill < MIN_FILL or fill > MAX_FILL:
        raise EmptyShape(
            f"{category} with {params} fills {fill:.1%}, outside [{MIN_FILL:.0%}, {MAX_FILL:.0%}]"
        )
    name = _CATEGORY_WORDS[category]
    captions = [t.format(a1=a1, a2=a2, name=name) for t in _TEMPLATES]
    return grid, captions
