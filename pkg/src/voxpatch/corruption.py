"""Mask strategies used as training augmentation and evaluation settings.

Three strategies: zero out whole patches, cut everything beyond a plane,
or flip individual cells.  Every operation is a deterministic function of
(input, spec): applying the same :class:`CorruptionSpec` to the same grid
gives a bitwise-identical result.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyGrid, InvalidRatio
from .voxel import PatchSequence, as_grid, depatchify, patchify

KINDS = ("random_mask", "plane_mask", "random_noise")
AXES = ("x", "y", "z")
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def _round_count(x: float) -> int:
    # deterministic half-up rounding, independent of banker's rounding
    return int(math.floor(x + 0.5))


def derive_seed(*parts) -> int:
    """Stable u63 seed from arbitrary string/int parts (replayable)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class CorruptionSpec:
    """Strategy tag + parameters + seed; fully determines a corruption.

    ``ratio`` is the patch mask ratio, the occupied fraction removed by a
    plane cut, or the cell flip fraction.  A plane_mask spec may carry
    ``ratio=None``: the cut position is then drawn from the seeded
    generator over the occupied extent (training mode).
    """

    kind: str
    ratio: float | None
    axis: str | None
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidRatio(f"unknown corruption kind {self.kind!r}")
        if self.kind == "plane_mask":
            if self.axis not in AXES:
                raise InvalidRatio(f"plane_mask needs axis in {AXES}, got {self.axis!r}")
        elif self.axis is not None:
            raise InvalidRatio(f"axis is only valid for plane_mask, got {self.axis!r}")
        if self.ratio is None:
            if self.kind != "plane_mask":
                raise InvalidRatio(f"{self.kind} requires a ratio")
        elif not 0.0 <= self.ratio <= 1.0:
            raise InvalidRatio(f"ratio must be in [0, 1], got {self.ratio}")

    def to_record(self) -> dict:
        return {"kind": self.kind, "ratio": self.ratio, "axis": self.axis, "seed": int(self.seed)}

    @classmethod
    def from_record(cls, rec: dict) -> "CorruptionSpec":
        return cls(rec["kind"], rec["ratio"], rec.get("axis"), int(rec["seed"]))


@dataclass(frozen=True)
class TrainRanges:
    """Parameter intervals the training-time sampler draws from."""

    mask_ratio: tuple[float, float] = (0.1, 0.8)
    noise_level: tuple[float, float] = (0.005, 0.02)


def random_mask(seq: PatchSequence, ratio: float, rng: np.random.Generator) -> PatchSequence:
    """Replace round(ratio*p) distinct patches with all-zero patches."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidRatio(f"ratio must be in [0, 1], got {ratio}")
    p = len(seq)
    k = _round_count(ratio * p)
    patches = seq.patches.copy()
    if k:
        idx = rng.choice(p, size=k, replace=False)
        patches[idx] = False
    return PatchSequence(seq.patch_grid, patches)


def plane_mask(
    grid: np.ndarray,
    axis: str,
    fraction: float | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Cut the grid with a plane orthogonal to ``axis`` and zero the upper side.

    With a target ``fraction``, the cut is placed so the discarded side holds
    the smallest occupied count that is at least fraction * occupied_count.
    With ``fraction=None`` the cut coordinate is drawn uniformly over the
    occupied extent and the removed fraction is whatever results.
    """
    grid = as_grid(grid)
    ax = _AXIS_INDEX[axis]
    total = int(np.count_nonzero(grid))
    if total == 0:
        raise EmptyGrid("plane_mask needs at least one occupied voxel")
    if fraction is not None and not 0.0 <= fraction <= 1.0:
        raise InvalidRatio(f"fraction must be in [0, 1], got {fraction}")
    coords = np.nonzero(grid)[ax]
    a1, a2 = int(coords.min()), int(coords.max())
    if fraction is None:
        cut = int(rng.integers(a1, a2 + 1))
    else:
        per_slab = np.bincount(coords, minlength=grid.shape[ax])
        # removed(c) = occupied voxels with coordinate > c, non-increasing in c
        removed_above = total - np.cumsum(per_slab)
        target = fraction * total
        cut = a1 - 1
        for c in range(a2, a1 - 2, -1):
            removed = total if c < 0 else int(removed_above[c])
            if removed >= target:
                cut = c
                break
    out = grid.copy()
    index = [slice(None)] * 3
    index[ax] = slice(cut + 1, None)
    out[tuple(index)] = False
    return out


def random_noise(grid: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Invert occupancy of exactly round(level * cells) distinct cells."""
    if not 0.0 <= level <= 1.0:
        raise InvalidRatio(f"level must be in [0, 1], got {level}")
    grid = as_grid(grid)
    n = grid.size
    k = _round_count(level * n)
    out = grid.copy()
    if k:
        flat = out.reshape(-1)
        idx = rng.choice(n, size=k, replace=False)
        flat[idx] = ~flat[idx]
    return out


def sample_corruption(rng: np.random.Generator, ranges: TrainRanges) -> CorruptionSpec:
    """Draw a training corruption: strategy uniform over the three kinds."""
    kind = KINDS[int(rng.integers(0, 3))]
    ratio: float | None
    axis = None
    if kind == "random_mask":
        lo, hi = ranges.mask_ratio
        ratio = float(rng.uniform(lo, hi))
    elif kind == "plane_mask":
        ratio = None
        axis = AXES[int(rng.integers(0, 3))]
    else:
        lo, hi = ranges.noise_level
        ratio = float(rng.uniform(lo, hi))
    seed = int(rng.integers(0, 2**63, dtype=np.uint64))
    return CorruptionSpec(kind, ratio, axis, seed)


def apply_corruption(
    grid: np.ndarray, spec: CorruptionSpec, patch_dims: tuple[int, int, int]
) -> np.ndarray:
    """Apply a fully-specified corruption to a grid."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "random_mask":
        seq = random_mask(patchify(grid, patch_dims), spec.ratio, rng)
        return depatchify(seq, patch_dims)
    if spec.kind == "plane_mask":
        return plane_mask(grid, spec.axis, spec.ratio, rng)
    return random_noise(grid, spec.ratio, rng)
