"""Dense binary occupancy grids: patchification, rotation, stats, VOXB io.

A grid is a C-contiguous boolean ndarray of shape (H, W, D) addressed as
``grid[x, y, z]``; the canonical linear index of a cell is therefore
``x*W*D + y*D + z``.  All operations are pure: they never mutate their
inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, UnsupportedRotation, VoxbError

VOXB_MAGIC = b"VOXB"
VOXB_VERSION = 1

# rotation planes per axis, cyclic right-handed: positive angles rotate
# the first plane axis toward the second
_AXIS_PLANES = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}


@dataclass(frozen=True)
class PatchSequence:
    """Patches of one grid in canonical order.

    ``patches`` has shape (p, h, w, d); patch (i, j, k) of the patch grid
    (G_i, G_j, G_k) sits at flat index ``i*G_j*G_k + j*G_k + k``.
    """

    patch_grid: tuple[int, int, int]
    patches: np.ndarray

    def __post_init__(self):
        gi, gj, gk = self.patch_grid
        if self.patches.ndim != 4 or len(self.patches) != gi * gj * gk:
            raise DimensionMismatch(
                f"expected {gi * gj * gk} patches, got {len(self.patches)}"
            )

    def __len__(self) -> int:
        return len(self.patches)


def as_grid(arr) -> np.ndarray:
    """Coerce to a canonical boolean occupancy volume."""
    grid = np.ascontiguousarray(arr)
    if grid.ndim != 3:
        raise DimensionMismatch(f"grid must be 3-d, got shape {grid.shape}")
    if grid.dtype != np.bool_:
        grid = grid.astype(bool)
    return grid


def empty_grid(dims: tuple[int, int, int]) -> np.ndarray:
    if any(n <= 0 for n in dims):
        raise DimensionMismatch(f"grid dims must be positive, got {dims}")
    return np.zeros(dims, dtype=bool)


def patchify(grid: np.ndarray, patch_dims: tuple[int, int, int]) -> PatchSequence:
    """Split a grid into non-overlapping patches.

    Patch (i,j,k) holds cell (x,y,z) of itself as grid cell
    (i*h + x, j*w + y, k*d + z).  Patch dims must divide the grid dims
    exactly; remainders are rejected rather than silently dropped.
    """
    grid = as_grid(grid)
    H, W, D = grid.shape
    h, w, d = patch_dims
    if min(h, w, d) <= 0:
        raise DimensionMismatch(f"patch dims must be positive, got {patch_dims}")
    if H % h or W % w or D % d:
        raise DimensionMismatch(
            f"patch dims {patch_dims} do not divide grid dims {grid.shape}"
        )
    gi, gj, gk = H // h, W // w, D // d
    blocks = grid.reshape(gi, h, gj, w, gk, d).transpose(0, 2, 4, 1, 3, 5)
    patches = np.ascontiguousarray(blocks.reshape(gi * gj * gk, h, w, d))
    return PatchSequence((gi, gj, gk), patches)


def depatchify(seq: PatchSequence, patch_dims: tuple[int, int, int]) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    gi, gj, gk = seq.patch_grid
    h, w, d = patch_dims
    if seq.patches.shape != (gi * gj * gk, h, w, d):
        raise DimensionMismatch(
            f"patch array shape {seq.patches.shape} inconsistent with "
            f"patch grid {seq.patch_grid} and patch dims {patch_dims}"
        )
    blocks = seq.patches.reshape(gi, gj, gk, h, w, d).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(blocks.reshape(gi * h, gj * w, gk * d))


def rotate(grid: np.ndarray, axis: str, angle_deg: float) -> np.ndarray:
    """Rotate about a coordinate axis through the grid center.

    Multiples of 90 degrees are exact cell permutations and work on any
    grid shape.  Other angles require a cubic grid and use inverse-mapping
    nearest-neighbor sampling; cells mapped from outside the volume are 0.
    """
    grid = as_grid(grid)
    if axis not in _AXIS_PLANES:
        raise UnsupportedRotation(f"axis must be one of x, y, z, got {axis!r}")
    a, b = _AXIS_PLANES[axis]
    angle = float(angle_deg) % 360.0
    if angle % 90.0 == 0.0:
        return np.ascontiguousarray(np.rot90(grid, int(angle // 90), axes=(a, b)))
    if not (grid.shape[0] == grid.shape[1] == grid.shape[2]):
        raise UnsupportedRotation(
            f"arbitrary angle {angle_deg} requires a cubic grid, got {grid.shape}"
        )
    theta = np.deg2rad(angle)
    center_a = (grid.shape[a] - 1) / 2.0
    center_b = (grid.shape[b] - 1) / 2.0
    coords = np.indices(grid.shape).astype(np.float64)
    ua = coords[a] - center_a
    ub = coords[b] - center_b
    # inverse map: rotate output coords by -theta to find the source cell
    cos, sin = np.cos(theta), np.sin(theta)
    src_a = np.rint(cos * ua + sin * ub + center_a).astype(np.int64)
    src_b = np.rint(-sin * ua + cos * ub + center_b).astype(np.int64)
    inside = (
        (src_a >= 0)
        & (src_a < grid.shape[a])
        & (src_b >= 0)
        & (src_b < grid.shape[b])
    )
    src = [coords[0].astype(np.int64), coords[1].astype(np.int64), coords[2].astype(np.int64)]
    src[a] = np.clip(src_a, 0, grid.shape[a] - 1)
    src[b] = np.clip(src_b, 0, grid.shape[b] - 1)
    out = grid[src[0], src[1], src[2]]
    out[~inside] = False
    return np.ascontiguousarray(out)


def occupied_count(grid: np.ndarray) -> int:
    return int(np.count_nonzero(as_grid(grid)))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 1.0 when both grids are empty."""
    a, b = as_grid(a), as_grid(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"iou needs matching dims, got {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a & b) / union)


def occupied_coords(grid: np.ndarray) -> np.ndarray:
    """Occupied cell coordinates as an (n, 3) int64 array, canonical order."""
    return np.argwhere(as_grid(grid)).astype(np.int64)


def save_voxb(grid: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(voxb_bytes(grid))


def voxb_bytes(grid: np.ndarray) -> bytes:
    grid = as_grid(grid)
    H, W, D = grid.shape
    header = VOXB_MAGIC + struct.pack("<H", VOXB_VERSION) + struct.pack("<III", H, W, D)
    packed = np.packbits(grid.reshape(-1).astype(np.uint8), bitorder="little")
    return header + packed.tobytes()


def load_voxb(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return grid_from_voxb(fh.read())


def grid_from_voxb(blob: bytes) -> np.ndarray:
    if len(blob) < 18 or blob[:4] != VOXB_MAGIC:
        raise VoxbError("not a VOXB payload")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != VOXB_VERSION:
        raise VoxbError(f"unsupported VOXB version {version}")
    H, W, D = struct.unpack("<III", blob[6:18])
    if min(H, W, D) <= 0:
        raise VoxbError(f"invalid dims {(H, W, D)}")
    n_cells = H * W * D
    n_bytes = (n_cells + 7) // 8
    payload = blob[18:]
    if len(payload) != n_bytes:
        raise VoxbError(
            f"payload is {len(payload)} bytes, expected {n_bytes} for dims {(H, W, D)}"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    return np.ascontiguousarray(bits[:n_cells].astype(bool).reshape(H, W, D))
