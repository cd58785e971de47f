"""Corpus management: manifest build/load, grid storage, augmentation.

A manifest is a line-delimited JSON file: one header object followed by
one object per shape record.  Grids live beside it as content-addressed
VOXB files, so the manifest bytes pin the entire corpus.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FileError
from .shapes import CATEGORIES, generate_shape, sample_params
from .voxel import load_voxb, rotate, voxb_bytes

MANIFEST_KIND = "voxpatch-manifest"
TEST_FRACTION = 0.1
N_CAPTIONS = 3


@dataclass
class ShapeRecord:
    id: str
    category: str
    grid_path: str  # relative to the manifest directory
    captions: list[str]
    split: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "grid_path": self.grid_path,
            "captions": self.captions,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    grid_dims: tuple[int, int, int]
    patch_dims: tuple[int, int, int]
    generator_seed: int
    records: list[ShapeRecord]
    root: Path | None = None

    def split(self, name: str) -> list[ShapeRecord]:
        return [r for r in self.records if r.split == name]


@dataclass
class LoadedShape:
    """A record with its grid resident in memory."""

    id: str
    category: str
    grid: np.ndarray
    captions: list[str]
    split: str


@dataclass
class ShapeDataset:
    """The in-memory currency the training and evaluation loops consume."""

    grid_dims: tuple[int, int, int]
    patch_dims: tuple[int, int, int]
    shapes: list[LoadedShape] = field(default_factory=list)

    def split(self, name: str) -> list[LoadedShape]:
        return [s for s in self.shapes if s.split == name]

    def all_captions(self) -> list[str]:
        return [c for s in self.shapes for c in s.captions]


@dataclass
class GenConfig:
    grid_n: int = 32
    patch_n: int = 4
    shapes_per_category: int = 50
    categories: tuple[str, ...] = CATEGORIES
    seed: int = 0

    def echo(self) -> dict:
        return {
            "grid_n": self.grid_n,
            "patch_n": self.patch_n,
            "shapes_per_category": self.shapes_per_category,
            "categories": list(self.categories),
            "seed": self.seed,
        }


def build_manifest(config: GenConfig, out_dir: Path) -> Path:
    """Generate the corpus and write manifest + grids under ``out_dir``.

    Per-category split is 90/10 (test count rounded); the same seed
    regenerates every grid bitwise.
    """
    if config.shapes_per_category < 10:
        raise ConfigError(
            f"need at least 10 shapes per category, got {config.shapes_per_category}"
        )
    for cat in config.categories:
        if cat not in CATEGORIES:
            raise ConfigError(f"unknown category {cat!r}")
    out_dir = Path(out_dir)
    grid_dir = out_dir / "grids"
    grid_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    records = []
    for cat in config.categories:
        n = config.shapes_per_category
        n_test = round(TEST_FRACTION * n)
        test_idx = set(rng.choice(n, size=n_test, replace=False).tolist())
        for i in range(n):
            shape_seed = int(rng.integers(0, 2**63, dtype=np.uint64))
            shape_rng = np.random.default_rng(shape_seed)
            params = sample_params(cat, config.grid_n, shape_rng)
            grid, captions = generate_shape(cat, params, shape_rng, config.grid_n)
            blob = voxb_bytes(grid)
            name = hashlib.sha256(blob).hexdigest()[:16] + ".voxb"
            (grid_dir / name).write_bytes(blob)
            records.append(
                ShapeRecord(
                    id=f"{cat}-{i:04d}",
                    category=cat,
                    grid_path=f"grids/{name}",
                    captions=captions,
                    split="test" if i in test_idx else "train",
                )
            )
    header = {
        "kind": MANIFEST_KIND,
        "version": 1,
        "grid_dims": [config.grid_n] * 3,
        "patch_dims": [config.patch_n] * 3,
        "generator_seed": config.seed,
        "config": config.echo(),
    }
    path = out_dir / "manifest.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileError(f"manifest not found: {path}")
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != MANIFEST_KIND:
        raise FileError(f"{path} is not a {MANIFEST_KIND} file")
    header = lines[0]
    records = [
        ShapeRecord(r["id"], r["category"], r["grid_path"], r["captions"], r["split"])
        for r in lines[1:]
    ]
    for rec in records:
        if len(rec.captions) != N_CAPTIONS:
            raise FileError(f"record {rec.id} has {len(rec.captions)} captions, expected {N_CAPTIONS}")
    return DatasetManifest(
        grid_dims=tuple(header["grid_dims"]),
        patch_dims=tuple(header["patch_dims"]),
        generator_seed=header["generator_seed"],
        records=records,
        root=path.parent,
    )


def load_shapes(manifest: DatasetManifest) -> ShapeDataset:
    """Read every referenced grid into memory."""
    shapes = []
    for rec in manifest.records:
        grid_path = (manifest.root or Path(".")) / rec.grid_path
        if not grid_path.exists():
            raise FileError(f"grid file missing for {rec.id}: {grid_path}")
        shapes.append(
            LoadedShape(rec.id, rec.category, load_voxb(grid_path), rec.captions, rec.split)
        )
    return ShapeDataset(manifest.grid_dims, manifest.patch_dims, shapes)


def augment(
    grid: np.ndarray, captions: list[str], stage: str, rng: np.random.Generator
) -> tuple[np.ndarray, str]:
    """Rotation augmentation plus, in stage 2 only, caption-variant choice.

    Stage 1 always pairs the rotated grid with caption variant 0; stage 2
    draws one of the three variants uniformly per call.
    """
    if stage not in ("stage1", "stage2"):
        raise ConfigError(f"stage must be stage1 or stage2, got {stage!r}")
    axis = "xyz"[int(rng.integers(0, 3))]
    angle = float(rng.uniform(0.0, 360.0))
    rotated = rotate(grid, axis, angle)
    if stage == "stage2":
        caption = captions[int(rng.integers(0, N_CAPTIONS))]
    else:
        caption = captions[0]
    return rotated, caption
