import hashlib

import numpy as np
import pytest

from voxpatch.dataset import (
    GenConfig,
    augment,
    build_manifest,
    load_manifest,
    load_shapes,
)
from voxpatch.errors import ConfigError, FileError
from voxpatch.shapes import CATEGORIES


def small_config(**kw):
    defaults = dict(grid_n=16, patch_n=4, shapes_per_category=10, seed=0)
    defaults.update(kw)
    return GenConfig(**defaults)


class TestBuildManifest:
    def test_split_arithmetic_100_per_category(self, tmp_path):
        path = build_manifest(small_config(shapes_per_category=100), tmp_path)
        manifest = load_manifest(path)
        assert len(manifest.records) == 500
        assert len(manifest.split("train")) == 450
        assert len(manifest.split("test")) == 50
        for cat in CATEGORIES:
            test_cat = [r for r in manifest.split("test") if r.category == cat]
            assert len(test_cat) == 10

    def test_paper_scale_split_counts(self, tmp_path):
        # 626 per category * 5 = 3130 records, 90/10 per category
        path = build_manifest(small_config(shapes_per_category=626), tmp_path)
        manifest = load_manifest(path)
        assert len(manifest.records) == 3130
        for cat in CATEGORIES:
            records = [r for r in manifest.records if r.category == cat]
            tests = [r for r in records if r.split == "test"]
            assert len(records) == 626
            assert len(tests) == round(0.1 * 626)

    def test_same_seed_gives_byte_identical_manifest(self, tmp_path):
        p1 = build_manifest(small_config(seed=7), tmp_path / "a")
        p2 = build_manifest(small_config(seed=7), tmp_path / "b")
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_fewer_than_10_per_category(self, tmp_path):
        with pytest.raises(ConfigError):
            build_manifest(small_config(shapes_per_category=8), tmp_path)

    def test_rejects_unknown_category(self, tmp_path):
        with pytest.raises(ConfigError):
            build_manifest(small_config(categories=("teapot",)), tmp_path)

    def test_unique_ids_and_relative_paths(self, tmp_path):
        manifest = load_manifest(build_manifest(small_config(), tmp_path))
        ids = [r.id for r in manifest.records]
        assert len(set(ids)) == len(ids)
        for rec in manifest.records:
            assert not rec.grid_path.startswith("/")
            assert len(rec.captions) == 3


class TestLoadShapes:
    def test_grids_parse_and_match_dims(self, tmp_path):
        manifest = load_manifest(build_manifest(small_config(), tmp_path))
        dataset = load_shapes(manifest)
        assert dataset.grid_dims == (16, 16, 16)
        for shape in dataset.shapes:
            assert shape.grid.shape == (16, 16, 16)
            assert shape.grid.any()

    def test_regeneration_reproduces_grids_bitwise(self, tmp_path):
        cfg = small_config(seed=3)
        d1 = load_shapes(load_manifest(build_manifest(cfg, tmp_path / "a")))
        d2 = load_shapes(load_manifest(build_manifest(cfg, tmp_path / "b")))
        for s1, s2 in zip(d1.shapes, d2.shapes):
            assert s1.id == s2.id
            assert (s1.grid == s2.grid).all()
            assert s1.captions == s2.captions

    def test_missing_grid_file_rejected(self, tmp_path):
        manifest = load_manifest(build_manifest(small_config(), tmp_path))
        victim = next(tmp_path.glob("grids/*.voxb"))
        victim.unlink()
        with pytest.raises(FileError):
            load_shapes(manifest)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FileError):
            load_manifest(tmp_path / "nope.jsonl")


class _AngleStub(np.random.Generator):
    """Generator whose uniform() always returns the bottom of the range."""

    def __init__(self):
        super().__init__(np.random.PCG64(0))

    def uniform(self, low=0.0, high=1.0, size=None):
        return low


class TestAugment:
    def grid(self):
        g = np.zeros((16, 16, 16), dtype=bool)
        g[4:12, 4:12, 4:12] = True
        return g

    def test_stage1_never_varies_caption(self):
        captions = ["one", "two", "three"]
        rng = np.random.default_rng(0)
        for _ in range(50):
            _, caption = augment(self.grid(), captions, "stage1", rng)
            assert caption == "one"

    def test_zero_angle_draw_leaves_grid_unchanged(self):
        grid = self.grid()
        out, _ = augment(grid, ["a", "b", "c"], "stage1", _AngleStub())
        assert (out == grid).all()

    def test_stage2_caption_variants_roughly_uniform(self):
        captions = ["one", "two", "three"]
        counts = {c: 0 for c in captions}
        rng = np.random.default_rng(1)
        grid = self.grid()
        n = 3000
        for _ in range(n):
            _, caption = augment(grid, captions, "stage2", rng)
            counts[caption] += 1
        for c, k in counts.items():
            assert 0.306 <= k / n <= 0.360, (c, k)

    def test_rejects_unknown_stage(self):
        with pytest.raises(ConfigError):
            augment(self.grid(), ["a", "b", "c"], "stage3", np.random.default_rng(0))


def test_manifest_hash_covers_generator_seed(tmp_path):
    h1 = hashlib.sha256(build_manifest(small_config(seed=1), tmp_path / "a").read_bytes()).hexdigest()
    h2 = hashlib.sha256(build_manifest(small_config(seed=2), tmp_path / "b").read_bytes()).hexdigest()
    assert h1 != h2
