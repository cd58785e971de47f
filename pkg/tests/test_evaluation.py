import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import voxpatch.evaluation as evaluation
from voxpatch.corruption import CorruptionSpec, apply_corruption
from voxpatch.dataset import LoadedShape, ShapeDataset
from voxpatch.errors import DimensionMismatch, EmptyGrid
from voxpatch.evaluation import (
    DEFAULT_PRESETS,
    EvalPreset,
    chamfer,
    complete,
    evaluate_suite,
    iterative_refine,
)
from voxpatch.voxel import iou


def random_grid(dims, seed, density=0.3):
    rng = np.random.default_rng(seed)
    return rng.random(dims) < density


def brute_force_chamfer(a, b):
    """O(n*m) oracle on occupied coordinates, squared distances."""
    pa = np.argwhere(a).astype(np.float64)
    pb = np.argwhere(b).astype(np.float64)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


class TestChamfer:
    def test_identical_grids_give_zero(self):
        g = random_grid((8, 8, 8), seed=0)
        assert chamfer(g, g) == 0.0

    def test_single_pair_arithmetic(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[0, 0, 0] = True
        b[3, 4, 0] = True
        assert chamfer(a, b) == 50.0  # 25 + 25

    def test_empty_grid_rejected(self):
        g = random_grid((4, 4, 4), seed=1)
        with pytest.raises(EmptyGrid):
            chamfer(g, np.zeros((4, 4, 4), dtype=bool))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            n = int(rng.integers(4, 13))
            a = random_grid((n, n, n), seed=100 + trial, density=0.2)
            b = random_grid((n, n, n), seed=200 + trial, density=0.2)
            if not a.any() or not b.any():
                continue
            assert chamfer(a, b) == brute_force_chamfer(a, b)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 400), st.integers(0, 400))
    def test_symmetric_and_zero_iff_equal_sets(self, sa, sb):
        a = random_grid((6, 6, 6), seed=sa, density=0.25)
        b = random_grid((6, 6, 6), seed=sb, density=0.25)
        if not a.any() or not b.any():
            return
        assert chamfer(a, b) == chamfer(b, a)
        assert (chamfer(a, b) == 0.0) == bool((a == b).all())


class TestComplete:
    def test_rejects_wrong_dims(self, overfit1):
        with pytest.raises(DimensionMismatch):
            complete(overfit1["state"], np.zeros((8, 8, 8), dtype=bool), "a ring")

    def test_output_dims_match_input(self, overfit1):
        target = overfit1["target"]
        out = complete(overfit1["state"], target.grid, target.captions[0])
        assert out.shape == target.grid.shape
        assert out.dtype == np.bool_

    def test_deterministic_replay(self, overfit1):
        target = overfit1["target"]
        spec = CorruptionSpec("random_noise", 0.02, None, 9)
        corrupted = apply_corruption(target.grid, spec, (4, 4, 4))
        a = complete(overfit1["state"], corrupted, target.captions[0])
        b = complete(overfit1["state"], corrupted, target.captions[0])
        assert (a == b).all()


class TestIterativeRefine:
    def test_one_step_equals_complete(self, overfit1):
        target = overfit1["target"]
        spec = CorruptionSpec("random_noise", 0.02, None, 11)
        corrupted = apply_corruption(target.grid, spec, (4, 4, 4))
        single = complete(overfit1["state"], corrupted, target.captions[0])
        refined, rows = iterative_refine(overfit1["state"], corrupted, target.captions[0], 1)
        assert (refined == single).all()
        assert len(rows) == 1

    def test_log_has_one_row_per_step(self, overfit1):
        target = overfit1["target"]
        refined, rows = iterative_refine(
            overfit1["state"], target.grid, target.captions[0], 3, ground_truth=target.grid
        )
        assert [r["step"] for r in rows] == [1, 2, 3]
        assert all("cd" in r and "iou" in r for r in rows)

    def test_rejects_zero_steps(self, overfit1):
        with pytest.raises(DimensionMismatch):
            iterative_refine(overfit1["state"], overfit1["target"].grid, "a", 0)


class TestEvaluateSuite:
    def make_dataset(self, corpus16):
        shapes = []
        for i, s in enumerate(corpus16.shapes[:4]):
            shapes.append(LoadedShape(s.id, s.category, s.grid, s.captions,
                                      "test" if i < 2 else "train"))
        return ShapeDataset(corpus16.grid_dims, corpus16.patch_dims, shapes)

    def test_row_count_is_tests_times_presets(self, corpus16, overfit1):
        ds = self.make_dataset(corpus16)
        report = evaluate_suite(overfit1["state"], ds, DEFAULT_PRESETS, seed=5)
        assert len(report.rows) == 2 * len(DEFAULT_PRESETS)
        assert report.presets == [p.name for p in DEFAULT_PRESETS]

    def test_replaying_row_seed_reproduces_cd(self, corpus16, overfit1):
        ds = self.make_dataset(corpus16)
        report = evaluate_suite(overfit1["state"], ds, DEFAULT_PRESETS[:2], seed=6)
        row = next(r for r in report.rows if r["cd"] is not None)
        spec = CorruptionSpec.from_record(row["corruption"])
        shape = next(s for s in ds.shapes if s.id == row["shape_id"])
        corrupted = apply_corruption(shape.grid, spec, ds.patch_dims)
        completed = complete(overfit1["state"], corrupted, shape.captions[0])
        assert chamfer(completed, shape.grid) == row["cd"]

    def test_empty_completions_become_failure_rows(self, corpus16, overfit1, monkeypatch):
        ds = self.make_dataset(corpus16)

        def empty_complete(state, grid, caption):
            return np.zeros_like(grid)

        monkeypatch.setattr(evaluation, "complete", empty_complete)
        report = evaluate_suite(overfit1["state"], ds, DEFAULT_PRESETS[:1], seed=7)
        assert len(report.rows) == 2
        assert all(r["error"] is not None for r in report.rows)
        agg = report.aggregates[DEFAULT_PRESETS[0].name]
        assert agg["failures"] == 2
        assert agg["cd_mean"] is None

    def test_report_serialization_and_table(self, corpus16, overfit1, tmp_path):
        ds = self.make_dataset(corpus16)
        report = evaluate_suite(overfit1["state"], ds, DEFAULT_PRESETS[:2], seed=8,
                                checkpoint_hash="abc", config_echo={"seed": 8})
        path = tmp_path / "report.jsonl"
        report.save(path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1 + len(report.rows)
        table = report.table()
        assert "seg20" in table and "cd_mean" in table

    def test_empty_test_split_rejected(self, corpus16, overfit1):
        with pytest.raises(EmptyGrid):
            evaluate_suite(overfit1["state"], corpus16, DEFAULT_PRESETS, seed=9)


def test_preset_definitions_match_protocol():
    by_name = {p.name: p for p in DEFAULT_PRESETS}
    assert by_name["seg20"] == EvalPreset("seg20", "plane_mask", 0.2, "x")
    assert by_name["seg50"].ratio == 0.5
    assert by_name["seg80"].ratio == 0.8
    assert by_name["noise1"] == EvalPreset("noise1", "random_noise", 0.01)
    assert by_name["noise2"].ratio == 0.02
