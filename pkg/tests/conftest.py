"""Shared fixtures: a small in-memory corpus and trained overfit stacks.

The trained fixtures are session-scoped because they cost minutes; tests
treat them as read-only.
"""
from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from voxpatch.cli import build_pipeline_config
from voxpatch.config import RunConfig
from voxpatch.corruption import TrainRanges
from voxpatch.dataset import LoadedShape, ShapeDataset
from voxpatch.lm import LmTrainConfig, Tokenizer, pretrain_lm
from voxpatch.metrics import MetricsLog
from voxpatch.projection import STAGE1_INSTRUCTION, STAGE2_INSTRUCTION
from voxpatch.shapes import CATEGORIES, generate_shape, sample_params
from voxpatch.training import PipelineState, StageConfig, frozen_hashes, run_stage1, run_stage2
from voxpatch.vae import VaeTrainConfig, train_vae

GRID_N = 16
PATCH = (4, 4, 4)
MILD_RANGES = TrainRanges(mask_ratio=(0.1, 0.35), noise_level=(0.005, 0.01))


def make_shape(category: str, seed: int, grid_n: int = GRID_N) -> LoadedShape:
    rng = np.random.default_rng(seed)
    grid, captions = generate_shape(category, sample_params(category, grid_n, rng), rng, grid_n)
    return LoadedShape(f"{category}-{seed}", category, grid, captions, "train")


@pytest.fixture(scope="session")
def corpus16() -> ShapeDataset:
    """12 shapes, 3 per category over 4 categories, 16^3 grids."""
    shapes = [
        make_shape(cat, 100 * ci + k)
        for ci, cat in enumerate(CATEGORIES[:4])
        for k in range(3)
    ]
    return ShapeDataset((GRID_N,) * 3, PATCH, shapes)


@pytest.fixture(scope="session")
def trained_base(corpus16):
    """VAE + pretrained LM over the small corpus; no projections yet."""
    t0 = time.time()
    cfg = RunConfig(grid=GRID_N, patch=4, lm_dim=64, vae_latent=16)
    pipeline_cfg = build_pipeline_config(cfg, corpus16)
    vae_log = MetricsLog()
    vae = train_vae(
        corpus16, pipeline_cfg.vae, VaeTrainConfig(epochs=300, batch_size=128, seed=0), vae_log
    )
    state = PipelineState(pipeline_cfg, Tokenizer(pipeline_cfg.vocab), vae, stages=["vae"])
    corpus = [c for s in corpus16.shapes for c in s.captions] * 9
    corpus += [STAGE1_INSTRUCTION, STAGE2_INSTRUCTION]
    lm_log = MetricsLog()
    state.lm = pretrain_lm(
        corpus, state.tokenizer, pipeline_cfg.lm, LmTrainConfig(epochs=50, seed=0), lm_log
    )
    state.stages = state.stages + ["pretrain_lm"]
    return {
        "state": state,
        "vae_log": vae_log,
        "lm_log": lm_log,
        "corpus_size": len(corpus),
        "elapsed": time.time() - t0,
    }


def clone_state(state: PipelineState) -> PipelineState:
    return PipelineState.from_checkpoint(state.to_checkpoint())


@pytest.fixture(scope="session")
def overfit4(corpus16, trained_base):
    """Stage-1 trained to memorize the captions of 4 shapes."""
    targets = [corpus16.shapes[i] for i in (0, 3, 6, 9)]
    ds = ShapeDataset(corpus16.grid_dims, corpus16.patch_dims, targets)
    state = clone_state(trained_base["state"])
    before = frozen_hashes(state, ["vae", "lm"])
    log = MetricsLog()
    state = run_stage1(
        ds, state,
        StageConfig(epochs=1500, batch_size=4, lr=3e-3, seed=0, augment=False, ranges=MILD_RANGES),
        log,
    )
    after = frozen_hashes(state, ["vae", "lm"])
    return {"state": state, "targets": targets, "before": before, "after": after, "log": log}


@pytest.fixture(scope="session")
def overfit1(corpus16, trained_base):
    """Stage-2 trained to memorize one shape (after a brief stage 1)."""
    t0 = time.time()
    target = corpus16.shapes[0]
    ds = ShapeDataset(corpus16.grid_dims, corpus16.patch_dims, [target])
    state = clone_state(trained_base["state"])
    state = run_stage1(
        ds, state,
        StageConfig(epochs=100, batch_size=1, lr=3e-3, seed=0, augment=False, ranges=MILD_RANGES),
        MetricsLog(),
    )
    in_proj_before = frozen_hashes(state, ["in_proj"])
    log = MetricsLog()
    state = run_stage2(
        ds, state, StageConfig(epochs=400, batch_size=1, lr=1e-3, seed=0, augment=False), log
    )
    in_proj_after = frozen_hashes(state, ["in_proj"])
    return {
        "state": state,
        "target": target,
        "log": log,
        "in_proj_before": in_proj_before,
        "in_proj_after": in_proj_after,
        "elapsed": (time.time() - t0) + trained_base["elapsed"],
    }
