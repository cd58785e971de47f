"""Two-stage training orchestration and the pipeline parameter bundle.

Stage 1 trains only the input projection against caption NLL, with the
language model and VAE frozen.  Stage 2 trains the output projection from
scratch and adapts the LM with LoRA, regressing predicted patch latents
onto the ground-truth VAE means.  Frozen sets are enforced by parameter
hashes before and after each stage.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, require_matching_config
from .corruption import CorruptionSpec, TrainRanges, apply_corruption, derive_seed, sample_corruption
from .dataset import LoadedShape, ShapeDataset, augment
from .errors import ConfigError, Divergence, FrozenSetViolation
from .lm import LmConfig, TinyLm, Tokenizer, caption_nll, generate_caption
from .lora import LoraConfig, adapters_state, attach_lora, has_lora, lm_base_state, lora_parameters
from .metrics import MetricsLog
from .projection import (
    InputProjection,
    OutputProjection,
    OutputProjectionConfig,
    assemble_stage1_sequence,
    assemble_stage2_sequence,
)
from .vae import PatchVae, VaeConfig, patches_to_tensor, reparameterize
from .voxel import patchify


@dataclass
class PipelineConfig:
    """Everything needed to rebuild the module stack from a checkpoint."""

    grid_dims: tuple[int, int, int]
    patch_dims: tuple[int, int, int]
    vocab: list[str]
    vae: VaeConfig
    lm: LmConfig
    lora: LoraConfig
    ff_dim: int = 256
    mlp_hidden: int = 64

    @property
    def p(self) -> int:
        return (
            (self.grid_dims[0] // self.patch_dims[0])
            * (self.grid_dims[1] // self.patch_dims[1])
            * (self.grid_dims[2] // self.patch_dims[2])
        )

    def to_dict(self) -> dict:
        return {
            "grid_dims": list(self.grid_dims),
            "patch_dims": list(self.patch_dims),
            "vocab": self.vocab,
            "vae": {
                "patch_n": self.vae.patch_n,
                "hidden_dim": self.vae.hidden_dim,
                "latent_dim": self.vae.latent_dim,
                "beta": self.vae.beta,
            },
            "lm": {
                "vocab_size": self.lm.vocab_size,
                "n_layers": self.lm.n_layers,
                "model_dim": self.lm.model_dim,
                "n_heads": self.lm.n_heads,
                "context": self.lm.context,
                "tap_layers": list(self.lm.tap_layers),
                "mlp_ratio": self.lm.mlp_ratio,
            },
            "lora": {
                "rank": self.lora.rank,
                "alpha": self.lora.alpha,
                "dropout": self.lora.dropout,
            },
            "out_proj": {"ff_dim": self.ff_dim, "mlp_hidden": self.mlp_hidden},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            grid_dims=tuple(d["grid_dims"]),
            patch_dims=tuple(d["patch_dims"]),
            vocab=list(d["vocab"]),
            vae=VaeConfig(**d["vae"]),
            lm=LmConfig(**d["lm"]),
            lora=LoraConfig(**d["lora"]),
            ff_dim=d["out_proj"]["ff_dim"],
            mlp_hidden=d["out_proj"]["mlp_hidden"],
        )


@dataclass
class StageConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    augment: bool = True
    ranges: TrainRanges = field(default_factory=TrainRanges)


@dataclass
class PipelineState:
    """Runtime bundle of all trained components."""

    config: PipelineConfig
    tokenizer: Tokenizer
    vae: PatchVae
    lm: TinyLm | None = None
    in_proj: InputProjection | None = None
    out_proj: OutputProjection | None = None
    manifest_hash: str = ""
    stages: list[str] = field(default_factory=list)

    def to_checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        tensors.update(_module_state(self.vae, "vae"))
        if self.lm is not None:
            for name, t in lm_base_state(self.lm).items():
                tensors[f"lm.{name}"] = t.numpy().astype("<f4")
            for name, t in adapters_state(self.lm).items():
                tensors[f"adapters.{name}"] = t.numpy().astype("<f4")
        if self.in_proj is not None:
            tensors.update(_module_state(self.in_proj, "in_proj"))
        if self.out_proj is not None:
            tensors.update(_module_state(self.out_proj, "out_proj"))
        return Checkpoint(
            config=self.config.to_dict(),
            manifest_hash=self.manifest_hash,
            stages=list(self.stages),
            tensors=tensors,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, expect_config: dict | None = None) -> "PipelineState":
        if expect_config is not None:
            require_matching_config(expect_config, ckpt.config)
        config = PipelineConfig.from_dict(ckpt.config)
        tokenizer = Tokenizer(config.vocab)
        vae = PatchVae(config.vae)
        _load_module_state(vae, ckpt.namespace("vae"))
        lm = None
        if ckpt.has_namespace("lm"):
            lm = TinyLm(config.lm)
            _load_module_state(lm, ckpt.namespace("lm"))
            if ckpt.has_namespace("adapters"):
                attach_lora(lm, config.lora)
                adapter_params = dict(ckpt.namespace("adapters"))
                for name, param in lm.named_parameters():
                    if ".lora_A" in name or ".lora_B" in name:
                        param.data = torch.from_numpy(adapter_params.pop(name).copy())
                if adapter_params:
                    raise ConfigError(f"unused adapter tensors: {sorted(adapter_params)}")
        in_proj = None
        if ckpt.has_namespace("in_proj"):
            in_proj = InputProjection(config.vae.latent_dim, config.lm.model_dim)
            _load_module_state(in_proj, ckpt.namespace("in_proj"))
        out_proj = None
        if ckpt.has_namespace("out_proj"):
            out_proj = OutputProjection(_oproj_config(config))
            _load_module_state(out_proj, ckpt.namespace("out_proj"))
        return cls(config, tokenizer, vae, lm, in_proj, out_proj, ckpt.manifest_hash, list(ckpt.stages))


def _oproj_config(config: PipelineConfig) -> OutputProjectionConfig:
    return OutputProjectionConfig(
        p=config.p,
        model_dim=config.lm.model_dim,
        latent_dim=config.vae.latent_dim,
        ff_dim=config.ff_dim,
        mlp_hidden=config.mlp_hidden,
        n_taps=len(config.lm.tap_layers),
    )


def _module_state(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": tensor.detach().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def _load_module_state(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})


def state_hash(arrays: dict[str, np.ndarray] | dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        value = arrays[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().numpy()
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return digest.hexdigest()


def frozen_hashes(state: PipelineState, names: list[str]) -> dict[str, str]:
    pools = {
        "vae": lambda: _module_state(state.vae, "vae"),
        "lm": lambda: {k: v for k, v in lm_base_state(state.lm).items()},
        "in_proj": lambda: _module_state(state.in_proj, "in_proj"),
    }
    return {n: state_hash(pools[n]()) for n in names}


def _assert_frozen(before: dict[str, str], after: dict[str, str]) -> None:
    for name, digest in before.items():
        if after[name] != digest:
            raise FrozenSetViolation(f"frozen parameter set {name!r} changed during training")


def _training_view(shape: LoadedShape, stage: str, rng: np.random.Generator, do_augment: bool):
    if do_augment:
        return augment(shape.grid, shape.captions, stage, rng)
    return shape.grid, shape.captions[0]


def _encode_tokens(
    state: PipelineState, grid: np.ndarray, sample: bool, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Corrupted-grid patches -> projected 3D token embeddings (p, d)."""
    patches = patchify(grid, state.config.patch_dims).patches
    with torch.no_grad():
        mu, log_var = state.vae.encode(patches_to_tensor(patches))
        feats = reparameterize(mu, log_var, generator=generator) if sample else mu
    return state.in_proj(feats)


def _collate(sequences, model_dim: int, pad_id: int):
    """Pad assembled sequences to a common width.

    Returns (emb (B, T, d), ids (B, T), pad_mask (B, T) True at padding).
    """
    width = max(len(s) for s in sequences)
    b = len(sequences)
    emb = torch.zeros(b, width, model_dim)
    ids = torch.full((b, width), pad_id, dtype=torch.long)
    pad = torch.ones(b, width, dtype=torch.bool)
    for i, seq in enumerate(sequences):
        n = len(seq)
        emb[i, :n] = seq.embeddings
        ids[i, :n] = seq.token_ids
        pad[i, :n] = False
    return emb, ids, pad


def run_stage1(
    dataset: ShapeDataset,
    state: PipelineState,
    cfg: StageConfig,
    log: MetricsLog | None = None,
) -> PipelineState:
    """Train the input projection on caption NLL; everything else frozen."""
    if state.lm is None:
        raise ConfigError("stage 1 requires a pretrained language model in the checkpoint")
    log = log or MetricsLog()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if state.in_proj is None:
        state.in_proj = InputProjection(state.config.vae.latent_dim, state.config.lm.model_dim)
    before = frozen_hashes(state, ["vae", "lm"])
    state.vae.requires_grad_(False)
    state.lm.requires_grad_(False)
    opt = torch.optim.AdamW(state.in_proj.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    train = dataset.split("train")
    if not train:
        raise ConfigError("stage 1 needs a non-empty train split")
    holdout = dataset.split("test") or train[: min(4, len(train))]
    log.append(stage="stage1", step=0, heldout=_stage1_heldout(dataset, state, holdout, cfg.seed))
    step, t0 = 0, time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            items = [train[i] for i in order[start : start + cfg.batch_size]]
            sequences = []
            for shape in items:
                grid, caption = _training_view(shape, "stage1", rng, cfg.augment)
                spec = sample_corruption(rng, cfg.ranges)
                corrupted = apply_corruption(grid, spec, dataset.patch_dims)
                tokens3d = _encode_tokens(state, corrupted, sample=True)
                cap_ids = state.tokenizer.tokenize(caption) + [state.tokenizer.eos_id]
                sequences.append(
                    assemble_stage1_sequence(cap_ids, tokens3d, state.lm, state.tokenizer)
                )
            emb, ids, _ = _collate(sequences, state.config.lm.model_dim, state.tokenizer.pad_id)
            logits, _ = state.lm.forward_embeddings(emb[:, :-1])
            targets = ids[:, 1:]
            mask = torch.zeros_like(targets, dtype=torch.bool)
            for i, seq in enumerate(sequences):
                mask[i, : len(seq) - 1] = seq.caption_target_mask()
            loss = caption_nll(logits, targets, mask)
            if not torch.isfinite(loss):
                raise Divergence(f"stage 1 loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            log.append(stage="stage1", step=step, epoch=epoch, loss=float(loss.detach()),
                       wall=round(time.time() - t0, 3))
    log.append(stage="stage1", step=step, heldout=_stage1_heldout(dataset, state, holdout, cfg.seed))
    _assert_frozen(before, frozen_hashes(state, ["vae", "lm"]))
    state.stages = state.stages + ["stage1"]
    return state


@torch.no_grad()
def _stage1_heldout(
    dataset: ShapeDataset, state: PipelineState, holdout: list[LoadedShape], seed: int
) -> float:
    losses = []
    for shape in holdout:
        spec = CorruptionSpec("random_mask", 0.3, None, derive_seed(seed, "s1-holdout", shape.id))
        corrupted = apply_corruption(shape.grid, spec, dataset.patch_dims)
        tokens3d = _encode_tokens(state, corrupted, sample=False)
        cap_ids = state.tokenizer.tokenize(shape.captions[0]) + [state.tokenizer.eos_id]
        seq = assemble_stage1_sequence(cap_ids, tokens3d, state.lm, state.tokenizer)
        logits, _ = state.lm.forward_embeddings(seq.embeddings[:-1])
        losses.append(float(caption_nll(logits, seq.token_ids[1:], seq.caption_target_mask())))
    return float(np.mean(losses))


def predict_caption(state: PipelineState, grid: np.ndarray, max_len: int = 32) -> str:
    """Greedy caption for a (possibly corrupted) grid via the stage-1 head."""
    with torch.no_grad():
        tokens3d = _encode_tokens(state, grid, sample=False)
    seq = assemble_stage1_sequence([], tokens3d, state.lm, state.tokenizer)
    ids = generate_caption(state.lm, seq.embeddings, max_len, state.tokenizer.eos_id)
    return state.tokenizer.detokenize(ids)


def run_stage2(
    dataset: ShapeDataset,
    state: PipelineState,
    cfg: StageConfig,
    log: MetricsLog | None = None,
) -> PipelineState:
    """Train output projection + LoRA adapters on latent-space MSE."""
    if state.lm is None:
        raise ConfigError("stage 2 requires a pretrained language model in the checkpoint")
    if state.in_proj is None:
        raise ConfigError("stage 2 requires a stage-1 input projection")
    log = log or MetricsLog()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if not has_lora(state.lm):
        attach_lora(state.lm, state.config.lora)
    if state.out_proj is None:
        state.out_proj = OutputProjection(_oproj_config(state.config))
    before = frozen_hashes(state, ["vae", "lm", "in_proj"])
    state.vae.requires_grad_(False)
    state.in_proj.requires_grad_(False)
    trainable = list(state.out_proj.parameters()) + list(lora_parameters(state.lm))
    opt = torch.optim.AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    train = dataset.split("train")
    if not train:
        raise ConfigError("stage 2 needs a non-empty train split")
    holdout = dataset.split("test") or train[: min(4, len(train))]
    log.append(stage="stage2", step=0, heldout=_stage2_heldout(dataset, state, holdout, cfg.seed))
    step, t0 = 0, time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            items = [train[i] for i in order[start : start + cfg.batch_size]]
            state.lm.train()
            state.out_proj.train()
            sequences, targets = [], []
            for shape in items:
                grid, caption = _training_view(shape, "stage2", rng, cfg.augment)
                spec = sample_corruption(rng, cfg.ranges)
                corrupted = apply_corruption(grid, spec, dataset.patch_dims)
                tokens3d = _encode_tokens(state, corrupted, sample=True)
                with torch.no_grad():
                    gt_patches = patchify(grid, dataset.patch_dims).patches
                    target_mu, _ = state.vae.encode(patches_to_tensor(gt_patches))
                sequences.append(
                    assemble_stage2_sequence(
                        state.tokenizer.tokenize(caption), tokens3d, state.lm, state.tokenizer
                    )
                )
                targets.append(target_mu)
            emb, _, pad = _collate(sequences, state.config.lm.model_dim, state.tokenizer.pad_id)
            _, taps = state.lm.forward_embeddings(emb)
            pred = state.out_proj(taps, pad_mask=pad)
            loss = F.mse_loss(pred, torch.stack(targets))
            if not torch.isfinite(loss):
                raise Divergence(f"stage 2 loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            log.append(stage="stage2", step=step, epoch=epoch, loss=float(loss.detach()),
                       wall=round(time.time() - t0, 3))
    log.append(stage="stage2", step=step, heldout=_stage2_heldout(dataset, state, holdout, cfg.seed))
    _assert_frozen(before, frozen_hashes(state, ["vae", "lm", "in_proj"]))
    state.stages = state.stages + ["stage2"]
    return state


@torch.no_grad()
def _stage2_heldout(
    dataset: ShapeDataset, state: PipelineState, holdout: list[LoadedShape], seed: int
) -> float:
    state.lm.eval()
    state.out_proj.eval()
    losses = []
    for shape in holdout:
        spec = CorruptionSpec("random_mask", 0.3, None, derive_seed(seed, "s2-holdout", shape.id))
        corrupted = apply_corruption(shape.grid, spec, dataset.patch_dims)
        tokens3d = _encode_tokens(state, corrupted, sample=False)
        target_mu, _ = state.vae.encode(
            patches_to_tensor(patchify(shape.grid, dataset.patch_dims).patches)
        )
        seq = assemble_stage2_sequence(
            state.tokenizer.tokenize(shape.captions[0]), tokens3d, state.lm, state.tokenizer
        )
        _, taps = state.lm.forward_embeddings(seq.embeddings)
        pred = state.out_proj(taps)
        losses.append(float(F.mse_loss(pred, target_mu)))
    return float(np.mean(losses))
