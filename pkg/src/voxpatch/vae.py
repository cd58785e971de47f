"""Patch-wise variational autoencoder.

One shared model encodes every patch of every shape independently into a
diagonal Gaussian (mu, log variance) and decodes a sampled latent back to
per-cell occupancy probabilities.  Loss is mean binary cross entropy plus
beta times the closed-form KL divergence from the standard normal prior.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import ShapeDataset
from .errors import DimensionMismatch, Divergence
from .metrics import MetricsLog
from .voxel import patchify


@dataclass
class VaeConfig:
    patch_n: int = 4
    hidden_dim: int = 64
    latent_dim: int = 32
    beta: float = 1e-4

    def __post_init__(self):
        if self.patch_n % 4 != 0:
            raise DimensionMismatch(
                f"patch size must be a multiple of 4 (two stride-2 convs), got {self.patch_n}"
            )


@dataclass
class VaeTrainConfig:
    epochs: int = 8
    batch_size: int = 256
    lr: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0


class PatchVae(nn.Module):
    """Two stride-2 conv encoder layers, mirrored transposed-conv decoder."""

    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        s = config.patch_n // 4  # spatial side after two stride-2 convs
        flat = h * s**3
        self.enc_conv1 = nn.Conv3d(1, h, kernel_size=4, stride=2, padding=1)
        self.enc_conv2 = nn.Conv3d(h, h, kernel_size=4, stride=2, padding=1)
        self.enc_head = nn.Linear(flat, 2 * config.latent_dim)
        self.dec_stem = nn.Linear(config.latent_dim, flat)
        self.dec_conv1 = nn.ConvTranspose3d(h, h, kernel_size=4, stride=2, padding=1)
        self.dec_conv2 = nn.ConvTranspose3d(h, 1, kernel_size=4, stride=2, padding=1)
        self._flat = flat
        self._side = s

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 1, n, n, n) occupancy -> (mu, log_var), each (B, latent)."""
        if x.shape[-3:] != (self.config.patch_n,) * 3:
            raise DimensionMismatch(
                f"patch shape {tuple(x.shape[-3:])} does not match config {self.config.patch_n}^3"
            )
        h = F.relu(self.enc_conv1(x))
        h = F.relu(self.enc_conv2(h))
        out = self.enc_head(h.flatten(1))
        mu, log_var = out.chunk(2, dim=1)
        return mu, log_var

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        h = self.dec_stem(z)
        h = h.view(len(z), self.config.hidden_dim, self._side, self._side, self._side)
        h = F.relu(self.dec_conv1(h))
        return self.dec_conv2(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latents -> per-cell probabilities in (0, 1), shape (B, n, n, n)."""
        return torch.sigmoid(self.decode_logits(z)).squeeze(1)


def gaussian_kld(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(log_var)) || N(0, 1)) summed over latent dims, per row."""
    return 0.5 * (mu.pow(2) + log_var.exp() - 1.0 - log_var).sum(dim=-1)


def reparameterize(
    mu: torch.Tensor, log_var: torch.Tensor, noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    if noise is None:
        noise = torch.randn(mu.shape, dtype=mu.dtype, generator=generator)
    return mu + torch.exp(0.5 * log_var) * noise


def vae_loss(
    x: torch.Tensor,
    model: PatchVae,
    beta: float,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (total, bce, kld); total = bce + beta * kld.

    bce is the mean binary cross entropy over all cells; kld is the mean
    over the batch of the per-patch closed-form divergence.
    """
    mu, log_var = model.encode(x)
    z = reparameterize(mu, log_var, noise=noise, generator=generator)
    logits = model.decode_logits(z)
    bce = F.binary_cross_entropy_with_logits(logits, x)
    kld = gaussian_kld(mu, log_var).mean()
    return bce + beta * kld, bce, kld


def patches_to_tensor(patches: np.ndarray) -> torch.Tensor:
    """(p, h, w, d) bool -> (p, 1, h, w, d) float32."""
    return torch.from_numpy(np.ascontiguousarray(patches)).float().unsqueeze(1)


def dataset_patches(dataset: ShapeDataset, split: str) -> torch.Tensor:
    pn = dataset.patch_dims
    stacks = [patchify(s.grid, pn).patches for s in dataset.split(split)]
    if not stacks:
        return torch.empty(0, 1, *pn)
    return patches_to_tensor(np.concatenate(stacks))


def train_vae(
    dataset: ShapeDataset,
    config: VaeConfig,
    train_config: VaeTrainConfig,
    log: MetricsLog | None = None,
) -> PatchVae:
    """Fit the shared patch VAE on every patch of the train split."""
    log = log or MetricsLog()
    torch.manual_seed(train_config.seed)
    model = PatchVae(config)
    x_train = dataset_patches(dataset, "train")
    if not len(x_train):
        raise Divergence("no training patches")
    x_heldout = dataset_patches(dataset, "test")
    if not len(x_heldout):
        x_heldout = x_train[: min(len(x_train), 512)]
    opt = torch.optim.AdamW(
        model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay
    )
    rng = np.random.default_rng(train_config.seed)
    step = 0
    t0 = time.time()
    log.append(stage="vae", step=step, heldout=_heldout_loss(model, x_heldout, config.beta))
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), train_config.batch_size):
            batch = x_train[order[start : start + train_config.batch_size]]
            total, bce, kld = vae_loss(batch, model, config.beta)
            if not torch.isfinite(total):
                raise Divergence(f"vae loss became non-finite at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            if step % 50 == 0 or start + train_config.batch_size >= len(order):
                log.append(
                    stage="vae", step=step, epoch=epoch, loss=float(total.detach()),
                    bce=float(bce.detach()), kld=float(kld.detach()),
                    wall=round(time.time() - t0, 3),
                )
    log.append(stage="vae", step=step, heldout=_heldout_loss(model, x_heldout, config.beta))
    return model


@torch.no_grad()
def _heldout_loss(model: PatchVae, x: torch.Tensor, beta: float) -> float:
    mu, log_var = model.encode(x)
    logits = model.decode_logits(mu)
    bce = F.binary_cross_entropy_with_logits(logits, x)
    return float(bce + beta * gaussian_kld(mu, log_var).mean())


@torch.no_grad()
def encode_mu(model: PatchVae, patches: np.ndarray) -> torch.Tensor:
    """Deterministic latents (mu) for a stack of boolean patches."""
    mu, _ = model.encode(patches_to_tensor(patches))
    return mu


@torch.no_grad()
def decode_patches(model: PatchVae, latents: torch.Tensor, threshold: float = 0.5) -> np.ndarray:
    """Latents -> boolean patches via the 0.5 probability threshold."""
    probs = model.decode(latents)
    return (probs >= threshold).numpy()
