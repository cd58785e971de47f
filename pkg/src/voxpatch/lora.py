"""Low-rank adapters for the attention projections of the language model.

Each adapted weight W gains a residual (alpha/rank) * B @ A with B
zero-initialized, so a freshly attached adapter leaves the forward pass
bit-identical to the base model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .lm import TinyLm

ADAPTED_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0
    dropout: float = 0.05


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank update."""

    def __init__(self, base: nn.Linear, config: LoraConfig):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        out_features, in_features = base.weight.shape
        self.lora_A = nn.Parameter(torch.empty(config.rank, in_features))
        self.lora_B = nn.Parameter(torch.zeros(out_features, config.rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.scaling = config.alpha / config.rank
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = self.dropout(x) @ self.lora_A.t() @ self.lora_B.t()
        return self.base(x) + self.scaling * delta


def attach_lora(model: TinyLm, config: LoraConfig) -> TinyLm:
    """Wrap every attention projection; base weights are frozen in place."""
    for block in model.blocks:
        for name in ADAPTED_PROJECTIONS:
            layer = getattr(block.attn, name)
            if isinstance(layer, LoraLinear):
                raise ValueError(f"{name} already has an adapter attached")
            setattr(block.attn, name, LoraLinear(layer, config))
    return model


def has_lora(model: TinyLm) -> bool:
    return any(isinstance(m, LoraLinear) for m in model.modules())


def lora_parameters(model: TinyLm):
    for name, param in model.named_parameters():
        if ".lora_A" in name or ".lora_B" in name:
            yield param


def lm_base_state(model: TinyLm) -> dict[str, torch.Tensor]:
    """Base parameters under adapter-independent names."""
    state = {}
    for name, param in model.named_parameters():
        if ".lora_A" in name or ".lora_B" in name:
            continue
        state[name.replace(".base.", ".")] = param.detach()
    return state


def adapters_state(model: TinyLm) -> dict[str, torch.Tensor]:
    return {
        name: param.detach()
        for name, param in model.named_parameters()
        if ".lora_A" in name or ".lora_B" in name
    }
