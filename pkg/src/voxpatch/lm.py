"""Word-level tokenizer and a small decoder-only transformer.

The model consumes embedding sequences directly, so projected 3D tokens
and text tokens can interleave.  Forward passes return both next-token
logits and the hidden states of five tapped layers, which downstream
projections consume.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContextOverflow, Divergence, UnknownToken
from .metrics import MetricsLog

PAD, BOS, EOS, VOX = "<pad>", "<bos>", "<eos>", "<vox>"
SPECIALS = (PAD, BOS, EOS, VOX)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


class Tokenizer:
    """Word-level vocabulary: specials first, then sorted corpus words."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ConfigError("tokenizer vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    @classmethod
    def from_corpus(cls, texts: list[str]) -> "Tokenizer":
        words = sorted({w for t in texts for w in normalize(t).split()})
        return cls(list(SPECIALS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def bos_id(self) -> int:
        return self.ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    @property
    def vox_id(self) -> int:
        return self.ids[VOX]

    def tokenize(self, text: str) -> list[int]:
        out = []
        for word in normalize(text).split():
            if word not in self.ids:
                raise UnknownToken(f"word {word!r} is not in the vocabulary")
            out.append(self.ids[word])
        return out

    def detokenize(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls(Path(path).read_text().splitlines())


@dataclass
class LmConfig:
    vocab_size: int
    n_layers: int = 6
    model_dim: int = 128
    n_heads: int = 4
    context: int = 640
    tap_layers: tuple[int, ...] = (2, 3, 4, 5, 6)
    mlp_ratio: int = 4

    def __post_init__(self):
        self.tap_layers = tuple(self.tap_layers)
        if len(self.tap_layers) != 5:
            raise ConfigError(f"exactly 5 tap layers required, got {self.tap_layers}")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ConfigError(f"tap layers must be strictly increasing, got {self.tap_layers}")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > self.n_layers:
            raise ConfigError(
                f"tap layers {self.tap_layers} outside [1, {self.n_layers}]"
            )
        if self.model_dim % self.n_heads:
            raise ConfigError("model_dim must be divisible by n_heads")


@dataclass
class LmTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    holdout_fraction: float = 0.1


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_probs: bool = False):
        b, t, d = x.shape
        shape = (b, t, self.n_heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        mask = torch.full((t, t), float("-inf"), dtype=x.dtype).triu(1)
        probs = torch.softmax(scores + mask, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, t, d)
        out = self.o_proj(out)
        return (out, probs) if return_probs else out


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TinyLm(nn.Module):
    def __init__(self, config: LmConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.model_dim)
        self.pos_emb = nn.Embedding(config.context, config.model_dim)
        self.blocks = nn.ModuleList(
            Block(config.model_dim, config.n_heads, config.mlp_ratio)
            for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.model_dim)
        self.head = nn.Linear(config.model_dim, config.vocab_size)
        for emb in (self.tok_emb, self.pos_emb):
            nn.init.normal_(emb.weight, std=0.02)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def forward_embeddings(self, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, d) content embeddings -> (logits (B, T, V), taps (B, 5, T, d)).

        Positional embeddings are added here, so interleaved 3D tokens get
        the same positional scheme as text.  Causal masking throughout.
        """
        squeeze = emb.ndim == 2
        if squeeze:
            emb = emb.unsqueeze(0)
        t = emb.shape[1]
        if t > self.config.context:
            raise ContextOverflow(f"sequence length {t} exceeds context {self.config.context}")
        x = emb + self.pos_emb.weight[:t]
        taps = []
        wanted = set(self.config.tap_layers)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in wanted:
                taps.append(x)
        logits = self.head(self.ln_f(x))
        tapped = torch.stack(taps, dim=1)
        if squeeze:
            return logits.squeeze(0), tapped.squeeze(0)
        return logits, tapped

    def forward_tokens(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.forward_embeddings(self.embed_tokens(ids))


def caption_nll(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of targets at masked positions."""
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    flat_mask = mask.reshape(-1)
    return F.cross_entropy(flat_logits[flat_mask], flat_targets[flat_mask])


@torch.no_grad()
def generate_caption(
    model: TinyLm, prefix_emb: torch.Tensor, max_len: int, eos_id: int
) -> list[int]:
    """Greedy decoding from an embedding prefix until EOS or max_len."""
    model.eval()
    emb = prefix_emb
    out: list[int] = []
    for _ in range(max_len):
        logits, _ = model.forward_embeddings(emb)
        next_id = int(logits[-1].argmax())
        if next_id == eos_id:
            break
        out.append(next_id)
        next_emb = model.embed_tokens(torch.tensor([next_id]))
        emb = torch.cat([emb, next_emb], dim=0)
    return out


def _caption_batch(ids_list: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    width = max(len(ids) for ids in ids_list)
    seqs = torch.full((len(ids_list), width), pad_id, dtype=torch.long)
    for row, ids in enumerate(ids_list):
        seqs[row, : len(ids)] = torch.tensor(ids)
    inputs, targets = seqs[:, :-1], seqs[:, 1:]
    return inputs, targets, targets != pad_id


def heldout_nll(model: TinyLm, sequences: list[list[int]], pad_id: int) -> float:
    model.eval()
    with torch.no_grad():
        inputs, targets, mask = _caption_batch(sequences, pad_id)
        logits, _ = model.forward_tokens(inputs)
        return float(caption_nll(logits, targets, mask))


def pretrain_lm(
    captions: list[str],
    tokenizer: Tokenizer,
    config: LmConfig,
    train_config: LmTrainConfig,
    log: MetricsLog | None = None,
) -> TinyLm:
    """Next-token pretraining on the caption corpus (BOS caption EOS)."""
    if len(captions) < 100:
        raise ConfigError(f"pretraining needs at least 100 captions, got {len(captions)}")
    log = log or MetricsLog()
    torch.manual_seed(train_config.seed)
    model = TinyLm(config)
    sequences = [
        [tokenizer.bos_id] + tokenizer.tokenize(c) + [tokenizer.eos_id] for c in captions
    ]
    rng = np.random.default_rng(train_config.seed)
    order = rng.permutation(len(sequences))
    n_holdout = max(1, int(train_config.holdout_fraction * len(sequences)))
    holdout = [sequences[i] for i in order[:n_holdout]]
    train = [sequences[i] for i in order[n_holdout:]]
    opt = torch.optim.AdamW(
        model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay
    )
    step = 0
    t0 = time.time()
    log.append(stage="pretrain_lm", step=0, heldout=heldout_nll(model, holdout, tokenizer.pad_id))
    for epoch in range(train_config.epochs):
        model.train()
        idx = rng.permutation(len(train))
        for start in range(0, len(train), train_config.batch_size):
            batch = [train[i] for i in idx[start : start + train_config.batch_size]]
            inputs, targets, mask = _caption_batch(batch, tokenizer.pad_id)
            logits, _ = model.forward_tokens(inputs)
            loss = caption_nll(logits, targets, mask)
            if not torch.isfinite(loss):
                raise Divergence(f"lm pretraining loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if step % 50 == 0:
                log.append(
                    stage="pretrain_lm", step=step, epoch=epoch, loss=float(loss.detach()),
                    wall=round(time.time() - t0, 3),
                )
    log.append(
        stage="pretrain_lm", step=step,
        heldout=heldout_nll(model, holdout, tokenizer.pad_id),
    )
    return model
