"""Bridges between VAE latent space and the language model.

The input projection is one affine map shared across all patch positions.
The output projection reads five tapped hidden-state sequences, fuses
them, runs a small encoder/decoder transformer against a learned query
sequence of fixed length p, and maps each decoder output through its own
per-position MLP back to latent space.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContextOverflow, DimensionMismatch
from .lm import TinyLm, Tokenizer

STAGE1_INSTRUCTION = "Given the incomplete 3D input, describe the 3D model by text."
STAGE2_INSTRUCTION = "Given the caption, recover the incomplete 3D model"


class InputProjection(nn.Linear):
    """Affine map latent_dim -> model_dim, one weight set for all positions."""

    def __init__(self, latent_dim: int, model_dim: int):
        super().__init__(latent_dim, model_dim)


@dataclass
class OutputProjectionConfig:
    p: int
    model_dim: int
    latent_dim: int
    ff_dim: int = 256
    n_heads: int = 4
    n_taps: int = 5
    mlp_hidden: int = 64
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2


class MlpCluster(nn.Module):
    """p independent 2-layer MLPs; MLP i reads only decoder output i."""

    def __init__(self, p: int, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(p, in_dim, hidden))
        self.b1 = nn.Parameter(torch.zeros(p, hidden))
        self.w2 = nn.Parameter(torch.empty(p, hidden, out_dim))
        self.b2 = nn.Parameter(torch.zeros(p, out_dim))
        bound1 = 1.0 / in_dim**0.5
        bound2 = 1.0 / hidden**0.5
        nn.init.uniform_(self.w1, -bound1, bound1)
        nn.init.uniform_(self.b1, -bound1, bound1)
        nn.init.uniform_(self.w2, -bound2, bound2)
        nn.init.uniform_(self.b2, -bound2, bound2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.einsum("bpd,pdh->bph", x, self.w1) + self.b1
        h = torch.relu(h)
        return torch.einsum("bph,phl->bpl", h, self.w2) + self.b2


class OutputProjection(nn.Module):
    def __init__(self, config: OutputProjectionConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.fuse = nn.Linear(config.n_taps * d, d)
        self.queries = nn.Parameter(torch.empty(config.p, d))
        nn.init.normal_(self.queries, std=0.02)
        enc_layer = nn.TransformerEncoderLayer(
            d, config.n_heads, config.ff_dim, dropout=0.0, batch_first=True
        )
        dec_layer = nn.TransformerDecoderLayer(
            d, config.n_heads, config.ff_dim, dropout=0.0, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(enc_layer, config.n_encoder_layers)
        self.decoder = nn.TransformerDecoder(dec_layer, config.n_decoder_layers)
        self.mlps = MlpCluster(config.p, d, config.mlp_hidden, config.latent_dim)

    def forward(
        self, taps: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """(B, n_taps, T, d) tapped states -> (B, p, latent_dim) latents.

        ``pad_mask`` marks padded sequence positions (True = ignore).
        Output length is always p, whatever the text length.
        """
        squeeze = taps.ndim == 3
        if squeeze:
            taps = taps.unsqueeze(0)
        b, n_taps, t, d = taps.shape
        if n_taps != self.config.n_taps:
            raise DimensionMismatch(f"expected {self.config.n_taps} taps, got {n_taps}")
        fused = self.fuse(taps.permute(0, 2, 1, 3).reshape(b, t, n_taps * d))
        memory = self.encoder(fused, src_key_padding_mask=pad_mask)
        queries = self.queries.unsqueeze(0).expand(b, -1, -1)
        decoded = self.decoder(queries, memory, memory_key_padding_mask=pad_mask)
        out = self.mlps(decoded)
        return out.squeeze(0) if squeeze else out


@dataclass
class AssembledSequence:
    """Embeddings plus segment bookkeeping for one prompt.

    ``token_ids`` carries the vox placeholder id at 3D-token positions so
    every position has a token-space identity; spans are half-open
    [start, stop) indices for instruction, patches, and caption segments.
    """

    embeddings: torch.Tensor
    token_ids: torch.Tensor
    spans: dict[str, tuple[int, int]]

    def __len__(self) -> int:
        return len(self.token_ids)

    def caption_target_mask(self) -> torch.Tensor:
        """Mask over targets (ids shifted left by one) selecting the caption."""
        start, stop = self.spans["caption"]
        mask = torch.zeros(len(self) - 1, dtype=torch.bool)
        mask[start - 1 : stop - 1] = True
        return mask


def _assemble(
    instruction: str,
    patch_embeddings: torch.Tensor,
    caption_ids: list[int],
    model: TinyLm,
    tokenizer: Tokenizer,
) -> AssembledSequence:
    instr_ids = tokenizer.tokenize(instruction)
    segments = [
        torch.tensor(instr_ids, dtype=torch.long),
        torch.full((len(patch_embeddings),), tokenizer.vox_id, dtype=torch.long),
        torch.tensor(caption_ids, dtype=torch.long),
    ]
    token_ids = torch.cat(segments)
    total = len(token_ids)
    if total > model.config.context:
        raise ContextOverflow(f"assembled length {total} exceeds context {model.config.context}")
    with torch.no_grad():
        instr_emb = model.embed_tokens(segments[0])
        cap_emb = model.embed_tokens(segments[2])
    embeddings = torch.cat([instr_emb, patch_embeddings, cap_emb], dim=0)
    n_i, n_p = len(instr_ids), len(patch_embeddings)
    spans = {
        "instruction": (0, n_i),
        "patches": (n_i, n_i + n_p),
        "caption": (n_i + n_p, total),
    }
    return AssembledSequence(embeddings, token_ids, spans)


def assemble_stage1_sequence(
    caption_ids: list[int],
    patch_embeddings: torch.Tensor,
    model: TinyLm,
    tokenizer: Tokenizer,
) -> AssembledSequence:
    """Caption-prediction layout: instruction, 3D tokens, caption."""
    return _assemble(STAGE1_INSTRUCTION, patch_embeddings, caption_ids, model, tokenizer)


def assemble_stage2_sequence(
    caption_ids: list[int],
    patch_embeddings: torch.Tensor,
    model: TinyLm,
    tokenizer: Tokenizer,
) -> AssembledSequence:
    """Completion layout: instruction, 3D tokens, caption."""
    return _assemble(STAGE2_INSTRUCTION, patch_embeddings, caption_ids, model, tokenizer)
