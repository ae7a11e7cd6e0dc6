"""Encoder-decoder transformer over item-token sequences with tied vocabulary embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import ItemIdentifier

PAD = 0
BOS = 1
NUM_SPECIALS = 2


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint vocabulary blocks: specials, one block per quantization level, suffixes.

    Slots are addressed by (level, code index), so a retokenized item keeps
    reusing the same embedding rows for unchanged codes.
    """

    levels: int
    codebook_size: int
    suffix_capacity: int

    @property
    def size(self) -> int:
        return NUM_SPECIALS + self.levels * self.codebook_size + self.suffix_capacity

    @property
    def tokens_per_item(self) -> int:
        return self.levels + 1

    def level_token(self, level: int, code: int) -> int:
        if not 0 <= level < self.levels:
            raise ValueError(f"level {level} out of range")
        if not 0 <= code < self.codebook_size:
            raise ValueError(f"code {code} out of range")
        return NUM_SPECIALS + level * self.codebook_size + code

    def suffix_token(self, suffix: int) -> int:
        if not 0 <= suffix < self.suffix_capacity:
            raise ValueError(f"suffix {suffix} out of range")
        return NUM_SPECIALS + self.levels * self.codebook_size + suffix

    def encode_identifier(self, ident: ItemIdentifier) -> tuple[int, ...]:
        ids = tuple(self.level_token(l, c) for l, c in enumerate(ident.tokens))
        return ids + (self.suffix_token(ident.suffix),)

    def decode_step_token(self, step: int, vocab_id: int) -> int:
        """Map a vocab id back to its code (or suffix ordinal) at the given step."""
        if step < self.levels:
            return vocab_id - NUM_SPECIALS - step * self.codebook_size
        return vocab_id - NUM_SPECIALS - self.levels * self.codebook_size


@dataclass
class RecommenderConfig:
    encoder_layers: int = 6
    decoder_layers: int = 6
    hidden_dim: int = 128
    ffn_dim: int = 512
    heads: int = 4
    head_dim: int = 64
    dropout: float = 0.1
    semantic_dim: int = 256
    max_items: int = 50
    final_layer_norm: bool = True

    def max_positions(self, layout: VocabLayout) -> int:
        return (self.max_items + 1) * layout.tokens_per_item


@dataclass
class TokenSequence:
    """Vocabulary ids with a validity mask (False marks PAD positions)."""

    ids: torch.Tensor  # (B, T) long
    mask: torch.Tensor  # (B, T) bool

    def __post_init__(self) -> None:
        if self.ids.shape != self.mask.shape:
            raise ValueError("ids and mask must have identical shape")

    @staticmethod
    def from_lists(rows: list[list[int]], pad_to: int | None = None) -> "TokenSequence":
        width = pad_to if pad_to is not None else max(len(r) for r in rows)
        ids = torch.full((len(rows), width), PAD, dtype=torch.long)
        mask = torch.zeros((len(rows), width), dtype=torch.bool)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
            mask[i, : len(row)] = True
        return TokenSequence(ids=ids, mask=mask)


@dataclass
class RecommenderOutput:
    encoder_states: torch.Tensor  # (B, |X|, d_h)
    decoder_states: torch.Tensor  # (B, T_dec, d_h)
    logits: torch.Tensor  # (B, T_dec, vocab)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an explicit head dimension."""

    def __init__(self, hidden_dim: int, heads: int, head_dim: int, dropout: float):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.q_proj = nn.Linear(hidden_dim, inner)
        self.k_proj = nn.Linear(hidden_dim, inner)
        self.v_proj = nn.Linear(hidden_dim, inner)
        self.out_proj = nn.Linear(inner, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def project_kv(self, key_value: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Precompute (k, v) head tensors so repeated decode steps can reuse them."""
        b = key_value.shape[0]
        shape = (b, -1, self.heads, self.head_dim)
        k = self.k_proj(key_value).view(*shape).transpose(1, 2)
        v = self.v_proj(key_value).view(*shape).transpose(1, 2)
        return k, v

    def forward(
        self,
        query: torch.Tensor,
        key_value: torch.Tensor | None = None,
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
        kv: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        b, tq, _ = query.shape
        if kv is None:
            assert key_value is not None
            kv = self.project_kv(key_value)
        k, v = kv
        tk = k.shape[2]
        q = self.q_proj(query).view(b, tq, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.triu(
                torch.ones(tq, tk, dtype=torch.bool, device=query.device), diagonal=1
            )
            scores = scores.masked_fill(future, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        merged = (attn @ v).transpose(1, 2).reshape(b, tq, self.heads * self.head_dim)
        return self.out_proj(merged)


class FeedForward(nn.Module):
    def __init__(self, hidden_dim: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(hidden_dim, ffn_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, hidden_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: RecommenderConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.hidden_dim, cfg.heads, cfg.head_dim, cfg.dropout)
        self.ffn = FeedForward(cfg.hidden_dim, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, key_mask=mask))
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: RecommenderConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.hidden_dim, cfg.heads, cfg.head_dim, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.hidden_dim, cfg.heads, cfg.head_dim, cfg.dropout)
        self.ffn = FeedForward(cfg.hidden_dim, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.norm3 = nn.LayerNorm(cfg.hidden_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor | None,
        memory_mask: torch.Tensor,
        cross_kv: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, causal=True))
        x = x + self.dropout(
            self.cross_attn(self.norm2(x), memory, key_mask=memory_mask, kv=cross_kv)
        )
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


class Seq2SeqRecommender(nn.Module):
    """Token-level sequence model: encode history tokens, decode the target identifier.

    The vocabulary embedding matrix is shared between input lookup and the
    output scoring head.
    """

    def __init__(self, config: RecommenderConfig, layout: VocabLayout):
        super().__init__()
        self.config = config
        self.layout = layout
        d = config.hidden_dim
        self.token_emb = nn.Embedding(layout.size, d)
        self.enc_pos = nn.Embedding(config.max_positions(layout), d)
        self.dec_pos = nn.Embedding(layout.tokens_per_item + 1, d)
        self.enc_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.encoder_layers))
        self.dec_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.decoder_layers))
        self.enc_norm = nn.LayerNorm(d) if config.final_layer_norm else nn.Identity()
        self.dec_norm = nn.LayerNorm(d) if config.final_layer_norm else nn.Identity()
        self.dropout = nn.Dropout(config.dropout)
        self.seq_proj = nn.Linear(d, config.semantic_dim)
        self.pref_proj = nn.Linear(d, config.semantic_dim)

    def _check_ids(self, ids: torch.Tensor) -> None:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.layout.size):
            raise ValueError(
                f"token id out of vocabulary [0, {self.layout.size}): "
                f"min={int(ids.min())}, max={int(ids.max())}"
            )

    def embed_and_encode(self, x: TokenSequence) -> torch.Tensor:
        """Token + position embeddings through the encoder stack; PAD keys are masked out."""
        self._check_ids(x.ids)
        t = x.ids.shape[1]
        if t > self.enc_pos.num_embeddings:
            raise ValueError(f"sequence of {t} tokens exceeds {self.enc_pos.num_embeddings} positions")
        h = self.token_emb(x.ids) + self.enc_pos.weight[:t]
        h = self.dropout(h)
        for layer in self.enc_layers:
            h = layer(h, x.mask)
        return self.enc_norm(h)

    def precompute_cross_kv(
        self, encoder_states: torch.Tensor
    ) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Cross-attention key/value tensors per decoder layer for repeated decoding."""
        return [layer.cross_attn.project_kv(encoder_states) for layer in self.dec_layers]

    def decode(
        self,
        encoder_states: torch.Tensor | None,
        encoder_mask: torch.Tensor,
        prefix: TokenSequence,
        cross_kv: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Causal decoding of a BOS-led prefix; logits tie to the embedding matrix."""
        if prefix.ids.shape[1] == 0:
            raise ValueError("decoder prefix is empty")
        if not (prefix.ids[:, 0] == BOS).all():
            raise ValueError("decoder prefix must start with BOS")
        self._check_ids(prefix.ids)
        t = prefix.ids.shape[1]
        h = self.token_emb(prefix.ids) + self.dec_pos.weight[:t]
        h = self.dropout(h)
        for i, layer in enumerate(self.dec_layers):
            h = layer(
                h,
                encoder_states,
                memory_mask=encoder_mask,
                cross_kv=cross_kv[i] if cross_kv is not None else None,
            )
        h = self.dec_norm(h)
        logits = h @ self.token_emb.weight.T
        return h, logits

    def forward(self, x: TokenSequence, prefix: TokenSequence) -> RecommenderOutput:
        enc = self.embed_and_encode(x)
        dec, logits = self.decode(enc, x.mask, prefix)
        return RecommenderOutput(encoder_states=enc, decoder_states=dec, logits=logits)

    def project_sequence_state(
        self, encoder_states: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Masked mean over encoder rows projected into the tokenizer's input space."""
        counts = mask.sum(dim=1)
        if (counts == 0).any():
            raise ValueError("cannot pool a fully masked sequence")
        pooled = (encoder_states * mask.unsqueeze(-1)).sum(dim=1) / counts.unsqueeze(-1)
        return self.seq_proj(pooled)

    def preference_state(self, decoder_states: torch.Tensor) -> torch.Tensor:
        """The BOS-position decoder state projected into the tokenizer's input space."""
        if decoder_states.shape[1] == 0:
            raise ValueError("decoder states are empty")
        return self.pref_proj(decoder_states[:, 0])


def rec_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood summed over target positions, averaged over the batch."""
    b, t, v = logits.shape
    if targets.shape != (b, t):
        raise ValueError(f"targets shape {tuple(targets.shape)} does not match logits {(b, t)}")
    flat = F.cross_entropy(logits.reshape(-1, v), targets.reshape(-1), reduction="sum")
    return flat / b
