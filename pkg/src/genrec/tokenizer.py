"""Residual-quantization item tokenizer: MLP autoencoder around stacked codebooks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.cluster import KMeans
from torch import nn

from .data import EmbeddingTable

logger = logging.getLogger(__name__)


class TokenizerError(Exception):
    pass


class CollisionCapacityError(TokenizerError):
    """A token-collision group exceeds the suffix vocabulary."""


@dataclass
class TokenizerConfig:
    input_dim: int = 256
    code_dim: int = 128
    levels: int = 3
    codebook_size: int = 256
    hidden_dims: tuple[int, ...] = (512, 256)
    beta: float = 0.25
    suffix_capacity: int = 64
    dead_code_reset: bool = True

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if any(w <= 0 for w in self.hidden_dims):
            raise ValueError("hidden widths must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        self.hidden_dims = tuple(self.hidden_dims)


@dataclass(frozen=True)
class ItemIdentifier:
    """An item's level tokens plus the collision-disambiguation suffix."""

    item_id: str
    tokens: tuple[int, ...]
    suffix: int


@dataclass
class QuantizationResult:
    """Per-batch outcome of the greedy residual walk.

    residuals[:, l] is the vector quantized at level l (before subtracting the
    selected code); codes[:, l] is the selected code vector, graph-connected to
    the codebook parameters.
    """

    tokens: torch.Tensor  # (B, L) long
    residuals: torch.Tensor  # (B, L, d_c)
    distributions: torch.Tensor  # (B, L, K)
    codes: torch.Tensor  # (B, L, d_c)
    quantized: torch.Tensor  # (B, d_c)
    latent: torch.Tensor  # (B, d_c)


def assignment_distribution(v: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Softmax over negative squared distances from v to every code vector.

    Accepts a single vector or a batch; returns probabilities over the K codes.
    """
    single = v.dim() == 1
    if single:
        v = v.unsqueeze(0)
    sq_dist = (v.unsqueeze(1) - codebook.unsqueeze(0)).pow(2).sum(-1)
    probs = torch.softmax(-sq_dist, dim=-1)
    return probs.squeeze(0) if single else probs


def _mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class RqVaeTokenizer(nn.Module):
    """Encode a semantic embedding, quantize it level by level, and reconstruct it."""

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        enc_dims = [config.input_dim, *config.hidden_dims, config.code_dim]
        dec_dims = [config.code_dim, *reversed(config.hidden_dims), config.input_dim]
        self.encoder = _mlp(enc_dims)
        self.decoder = _mlp(dec_dims)
        self.codebooks = nn.ParameterList(
            nn.Parameter(torch.randn(config.codebook_size, config.code_dim) * 0.02)
            for _ in range(config.levels)
        )

    def encode(self, z: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(z).all():
            raise ValueError("non-finite tokenizer input")
        return self.encoder(z)

    def reconstruct(self, quantized: torch.Tensor) -> torch.Tensor:
        return self.decoder(quantized)

    def quantize(
        self, latent: torch.Tensor, forced_tokens: torch.Tensor | None = None
    ) -> QuantizationResult:
        """Greedy level-by-level residual quantization of the latent batch.

        Tokens are the nearest code by squared distance (ties to the lowest
        index), which coincides with the argmax of each soft distribution. The
        residual stream subtracts selected codes as constants so that gradient
        paths stay per-level. With forced_tokens the walk follows the given
        token path instead of the greedy one.
        """
        single = latent.dim() == 1
        batched = latent.unsqueeze(0) if single else latent
        v = batched
        tokens, residuals, dists, codes = [], [], [], []
        for level, codebook in enumerate(self.codebooks):
            sq_dist = (v.unsqueeze(1) - codebook.unsqueeze(0)).pow(2).sum(-1)
            if forced_tokens is None:
                token = sq_dist.argmin(dim=-1)
            else:
                token = forced_tokens[:, level].to(torch.long)
            selected = codebook[token]
            tokens.append(token)
            residuals.append(v)
            dists.append(torch.softmax(-sq_dist, dim=-1))
            codes.append(selected)
            v = v - selected.detach()
        stacked_codes = torch.stack(codes, dim=1)
        result = QuantizationResult(
            tokens=torch.stack(tokens, dim=1),
            residuals=torch.stack(residuals, dim=1),
            distributions=torch.stack(dists, dim=1),
            codes=stacked_codes,
            quantized=stacked_codes.sum(dim=1),
            latent=batched,
        )
        if single:
            for name in ("tokens", "residuals", "distributions", "codes", "quantized", "latent"):
                setattr(result, name, getattr(result, name).squeeze(0))
        return result

    def run(self, z: torch.Tensor) -> tuple[QuantizationResult, torch.Tensor]:
        """Full pass z -> tokens and reconstruction, straight-through on the quantized latent."""
        latent = self.encode(z)
        result = self.quantize(latent)
        ste = result.latent + (result.quantized - result.latent).detach()
        recon = self.reconstruct(ste)
        return result, recon

    def level_distributions(
        self, z: torch.Tensor, forced_tokens: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Soft token distributions (B, L, K) along the residual path of z."""
        return self.quantize(self.encode(z), forced_tokens=forced_tokens).distributions


def sq_loss(
    z: torch.Tensor,
    result: QuantizationResult,
    recon: torch.Tensor,
    beta: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction + residual-quantization loss, averaged over the batch.

    The first RQ term moves codes toward (stop-gradient) residuals; the second,
    weighted by beta, commits residuals toward (stop-gradient) codes.
    """
    if z.dim() == 1:
        z, recon = z.unsqueeze(0), recon.unsqueeze(0)
        residuals, codes = result.residuals.unsqueeze(0), result.codes.unsqueeze(0)
    else:
        residuals, codes = result.residuals, result.codes
    recon_loss = (z - recon).pow(2).sum(-1).mean()
    codebook_term = (residuals.detach() - codes).pow(2).sum(-1)
    commit_term = (residuals - codes.detach()).pow(2).sum(-1)
    rq_loss = (codebook_term + beta * commit_term).sum(-1).mean()
    return recon_loss + rq_loss, recon_loss, rq_loss


def init_codebooks(
    latents: torch.Tensor | np.ndarray,
    config: TokenizerConfig,
    seed: int = 0,
) -> list[torch.Tensor]:
    """Level-wise k-means over the residual stream of a latent sample.

    Level 1 clusters the latents themselves; each later level clusters what is
    left after greedily assigning the previous levels' centroids.
    """
    if isinstance(latents, torch.Tensor):
        sample = latents.detach().cpu().numpy().astype(np.float64)
    else:
        sample = np.asarray(latents, dtype=np.float64)
    k = config.codebook_size
    if sample.shape[0] < k:
        raise TokenizerError(
            f"need at least {k} latents to seed a {k}-entry codebook, got {sample.shape[0]}; "
            "encode a larger sample"
        )
    rng = np.random.default_rng(seed)
    residual = sample.copy()
    books: list[torch.Tensor] = []
    for level in range(config.levels):
        km = KMeans(n_clusters=k, random_state=seed + level, n_init=4)
        assign = km.fit_predict(residual)
        centers = km.cluster_centers_.copy()
        centers = _jitter_duplicates(centers, rng, scale=max(residual.std(), 1e-3) * 1e-4)
        books.append(torch.from_numpy(centers.astype(np.float32)))
        residual = residual - centers[assign]
    return books


def _jitter_duplicates(centers: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    seen: dict[bytes, int] = {}
    for i in range(centers.shape[0]):
        key = centers[i].tobytes()
        while key in seen:
            centers[i] = centers[i] + rng.normal(0.0, scale, size=centers.shape[1])
            key = centers[i].tobytes()
        seen[key] = i
    return centers


def tokenize_corpus(
    table: EmbeddingTable,
    tokenizer: RqVaeTokenizer,
    batch_size: int = 1024,
) -> dict[str, ItemIdentifier]:
    """Assign every item its (tokens, suffix) identifier; suffixes order collisions by item id."""
    ids = sorted(table.rows)
    dtype = next(tokenizer.parameters()).dtype
    groups: dict[tuple[int, ...], list[str]] = {}
    was_training = tokenizer.training
    tokenizer.eval()
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            z = torch.from_numpy(table.matrix(chunk)).to(dtype)
            result = tokenizer.quantize(tokenizer.encode(z))
            for item_id, toks in zip(chunk, result.tokens.tolist()):
                groups.setdefault(tuple(toks), []).append(item_id)
    if was_training:
        tokenizer.train()
    mapping: dict[str, ItemIdentifier] = {}
    capacity = tokenizer.config.suffix_capacity
    for toks, members in groups.items():
        if len(members) > capacity:
            raise CollisionCapacityError(
                f"{len(members)} items share tokens {toks}, exceeding suffix capacity {capacity}"
            )
        for suffix, item_id in enumerate(members):
            mapping[item_id] = ItemIdentifier(item_id=item_id, tokens=toks, suffix=suffix)
    return mapping


def identifier_change_fraction(
    prev: dict[str, ItemIdentifier], new: dict[str, ItemIdentifier]
) -> float:
    """Fraction of items whose (tokens, suffix) differs between two maps."""
    if prev.keys() != new.keys():
        raise TokenizerError("identifier maps cover different item sets")
    changed = sum(
        1
        for item_id in prev
        if (prev[item_id].tokens, prev[item_id].suffix) != (new[item_id].tokens, new[item_id].suffix)
    )
    return changed / len(prev) if prev else 0.0


def write_identifier_map(mapping: dict[str, ItemIdentifier], path: str | Path) -> None:
    """Export one line per item: item_id, c_1..c_L, suffix (tab-separated)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for item_id in sorted(mapping):
            ident = mapping[item_id]
            cols = [item_id, *map(str, ident.tokens), str(ident.suffix)]
            fh.write("\t".join(cols) + "\n")


def read_identifier_map(path: str | Path) -> dict[str, ItemIdentifier]:
    mapping: dict[str, ItemIdentifier] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise TokenizerError(f"bad identifier line: {line!r}")
            item_id = parts[0]
            mapping[item_id] = ItemIdentifier(
                item_id=item_id,
                tokens=tuple(int(t) for t in parts[1:-1]),
                suffix=int(parts[-1]),
            )
    return mapping
