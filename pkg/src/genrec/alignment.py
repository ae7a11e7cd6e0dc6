"""Alignment losses coupling the item tokenizer and the generative recommender."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .tokenizer import RqVaeTokenizer

PROB_FLOOR = 1e-10


@dataclass
class AlignmentBatch:
    """Paired quantities for one training batch: target embeddings, the model's
    two projected states, and the tokenizer's reconstructed targets."""

    z: torch.Tensor  # (B, d_s) target-item semantic embeddings
    z_seq: torch.Tensor  # (B, d_s) projected encoder sequence states
    pref: torch.Tensor  # (B, d_s) projected decoder preference states
    recon: torch.Tensor  # (B, d_s) reconstructed target embeddings
    tau: float
    mu: float
    lam: float

    def __post_init__(self) -> None:
        sizes = {t.shape[0] for t in (self.z, self.z_seq, self.pref, self.recon)}
        if len(sizes) != 1:
            raise ValueError(f"batch sizes differ: {sorted(sizes)}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.mu < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


def _kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    logs = torch.log(p.clamp_min(PROB_FLOOR)) - torch.log(q.clamp_min(PROB_FLOOR))
    return (p * logs).sum(-1)


def sia_loss(
    z: torch.Tensor,
    z_seq: torch.Tensor,
    tokenizer: RqVaeTokenizer,
    teacher_forced: bool = False,
    verbatim_sign: bool = False,
) -> torch.Tensor:
    """Symmetric KL between the per-level token distributions of z and z_seq.

    Each input follows its own greedy residual path through the tokenizer
    unless teacher_forced pins the z_seq path to z's hard tokens. The printed
    form of this loss carries a leading minus; by default we return the
    positive divergence sum, whose minimization makes the distributions agree
    (the sign the end-to-end ablation check validates). verbatim_sign=True
    flips to the printed convention.
    """
    p = tokenizer.level_distributions(z)
    forced = None
    if teacher_forced:
        with torch.no_grad():
            forced = tokenizer.quantize(tokenizer.encode(z)).tokens
    q = tokenizer.level_distributions(z_seq, forced_tokens=forced)
    sym = (_kl(p, q) + _kl(q, p)).sum(-1).mean()
    return -sym if verbatim_sign else sym


def psa_loss(pref: torch.Tensor, recon: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities with in-batch negatives.

    Each example contributes one term per direction (reconstruction against
    all preference states, preference state against all reconstructions); the
    result is the batch mean of their sum.
    """
    if pref.shape[0] < 2:
        raise ValueError("preference-semantic alignment needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("tau must be positive")
    r = F.normalize(recon, dim=-1)
    h = F.normalize(pref, dim=-1)
    sim = r @ h.T  # sim[i, j] = cos(recon_i, pref_j)
    labels = torch.arange(sim.shape[0], device=sim.device)
    recon_to_pref = F.cross_entropy(sim / tau, labels)
    pref_to_recon = F.cross_entropy(sim.T / tau, labels)
    return recon_to_pref + pref_to_recon


def combine_tokenizer_objective(
    sq: torch.Tensor, sia: torch.Tensor, psa: torch.Tensor, mu: float, lam: float
) -> torch.Tensor:
    """Tokenizer-phase objective: quantization loss plus weighted alignment terms."""
    if mu < 0 or lam < 0:
        raise ValueError("loss weights must be non-negative")
    return sq + mu * sia + lam * psa


def combine_recommender_objective(
    rec: torch.Tensor, sia: torch.Tensor, psa: torch.Tensor, mu: float, lam: float
) -> torch.Tensor:
    """Recommender-phase objective: next-token loss plus the same weighted alignment terms."""
    if mu < 0 or lam < 0:
        raise ValueError("loss weights must be non-negative")
    return rec + mu * sia + lam * psa
