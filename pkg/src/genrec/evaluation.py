"""Trie-constrained beam search over item identifiers and full-ranking metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import SplitExample
from .modelio import parameter_hash
from .recommender import BOS, TokenSequence, VocabLayout
from .tokenizer import ItemIdentifier, RqVaeTokenizer

logger = logging.getLogger(__name__)


class EvaluationError(Exception):
    pass


class StaleIdentifierError(EvaluationError):
    """The identifier map was produced by a different tokenizer state."""


class TrieNode:
    __slots__ = ("children", "item_id")

    def __init__(self) -> None:
        self.children: dict[int, "TrieNode"] = {}
        self.item_id: str | None = None


class PrefixTrie:
    """Fixed-depth trie whose leaves are in bijection with the item set."""

    def __init__(self, depth: int):
        self.root = TrieNode()
        self.depth = depth
        self.leaf_count = 0

    @staticmethod
    def build(identifiers: dict[str, ItemIdentifier], layout: VocabLayout) -> "PrefixTrie":
        trie = PrefixTrie(depth=layout.tokens_per_item)
        for item_id in sorted(identifiers):
            path = layout.encode_identifier(identifiers[item_id])
            node = trie.root
            for token in path:
                node = node.children.setdefault(token, TrieNode())
            if node.item_id is not None:
                raise EvaluationError(
                    f"duplicate identifier {path} for {node.item_id!r} and {item_id!r}"
                )
            node.item_id = item_id
            trie.leaf_count += 1
        return trie


@dataclass
class RankingResult:
    """Beam output: distinct items with non-increasing log-probability scores."""

    ranked_items: list[str]
    scores: list[float]


_DEAD = TrieNode()  # placeholder for pruned beam slots; no children, never expands


def beam_search_batch(
    model,
    x: TokenSequence,
    trie: PrefixTrie,
    beam: int,
) -> list[RankingResult]:
    """Constrained beam search for a batch of token sequences.

    Each step restricts candidate tokens to the trie children of every
    hypothesis, scores them with the decoder's next-token log-probabilities,
    and keeps the top `beam` (ties broken by earlier hypothesis, then lower
    token id). Final hypotheses are reordered by score with lexicographic
    token-order tie-breaks, so beam = catalog size reproduces exhaustive
    full-ranking order.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if trie.leaf_count == 0:
        raise EvaluationError("empty identifier trie")
    if beam > trie.leaf_count:
        logger.warning(
            "beam %d exceeds catalog size %d; rankings will be shorter", beam, trie.leaf_count
        )
    batch = x.ids.shape[0]
    device = x.ids.device
    enc = model.embed_and_encode(x)
    enc_mask = x.mask
    vocab = model.layout.size

    nodes: list[list[TrieNode]] = [[trie.root] for _ in range(batch)]
    seqs = torch.zeros(batch, 1, 0, dtype=torch.long, device=device)
    scores = torch.zeros(batch, 1, dtype=enc.dtype, device=device)

    base_kv = model.precompute_cross_kv(enc) if hasattr(model, "precompute_cross_kv") else None
    rep_kv = rep_enc = rep_mask = None
    rep_n = -1

    for _ in range(trie.depth):
        n_hyp = seqs.shape[1]
        bos = torch.full((batch, n_hyp, 1), BOS, dtype=torch.long, device=device)
        prefix_ids = torch.cat([bos, seqs], dim=2).reshape(batch * n_hyp, -1)
        prefix = TokenSequence(ids=prefix_ids, mask=torch.ones_like(prefix_ids, dtype=torch.bool))
        if rep_n != n_hyp:
            rep_mask = enc_mask.repeat_interleave(n_hyp, dim=0)
            if base_kv is not None:
                rep_kv = [
                    (k.repeat_interleave(n_hyp, 0), v.repeat_interleave(n_hyp, 0))
                    for k, v in base_kv
                ]
            else:
                rep_enc = enc.repeat_interleave(n_hyp, dim=0)
            rep_n = n_hyp
        if base_kv is not None:
            _, logits = model.decode(None, rep_mask, prefix, cross_kv=rep_kv)
        else:
            _, logits = model.decode(rep_enc, rep_mask, prefix)
        logp = F.log_softmax(logits[:, -1], dim=-1).view(batch, n_hyp, vocab)

        allowed = torch.zeros(batch, n_hyp, vocab, dtype=torch.bool, device=device)
        for b in range(batch):
            for h, node in enumerate(nodes[b]):
                for token in node.children:
                    allowed[b, h, token] = True
        cand = scores.unsqueeze(-1) + logp.masked_fill(~allowed, float("-inf"))
        flat = cand.view(batch, n_hyp * vocab)
        keep = min(beam, flat.shape[1])
        order_vals, order_idx = torch.sort(flat, dim=1, descending=True, stable=True)
        top_idx = order_idx[:, :keep]
        scores = order_vals[:, :keep]
        hyp_idx = top_idx // vocab
        tok_idx = top_idx % vocab
        seqs = torch.cat(
            [torch.gather(seqs, 1, hyp_idx.unsqueeze(-1).expand(-1, -1, seqs.shape[2])),
             tok_idx.unsqueeze(-1)],
            dim=2,
        )
        new_nodes: list[list[TrieNode]] = []
        for b in range(batch):
            row = []
            for h in range(keep):
                if math.isinf(scores[b, h].item()):
                    row.append(_DEAD)
                else:
                    row.append(nodes[b][int(hyp_idx[b, h])].children[int(tok_idx[b, h])])
            new_nodes.append(row)
        nodes = new_nodes

    results: list[RankingResult] = []
    for b in range(batch):
        finished = [
            (float(scores[b, h].item()), tuple(seqs[b, h].tolist()), nodes[b][h].item_id)
            for h in range(seqs.shape[1])
            if nodes[b][h].item_id is not None and not math.isinf(scores[b, h].item())
        ]
        finished.sort(key=lambda entry: (-entry[0], entry[1]))
        results.append(
            RankingResult(
                ranked_items=[item for _, _, item in finished],
                scores=[score for score, _, _ in finished],
            )
        )
    return results


def beam_search(model, x: TokenSequence, trie: PrefixTrie, beam: int) -> RankingResult:
    """Single-sequence convenience wrapper around beam_search_batch."""
    if x.ids.dim() == 1:
        x = TokenSequence(ids=x.ids.unsqueeze(0), mask=x.mask.unsqueeze(0))
    if x.ids.shape[0] != 1:
        raise ValueError("beam_search expects a single sequence; use beam_search_batch")
    return beam_search_batch(model, x, trie, beam)[0]


def recall_at_k(ranked: RankingResult, target: str, k: int) -> float:
    """1.0 if the target appears in the top-k, else 0.0."""
    return 1.0 if target in ranked.ranked_items[:k] else 0.0


def ndcg_at_k(ranked: RankingResult, target: str, k: int) -> float:
    """Single-target NDCG: the ideal DCG is 1, so this is 1/log2(rank+1) inside top-k."""
    try:
        rank = ranked.ranked_items[:k].index(target) + 1
    except ValueError:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricsReport:
    user_count: int
    skipped_users: int
    beam: int
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {
            "users": self.user_count,
            "skipped": self.skipped_users,
            "beam": self.beam,
        }
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
        for k in sorted(self.ndcg):
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out

    def table(self) -> str:
        ks = sorted(self.recall)
        header = "metric" + "".join(f"\tK={k}" for k in ks)
        recall_row = "Recall" + "".join(f"\t{self.recall[k]:.4f}" for k in ks)
        ndcg_row = "NDCG" + "".join(f"\t{self.ndcg[k]:.4f}" for k in ks)
        tail = f"users={self.user_count} skipped={self.skipped_users} beam={self.beam}"
        return "\n".join([header, recall_row, ndcg_row, tail])


def tokenize_inputs(
    examples: list[SplitExample],
    identifiers: dict[str, ItemIdentifier],
    layout: VocabLayout,
) -> TokenSequence:
    rows = []
    for ex in examples:
        row: list[int] = []
        for item in ex.input_items:
            row.extend(layout.encode_identifier(identifiers[item]))
        rows.append(row)
    return TokenSequence.from_lists(rows)


def evaluate(
    model,
    tokenizer: RqVaeTokenizer | None,
    identifiers: dict[str, ItemIdentifier],
    examples: list[SplitExample],
    layout: VocabLayout,
    ks: tuple[int, ...] = (5, 10),
    beam: int = 20,
    batch_size: int = 256,
    identifier_source_hash: str | None = None,
) -> MetricsReport:
    """Constrained-beam full-ranking evaluation: mean Recall@K and NDCG@K over users.

    When both a tokenizer and the hash recorded at identifier-export time are
    given, the pair is checked for staleness before any decoding runs.
    """
    if tokenizer is not None and identifier_source_hash is not None:
        current = parameter_hash(tokenizer)
        if current != identifier_source_hash:
            raise StaleIdentifierError(
                "identifier map was derived from a different tokenizer state "
                f"({identifier_source_hash[:12]}... vs {current[:12]}...)"
            )
    trie = PrefixTrie.build(identifiers, layout)
    usable = [ex for ex in examples if ex.target_item in identifiers]
    skipped = len(examples) - len(usable)
    if skipped:
        logger.warning("excluding %d users whose target item is outside the catalog", skipped)
    if not usable:
        raise EvaluationError("no evaluable users")
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for start in range(0, len(usable), batch_size):
            chunk = usable[start : start + batch_size]
            x = tokenize_inputs(chunk, identifiers, layout)
            rankings = beam_search_batch(model, x, trie, beam)
            for ex, ranking in zip(chunk, rankings):
                for k in ks:
                    recall_sums[k] += recall_at_k(ranking, ex.target_item, k)
                    ndcg_sums[k] += ndcg_at_k(ranking, ex.target_item, k)
    if was_training and hasattr(model, "train"):
        model.train()
    n = len(usable)
    return MetricsReport(
        user_count=n,
        skipped_users=skipped,
        beam=beam,
        recall={k: recall_sums[k] / n for k in ks},
        ndcg={k: ndcg_sums[k] / n for k in ks},
    )
