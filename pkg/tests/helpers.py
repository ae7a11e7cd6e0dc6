"""Shared builders for hand-wired models used across test modules."""

import numpy as np
import torch

from genrec.data import EmbeddingTable, InteractionCorpus, UserRecord
from genrec.recommender import RecommenderConfig, Seq2SeqRecommender, VocabLayout
from genrec.tokenizer import RqVaeTokenizer, TokenizerConfig


def identity_tokenizer(dim: int, codebooks: list[torch.Tensor], beta: float = 0.25,
                       suffix_capacity: int = 64) -> RqVaeTokenizer:
    """Tokenizer whose encoder and decoder are identity maps (single layer, no hidden)."""
    cfg = TokenizerConfig(
        input_dim=dim,
        code_dim=dim,
        levels=len(codebooks),
        codebook_size=codebooks[0].shape[0],
        hidden_dims=(),
        beta=beta,
        suffix_capacity=suffix_capacity,
    )
    tok = RqVaeTokenizer(cfg)
    with torch.no_grad():
        tok.encoder[0].weight.copy_(torch.eye(dim))
        tok.encoder[0].bias.zero_()
        tok.decoder[0].weight.copy_(torch.eye(dim))
        tok.decoder[0].bias.zero_()
        for param, book in zip(tok.codebooks, codebooks):
            param.copy_(book)
    return tok


def random_tokenizer(seed: int, input_dim=6, code_dim=4, levels=2, codebook_size=5,
                     hidden_dims=(8,), suffix_capacity=64, dtype=torch.float32) -> RqVaeTokenizer:
    torch.manual_seed(seed)
    cfg = TokenizerConfig(
        input_dim=input_dim,
        code_dim=code_dim,
        levels=levels,
        codebook_size=codebook_size,
        hidden_dims=hidden_dims,
        suffix_capacity=suffix_capacity,
    )
    tok = RqVaeTokenizer(cfg)
    with torch.no_grad():
        for book in tok.codebooks:
            book.copy_(torch.randn_like(book))
    return tok.to(dtype)


def small_recommender(seed: int, layout: VocabLayout, hidden_dim=16, layers=2, heads=2,
                      head_dim=8, ffn_dim=32, semantic_dim=6, max_items=8,
                      dropout=0.0, dtype=torch.float32) -> Seq2SeqRecommender:
    torch.manual_seed(seed)
    cfg = RecommenderConfig(
        encoder_layers=layers,
        decoder_layers=layers,
        hidden_dim=hidden_dim,
        ffn_dim=ffn_dim,
        heads=heads,
        head_dim=head_dim,
        dropout=dropout,
        semantic_dim=semantic_dim,
        max_items=max_items,
    )
    return Seq2SeqRecommender(cfg, layout).to(dtype)


def corpus_from(seqs: dict[str, list[str]]) -> InteractionCorpus:
    return InteractionCorpus(
        users=tuple(
            UserRecord(user_id=u, items=tuple(items), timestamps=tuple(range(len(items))))
            for u, items in sorted(seqs.items())
        )
    )


def random_table(item_ids: list[str], dim: int, seed: int = 0) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    return EmbeddingTable(
        dim=dim,
        rows={i: rng.normal(size=dim).astype(np.float32) for i in item_ids},
    )


def micro_setup(seed=0, n_users=120, n_items=40, n_clusters=8, levels=2, codebook_size=8,
                dim=16, max_len=10, kmeans_init=True, pretrain_lr=1e-3):
    """Small planted-cluster pipeline pieces shared by trainer-level tests."""
    from genrec.data import derive_embeddings_svd, split_leave_one_out
    from genrec.synthetic import make_synthetic_corpus
    from genrec.tokenizer import init_codebooks

    corpus = make_synthetic_corpus(
        n_users=n_users, n_items=n_items, n_clusters=n_clusters, seed=seed,
        min_len=6, max_len=max_len,
    )
    examples = split_leave_one_out(corpus, max_len=max_len)
    table = derive_embeddings_svd(corpus, dim=dim, seed=seed)
    tok_cfg = TokenizerConfig(
        input_dim=dim, code_dim=8, levels=levels, codebook_size=codebook_size,
        hidden_dims=(32,), suffix_capacity=n_items,
    )
    torch.manual_seed(seed + 1)
    tok = RqVaeTokenizer(tok_cfg)
    if kmeans_init:
        with torch.no_grad():
            latents = tok.encode(torch.from_numpy(table.matrix(sorted(table.rows))))
            for param, book in zip(tok.codebooks, init_codebooks(latents, tok_cfg, seed=seed)):
                param.copy_(book)
    layout = VocabLayout(levels=levels, codebook_size=codebook_size, suffix_capacity=n_items)
    rec_cfg = RecommenderConfig(
        encoder_layers=2, decoder_layers=2, hidden_dim=32, ffn_dim=64, heads=2, head_dim=16,
        dropout=0.1, semantic_dim=dim, max_items=max_len,
    )
    torch.manual_seed(seed + 2)
    model = Seq2SeqRecommender(rec_cfg, layout)
    return corpus, examples, table, tok, model, layout
