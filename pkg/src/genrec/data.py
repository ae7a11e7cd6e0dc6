"""Interaction-log ingestion, k-core filtering, leave-one-out splitting, and item embeddings."""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataError(Exception):
    """Base class for data-module failures."""


class IngestionError(DataError):
    """Raised when the interaction file cannot be parsed."""


class EmptyCorpusError(DataError):
    """Raised when ingestion or filtering leaves no interactions."""


class EmbeddingFormatError(DataError):
    """Raised when an embedding file does not match its declared layout."""


class EmbeddingCoverageError(DataError):
    """Raised when the embedding table does not cover the corpus item set."""


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    items: tuple[str, ...]
    timestamps: tuple[int, ...] | None = None


@dataclass(frozen=True)
class InteractionCorpus:
    """Chronologically ordered per-user item sequences."""

    users: tuple[UserRecord, ...]

    @property
    def item_set(self) -> frozenset[str]:
        return frozenset(i for u in self.users for i in u.items)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.item_set)

    @property
    def num_interactions(self) -> int:
        return sum(len(u.items) for u in self.users)

    def sparsity(self) -> float:
        """Fraction of the user-item grid that carries no interaction."""
        cells = self.num_users * self.num_items
        if cells == 0:
            return 1.0
        return 1.0 - self.num_interactions / cells

    def sorted_items(self) -> list[str]:
        return sorted(self.item_set)


@dataclass(frozen=True)
class SplitExample:
    """One next-item prediction instance with its leave-one-out split tag."""

    user_id: str
    input_items: tuple[str, ...]
    target_item: str
    split: str  # train | valid | test


@dataclass(frozen=True)
class EmbeddingTable:
    """Per-item semantic vectors feeding the tokenizer."""

    dim: int
    rows: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for item_id, vec in self.rows.items():
            if vec.shape != (self.dim,):
                raise EmbeddingFormatError(
                    f"row for {item_id!r} has shape {vec.shape}, expected ({self.dim},)"
                )

    def matrix(self, item_order: list[str]) -> np.ndarray:
        """Stack rows in the given item order into an (N, dim) array."""
        return np.stack([self.rows[i] for i in item_order]).astype(np.float32)


def load_interactions(path: str | Path) -> InteractionCorpus:
    """Parse a tab-separated (user_id, item_id, timestamp) file into per-user sequences.

    Sequences are sorted by timestamp; ties keep file order.
    """
    path = Path(path)
    per_user: dict[str, list[tuple[int, int, str]]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestionError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            user_id, item_id, raw_ts = parts
            try:
                ts = int(raw_ts)
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: bad timestamp {raw_ts!r}") from exc
            per_user.setdefault(user_id, []).append((ts, lineno, item_id))
    if not per_user:
        raise EmptyCorpusError(f"{path}: no interactions found")
    users = []
    for user_id in sorted(per_user):
        events = sorted(per_user[user_id], key=lambda e: (e[0], e[1]))
        users.append(
            UserRecord(
                user_id=user_id,
                items=tuple(e[2] for e in events),
                timestamps=tuple(e[0] for e in events),
            )
        )
    return InteractionCorpus(users=tuple(users))


def apply_k_core(corpus: InteractionCorpus, k: int) -> InteractionCorpus:
    """Iteratively drop users and items with fewer than k interactions until stable."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seqs = {u.user_id: list(zip(u.items, u.timestamps or [0] * len(u.items))) for u in corpus.users}
    while True:
        item_counts: Counter[str] = Counter()
        for events in seqs.values():
            item_counts.update(item for item, _ in events)
        bad_items = {i for i, c in item_counts.items() if c < k}
        changed = False
        for user_id in list(seqs):
            events = seqs[user_id]
            if bad_items:
                kept = [e for e in events if e[0] not in bad_items]
                if len(kept) != len(events):
                    seqs[user_id] = kept
                    events = kept
                    changed = True
            if len(events) < k:
                del seqs[user_id]
                if events:
                    changed = True
        if not changed and not bad_items:
            break
    users = tuple(
        UserRecord(
            user_id=uid,
            items=tuple(item for item, _ in seqs[uid]),
            timestamps=tuple(ts for _, ts in seqs[uid]),
        )
        for uid in sorted(seqs)
    )
    if not users:
        raise EmptyCorpusError(f"corpus is empty after {k}-core filtering")
    return InteractionCorpus(users=users)


def split_leave_one_out(corpus: InteractionCorpus, max_len: int) -> list[SplitExample]:
    """Build train/valid/test next-item examples, inputs truncated to the last max_len items.

    Per user: the last interaction is the test target, the second-to-last the
    validation target, and every earlier position (from the second item on)
    yields one training example over its prefix.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    examples: list[SplitExample] = []
    skipped = 0
    for user in corpus.users:
        items = user.items
        n = len(items)
        if n < 3:
            skipped += 1
            continue
        for t in range(1, n - 2):
            examples.append(
                SplitExample(
                    user_id=user.user_id,
                    input_items=items[:t][-max_len:],
                    target_item=items[t],
                    split="train",
                )
            )
        examples.append(
            SplitExample(
                user_id=user.user_id,
                input_items=items[: n - 2][-max_len:],
                target_item=items[n - 2],
                split="valid",
            )
        )
        examples.append(
            SplitExample(
                user_id=user.user_id,
                input_items=items[: n - 1][-max_len:],
                target_item=items[n - 1],
                split="test",
            )
        )
    if skipped:
        logger.warning("skipped %d users with fewer than 3 interactions", skipped)
    return examples


def write_split_manifest(examples: list[SplitExample], path: str | Path) -> None:
    """Export one line per example: user_id, split, input length, target."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.user_id}\t{ex.split}\t{len(ex.input_items)}\t{ex.target_item}\n")


def _ingest_rows(
    rows: dict[str, np.ndarray],
    dim: int,
    corpus: InteractionCorpus,
    normalize: bool,
) -> EmbeddingTable:
    wanted = corpus.item_set
    missing = sorted(wanted - rows.keys())
    if missing:
        shown = ", ".join(missing[:10])
        raise EmbeddingCoverageError(
            f"{len(missing)} corpus items have no embedding row (first missing: {shown})"
        )
    kept = {i: rows[i] for i in wanted}
    if normalize:
        for item_id, vec in kept.items():
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise EmbeddingFormatError(f"cannot L2-normalize all-zero row for {item_id!r}")
            kept[item_id] = vec / norm
    return EmbeddingTable(dim=dim, rows=kept)


def load_embeddings(
    path: str | Path,
    corpus: InteractionCorpus,
    normalize: bool = False,
) -> EmbeddingTable:
    """Read an embedding file (binary or text rows after an "N D" header).

    Binary rows are ``item_id`` + space + dim little-endian float32 values + newline;
    the text alternative holds whitespace-separated decimal numbers instead.
    """
    path = Path(path)
    raw = path.read_bytes()
    header_end = raw.find(b"\n")
    if header_end < 0:
        raise EmbeddingFormatError(f"{path}: missing header line")
    header = raw[:header_end].decode("utf-8", errors="replace").split()
    if len(header) != 2:
        raise EmbeddingFormatError(f"{path}: header must be 'N D', got {header!r}")
    try:
        count, dim = int(header[0]), int(header[1])
    except ValueError as exc:
        raise EmbeddingFormatError(f"{path}: non-integer header {header!r}") from exc
    body = raw[header_end + 1 :]
    rows = _parse_text_rows(body, count, dim, path)
    if rows is None:
        rows = _parse_binary_rows(body, count, dim, path)
    return _ingest_rows(rows, dim, corpus, normalize)


def _parse_text_rows(
    body: bytes, count: int, dim: int, path: Path
) -> dict[str, np.ndarray] | None:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        return None
    rows: dict[str, np.ndarray] = {}
    lines = [ln for ln in text.split("\n") if ln.strip()]
    for ln in lines:
        parts = ln.split()
        if len(parts) != dim + 1:
            return None
        try:
            vec = np.array([float(x) for x in parts[1:]], dtype=np.float32)
        except ValueError:
            return None
        rows[parts[0]] = vec
    if len(rows) != count:
        raise EmbeddingFormatError(f"{path}: header declares {count} rows, found {len(rows)}")
    return rows


def _parse_binary_rows(body: bytes, count: int, dim: int, path: Path) -> dict[str, np.ndarray]:
    rows: dict[str, np.ndarray] = {}
    offset = 0
    vec_bytes = 4 * dim
    for _ in range(count):
        sep = body.find(b" ", offset)
        if sep < 0:
            raise EmbeddingFormatError(f"{path}: truncated binary row at byte {offset}")
        item_id = body[offset:sep].decode("utf-8")
        start = sep + 1
        end = start + vec_bytes
        if end > len(body):
            raise EmbeddingFormatError(f"{path}: truncated vector for {item_id!r}")
        vec = np.frombuffer(body[start:end], dtype="<f4").astype(np.float32)
        rows[item_id] = vec
        offset = end
        if offset < len(body) and body[offset : offset + 1] == b"\n":
            offset += 1
    if len(rows) != count:
        raise EmbeddingFormatError(f"{path}: header declares {count} rows, found {len(rows)}")
    return rows


def save_embeddings(table: EmbeddingTable, path: str | Path, binary: bool = True) -> None:
    """Write the table in the header+rows layout understood by load_embeddings."""
    path = Path(path)
    ids = sorted(table.rows)
    with path.open("wb") as fh:
        fh.write(f"{len(ids)} {table.dim}\n".encode("utf-8"))
        for item_id in ids:
            vec = np.asarray(table.rows[item_id], dtype="<f4")
            if binary:
                fh.write(item_id.encode("utf-8") + b" " + vec.tobytes() + b"\n")
            else:
                nums = " ".join(repr(float(x)) for x in vec)
                fh.write(f"{item_id} {nums}\n".encode("utf-8"))


def derive_embeddings_svd(
    corpus: InteractionCorpus,
    dim: int,
    window: int = 5,
    seed: int = 0,
) -> EmbeddingTable:
    """Derive item embeddings from windowed co-occurrence counts via truncated SVD.

    The co-occurrence matrix counts item pairs within `window` consecutive
    positions of a sequence; the diagonal holds plain occurrence counts. Item
    factors are left singular vectors scaled by their singular values.
    """
    items = corpus.sorted_items()
    n = len(items)
    if dim > n:
        raise ValueError(f"dim={dim} exceeds item count {n}")
    index = {item: i for i, item in enumerate(items)}
    mat = np.zeros((n, n), dtype=np.float64)
    for user in corpus.users:
        idxs = [index[i] for i in user.items]
        for p, a in enumerate(idxs):
            mat[a, a] += 1.0
            for q in range(p + 1, min(p + window, len(idxs))):
                b = idxs[q]
                mat[a, b] += 1.0
                mat[b, a] += 1.0
    if n <= 4096:
        u, s, _ = np.linalg.svd(mat, hermitian=True)
        u, s = u[:, :dim], s[:dim]
    else:
        from scipy.sparse import csr_matrix
        from scipy.sparse.linalg import svds

        u, s, _ = svds(csr_matrix(mat), k=dim, random_state=seed)
        order = np.argsort(s)[::-1]
        u, s = u[:, order], s[order]
    # deterministic sign: largest-magnitude entry of each factor is positive
    signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size else 0
    if rank < dim:
        logger.warning("co-occurrence rank %d < dim %d; trailing dimensions are zero", rank, dim)
        s = s.copy()
        s[rank:] = 0.0
    factors = u * s
    # one global scale so downstream defaults see O(1) rows; geometry unchanged
    mean_norm = float(np.linalg.norm(factors, axis=1).mean())
    if mean_norm > 0:
        factors = factors / mean_norm
    factors = factors.astype(np.float32)
    return EmbeddingTable(dim=dim, rows={item: factors[i] for item, i in index.items()})
