"""Alternating optimization: tokenizer pretraining, training cycles, convergence, finalization."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .alignment import (
    combine_recommender_objective,
    combine_tokenizer_objective,
    psa_loss,
    sia_loss,
)
from .data import EmbeddingTable, SplitExample
from .evaluation import MetricsReport, evaluate
from .modelio import load_checkpoint, parameter_hash, save_checkpoint
from .recommender import BOS, PAD, Seq2SeqRecommender, TokenSequence, VocabLayout, rec_loss
from .tokenizer import (
    ItemIdentifier,
    RqVaeTokenizer,
    identifier_change_fraction,
    sq_loss,
    tokenize_corpus,
    write_identifier_map,
)

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_sia", "no_psa", "no_both", "no_at", "no_ete")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    """Cycle structure and optimizer settings for both components.

    The paper-scale grids are cycle_length in {2, 4}, tokenizer_lr in
    {5e-4, 1e-4, 5e-5} and recommender_lr in {5e-3, 3e-3, 1e-3}; desk-scale
    runs are free to leave them.
    """

    cycle_length: int = 2
    tokenizer_lr: float = 1e-4
    recommender_lr: float = 3e-3
    weight_decay: float = 0.05
    epsilon: float = 0.01
    max_cycles: int = 30
    patience: int = 5
    batch_size: int = 256
    pretrain_epochs: int = 20
    final_max_epochs: int = 50
    grad_clip: float = 1.0
    valid_beam: int = 20
    eval_batch_size: int = 64
    valid_limit: int | None = None  # early-stop validation on the first N users only

    def __post_init__(self) -> None:
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be >= 2")
        if min(self.tokenizer_lr, self.recommender_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


@dataclass
class AlignmentSettings:
    mu: float = 3e-4
    lam: float = 1e-4
    tau: float = 0.07
    teacher_forced_sia: bool = False
    verbatim_sia_sign: bool = False


def check_convergence(
    prev_ids: dict[str, ItemIdentifier],
    new_ids: dict[str, ItemIdentifier],
    epsilon: float,
) -> bool:
    """True when the fraction of items with a changed identifier is within epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return identifier_change_fraction(prev_ids, new_ids) <= epsilon


def identifier_map_hash(mapping: dict[str, ItemIdentifier]) -> str:
    digest = hashlib.sha256()
    for item_id in sorted(mapping):
        ident = mapping[item_id]
        digest.update(f"{item_id}:{ident.tokens}:{ident.suffix};".encode("utf-8"))
    return digest.hexdigest()


class MetricsLog:
    """Line-delimited metrics sink; rows are kept in memory and optionally streamed."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **fields) -> None:
        self.rows.append(fields)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(fields, sort_keys=True) + "\n")


def audit_phase_log(entries: list[dict]) -> list[str]:
    """Check freeze exclusivity and cycle-boundary-only retokenization; return violations."""
    violations = []
    for e in entries:
        where = f"cycle {e.get('cycle')} epoch {e.get('epoch')} ({e['phase']})"
        if e["phase"] == "tokenizer":
            if e["rec_before"] != e["rec_after"]:
                violations.append(f"{where}: recommender changed during tokenizer epoch")
            if e["ids_before"] != e["ids_after"]:
                violations.append(f"{where}: identifiers changed inside a tokenizer epoch")
        elif e["phase"] == "recommender":
            if e["tok_before"] != e["tok_after"]:
                violations.append(f"{where}: tokenizer changed during recommender epoch")
            if e["ids_before"] != e["ids_after"]:
                violations.append(f"{where}: identifiers changed mid recommender epochs")
        elif e["phase"] == "retokenize":
            if e["tok_before"] != e["tok_after"] or e["rec_before"] != e["rec_after"]:
                violations.append(f"{where}: parameters changed during retokenization")
    return violations


@dataclass
class _SplitTensors:
    items: torch.Tensor  # (n, max_len) item indices; the PAD slot is n_items
    targets: torch.Tensor  # (n,)
    examples: list[SplitExample]

    def __len__(self) -> int:
        return self.items.shape[0]


class Trainer:
    """Owns both components, their optimizers, and the alternating schedule."""

    def __init__(
        self,
        tokenizer: RqVaeTokenizer,
        recommender: Seq2SeqRecommender,
        layout: VocabLayout,
        table: EmbeddingTable,
        examples: list[SplitExample],
        schedule: TrainSchedule,
        align: AlignmentSettings,
        seed: int = 0,
        out_dir: str | Path | None = None,
        variant: str = "full",
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.tokenizer = tokenizer
        self.recommender = recommender
        self.layout = layout
        self.table = table
        self.schedule = schedule
        self.align = align
        self.seed = seed
        self.variant = variant
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        mu, lam = align.mu, align.lam
        if variant in ("no_sia", "no_both"):
            mu = 0.0
        if variant in ("no_psa", "no_both"):
            lam = 0.0
        self.mu, self.lam = mu, lam

        self.items = sorted(table.rows)
        self.item_index = {item: i for i, item in enumerate(self.items)}
        self.embeddings = torch.from_numpy(table.matrix(self.items))
        self.splits = {
            name: self._build_split([ex for ex in examples if ex.split == name])
            for name in ("train", "valid", "test")
        }

        self.opt_tokenizer = torch.optim.AdamW(
            tokenizer.parameters(), lr=schedule.tokenizer_lr, weight_decay=schedule.weight_decay
        )
        self.opt_recommender = torch.optim.AdamW(
            recommender.parameters(), lr=schedule.recommender_lr, weight_decay=schedule.weight_decay
        )

        self.identifiers = tokenize_corpus(table, tokenizer)
        self.id_matrix = self._build_id_matrix(self.identifiers)
        self.cycle = 0
        self.phase = "init"
        self.step = 0
        self.converged = False
        self.metrics = MetricsLog(self.out_dir / "metrics.jsonl" if self.out_dir else None)
        self.phase_log: list[dict] = []
        self.history: list[dict] = []
        self._shuffle_gen = torch.Generator().manual_seed(seed)
        self._dead_code_rng = np.random.default_rng(seed + 17)

    # ---------------------------------------------------------------- data

    def _build_split(self, examples: list[SplitExample]) -> _SplitTensors:
        n_items = len(self.items)
        if examples:
            width = max(len(ex.input_items) for ex in examples)
        else:
            width = 1
        items = torch.full((len(examples), width), n_items, dtype=torch.long)
        targets = torch.zeros(len(examples), dtype=torch.long)
        for i, ex in enumerate(examples):
            idxs = [self.item_index[item] for item in ex.input_items]
            items[i, : len(idxs)] = torch.tensor(idxs, dtype=torch.long)
            targets[i] = self.item_index[ex.target_item]
        return _SplitTensors(items=items, targets=targets, examples=examples)

    def _build_id_matrix(self, identifiers: dict[str, ItemIdentifier]) -> torch.Tensor:
        mat = torch.full(
            (len(self.items) + 1, self.layout.tokens_per_item), PAD, dtype=torch.long
        )
        for item, idx in self.item_index.items():
            mat[idx] = torch.tensor(self.layout.encode_identifier(identifiers[item]))
        return mat  # the extra last row stays PAD and backs padded positions

    def _encoder_batch(self, item_rows: torch.Tensor) -> TokenSequence:
        n_items = len(self.items)
        tokens = self.id_matrix[item_rows]  # (B, max_len, L+1)
        b, width, per = tokens.shape
        ids = tokens.reshape(b, width * per)
        mask = (item_rows != n_items).repeat_interleave(per, dim=1)
        return TokenSequence(ids=ids, mask=mask)

    def _batches(self, split: str, shuffle: bool):
        data = self.splits[split]
        n = len(data)
        order = torch.randperm(n, generator=self._shuffle_gen) if shuffle else torch.arange(n)
        for start in range(0, n, self.schedule.batch_size):
            sel = order[start : start + self.schedule.batch_size]
            if sel.numel() < 2:
                continue  # alignment losses need >= 2 examples
            yield data.items[sel], data.targets[sel]

    # ------------------------------------------------------------- phases

    def _forward_recommender(self, item_rows: torch.Tensor, target_idx: torch.Tensor):
        x = self._encoder_batch(item_rows)
        targets = self.id_matrix[target_idx]
        prefix_ids = torch.cat(
            [torch.full((targets.shape[0], 1), BOS, dtype=torch.long), targets[:, :-1]], dim=1
        )
        prefix = TokenSequence(ids=prefix_ids, mask=torch.ones_like(prefix_ids, dtype=torch.bool))
        out = self.recommender(x, prefix)
        z_seq = self.recommender.project_sequence_state(out.encoder_states, x.mask)
        pref = self.recommender.preference_state(out.decoder_states)
        return out, targets, z_seq, pref

    def _alignment_terms(self, z, z_seq, pref, recon):
        zero = torch.zeros((), dtype=z.dtype)
        sia = (
            sia_loss(
                z,
                z_seq,
                self.tokenizer,
                teacher_forced=self.align.teacher_forced_sia,
                verbatim_sign=self.align.verbatim_sia_sign,
            )
            if self.mu != 0.0
            else zero
        )
        psa = psa_loss(pref, recon, tau=self.align.tau) if self.lam != 0.0 else zero
        return sia, psa

    def _check_finite(self, loss: torch.Tensor, phase: str) -> None:
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss in {phase} at step {self.step} (cycle {self.cycle}); "
                "last cycle-boundary checkpoint is the last good state"
            )

    def _tokenizer_epoch(self) -> dict:
        self.phase = "tokenizer"
        self.recommender.requires_grad_(False)
        self.tokenizer.requires_grad_(True)
        self.recommender.eval()
        self.tokenizer.train()
        sums = {"base": 0.0, "sia": 0.0, "psa": 0.0, "combined": 0.0}
        count = 0
        for item_rows, target_idx in self._batches("train", shuffle=True):
            with torch.no_grad():
                _, _, z_seq, pref = self._forward_recommender(item_rows, target_idx)
            z = self.embeddings[target_idx]
            result, recon = self.tokenizer.run(z)
            sq, _, _ = sq_loss(z, result, recon, beta=self.tokenizer.config.beta)
            sia, psa = self._alignment_terms(z, z_seq, pref, recon)
            loss = combine_tokenizer_objective(sq, sia, psa, self.mu, self.lam)
            self._check_finite(loss, "tokenizer epoch")
            self.opt_tokenizer.zero_grad()
            self.opt_recommender.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.tokenizer.parameters(), self.schedule.grad_clip)
            self.opt_tokenizer.step()
            self.step += 1
            row = {
                "step": self.step,
                "phase": "tokenizer",
                "cycle": self.cycle,
                "base": float(sq.detach()),
                "sia": float(sia.detach()),
                "psa": float(psa.detach()),
                "combined": float(loss.detach()),
            }
            self.metrics.log(**row)
            for key in sums:
                sums[key] += row[key]
            count += 1
        return {k: v / max(count, 1) for k, v in sums.items()}

    def _recommender_epoch(self, epoch_in_cycle: int) -> dict:
        self.phase = "recommender"
        self.tokenizer.requires_grad_(False)
        self.recommender.requires_grad_(True)
        self.tokenizer.eval()
        self.recommender.train()
        sums = {"base": 0.0, "sia": 0.0, "psa": 0.0, "combined": 0.0}
        count = 0
        for item_rows, target_idx in self._batches("train", shuffle=True):
            out, targets, z_seq, pref = self._forward_recommender(item_rows, target_idx)
            z = self.embeddings[target_idx]
            with torch.no_grad():
                _, recon = self.tokenizer.run(z)
            rec = rec_loss(out.logits, targets)
            sia, psa = self._alignment_terms(z, z_seq, pref, recon)
            loss = combine_recommender_objective(rec, sia, psa, self.mu, self.lam)
            self._check_finite(loss, "recommender epoch")
            self.opt_tokenizer.zero_grad()
            self.opt_recommender.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.recommender.parameters(), self.schedule.grad_clip)
            self.opt_recommender.step()
            self.step += 1
            row = {
                "step": self.step,
                "phase": "recommender",
                "cycle": self.cycle,
                "epoch": epoch_in_cycle,
                "base": float(rec.detach()),
                "sia": float(sia.detach()),
                "psa": float(psa.detach()),
                "combined": float(loss.detach()),
            }
            self.metrics.log(**row)
            for key in sums:
                sums[key] += row[key]
            count += 1
        return {k: v / max(count, 1) for k, v in sums.items()}

    def _joint_epoch(self, epoch_in_cycle: int) -> dict:
        """Non-alternating update: every objective, both components, every step."""
        self.phase = "joint"
        self.tokenizer.requires_grad_(True)
        self.recommender.requires_grad_(True)
        self.tokenizer.train()
        self.recommender.train()
        sums = {"base": 0.0, "sia": 0.0, "psa": 0.0, "combined": 0.0}
        count = 0
        for item_rows, target_idx in self._batches("train", shuffle=True):
            out, targets, z_seq, pref = self._forward_recommender(item_rows, target_idx)
            z = self.embeddings[target_idx]
            result, recon = self.tokenizer.run(z)
            sq, _, _ = sq_loss(z, result, recon, beta=self.tokenizer.config.beta)
            rec = rec_loss(out.logits, targets)
            sia, psa = self._alignment_terms(z, z_seq, pref, recon)
            loss = sq + rec + self.mu * sia + self.lam * psa
            self._check_finite(loss, "joint epoch")
            self.opt_tokenizer.zero_grad()
            self.opt_recommender.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.tokenizer.parameters(), self.schedule.grad_clip)
            nn.utils.clip_grad_norm_(self.recommender.parameters(), self.schedule.grad_clip)
            self.opt_tokenizer.step()
            self.opt_recommender.step()
            self.step += 1
            row = {
                "step": self.step,
                "phase": "joint",
                "cycle": self.cycle,
                "epoch": epoch_in_cycle,
                "base": float((sq + rec).detach()),
                "sia": float(sia.detach()),
                "psa": float(psa.detach()),
                "combined": float(loss.detach()),
            }
            self.metrics.log(**row)
            for key in sums:
                sums[key] += row[key]
            count += 1
        return {k: v / max(count, 1) for k, v in sums.items()}

    # -------------------------------------------------------- orchestration

    def pretrain_tokenizer(self, epochs: int | None = None) -> dict:
        """Minimize the quantization loss alone over all item embeddings."""
        epochs = self.schedule.pretrain_epochs if epochs is None else epochs
        self.tokenizer.requires_grad_(True)
        self.tokenizer.train()
        n = self.embeddings.shape[0]
        recon_history = []
        utilization: list[list[float]] = []
        for epoch in range(epochs):
            order = torch.randperm(n, generator=self._shuffle_gen)
            used = [set() for _ in range(self.tokenizer.config.levels)]
            last_residuals: torch.Tensor | None = None
            epoch_recon = 0.0
            batches = 0
            for start in range(0, n, self.schedule.batch_size):
                z = self.embeddings[order[start : start + self.schedule.batch_size]]
                result, recon = self.tokenizer.run(z)
                total, rec_err, _ = sq_loss(z, result, recon, beta=self.tokenizer.config.beta)
                self._check_finite(total, "pretraining")
                self.opt_tokenizer.zero_grad()
                total.backward()
                nn.utils.clip_grad_norm_(self.tokenizer.parameters(), self.schedule.grad_clip)
                self.opt_tokenizer.step()
                self.step += 1
                self.metrics.log(
                    step=self.step,
                    phase="pretrain",
                    epoch=epoch,
                    base=float(total.detach()),
                    sia=0.0,
                    psa=0.0,
                    combined=float(total.detach()),
                )
                epoch_recon += float(rec_err.detach())
                batches += 1
                for level in range(self.tokenizer.config.levels):
                    used[level].update(result.tokens[:, level].tolist())
                last_residuals = (result.residuals[:, -1] - result.codes[:, -1]).detach()
            if self.tokenizer.config.dead_code_reset:
                self._reset_dead_codes(used, last_residuals)
            recon_history.append(epoch_recon / max(batches, 1))
            utilization.append(
                [len(used[level]) / self.tokenizer.config.codebook_size
                 for level in range(self.tokenizer.config.levels)]
            )
        report = {
            "epochs": epochs,
            "recon_history": recon_history,
            "final_recon": recon_history[-1] if recon_history else None,
            "utilization": utilization[-1] if utilization else None,
        }
        self.history.append({"event": "pretrain", **report})
        return report

    def _reset_dead_codes(self, used: list[set], residual_pool: torch.Tensor | None) -> None:
        if residual_pool is None or residual_pool.shape[0] == 0:
            return
        with torch.no_grad():
            for level, codebook in enumerate(self.tokenizer.codebooks):
                dead = [k for k in range(codebook.shape[0]) if k not in used[level]]
                for k in dead:
                    pick = int(self._dead_code_rng.integers(residual_pool.shape[0]))
                    jitter = torch.from_numpy(
                        self._dead_code_rng.normal(0.0, 1e-3, size=codebook.shape[1])
                    ).to(codebook.dtype)
                    codebook[k] = residual_pool[pick] + jitter
                if dead:
                    logger.info("reset %d dead codes at level %d", len(dead), level)

    def retokenize(self) -> float:
        """Refresh the identifier map from the current tokenizer; returns change fraction."""
        prev = self.identifiers
        tok_before = parameter_hash(self.tokenizer)
        rec_before = parameter_hash(self.recommender)
        new = tokenize_corpus(self.table, self.tokenizer)
        fraction = identifier_change_fraction(prev, new)
        self.identifiers = new
        self.id_matrix = self._build_id_matrix(new)
        self.phase_log.append(
            {
                "phase": "retokenize",
                "cycle": self.cycle,
                "epoch": None,
                "tok_before": tok_before,
                "tok_after": parameter_hash(self.tokenizer),
                "rec_before": rec_before,
                "rec_after": parameter_hash(self.recommender),
                "ids_before": identifier_map_hash(prev),
                "ids_after": identifier_map_hash(new),
                "change_fraction": fraction,
            }
        )
        return fraction

    def _logged_epoch(self, kind: str, epoch_in_cycle: int, fn) -> dict:
        entry = {
            "phase": kind,
            "cycle": self.cycle,
            "epoch": epoch_in_cycle,
            "tok_before": parameter_hash(self.tokenizer),
            "rec_before": parameter_hash(self.recommender),
            "ids_before": identifier_map_hash(self.identifiers),
        }
        summary = fn()
        entry.update(
            tok_after=parameter_hash(self.tokenizer),
            rec_after=parameter_hash(self.recommender),
            ids_after=identifier_map_hash(self.identifiers),
        )
        self.phase_log.append(entry)
        return summary

    def run_cycle(self) -> dict:
        """One alternating cycle: tokenizer epoch, retokenize, recommender epochs."""
        summary: dict = {"cycle": self.cycle}
        if self.variant == "no_at":
            for epoch in range(self.schedule.cycle_length):
                summary[f"joint_{epoch}"] = self._logged_epoch(
                    "joint", epoch, lambda: self._joint_epoch(epoch)
                )
            summary["change_fraction"] = self.retokenize()
        else:
            summary["tokenizer"] = self._logged_epoch("tokenizer", 0, self._tokenizer_epoch)
            summary["change_fraction"] = self.retokenize()
            for epoch in range(1, self.schedule.cycle_length):
                summary[f"recommender_{epoch}"] = self._logged_epoch(
                    "recommender", epoch, lambda: self._recommender_epoch(epoch)
                )
        self.cycle += 1
        self.history.append({"event": "cycle", **summary})
        if self.out_dir is not None:
            self.save_state(self.out_dir / "state.pt")
        return summary

    def run_cycles(self) -> int:
        """Alternate until the identifier map stabilizes or max_cycles is hit."""
        while self.cycle < self.schedule.max_cycles and not self.converged:
            summary = self.run_cycle()
            if check_convergence_fraction(summary["change_fraction"], self.schedule.epsilon):
                self.converged = True
        return self.cycle

    def split_rec_loss(self, split: str, batch_size: int = 256) -> float:
        """Teacher-forced next-token loss over a split, averaged per example."""
        data = self.splits[split]
        self.recommender.eval()
        total, n = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(data), batch_size):
                rows = data.items[start : start + batch_size]
                target_idx = data.targets[start : start + batch_size]
                out, targets, _, _ = self._forward_recommender(rows, target_idx)
                total += float(rec_loss(out.logits, targets)) * rows.shape[0]
                n += rows.shape[0]
        self.recommender.train()
        return total / max(n, 1)

    def validation_recall(self, k: int = 10) -> float:
        report = self._evaluate_split(
            "valid", ks=(k,), beam=self.schedule.valid_beam, limit=self.schedule.valid_limit
        )
        return report.recall[k]

    def _evaluate_split(
        self, split: str, ks=(5, 10), beam: int = 20, limit: int | None = None
    ) -> MetricsReport:
        examples = self.splits[split].examples
        if limit is not None:
            examples = examples[:limit]
        return evaluate(
            self.recommender,
            self.tokenizer,
            self.identifiers,
            examples,
            self.layout,
            ks=ks,
            beam=beam,
            batch_size=self.schedule.eval_batch_size,
        )

    def finalize(self) -> dict:
        """Freeze the tokenizer for good; train the recommender with early stopping
        on validation Recall@10 and restore the best checkpoint."""
        self.phase = "final"
        self.tokenizer.requires_grad_(False)
        frozen_hash = parameter_hash(self.tokenizer)
        best_recall = self.validation_recall()
        best_state = copy.deepcopy(self.recommender.state_dict())
        best_epoch = -1
        epochs_since_best = 0
        epoch = 0
        while epoch < self.schedule.final_max_epochs:
            self._logged_epoch("recommender", epoch, lambda: self._recommender_epoch(epoch))
            recall = self.validation_recall()
            self.metrics.log(step=self.step, phase="final_valid", epoch=epoch, recall10=recall)
            if recall > best_recall:
                best_recall = recall
                best_state = copy.deepcopy(self.recommender.state_dict())
                best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            epoch += 1
            if epochs_since_best >= self.schedule.patience:
                break
        self.recommender.load_state_dict(best_state)
        assert parameter_hash(self.tokenizer) == frozen_hash
        report = {
            "event": "finalize",
            "epochs": epoch,
            "best_epoch": best_epoch,
            "best_recall10": best_recall,
        }
        self.history.append(report)
        return report

    def train(self) -> dict:
        """Full pipeline: cycles to convergence, then final recommender training."""
        cycles = self.run_cycles()
        final = self.finalize()
        if self.out_dir is not None:
            self.save_checkpoints()
        return {
            "cycles": cycles,
            "converged": self.converged,
            "best_recall10": final["best_recall10"],
        }

    def evaluate_test(self, ks=(5, 10), beam: int = 20) -> MetricsReport:
        return self._evaluate_split("test", ks=ks, beam=beam)

    # ------------------------------------------------------------- persistence

    def config_fingerprint(self) -> str:
        payload = {
            "schedule": asdict(self.schedule),
            "align": asdict(self.align),
            "variant": self.variant,
            "seed": self.seed,
            "tokenizer": asdict(self.tokenizer.config),
            "recommender": asdict(self.recommender.config),
        }
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
        ).hexdigest()

    def save_checkpoints(self) -> None:
        assert self.out_dir is not None
        tok_hash = parameter_hash(self.tokenizer)
        save_checkpoint(
            self.out_dir / "tokenizer.pt",
            {
                "state_dict": self.tokenizer.state_dict(),
                "config": asdict(self.tokenizer.config),
                "hash": tok_hash,
            },
        )
        save_checkpoint(
            self.out_dir / "recommender.pt",
            {
                "state_dict": self.recommender.state_dict(),
                "config": asdict(self.recommender.config),
                "layout": asdict(self.layout),
            },
        )
        write_identifier_map(self.identifiers, self.out_dir / "identifiers.tsv")
        (self.out_dir / "identifiers.hash").write_text(tok_hash + "\n")
        with (self.out_dir / "phase_log.jsonl").open("w", encoding="utf-8") as fh:
            for entry in self.phase_log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def save_state(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            {
                "config_fingerprint": self.config_fingerprint(),
                "cycle": self.cycle,
                "step": self.step,
                "converged": self.converged,
                "tokenizer": self.tokenizer.state_dict(),
                "recommender": self.recommender.state_dict(),
                "opt_tokenizer": self.opt_tokenizer.state_dict(),
                "opt_recommender": self.opt_recommender.state_dict(),
                "identifiers": {
                    i: (ident.tokens, ident.suffix) for i, ident in self.identifiers.items()
                },
                "shuffle_rng": self._shuffle_gen.get_state(),
                "torch_rng": torch.get_rng_state(),
                "phase_log": self.phase_log,
            },
        )

    def load_state(self, path: str | Path) -> None:
        payload = load_checkpoint(path)
        if payload["config_fingerprint"] != self.config_fingerprint():
            raise ValueError("refusing to resume: config fingerprint differs from checkpoint")
        self.tokenizer.load_state_dict(payload["tokenizer"])
        self.recommender.load_state_dict(payload["recommender"])
        self.opt_tokenizer.load_state_dict(payload["opt_tokenizer"])
        self.opt_recommender.load_state_dict(payload["opt_recommender"])
        self.cycle = payload["cycle"]
        self.step = payload["step"]
        self.converged = payload["converged"]
        self.identifiers = {
            item: ItemIdentifier(item_id=item, tokens=tuple(tokens), suffix=suffix)
            for item, (tokens, suffix) in payload["identifiers"].items()
        }
        self.id_matrix = self._build_id_matrix(self.identifiers)
        self._shuffle_gen.set_state(payload["shuffle_rng"])
        torch.set_rng_state(payload["torch_rng"])
        self.phase_log = payload["phase_log"]


def check_convergence_fraction(fraction: float, epsilon: float) -> bool:
    return fraction <= epsilon


def run_ablation(
    variant: str,
    build_trainer,
    seed: int = 0,
) -> dict:
    """Run one ablation variant end to end and report its test metrics.

    build_trainer(variant, seed, pretrain) must construct a fresh Trainer,
    pretraining its tokenizer when asked. no_ete first completes a full run,
    then retrains a new recommender on that run's final frozen identifiers.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "no_ete":
        full = build_trainer("full", seed, True)
        full.train()
        fresh = build_trainer("no_both", seed, False)
        fresh.tokenizer.load_state_dict(full.tokenizer.state_dict())
        fresh.identifiers = full.identifiers
        fresh.id_matrix = fresh._build_id_matrix(full.identifiers)
        fresh.tokenizer.requires_grad_(False)
        final = fresh.finalize()
        report = fresh.evaluate_test()
        return {"variant": variant, "final": final, "metrics": report.as_dict()}
    trainer = build_trainer(variant, seed, True)
    summary = trainer.train()
    report = trainer.evaluate_test()
    return {"variant": variant, "final": summary, "metrics": report.as_dict()}
