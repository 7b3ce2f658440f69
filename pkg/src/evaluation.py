"""
Evaluation Engine

Perplexity and sequence recovery of a design model over a corpus, subset
restrictions (Short, Single-chain) and the comparison table across corpora.
Both metrics are micro-averaged: every scored residue weighs the same.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from src.contextual_ae import GREEDY_TEMPERATURE, SequenceLogits
from src.data_ingest import Batch, BackboneRecord, ResidueAlphabet, make_batches
from src.objectives import token_nll
from src.utils import progress_disabled

logger = logging.getLogger(__name__)

SHORT_MAX_LENGTH = 100
TABLE_COLUMNS = ("All", "Short", "Single-chain", "Ts50", "Ts500")


class EvaluationError(ValueError):
    """Raised for empty corpora or models that return malformed outputs."""


class DesignModel(Protocol):
    """What evaluation needs from a model."""

    def teacher_forced_logits(self, batch: Batch) -> SequenceLogits:
        ...

    def design(self, batch: Batch, temperature: float = GREEDY_TEMPERATURE,
               generator: torch.Generator | None = None) -> SequenceLogits:
        ...


@dataclass
class EvalReport:
    """
    Metrics of one corpus or subset.

    Attributes:
        label (str): Corpus or subset name (e.g. `All`, `Short`, `Ts50`).
        perplexity (float): exp of the token-weighted mean NLL.
        recovery (float): Percent of scored positions where the argmax equals the native residue.
        rows (pd.DataFrame): Per-record table the metrics were computed from.
        rollout_recovery (float | None): Recovery of left-to-right greedy designs when computed.
        metadata (dict): Checkpoint and corpus digests.
    """
    label: str
    perplexity: float
    recovery: float
    rows: pd.DataFrame
    rollout_recovery: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def tokens(self) -> int:
        return int(self.rows["tokens"].sum())

    def summary(self) -> dict:
        summary = {"label": self.label, "records": len(self.rows), "tokens": self.tokens,
                   "perplexity": self.perplexity, "recovery": self.recovery}
        if self.rollout_recovery is not None:
            summary["rollout_recovery"] = self.rollout_recovery
        return summary

    def to_text(self) -> str:
        """Structured text form: the summary and metadata as indented JSON."""
        return json.dumps({**self.summary(), "metadata": self.metadata}, indent=2, sort_keys=True) + "\n"


def record_rows(model: DesignModel, records: list[BackboneRecord], alphabet: ResidueAlphabet | None = None,
                batch_size: int = 5, rollout: bool = False, temperature: float = GREEDY_TEMPERATURE,
                generator: torch.Generator | None = None) -> pd.DataFrame:
    """
    Scores every record with teacher-forced logits (and greedy rollout if asked).

    Returns:
        pd.DataFrame: One row per record: name, length, tokens, nll, matches,
        recovery, perplexity, designed, plus rollout_matches, rollout_recovery
        and rollout_designed with `rollout`.

    Raises:
        EvaluationError: If `records` is empty.
    """
    if not records:
        raise EvaluationError("Cannot evaluate an empty corpus.")
    alphabet = alphabet or ResidueAlphabet()
    was_training = model.training if isinstance(model, nn.Module) else False
    if isinstance(model, nn.Module):
        model.eval()

    rows = []
    batches = make_batches(records, max_tokens=0, batch_size=batch_size, alphabet=alphabet, shuffle=False)
    with torch.no_grad():
        for batch in tqdm(batches, desc="evaluating", disable=progress_disabled()):
            out = model.teacher_forced_logits(batch)
            if out.logits.shape[:2] != batch.tokens.shape:
                raise EvaluationError(f"Model returned logits {tuple(out.logits.shape)} for a batch "
                                      f"{tuple(batch.tokens.shape)}.")
            mask = out.mask & batch.token_mask
            nll = token_nll(out.logits, batch.tokens, mask)
            predicted = out.logits.argmax(-1)
            hits = (predicted == batch.tokens) & mask
            if rollout:
                designed = model.design(batch, temperature, generator).tokens
                rollout_hits = (designed == batch.tokens) & mask
            for b, record in enumerate(batch.records):
                n = len(record)
                tokens = int(mask[b].sum())
                total_nll = float(nll[b].sum())
                row = {
                    "name": record.name, "length": n, "tokens": tokens, "nll": total_nll,
                    "matches": int(hits[b].sum()),
                    "recovery": 100.0 * int(hits[b].sum()) / tokens if tokens else float("nan"),
                    "perplexity": math.exp(total_nll / tokens) if tokens else float("nan"),
                    "designed": alphabet.decode(predicted[b, :n].tolist()),
                }
                if rollout:
                    row["rollout_matches"] = int(rollout_hits[b].sum())
                    row["rollout_recovery"] = 100.0 * row["rollout_matches"] / tokens if tokens else float("nan")
                    row["rollout_designed"] = alphabet.decode(designed[b, :n].tolist())
                rows.append(row)

    if isinstance(model, nn.Module):
        model.train(was_training)
    return pd.DataFrame(rows)


def corpus_perplexity(rows: pd.DataFrame) -> float:
    """exp(sum of NLL / sum of scored tokens)."""
    tokens = int(rows["tokens"].sum()) if len(rows) else 0
    if tokens == 0:
        raise EvaluationError("No scored residues.")
    return math.exp(float(rows["nll"].sum()) / tokens)


def corpus_recovery(rows: pd.DataFrame, column: str = "matches") -> float:
    """100 x matches / scored tokens over the whole table."""
    tokens = int(rows["tokens"].sum()) if len(rows) else 0
    if tokens == 0:
        raise EvaluationError("No scored residues.")
    return 100.0 * float(rows[column].sum()) / tokens


def perplexity(model: DesignModel, records: list[BackboneRecord], alphabet: ResidueAlphabet | None = None,
               batch_size: int = 5) -> float:
    """Teacher-forced corpus perplexity."""
    return corpus_perplexity(record_rows(model, records, alphabet, batch_size))


def recovery(model: DesignModel, records: list[BackboneRecord], temperature: float = GREEDY_TEMPERATURE,
             alphabet: ResidueAlphabet | None = None, batch_size: int = 5, rollout: bool = False) -> float:
    """
    Corpus recovery in percent.

    The teacher-forced argmax is used by default; `rollout` scores left-to-right
    greedy designs drawn at `temperature` instead.
    """
    rows = record_rows(model, records, alphabet, batch_size, rollout=rollout, temperature=temperature)
    return corpus_recovery(rows, "rollout_matches" if rollout else "matches")


def report_from_rows(rows: pd.DataFrame, label: str, metadata: dict | None = None) -> EvalReport:
    rollout = corpus_recovery(rows, "rollout_matches") if "rollout_matches" in rows else None
    return EvalReport(label, corpus_perplexity(rows), corpus_recovery(rows), rows.reset_index(drop=True),
                      rollout, dict(metadata or {}))


def subset_eval(rows: pd.DataFrame, rule: str, names: list[str] | None = None,
                metadata: dict | None = None) -> EvalReport | None:
    """
    Restricts the per-record table to a subset and recomputes the metrics.

    Args:
        rows (pd.DataFrame): Output of `record_rows`.
        rule (str): `short` (length <= 100), `single-chain` (needs `names`) or `all`.
        names (list[str] | None): Single-chain membership list.

    Returns:
        EvalReport | None: None when the subset cannot be formed (no list, or empty).
    """
    if rule == "all":
        selected, label = rows, "All"
    elif rule == "short":
        selected, label = rows[rows["length"] <= SHORT_MAX_LENGTH], "Short"
    elif rule == "single-chain":
        if names is None:
            logger.warning("No single-chain name list supplied; Single-chain subset skipped")
            return None
        selected, label = rows[rows["name"].isin(set(names))], "Single-chain"
    else:
        raise ValueError(f"Unknown subset rule '{rule}'.")
    if selected.empty or int(selected["tokens"].sum()) == 0:
        logger.warning("Subset %s is empty; skipped", label)
        return None
    return report_from_rows(selected, label, metadata)


def read_name_list(path: Path) -> list[str]:
    """One record name per line; blank lines and `#` comments ignored."""
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def evaluate_corpus(model: DesignModel, records: list[BackboneRecord], alphabet: ResidueAlphabet | None = None,
                    single_chain: list[str] | None = None, rollout: bool = False,
                    metadata: dict | None = None, batch_size: int = 5) -> dict[str, EvalReport]:
    """All, Short and (when the list is given) Single-chain reports of one corpus."""
    rows = record_rows(model, records, alphabet, batch_size, rollout=rollout)
    reports = {}
    for rule in ("all", "short", "single-chain"):
        report = subset_eval(rows, rule, single_chain, metadata)
        if report is not None:
            reports[report.label] = report
    return reports


def table_one(reports: dict[str, EvalReport]) -> pd.DataFrame:
    """
    Perplexity and recovery laid out as rows against the columns
    All / Short / Single-chain / Ts50 / Ts500; missing cells are NaN.
    """
    table = pd.DataFrame(np.nan, index=["Perplexity", "Recovery"], columns=list(TABLE_COLUMNS))
    for label, report in reports.items():
        if label in table.columns:
            table.loc["Perplexity", label] = report.perplexity
            table.loc["Recovery", label] = report.recovery
    return table


def write_fasta(rows: pd.DataFrame, path: Path, column: str = "designed") -> None:
    """Writes one `>name` header and one sequence line per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for name, sequence in zip(rows["name"], rows[column]):
            handle.write(f">{name}\n{sequence}\n")
    logger.info("Wrote %d designed sequences to %s", len(rows), path)


def read_fasta(path: Path) -> dict[str, str]:
    """Name -> sequence, in file order."""
    sequences: dict[str, str] = {}
    name = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            name = line[1:].split()[0]
            sequences[name] = ""
        elif name is None:
            raise EvaluationError(f"{path}: sequence line before the first header.")
        else:
            sequences[name] += line
    return sequences
