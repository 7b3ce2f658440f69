"""
Analysis Engine

Residue-type statistics of designed against native sequences, their KL
divergence, the residue confusion matrix, the length profile of a
per-record evaluation table, and the report files rendering them.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy.special import rel_entr

from src.data_ingest import ResidueAlphabet
from src.plotting import plot_confusion, plot_length_profile, plot_residue_bars, plot_residue_bars_static

logger = logging.getLogger(__name__)

LENGTH_BINS = (0, 100, 200, 300, 500, np.inf)
FLOAT_FORMAT = "%.10g"


class AnalysisError(ValueError):
    """Raised for empty inputs or report directories that cannot be written."""


@dataclass(frozen=True)
class ResidueDistribution:
    """
    Residue counts over the canonical alphabet.

    Attributes:
        counts (np.ndarray): 20 integer counts in canonical order.
        other (int): Symbols outside the alphabet (not part of the frequencies).
        residues (str): The alphabet symbols.
    """
    counts: np.ndarray
    other: int = 0
    residues: str = ResidueAlphabet().symbols

    def __post_init__(self):
        if self.counts.shape != (len(self.residues),):
            raise AnalysisError(f"Expected {len(self.residues)} counts, got shape {self.counts.shape}.")
        if self.counts.sum() == 0:
            raise AnalysisError("A residue distribution needs at least one residue.")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @cached_property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @cached_property
    def minmax(self) -> np.ndarray:
        """Min-max scaled frequencies for display; all 1.0 when every count is equal."""
        low, high = self.frequencies.min(), self.frequencies.max()
        if high - low <= 0:
            return np.ones_like(self.frequencies)
        return (self.frequencies - low) / (high - low)

    def table(self, model: str) -> pd.DataFrame:
        return pd.DataFrame({"model": model, "residue": list(self.residues), "count": self.counts,
                             "frequency": self.frequencies, "minmax": self.minmax})


def residue_distribution(sequences: Iterable[str], alphabet: ResidueAlphabet | None = None) -> ResidueDistribution:
    """
    Counts residue types over `sequences`.

    Raises:
        AnalysisError: If no in-alphabet residue is found.
    """
    alphabet = alphabet or ResidueAlphabet()
    counts = np.zeros(alphabet.size, dtype=np.int64)
    other = 0
    for sequence in sequences:
        encoded = alphabet.encode(sequence)
        known = encoded < alphabet.size
        counts += np.bincount(encoded[known], minlength=alphabet.size)
        other += int((~known).sum())
    if other:
        logger.warning("%d symbols outside the residue alphabet counted as 'other'", other)
    if counts.sum() == 0:
        raise AnalysisError("No residues to count.")
    return ResidueDistribution(counts, other, alphabet.symbols)


def distribution_kl(generated: ResidueDistribution, base: ResidueDistribution, eps: float = 1e-8) -> float:
    """
    KL(generated || base) over residue frequencies, each smoothed by `eps` and
    renormalised.
    """
    p = generated.frequencies + eps
    q = base.frequencies + eps
    return float(rel_entr(p / p.sum(), q / q.sum()).sum())


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with native residues on rows and designed residues on columns."""
    counts: np.ndarray
    residues: str = ResidueAlphabet().symbols

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def native_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def recovery_fraction(self) -> float:
        if self.total == 0:
            raise AnalysisError("Empty confusion matrix.")
        return float(np.trace(self.counts)) / self.total

    def table(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.counts, index=list(self.residues), columns=list(self.residues))
        frame.index.name = "native"
        return frame


def confusion(natives: Sequence[str], designs: Sequence[str], alphabet: ResidueAlphabet | None = None,
              masks: Sequence[np.ndarray] | None = None, names: Sequence[str] | None = None) -> ConfusionMatrix:
    """
    Accumulates native/designed residue pairs.

    Positions count when the native symbol is in the alphabet (and the optional
    mask allows it). Pairs of different lengths are skipped with a warning.
    """
    alphabet = alphabet or ResidueAlphabet()
    size = alphabet.size
    counts = np.zeros((size, size), dtype=np.int64)
    for i, (native, design) in enumerate(zip(natives, designs)):
        if len(native) != len(design):
            label = names[i] if names is not None else f"#{i}"
            logger.warning("Skipping %s in confusion matrix: native length %d, design length %d",
                           label, len(native), len(design))
            continue
        n_idx, d_idx = alphabet.encode(native), alphabet.encode(design)
        keep = (n_idx < size) & (d_idx < size)
        if masks is not None:
            keep &= np.asarray(masks[i], dtype=bool)
        np.add.at(counts, (n_idx[keep], d_idx[keep]), 1)
    return ConfusionMatrix(counts, alphabet.symbols)


def length_profile(rows: pd.DataFrame, bins: Sequence[float] = LENGTH_BINS) -> pd.DataFrame:
    """
    Micro-averaged recovery and perplexity per length bin of a per-record table.

    Bins are right-closed, so the first default bin is exactly the Short subset.
    Empty bins are dropped.
    """
    edges = list(bins)
    labels = [f"{int(lo)}-{'inf' if np.isinf(hi) else int(hi)}" for lo, hi in zip(edges[:-1], edges[1:])]
    binned = rows.assign(bin=pd.cut(rows["length"], bins=edges, labels=labels, right=True))
    grouped = binned.groupby("bin", observed=True, sort=True)
    profile = pd.DataFrame({
        "records": grouped.size(),
        "tokens": grouped["tokens"].sum(),
        "nll": grouped["nll"].sum(),
        "matches": grouped["matches"].sum(),
    }).reset_index()
    profile = profile[profile["tokens"] > 0].reset_index(drop=True)
    profile["recovery"] = 100.0 * profile["matches"] / profile["tokens"]
    profile["perplexity"] = np.exp(profile["nll"] / profile["tokens"])
    profile["bin"] = profile["bin"].astype(str)
    return profile[["bin", "records", "tokens", "recovery", "perplexity"]]


def comparison_table(distributions: dict[str, ResidueDistribution]) -> pd.DataFrame:
    """One row per model per residue, models in insertion order."""
    return pd.concat([d.table(model) for model, d in distributions.items()], ignore_index=True)


def kl_table(distributions: dict[str, ResidueDistribution], base: str = "base", eps: float = 1e-8) -> pd.DataFrame:
    if base not in distributions:
        raise AnalysisError(f"No '{base}' distribution to compare against.")
    return pd.DataFrame([{"model": model, "kl": distribution_kl(d, distributions[base], eps)}
                         for model, d in distributions.items() if model != base])


def _write_table(frame: pd.DataFrame, path: Path, index: bool = False) -> Path:
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def _save_figure(fig: plt.Figure, path: Path) -> Path:
    fig.savefig(path, dpi=120, facecolor=fig.get_facecolor(), metadata={"Software": None})
    plt.close(fig)
    return path


def emit_report(out_dir: Path, corpus: str, distributions: dict[str, ResidueDistribution] | None = None,
                confusions: dict[str, ConfusionMatrix] | None = None,
                profiles: dict[str, pd.DataFrame] | None = None, base: str = "base") -> list[Path]:
    """
    Writes the analysis tables and figures.

    File names follow `<model>__<corpus>__<analysis>.<ext>`; the multi-model
    residue comparison uses the model label `models`.

    Args:
        out_dir (Path): Report directory, created if needed.
        corpus (str): Corpus label used in file names.
        distributions (dict): Model name -> distribution, including `base`.
        confusions (dict): Model name -> confusion matrix.
        profiles (dict): Model name -> length profile.

    Returns:
        list[Path]: Files written, in writing order.

    Raises:
        AnalysisError: If the directory cannot be created or written.
    """
    out_dir = Path(out_dir)
    written: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if distributions:
            table = comparison_table(distributions)
            stem = out_dir / f"models__{corpus}__distribution"
            written.append(_write_table(table, stem.with_suffix(".csv")))
            written.append(_save_figure(plot_residue_bars_static(table), stem.with_suffix(".png")))
            html = stem.with_suffix(".html")
            plot_residue_bars(table).write_html(html, include_plotlyjs="cdn")
            written.append(html)
            if base in distributions and len(distributions) > 1:
                written.append(_write_table(kl_table(distributions, base), out_dir / f"models__{corpus}__kl.csv"))
        for model, matrix in (confusions or {}).items():
            stem = out_dir / f"{model}__{corpus}__confusion"
            written.append(_write_table(matrix.table(), stem.with_suffix(".csv"), index=True))
            written.append(_save_figure(plot_confusion(matrix.counts, matrix.residues), stem.with_suffix(".png")))
        for model, profile in (profiles or {}).items():
            stem = out_dir / f"{model}__{corpus}__length"
            written.append(_write_table(profile, stem.with_suffix(".csv")))
            written.append(_save_figure(plot_length_profile(profile), stem.with_suffix(".png")))
    except OSError as exc:
        raise AnalysisError(f"Cannot write the analysis report to {out_dir}: {exc}") from exc
    logger.info("Wrote %d analysis files to %s", len(written), out_dir)
    return written
