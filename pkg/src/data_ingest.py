"""
Corpus Ingestion Engine

This module parses CATH-style line-delimited structure-sequence corpora,
validates backbone records, applies dataset splits and groups records into
padded, masked batches.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from src.utils import numpy_generator, sha256_bytes, sha256_text

logger = logging.getLogger(__name__)

CANONICAL_ORDER = "ACDEFGHIKLMNPQRSTVWY"
BACKBONE_ATOMS = ("N", "CA", "C")
# Angstrom; smaller C-CA distances or out-of-line N components cannot define a frame
FRAME_TOLERANCE = 1e-6
MIN_GRAPH_RESIDUES = 2


class CorpusError(ValueError):
    """Raised when a corpus yields no usable records."""


class RecordError(ValueError):
    """Raised for a malformed corpus line or an inconsistent record."""


class SplitError(ValueError):
    """Raised when a split file is malformed or its splits overlap."""


@dataclass(frozen=True)
class ResidueAlphabet:
    """
    The 20 canonical amino acids in a fixed order.

    Two extra token indices live past the residues: BOS (decoder start) and PAD
    (batch padding and residues whose symbol is unknown). Neither is ever emitted.
    """
    symbols: str = CANONICAL_ORDER

    def __post_init__(self):
        if len(self.symbols) != 20 or len(set(self.symbols)) != 20:
            raise ValueError("The residue alphabet must hold exactly 20 distinct symbols.")

    @cached_property
    def index_of(self) -> dict[str, int]:
        return {symbol: i for i, symbol in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def bos_index(self) -> int:
        return self.size

    @property
    def pad_index(self) -> int:
        return self.size + 1

    @property
    def vocab_size(self) -> int:
        return self.size + 2

    @property
    def fingerprint(self) -> str:
        return sha256_text(self.symbols)

    def encode(self, sequence: str) -> np.ndarray:
        """Maps symbols to indices; unknown symbols become the PAD index."""
        return np.array([self.index_of.get(s, self.pad_index) for s in sequence], dtype=np.int64)

    def decode(self, indices) -> str:
        return "".join(self.symbols[int(i)] for i in indices)


@dataclass(frozen=True, eq=False)
class BackboneRecord:
    """
    One structure-sequence pair.

    Attributes:
        name (str): Record identifier.
        sequence (str): Residue symbols, length n. Symbols outside the alphabet
            only appear at masked positions.
        coords (np.ndarray): n x 3 x 3 coordinates in Angstrom, atoms ordered (N, CA, C).
            Masked residues hold the 0.0 sentinel.
        mask (np.ndarray): n booleans, True when all three atoms are finite and
            the symbol is known.
    """
    name: str
    sequence: str
    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        n = len(self.sequence)
        if self.coords.shape != (n, 3, 3):
            raise RecordError(f"{self.name}: coords shape {self.coords.shape} does not match length {n}.")
        if self.mask.shape != (n,):
            raise RecordError(f"{self.name}: mask length {self.mask.shape} does not match length {n}.")
        if not np.all(np.isfinite(self.coords[self.mask])):
            raise RecordError(f"{self.name}: unmasked coordinates must be finite.")

    def __len__(self) -> int:
        return len(self.sequence)

    @cached_property
    def fingerprint(self) -> str:
        """Content hash over name, sequence, coordinates and mask."""
        payload = b"".join([
            self.name.encode("utf-8"), b"\0", self.sequence.encode("utf-8"), b"\0",
            np.ascontiguousarray(self.coords, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.mask, dtype=np.uint8).tobytes(),
        ])
        return sha256_bytes(payload)

    @cached_property
    def frame_mask(self) -> np.ndarray:
        """Unmasked residues whose N, CA and C atoms define a local frame."""
        n_atoms, ca, c_atoms = self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]
        along = c_atoms - ca
        length = np.linalg.norm(along, axis=-1)
        e1 = along / np.sqrt(np.maximum(length ** 2, 1e-8))[:, None]
        u = n_atoms - ca
        residual = np.linalg.norm(u - np.sum(u * e1, axis=-1, keepdims=True) * e1, axis=-1)
        return self.mask & (length >= FRAME_TOLERANCE) & (residual >= FRAME_TOLERANCE)

    @property
    def graphable(self) -> bool:
        """True when enough residues remain to build a neighbour graph."""
        return int(self.frame_mask.sum()) >= MIN_GRAPH_RESIDUES

    def with_coords(self, coords: np.ndarray) -> "BackboneRecord":
        """Returns a copy with new coordinates; masked positions keep the sentinel."""
        coords = np.where(self.mask[:, None, None], coords, 0.0)
        return BackboneRecord(self.name, self.sequence, coords, self.mask.copy())


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        parts = {"train": set(self.train), "validation": set(self.validation), "test": set(self.test)}
        names = list(parts)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = parts[a] & parts[b]
                if overlap:
                    raise SplitError(f"Splits '{a}' and '{b}' share {len(overlap)} names, e.g. {sorted(overlap)[0]}.")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def select(self, records: list[BackboneRecord]) -> dict[str, list[BackboneRecord]]:
        """Partitions records by split, keeping corpus order inside each split."""
        by_name = {r.name: r for r in records}
        selected = {}
        for part in ("train", "validation", "test"):
            wanted = getattr(self, part)
            missing = [n for n in wanted if n not in by_name]
            if missing:
                logger.warning("Split '%s': %d names absent from the corpus", part, len(missing))
            wanted_set = set(wanted)
            selected[part] = drop_ungraphable([r for r in records if r.name in wanted_set], f"split '{part}'")
        return selected


@dataclass
class Batch:
    """
    A padded group of records.

    Attributes:
        records (list[BackboneRecord]): The records, in batch order.
        coords (torch.Tensor): B x L x 3 x 3 padded coordinates.
        tokens (torch.Tensor): B x L residue indices, PAD at padding and unknown symbols.
        mask (torch.Tensor): B x L booleans, True at usable residues.
    """
    records: list[BackboneRecord]
    coords: torch.Tensor
    tokens: torch.Tensor
    mask: torch.Tensor
    lengths: list[int] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[BackboneRecord], alphabet: ResidueAlphabet,
                     dtype: torch.dtype = torch.float32, pad_to: int | None = None) -> "Batch":
        if not records:
            raise ValueError("A batch needs at least one record.")
        lengths = [len(r) for r in records]
        width = max(lengths) if pad_to is None else max(pad_to, max(lengths))
        coords = np.zeros((len(records), width, 3, 3))
        tokens = np.full((len(records), width), alphabet.pad_index, dtype=np.int64)
        mask = np.zeros((len(records), width), dtype=bool)
        for b, record in enumerate(records):
            n = len(record)
            coords[b, :n] = record.coords
            tokens[b, :n] = alphabet.encode(record.sequence)
            mask[b, :n] = record.mask
        return cls(records=list(records), coords=torch.as_tensor(coords, dtype=dtype),
                   tokens=torch.as_tensor(tokens), mask=torch.as_tensor(mask), lengths=lengths)

    @property
    def token_mask(self) -> torch.Tensor:
        """Positions holding a known residue symbol, coordinates or not."""
        return self.tokens < 20

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


def drop_ungraphable(records: list[BackboneRecord], context: str) -> list[BackboneRecord]:
    """
    Removes records with fewer than `MIN_GRAPH_RESIDUES` residues able to define
    a frame; one warning names how many were dropped and a few of them.
    """
    kept = [r for r in records if r.graphable]
    dropped = [r.name for r in records if not r.graphable]
    if dropped:
        logger.warning("%s: dropping %d records with fewer than %d usable residues (%s)",
                       context, len(dropped), MIN_GRAPH_RESIDUES, ", ".join(dropped[:5]))
    return kept


def _finite_atom(value) -> bool:
    try:
        return len(value) == 3 and all(v is not None and math.isfinite(float(v)) for v in value)
    except (TypeError, ValueError):
        return False


def record_from_entry(entry: dict, alphabet: ResidueAlphabet) -> tuple[BackboneRecord, int]:
    """
    Builds a record from one decoded corpus entry.

    Returns the record and the number of residues whose symbol was unknown.
    Oxygen and any other atoms besides N, CA and C are ignored.
    """
    try:
        name = str(entry["name"])
        sequence = str(entry["seq"])
        atoms = entry["coords"]
    except (KeyError, TypeError) as exc:
        raise RecordError(f"missing field {exc}") from exc
    n = len(sequence)
    if n == 0:
        raise RecordError(f"{name}: empty sequence")
    coords = np.zeros((n, 3, 3))
    mask = np.ones(n, dtype=bool)
    for a, atom in enumerate(BACKBONE_ATOMS):
        positions = atoms.get(atom) if isinstance(atoms, dict) else None
        if positions is None or len(positions) != n:
            raise RecordError(f"{name}: atom {atom} needs {n} positions")
        for i, xyz in enumerate(positions):
            if _finite_atom(xyz):
                coords[i, a] = [float(v) for v in xyz]
            else:
                mask[i] = False
    unknown = np.array([s not in alphabet.index_of for s in sequence])
    mask &= ~unknown
    coords[~mask] = 0.0
    return BackboneRecord(name, sequence, coords, mask), int(unknown.sum())


def _parse_line(args: tuple[int, str, ResidueAlphabet]):
    line_number, line, alphabet = args
    try:
        entry = json.loads(line)
    except json.JSONDecodeError as exc:
        return line_number, RecordError(f"line {line_number}: {exc.msg}")
    try:
        return line_number, record_from_entry(entry, alphabet)
    except (RecordError, AttributeError, TypeError) as exc:
        return line_number, RecordError(f"line {line_number}: {exc}")


def parse_corpus(path: Path, alphabet: ResidueAlphabet | None = None, strict: bool = False,
                 workers: int = 1) -> list[BackboneRecord]:
    """
    Parses a line-delimited corpus file into backbone records.

    Args:
        path (Path): UTF-8 file with one JSON map per line (`name`, `seq`, `coords`).
        alphabet (ResidueAlphabet): Residue alphabet; canonical order when omitted.
        strict (bool): Raise on the first malformed line instead of skipping it.
        workers (int): Parser threads; output order always equals input order.

    Returns:
        list[BackboneRecord]: One record per valid line that can form a neighbour graph.
    """
    alphabet = alphabet or ResidueAlphabet()
    with open(path, encoding="utf-8") as handle:
        lines = [(i, line, alphabet) for i, line in enumerate(handle, start=1) if line.strip()]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_parse_line, lines, chunksize=64))
    else:
        results = [_parse_line(item) for item in lines]

    records, malformed = [], 0
    for line_number, result in results:
        if isinstance(result, RecordError):
            if strict:
                raise result
            logger.warning("Skipping malformed record: %s", result)
            malformed += 1
            continue
        record, unknown = result
        if unknown:
            logger.warning("%s: %d residues with unknown symbols masked out (line %d)",
                           record.name, unknown, line_number)
        records.append(record)

    graphable = drop_ungraphable(records, str(path))
    if not graphable:
        raise CorpusError(f"No valid records in {path}.")
    logger.info("Parsed %d records from %s (%d malformed, %d with fewer than %d usable residues)",
                len(graphable), path, malformed, len(records) - len(graphable), MIN_GRAPH_RESIDUES)
    return graphable


def serialize_record(record: BackboneRecord) -> dict:
    """Inverse of `record_from_entry`: masked residues are written as null atoms."""
    coords = {}
    for a, atom in enumerate(BACKBONE_ATOMS):
        coords[atom] = [record.coords[i, a].tolist() if record.mask[i] else None
                        for i in range(len(record))]
    return {"name": record.name, "seq": record.sequence, "coords": coords}


def normalize_entry(entry: dict, alphabet: ResidueAlphabet | None = None) -> dict:
    """
    Canonical form of a corpus entry: backbone atoms only, and a residue with any
    non-finite atom or unknown symbol has all three atoms set to null.
    """
    alphabet = alphabet or ResidueAlphabet()
    sequence = entry["seq"]
    keep = [s in alphabet.index_of and all(_finite_atom(entry["coords"][atom][i]) for atom in BACKBONE_ATOMS)
            for i, s in enumerate(sequence)]
    coords = {atom: [[float(v) for v in entry["coords"][atom][i]] if keep[i] else None
                     for i in range(len(sequence))]
              for atom in BACKBONE_ATOMS}
    return {"name": entry["name"], "seq": sequence, "coords": coords}


def write_corpus(records: list[BackboneRecord], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(serialize_record(record)) + "\n")


def load_splits(path: Path) -> DatasetSplit:
    """
    Loads a split file mapping `train`/`validation`/`test` to lists of names.

    Raises:
        SplitError: If a key is missing or two splits overlap.
    """
    with open(path, encoding="utf-8") as handle:
        raw = json.load(handle)
    try:
        split = DatasetSplit(tuple(raw["train"]), tuple(raw["validation"]), tuple(raw["test"]))
    except KeyError as exc:
        raise SplitError(f"Split file {path} lacks key {exc}.") from exc
    logger.info("Loaded splits train/validation/test = %s", split.sizes)
    return split


def make_batches(records: list[BackboneRecord], max_tokens: int = 1024, seed: int = 0,
                 batch_size: int = 5, token_budget: bool = False,
                 alphabet: ResidueAlphabet | None = None, dtype: torch.dtype = torch.float32,
                 shuffle: bool = True) -> list[Batch]:
    """
    Groups records into batches in a seed-determined order.

    By default batches hold `batch_size` records. With `token_budget` set, records
    are instead packed greedily until the padded size (records x longest length)
    would exceed `max_tokens`. Records longer than `max_tokens` are skipped, as are
    records too sparse to form a neighbour graph.

    Args:
        records (list[BackboneRecord]): Validated records.
        max_tokens (int): Length cap per record, and the budget in token mode.
        seed (int): Shuffle seed; the same seed always yields the same batches.
        batch_size (int): Records per batch in count mode.
        token_budget (bool): Pack by padded token count instead of record count.
        shuffle (bool): Keep corpus order when False (evaluation).

    Returns:
        list[Batch]: Every kept record appears in exactly one batch.
    """
    alphabet = alphabet or ResidueAlphabet()
    if batch_size < 1:
        raise ValueError("batch_size must be positive.")
    kept = []
    for record in drop_ungraphable(records, "batching"):
        if max_tokens and len(record) > max_tokens:
            logger.warning("Skipping %s: length %d exceeds max_tokens=%d", record.name, len(record), max_tokens)
            continue
        kept.append(record)

    order = numpy_generator(seed, "batch order").permutation(len(kept)) if shuffle else np.arange(len(kept))
    ordered = [kept[i] for i in order]

    groups: list[list[BackboneRecord]] = []
    if token_budget:
        current: list[BackboneRecord] = []
        for record in ordered:
            longest = max([len(r) for r in current] + [len(record)])
            if current and longest * (len(current) + 1) > max_tokens:
                groups.append(current)
                current = []
            current.append(record)
        if current:
            groups.append(current)
    else:
        groups = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]

    return [Batch.from_records(group, alphabet, dtype=dtype) for group in groups]
