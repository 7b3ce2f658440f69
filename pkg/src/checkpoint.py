"""
Checkpoint Format

Binary layout: the magic bytes, a little-endian uint32 header length, a UTF-8
JSON header, then the raw little-endian tensor payload. The header carries the
format version, the config and alphabet fingerprints, the tensor table and the
SHA-256 of the payload.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from src.utils import sha256_bytes

logger = logging.getLogger(__name__)

MAGIC = b"MMDCKPT1"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {code: dtype for dtype, code in _DTYPES.items()}


class CheckpointError(ValueError):
    """Raised when a checkpoint does not fit the model or kind it is loaded into."""


class ChecksumError(CheckpointError):
    """Raised for truncated or corrupted checkpoint files."""


class ConfigMismatchError(CheckpointError):
    """Raised when a checkpoint was written under an incompatible configuration."""


@dataclass
class Checkpoint:
    """
    Versioned model state.

    Attributes:
        kind (str): `psm`, `ae` or `mmdesign`.
        config_hash (str): Fingerprint of the config section governing the tensors.
        alphabet_hash (str): Fingerprint of the residue alphabet.
        tensors (dict[str, torch.Tensor]): Named tensors, in insertion order.
        step (int): Optimizer steps taken when saved.
        metrics (dict): Metric snapshot at save time.
        metadata (dict): Free-form JSON-serialisable run data.
    """
    kind: str
    config_hash: str
    alphabet_hash: str
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    metrics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def shape_table(self, prefix: str = "") -> dict[str, tuple[int, ...]]:
        return {name[len(prefix):]: tuple(t.shape) for name, t in self.tensors.items() if name.startswith(prefix)}

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under `prefix`, with the prefix stripped."""
        return {name[len(prefix):]: t for name, t in self.tensors.items() if name.startswith(prefix)}


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, tensor in checkpoint.tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"Tensor {name} has unsupported dtype {tensor.dtype}.")
        code = _DTYPES[tensor.dtype]
        raw = tensor.numpy().astype(np.dtype(code), copy=False).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": checkpoint.format_version,
        "kind": checkpoint.kind,
        "config_hash": checkpoint.config_hash,
        "alphabet_hash": checkpoint.alphabet_hash,
        "step": checkpoint.step,
        "metrics": checkpoint.metrics,
        "metadata": checkpoint.metadata,
        "tensors": table,
        "payload_sha256": sha256_bytes(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise ChecksumError("Not a checkpoint file (bad magic bytes).")
    (header_len,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError("Checkpoint header is truncated or corrupt.") from exc
    payload = blob[start + header_len:]
    if sha256_bytes(payload) != header["payload_sha256"]:
        raise ChecksumError("Checkpoint payload checksum mismatch (truncated or corrupt file).")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {header['format_version']}.")

    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())
    return Checkpoint(kind=header["kind"], config_hash=header["config_hash"],
                      alphabet_hash=header["alphabet_hash"], tensors=tensors, step=header["step"],
                      metrics=header["metrics"], metadata=header["metadata"],
                      format_version=header["format_version"])


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Writes the checkpoint atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(encode_checkpoint(checkpoint))
    os.replace(tmp, path)
    logger.info("Saved %s checkpoint (%d tensors, step %d) to %s",
                checkpoint.kind, len(checkpoint.tensors), checkpoint.step, path)
    return path


def load_checkpoint(path: Path, kind: str | None = None, config_hash: str | None = None,
                    alphabet_hash: str | None = None) -> Checkpoint:
    """
    Reads and verifies a checkpoint.

    Args:
        path (Path): Checkpoint file.
        kind (str | None): Expected kind, checked when given.
        config_hash (str | None): Expected config fingerprint, checked when given.
        alphabet_hash (str | None): Expected alphabet fingerprint, checked when given.

    Raises:
        ChecksumError: Truncated or corrupted file.
        CheckpointError: Wrong kind or alphabet.
        ConfigMismatchError: Config fingerprint differs.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint {path} does not exist.")
    checkpoint = decode_checkpoint(path.read_bytes())
    if kind is not None and checkpoint.kind != kind:
        raise CheckpointError(f"{path} holds a '{checkpoint.kind}' checkpoint, expected '{kind}'.")
    if alphabet_hash is not None and checkpoint.alphabet_hash != alphabet_hash:
        raise CheckpointError(f"{path} was written with a different residue alphabet.")
    if config_hash is not None and checkpoint.config_hash != config_hash:
        raise ConfigMismatchError(f"{path} was written under a different configuration; refusing to load.")
    return checkpoint


def load_module_state(module: torch.nn.Module, tensors: dict[str, torch.Tensor], what: str) -> list[str]:
    """
    Loads tensors into a module only if the shape tables agree exactly.

    Returns:
        list[str]: Names of the loaded parameters and buffers.

    Raises:
        CheckpointError: On any missing, unexpected or differently shaped tensor.
    """
    expected = {name: tuple(t.shape) for name, t in module.state_dict().items()}
    found = {name: tuple(t.shape) for name, t in tensors.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        unexpected = sorted(set(found) - set(expected))
        mismatched = sorted(n for n in set(expected) & set(found) if expected[n] != found[n])
        raise CheckpointError(
            f"Refusing to load {what}: missing={missing[:3]} unexpected={unexpected[:3]} "
            f"shape mismatch={mismatched[:3]}")
    reference = module.state_dict()
    module.load_state_dict({name: t.to(reference[name].dtype) for name, t in tensors.items()}, strict=True)
    return sorted(tensors)
