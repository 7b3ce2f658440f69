"""
Shared Utilities

Logging setup, seeded random generators and content hashing used across
the design pipeline.
"""
import hashlib
import logging
import random
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(level: str = "INFO", log_file: Path | None = None) -> None:
    """
    Installs one stream handler (and optionally a file handler) on the root logger.

    Args:
        level (str): Logging level name, e.g. "INFO" or "DEBUG".
        log_file (Path | None): Optional file that receives a copy of every record.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level.upper())


def progress_disabled() -> bool:
    """True when tqdm bars should stay quiet (logging above INFO)."""
    return logging.getLogger().getEffectiveLevel() > logging.INFO


def seed_everything(seed: int) -> None:
    """Seeds the global python, numpy and torch generators."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    logger.info("Seeded global generators with seed=%d", seed)


def torch_generator(seed: int, purpose: str) -> torch.Generator:
    """Returns a dedicated torch generator and logs what it is drawn for."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    logger.info("torch generator seed=%d purpose=%s", seed, purpose)
    return generator


def numpy_generator(seed: int, purpose: str) -> np.random.Generator:
    """Returns a dedicated numpy generator and logs what it is drawn for."""
    logger.debug("numpy generator seed=%d purpose=%s", seed, purpose)
    return np.random.default_rng(seed)


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
