"""
Training Configuration

`TrainConfig` holds every hyperparameter of a run. It is read from and
written to a flat `key = value` text file, and fingerprinted per section so
checkpoints can refuse to load under an incompatible configuration.
"""
import dataclasses
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from src.geometry import FeatureConfig
from src.utils import sha256_text

logger = logging.getLogger(__name__)

PRETRAINED = "pretrained"
RANDOM = "random"


class ConfigError(ValueError):
    """Raised for unknown keys or unparsable values in a config file."""


def _published(default, help_text: str):
    return field(default=default, metadata={"published": True, "help": help_text})


def _artifact(default, help_text: str):
    return field(default=default, metadata={"published": False, "help": help_text})


STRUCTURAL_FIELDS = (
    "k_neighbors", "gvp_layers", "gvp_dropout", "node_hidden_s", "node_hidden_v",
    "edge_hidden_s", "edge_hidden_v", "rbf_count", "rbf_max", "offset_dims", "dihedrals",
    "orientations", "distances", "offsets", "frame_copies", "d_model",
)
CONTEXTUAL_FIELDS = (
    "d_model", "encoder_layers", "decoder_layers", "heads", "ffn_dim", "attn_dropout", "max_len",
)
RUN_LENGTH_FIELDS = (
    "epochs", "max_steps", "ae_epochs", "ae_max_steps", "patience", "validate_every",
    "checkpoint_every", "workers", "psm_bootstrap_steps", "graph_cache_size",
)


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    optimizer: str = _published("sgd", "optimizer (plain stochastic gradient descent)")
    lr: float = _published(1e-3, "learning rate")
    momentum: float = _artifact(0.0, "SGD momentum")
    batch_size: int = _published(5, "records per batch")
    max_tokens: int = _artifact(1024, "longest record kept; budget in token mode")
    token_budget: bool = _artifact(False, "batch by padded token count instead of record count")
    epochs: int = _artifact(100, "Step-2 epochs")
    max_steps: int = _artifact(0, "Step-2 optimizer steps, 0 = unlimited")
    grad_clip: float = _artifact(1.0, "global gradient-norm clip, 0 disables")
    patience: int = _artifact(10, "validations without improvement before stopping")
    validate_every: int = _artifact(0, "steps between validations, 0 = once per epoch")
    checkpoint_every: int = _artifact(0, "steps between resumable checkpoints, 0 = end only")
    # structural module
    k_neighbors: int = _published(30, "k-nearest neighbours per residue")
    gvp_layers: int = _published(4, "GVPConv layers")
    gvp_dropout: float = _published(0.1, "GVPConv dropout")
    node_hidden_s: int = _published(1024, "node hidden scalar channels")
    node_hidden_v: int = _published(256, "node hidden vector channels")
    edge_hidden_s: int = _artifact(32, "edge hidden scalar channels")
    edge_hidden_v: int = _artifact(1, "edge hidden vector channels")
    rbf_count: int = _artifact(16, "radial basis centres")
    rbf_max: float = _artifact(20.0, "largest radial basis centre (Angstrom)")
    offset_dims: int = _artifact(16, "sequence-offset encoding width")
    dihedrals: bool = _artifact(True, "dihedral node features")
    orientations: bool = _artifact(True, "orientation node vectors")
    distances: bool = _artifact(True, "radial basis edge features")
    offsets: bool = _artifact(True, "sequence-offset edge features")
    frame_copies: bool = _artifact(True, "local-frame copies of vector features")
    # contextual module
    d_model: int = _published(512, "Transformer width, also the width of Z_struc")
    encoder_layers: int = _published(8, "Transformer encoder layers")
    decoder_layers: int = _published(8, "Transformer decoder layers")
    heads: int = _published(8, "attention heads")
    ffn_dim: int = _artifact(2048, "feed-forward width")
    attn_dropout: float = _published(0.1, "attention dropout")
    max_len: int = _artifact(1024, "learned positional table size")
    nar: bool = _artifact(False, "non-autoregressive decoder with positional queries")
    # objectives
    distill_temperature: float = _published(8.0, "distillation temperature of the alignment loss")
    cac_weight: float = _artifact(1.0, "weight of the alignment loss")
    expce_reduction: str = _artifact("stable_mean", "expCE reduction: paper_sum or stable_mean")
    kl_direction: str = _artifact("struc_seq", "KL argument order: struc_seq or seq_struc")
    # autoencoder pretraining
    ae_epochs: int = _artifact(10, "Step-1 autoencoder epochs")
    ae_max_steps: int = _artifact(0, "Step-1 optimizer steps, 0 = unlimited")
    ae_lr: float = _published(1e-3, "Step-1 learning rate")
    # provenance
    seed: int = _artifact(0, "seed of every generator in the run")
    psm: str = _published(PRETRAINED, "structural module: pretrained or random")
    pcm: str = _published(PRETRAINED, "contextual module: pretrained or random")
    psm_checkpoint: str = _artifact("", "structural weights checkpoint")
    pcm_checkpoint: str = _artifact("", "autoencoder checkpoint; empty runs Step 1")
    psm_bootstrap_steps: int = _artifact(200, "donor steps for the desk-scale structural stand-in")
    sample_temperature: float = _published(1e-6, "sampling temperature for designs")
    dtype: str = _artifact("float32", "float32 or float64")
    workers: int = _artifact(1, "parser/featurizer threads")
    graph_cache_size: int = _artifact(4096, "featurized graphs kept per model, 0 disables the cache")

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ConfigError("Only plain SGD is supported.")
        if self.lr <= 0 or self.ae_lr <= 0:
            raise ConfigError("Learning rates must be positive.")
        if self.distill_temperature <= 0:
            raise ConfigError("distill_temperature must be positive.")
        if self.cac_weight < 0:
            raise ConfigError("cac_weight must be non-negative.")
        if self.expce_reduction not in ("paper_sum", "stable_mean"):
            raise ConfigError(f"Unknown expce_reduction '{self.expce_reduction}'.")
        if self.kl_direction not in ("struc_seq", "seq_struc"):
            raise ConfigError(f"Unknown kl_direction '{self.kl_direction}'.")
        if self.psm not in (PRETRAINED, RANDOM) or self.pcm not in (PRETRAINED, RANDOM):
            raise ConfigError("psm and pcm must be 'pretrained' or 'random'.")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads.")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"Unknown dtype '{self.dtype}'.")
        if self.graph_cache_size < 0:
            raise ConfigError("graph_cache_size must be non-negative.")

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(k=self.k_neighbors, rbf_count=self.rbf_count, rbf_max=self.rbf_max,
                             offset_dims=self.offset_dims, dihedrals=self.dihedrals,
                             orientations=self.orientations, distances=self.distances,
                             offsets=self.offsets, frame_copies=self.frame_copies)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self, keys=None) -> str:
        """Renders the config as `key = value` lines in field order."""
        lines = []
        for f in fields(self):
            if keys is None or f.name in keys:
                lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def fingerprint(self, section: str = "training") -> str:
        """SHA-256 over the fields governing `section` (structural, contextual or training)."""
        if section == "structural":
            keys = STRUCTURAL_FIELDS
        elif section == "contextual":
            keys = CONTEXTUAL_FIELDS
        elif section == "training":
            keys = [f.name for f in fields(self) if f.name not in RUN_LENGTH_FIELDS]
        else:
            raise ValueError(f"Unknown config section '{section}'.")
        return sha256_text(self.to_text(keys))

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).replace(**parse_assignments(text))

    @classmethod
    def load(cls, path: Path, base: "TrainConfig | None" = None) -> "TrainConfig":
        logger.info("Reading config %s", path)
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def is_published_default(name: str) -> bool:
    return next(f for f in fields(TrainConfig) if f.name == name).metadata["published"]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def coerce(name: str, raw: str):
    """Converts the text form of a config value to the field's type."""
    types = field_types()
    if name not in types:
        raise ConfigError(f"Unknown config key '{name}'.")
    kind = types[name]
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"Bad value for '{name}': {raw!r}") from exc


def parse_assignments(text: str) -> dict:
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {number}: expected 'key = value'.")
        key, raw = line.split("=", 1)
        values[key.strip()] = coerce(key.strip(), raw)
    return values
