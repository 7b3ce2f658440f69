"""
Pipeline Engine

Assembles the joint design model from its structural and contextual halves
and runs the two training steps: Step 1 prepares both halves (structural
weights loaded or randomly initialised, contextual autoencoder pretrained or
fresh), Step 2 trains the assembled model with expCE plus the alignment loss.
Also holds resumable training state and the pretrained-module ablation.
"""
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pandas as pd
import torch
from torch import nn
from torch.nn.utils.rnn import pad_sequence
from tqdm import tqdm

from src.checkpoint import Checkpoint, load_checkpoint, load_module_state, save_checkpoint
from src.config import PRETRAINED, RANDOM, TrainConfig
from src.contextual_ae import (
    GREEDY_TEMPERATURE, ContextualModule, SequenceLogits, ae_pretrain, random_pcm, transfer_pcm,
)
from src.data_ingest import Batch, BackboneRecord, ResidueAlphabet, drop_ungraphable, make_batches
from src.evaluation import corpus_perplexity, corpus_recovery, record_rows
from src.geometry import ProteinGraph, batch_graphs, featurize
from src.gvp_core import (
    StructuralEncoder, build_structural_encoder, init_random_psm, load_pretrained_psm, save_psm,
)
from src.objectives import LossConfig, NonFiniteLossError, joint_loss
from src.utils import progress_disabled, sha256_text

logger = logging.getLogger(__name__)

ABLATION_ROWS = ((False, False), (False, True), (True, False), (True, True))


class MissingCheckpointError(ValueError):
    """Raised when a pretrained module is requested without weights to load."""


class TrainingAbort(ValueError):
    """Raised when a training step produced a non-finite loss; the batch has been dumped."""


@dataclass
class ModelOutput:
    logits: SequenceLogits
    z_struc: torch.Tensor
    z_seq: torch.Tensor
    struct_mask: torch.Tensor


class MMDesign(nn.Module):
    """
    Structural module followed by the contextual encoder-decoder.

    Featurized graphs are cached per record fingerprint, least recently used
    first out once `config.graph_cache_size` graphs are held.
    """

    def __init__(self, psm: StructuralEncoder, pcm: ContextualModule, config: TrainConfig,
                 alphabet: ResidueAlphabet | None = None):
        super().__init__()
        if psm.readout[1].out_features != pcm.d_model:
            raise ValueError(f"Z_struc width {psm.readout[1].out_features} != Transformer width {pcm.d_model}.")
        self.psm = psm
        self.pcm = pcm
        self.alphabet = alphabet or ResidueAlphabet()
        self.feature_config = config.features
        self.dtype = getattr(torch, config.dtype)
        self.graph_cache_size = config.graph_cache_size
        self._graphs: OrderedDict[str, ProteinGraph] = OrderedDict()

    def graph(self, record: BackboneRecord) -> ProteinGraph:
        key = record.fingerprint
        if key in self._graphs:
            self._graphs.move_to_end(key)
            return self._graphs[key]
        graph = featurize(record, self.feature_config, self.dtype)
        if self.graph_cache_size:
            self._graphs[key] = graph
            while len(self._graphs) > self.graph_cache_size:
                self._graphs.popitem(last=False)
        return graph

    def structural(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Z_struc padded to B x L x d, with the structural mask."""
        graph = batch_graphs([self.graph(r) for r in batch.records])
        encoding = self.psm(graph)
        width = batch.tokens.shape[1]
        features = pad_sequence(list(torch.split(encoding.features, graph.sizes)), batch_first=True)
        mask = pad_sequence(list(torch.split(encoding.mask, graph.sizes)), batch_first=True)
        if features.shape[1] < width:
            features = nn.functional.pad(features, (0, 0, 0, width - features.shape[1]))
            mask = nn.functional.pad(mask, (0, width - mask.shape[1]))
        return features, mask

    def forward(self, batch: Batch) -> ModelOutput:
        z_struc, struct_mask = self.structural(batch)
        z_seq = self.pcm.encode(z_struc, struct_mask)
        logits = self.pcm.decode(z_seq, tokens=batch.tokens)
        return ModelOutput(SequenceLogits(logits.logits, struct_mask & batch.token_mask),
                           z_struc, z_seq.features, struct_mask)

    def teacher_forced_logits(self, batch: Batch) -> SequenceLogits:
        return self.forward(batch).logits

    def design(self, batch: Batch, temperature: float = GREEDY_TEMPERATURE,
               generator: torch.Generator | None = None) -> SequenceLogits:
        """Left-to-right designs for every record of the batch."""
        z_struc, struct_mask = self.structural(batch)
        z_seq = self.pcm.encode(z_struc, struct_mask)
        out = self.pcm.decode(z_seq, temperature=temperature, generator=generator)
        return SequenceLogits(out.logits, struct_mask & batch.token_mask, out.tokens)


@dataclass
class Step1Result:
    """
    Attributes:
        psm (StructuralEncoder): Structural module, loaded or random.
        pcm (ContextualModule): Contextual module, transferred or fresh.
        ae (Checkpoint | None): Autoencoder checkpoint when Step 1 pretrained or loaded one.
        provenance (dict): Where each half came from and which tensors were loaded.
    """
    psm: StructuralEncoder
    pcm: ContextualModule
    ae: Checkpoint | None
    provenance: dict

    @property
    def pretrained_tensors(self) -> list[str]:
        return list(self.provenance["psm"].get("tensors", [])) + list(self.provenance["pcm"].get("tensors", []))


def build_psm(config: TrainConfig, alphabet: ResidueAlphabet) -> tuple[StructuralEncoder, dict]:
    dtype = getattr(torch, config.dtype)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        encoder = build_structural_encoder(config).to(dtype)
    if config.psm == RANDOM:
        init_random_psm(encoder, config.seed)
        return encoder, {"kind": RANDOM, "seed": config.seed, "tensors": []}
    if not config.psm_checkpoint:
        raise MissingCheckpointError(
            "The structural module is set to 'pretrained' but no weights were given. Pass "
            "--psm PATH with a structural checkpoint (kind 'psm' or 'mmdesign'), or --psm random "
            "to train it from scratch.")
    provenance = load_pretrained_psm(Path(config.psm_checkpoint), encoder, config, alphabet.fingerprint)
    return encoder, provenance


def run_step1(splits: dict[str, list[BackboneRecord]], config: TrainConfig,
              alphabet: ResidueAlphabet | None = None, out_dir: Path | None = None) -> Step1Result:
    """
    Prepares both modules.

    The autoencoder is pretrained on the training split only, unless the
    contextual module is random (skipped) or a pretrained autoencoder
    checkpoint is configured (loaded).

    Raises:
        MissingCheckpointError: Pretrained structural module without a checkpoint.
    """
    alphabet = alphabet or ResidueAlphabet()
    psm, psm_provenance = build_psm(config, alphabet)

    ae = None
    if config.pcm == RANDOM:
        pcm = random_pcm(config, alphabet)
        pcm_provenance = {"kind": RANDOM, "seed": config.seed, "tensors": []}
    else:
        if config.pcm_checkpoint:
            ae = load_checkpoint(Path(config.pcm_checkpoint), kind="ae",
                                 config_hash=config.fingerprint("contextual"),
                                 alphabet_hash=alphabet.fingerprint)
            source = config.pcm_checkpoint
        else:
            logger.info("Step 1: pretraining the contextual autoencoder on %d records", len(splits["train"]))
            _, ae, history = ae_pretrain(splits["train"], config, alphabet)
            source = "pretrained in this run"
            if out_dir is not None:
                save_checkpoint(ae, Path(out_dir) / "ae.ckpt")
                _write_jsonl(Path(out_dir) / "ae_metrics.jsonl", history)
        pcm, taken = transfer_pcm(ae, config, alphabet)
        pcm_provenance = {"kind": PRETRAINED, "source": source, "tensors": taken}
    return Step1Result(psm, pcm, ae, {"psm": psm_provenance, "pcm": pcm_provenance})


def assemble(step1: Step1Result, config: TrainConfig, alphabet: ResidueAlphabet | None = None) -> MMDesign:
    return MMDesign(step1.psm, step1.pcm, config, alphabet)


def model_skeleton(config: TrainConfig, alphabet: ResidueAlphabet | None = None) -> MMDesign:
    """A model with the configured shapes, ready to receive checkpoint tensors."""
    alphabet = alphabet or ResidueAlphabet()
    dtype = getattr(torch, config.dtype)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        psm = build_structural_encoder(config).to(dtype)
        pcm = ContextualModule(config, alphabet).to(dtype)
    return MMDesign(psm, pcm, config, alphabet)


def model_tensors(model: MMDesign) -> dict[str, torch.Tensor]:
    tensors = {f"psm.{k}": v.detach().clone() for k, v in model.psm.state_dict().items()}
    tensors.update({f"pcm.{k}": v.detach().clone() for k, v in model.pcm.state_dict().items()})
    return tensors


def load_model_tensors(model: MMDesign, checkpoint: Checkpoint) -> None:
    load_module_state(model.psm, checkpoint.subset("psm."), "structural module")
    load_module_state(model.pcm, checkpoint.subset("pcm."), "contextual module")


def load_mmdesign(path: Path, alphabet: ResidueAlphabet | None = None) -> tuple[MMDesign, TrainConfig, Checkpoint]:
    """Rebuilds a trained model from its checkpoint, using the config stored inside it."""
    alphabet = alphabet or ResidueAlphabet()
    checkpoint = load_checkpoint(Path(path), kind="mmdesign", alphabet_hash=alphabet.fingerprint)
    config = TrainConfig.from_text(checkpoint.metadata["config"])
    model = model_skeleton(config, alphabet)
    load_model_tensors(model, checkpoint)
    model.eval()
    return model, config, checkpoint


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    best_perplexity: float = math.inf
    best_step: int = -1
    bad_validations: int = 0
    stopped: bool = False


@dataclass
class TrainResult:
    model: MMDesign
    checkpoint: Checkpoint
    last: Checkpoint
    state: TrainState
    history: list[dict] = field(default_factory=list)


def _write_jsonl(path: Path, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for entry in entries:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")


class Trainer:
    """
    Step-2 training loop.

    Batches of epoch `e` are ordered by `seed + e`; dropout draws from the global
    torch generator, whose state travels with the resumable checkpoint.

    Args:
        model (MMDesign): Assembled model.
        config (TrainConfig): Run configuration.
        splits (dict): `train` and `validation` record lists.
        out_dir (Path | None): Run directory for metrics.jsonl and checkpoints.
        metadata (dict | None): Provenance stored in every checkpoint.
    """

    def __init__(self, model: MMDesign, config: TrainConfig, splits: dict[str, list[BackboneRecord]],
                 out_dir: Path | None = None, metadata: dict | None = None):
        self.model = model
        self.config = config
        self.alphabet = model.alphabet
        self.train_records = drop_ungraphable(list(splits["train"]), "training split")
        self.validation_records = drop_ungraphable(list(splits.get("validation", [])), "validation split")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metadata = dict(metadata or {})
        self.loss_config = LossConfig.from_train_config(config)
        torch.manual_seed(config.seed)
        self.optimizer = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
        self.state = TrainState()
        self.history: list[dict] = []
        self.best: Checkpoint | None = None
        if not self.train_records:
            raise ValueError("The training split is empty.")
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "metrics.jsonl").touch()

    def _log(self, entry: dict) -> None:
        self.history.append(entry)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as handle:
                handle.write(json.dumps(entry, sort_keys=True) + "\n")

    def _batches(self, epoch: int) -> list[Batch]:
        return make_batches(self.train_records, max_tokens=self.config.max_tokens, seed=self.config.seed + epoch,
                            batch_size=self.config.batch_size, token_budget=self.config.token_budget,
                            alphabet=self.alphabet, dtype=self.model.dtype)

    def _dump_batch(self, batch: Batch, diagnostics: dict) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / f"abort_step{self.state.step}.json"
        path.write_text(json.dumps({"step": self.state.step, "epoch": self.state.epoch, "names": batch.names,
                                    "lengths": batch.lengths, "diagnostics": diagnostics},
                                   indent=2, sort_keys=True), encoding="utf-8")
        return path

    def train_step(self, batch: Batch) -> dict:
        """One SGD step on `batch`; returns the loss terms."""
        self.model.train()
        out = self.model(batch)
        try:
            terms = joint_loss(out.logits.logits, batch.tokens, out.logits.mask, out.z_struc, out.z_seq,
                               out.struct_mask, self.loss_config)
        except NonFiniteLossError as exc:
            path = self._dump_batch(batch, exc.diagnostics)
            logger.error("Non-finite loss at step %d; batch dumped to %s", self.state.step, path)
            raise TrainingAbort(f"Non-finite loss at step {self.state.step} (batch {batch.names}); "
                                f"dump: {path}") from exc
        self.optimizer.zero_grad()
        terms.total.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        return {"loss": float(terms.total), "exp_ce": float(terms.exp_ce.value),
                "exp_ce_log_domain": terms.exp_ce.log_domain, "cac": float(terms.cac), "ce": float(terms.ce)}

    def validate(self) -> dict | None:
        """Validation perplexity/recovery; updates the best checkpoint and patience."""
        if not self.validation_records:
            return None
        rows = record_rows(self.model, self.validation_records, self.alphabet, self.config.batch_size)
        metrics = {"kind": "validation", "step": self.state.step, "epoch": self.state.epoch,
                   "perplexity": corpus_perplexity(rows), "recovery": corpus_recovery(rows)}
        self._log(metrics)
        logger.info("step %d: validation perplexity %.3f recovery %.2f%%",
                    self.state.step, metrics["perplexity"], metrics["recovery"])
        if metrics["perplexity"] < self.state.best_perplexity:
            self.state.best_perplexity = metrics["perplexity"]
            self.state.best_step = self.state.step
            self.state.bad_validations = 0
            self.best = self.checkpoint(metrics, with_trainer=False)
            if self.out_dir is not None:
                save_checkpoint(self.best, self.out_dir / "best.ckpt")
        else:
            self.state.bad_validations += 1
            if self.state.bad_validations >= self.config.patience:
                logger.info("Early stopping: %d validations without improvement", self.state.bad_validations)
                self.state.stopped = True
        return metrics

    def checkpoint(self, metrics: dict | None = None, with_trainer: bool = True) -> Checkpoint:
        """
        The model as a `mmdesign` checkpoint. With `with_trainer`, optimizer
        buffers, the torch RNG state and the loop position are included so
        training can resume exactly.
        """
        tensors = model_tensors(self.model)
        metadata = {**self.metadata, "config": self.config.to_text()}
        if with_trainer:
            names = {id(p): name for name, p in self.model.named_parameters()}
            for group in self.optimizer.param_groups:
                for param in group["params"]:
                    buffer = self.optimizer.state.get(param, {}).get("momentum_buffer")
                    if buffer is not None:
                        tensors[f"optim.{names[id(param)]}"] = buffer.detach().clone()
            tensors["rng.torch"] = torch.get_rng_state()
            metadata["trainer"] = asdict(self.state)
        return Checkpoint(kind="mmdesign", config_hash=self.config.fingerprint("training"),
                          alphabet_hash=self.alphabet.fingerprint, tensors=tensors, step=self.state.step,
                          metrics=metrics or {}, metadata=metadata)

    def restore(self, checkpoint: Checkpoint) -> None:
        """Loads weights, optimizer buffers, RNG state and loop position."""
        load_model_tensors(self.model, checkpoint)
        params = dict(self.model.named_parameters())
        for name, tensor in checkpoint.subset("optim.").items():
            if name not in params:
                raise ValueError(f"Optimizer buffer for unknown parameter '{name}'.")
            self.optimizer.state[params[name]]["momentum_buffer"] = tensor.to(params[name].dtype).clone()
        if "rng.torch" in checkpoint.tensors:
            torch.set_rng_state(checkpoint.tensors["rng.torch"].to(torch.uint8))
        self.state = TrainState(**checkpoint.metadata["trainer"])
        self.state.stopped = False
        if self.out_dir is not None and (self.out_dir / "best.ckpt").is_file():
            self.best = load_checkpoint(self.out_dir / "best.ckpt", kind="mmdesign")

    def save_last(self) -> Checkpoint:
        last = self.checkpoint(self.history[-1] if self.history else {})
        if self.out_dir is not None:
            save_checkpoint(last, self.out_dir / "last.ckpt")
        return last

    def _reached_max_steps(self) -> bool:
        return bool(self.config.max_steps) and self.state.step >= self.config.max_steps

    def fit(self) -> TrainResult:
        """Trains until epochs, max_steps or early stopping end the run."""
        config, state = self.config, self.state
        while state.epoch < config.epochs and not state.stopped and not self._reached_max_steps():
            batches = self._batches(state.epoch)
            progress = tqdm(total=len(batches), initial=state.batch_in_epoch, desc=f"epoch {state.epoch}",
                            disable=progress_disabled())
            interrupted = False
            while state.batch_in_epoch < len(batches):
                metrics = self.train_step(batches[state.batch_in_epoch])
                state.step += 1
                state.batch_in_epoch += 1
                progress.update(1)
                self._log({"kind": "train", "step": state.step, "epoch": state.epoch, **metrics})
                if config.validate_every and state.step % config.validate_every == 0:
                    self.validate()
                if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    self.save_last()
                if state.stopped or self._reached_max_steps():
                    interrupted = True
                    break
            progress.close()
            if interrupted:
                break
            if not config.validate_every:
                self.validate()
            state.epoch += 1
            state.batch_in_epoch = 0

        last = self.save_last()
        if self.best is None:
            self.best = self.checkpoint(self.history[-1] if self.history else {}, with_trainer=False)
            if self.out_dir is not None:
                save_checkpoint(self.best, self.out_dir / "best.ckpt")
        logger.info("Training finished at step %d (best validation perplexity %.3f at step %d)",
                    state.step, state.best_perplexity, state.best_step)
        return TrainResult(self.model, self.best, last, state, self.history)

    def restore_best(self) -> None:
        if self.best is not None:
            load_model_tensors(self.model, self.best)


def run_metadata(step1: Step1Result, config: TrainConfig) -> dict:
    return {"seed": config.seed, "provenance": step1.provenance,
            "pretrained_tensors": step1.pretrained_tensors}


def run_step2(step1: Step1Result, splits: dict[str, list[BackboneRecord]], config: TrainConfig,
              alphabet: ResidueAlphabet | None = None, out_dir: Path | None = None) -> TrainResult:
    """
    Assembles the model from Step-1 outputs and trains it.

    Returns:
        TrainResult: The trained model, best-by-validation checkpoint, final
        resumable checkpoint and the metrics history.
    """
    model = assemble(step1, config, alphabet)
    metadata = run_metadata(step1, config)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "run.json").write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")
    trainer = Trainer(model, config, splits, out_dir, metadata)
    return trainer.fit()


def resume(path: Path, config: TrainConfig, splits: dict[str, list[BackboneRecord]],
           alphabet: ResidueAlphabet | None = None, out_dir: Path | None = None) -> Trainer:
    """
    Rebuilds a trainer from a resumable checkpoint.

    Raises:
        ConfigMismatchError: If the checkpoint was written under a different
            training configuration (run-length fields excepted).
    """
    alphabet = alphabet or ResidueAlphabet()
    checkpoint = load_checkpoint(Path(path), kind="mmdesign", config_hash=config.fingerprint("training"),
                                 alphabet_hash=alphabet.fingerprint)
    if "trainer" not in checkpoint.metadata:
        raise ValueError(f"{path} holds final weights only, not a resumable training state.")
    metadata = {k: v for k, v in checkpoint.metadata.items() if k not in ("trainer", "config")}
    trainer = Trainer(model_skeleton(config, alphabet), config, splits, out_dir, metadata)
    trainer.restore(checkpoint)
    logger.info("Resumed training at step %d (epoch %d, batch %d)",
                trainer.state.step, trainer.state.epoch, trainer.state.batch_in_epoch)
    return trainer


def bootstrap_psm(splits: dict[str, list[BackboneRecord]], config: TrainConfig, alphabet: ResidueAlphabet,
                  out_dir: Path) -> Path:
    """
    Exports structural weights from a short donor run with both modules random.
    Used in place of externally pretrained structural weights.
    """
    donor_config = config.replace(psm=RANDOM, pcm=RANDOM, psm_checkpoint="", pcm_checkpoint="",
                                  max_steps=config.psm_bootstrap_steps, validate_every=0, checkpoint_every=0)
    donor_dir = Path(out_dir) / "psm_donor"
    logger.info("Training a %d-step donor run for structural weights", config.psm_bootstrap_steps)
    step1 = run_step1(splits, donor_config, alphabet, donor_dir)
    result = run_step2(step1, splits, donor_config, alphabet, donor_dir)
    provenance = {"donor_steps": result.state.step, "donor_config_sha256": sha256_text(donor_config.to_text()),
                  "train_records": len(splits["train"])}
    return save_psm(result.model.psm, donor_config, alphabet.fingerprint, donor_dir / "psm.ckpt",
                    metadata={"donor": provenance})


def ablate(splits: dict[str, list[BackboneRecord]], config: TrainConfig, out_dir: Path,
           alphabet: ResidueAlphabet | None = None) -> pd.DataFrame:
    """
    Trains the four pretrained/random combinations of the two modules.

    Structural weights come from `config.psm_checkpoint`, or from a donor run
    when it is empty. The autoencoder is pretrained once and shared by both
    contextual-pretrained rows.

    Returns:
        pd.DataFrame: One row per combination, ordered (random, random),
        (random, pretrained), (pretrained, random), (pretrained, pretrained).
    """
    alphabet = alphabet or ResidueAlphabet()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    psm_path = config.psm_checkpoint or str(bootstrap_psm(splits, config, alphabet, out_dir))
    ae_path = config.pcm_checkpoint
    if not ae_path:
        _, ae, history = ae_pretrain(splits["train"], config, alphabet)
        ae_path = str(save_checkpoint(ae, out_dir / "ae.ckpt"))
        _write_jsonl(out_dir / "ae_metrics.jsonl", history)

    rows = []
    for psm_pretrained, pcm_pretrained in ABLATION_ROWS:
        label = f"psm-{'pretrained' if psm_pretrained else 'random'}__pcm-{'pretrained' if pcm_pretrained else 'random'}"
        row_config = config.replace(
            psm=PRETRAINED if psm_pretrained else RANDOM, psm_checkpoint=psm_path if psm_pretrained else "",
            pcm=PRETRAINED if pcm_pretrained else RANDOM, pcm_checkpoint=ae_path if pcm_pretrained else "")
        logger.info("Ablation row %s", label)
        step1 = run_step1(splits, row_config, alphabet, out_dir / label)
        model = assemble(step1, row_config, alphabet)
        trainer = Trainer(model, row_config, splits, out_dir / label, run_metadata(step1, row_config))
        (out_dir / label / "run.json").write_text(json.dumps(trainer.metadata, indent=2, sort_keys=True),
                                                  encoding="utf-8")
        trainer.fit()
        trainer.restore_best()
        row = {"PSM": psm_pretrained, "PCM": pcm_pretrained,
               "pretrained_tensors": len(step1.pretrained_tensors)}
        for part, key in (("validation", "dev"), ("test", "test"), ("train", "train")):
            if not splits.get(part):
                row[f"{key}_perplexity"] = row[f"{key}_recovery"] = float("nan")
                continue
            rows_part = record_rows(model, splits[part], alphabet, row_config.batch_size)
            row[f"{key}_perplexity"] = corpus_perplexity(rows_part)
            row[f"{key}_recovery"] = corpus_recovery(rows_part)
        rows.append(row)
    table = pd.DataFrame(rows)
    logger.info("Ablation finished:\n%s", table.to_string(index=False))
    return table
