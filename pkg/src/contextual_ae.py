"""
Contextual Module Engine

The auto-regressive encoder-decoder Transformer. In Step 1 it is pretrained as
a sequence-to-sequence autoencoder over native sequences with one shared
token/position embedding table. In Step 2 its encoder and decoder layers are
transferred without the embedding tables: the encoder reads Z_struc plus fresh
positional embeddings and the decoder gets a fresh input embedding and an
untied output head.
"""
import logging
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from src.checkpoint import Checkpoint, CheckpointError, load_module_state
from src.data_ingest import BackboneRecord, ResidueAlphabet, drop_ungraphable, make_batches
from src.objectives import seq_ce
from src.utils import progress_disabled

logger = logging.getLogger(__name__)

GREEDY_TEMPERATURE = 1e-6


class TransferError(ValueError):
    """Raised when an autoencoder checkpoint does not fit the configured contextual stack."""


class ContextualEncoding(NamedTuple):
    """Encoder output Z_seq, B x L x d, with its mask."""
    features: torch.Tensor
    mask: torch.Tensor


class SequenceLogits(NamedTuple):
    """Per-position logits over the 20 residues; `tokens` is set by greedy decoding."""
    logits: torch.Tensor
    mask: torch.Tensor
    tokens: torch.Tensor | None = None

    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


def shift_right(tokens: torch.Tensor, bos_index: int) -> torch.Tensor:
    """Decoder inputs for teacher forcing: BOS followed by tokens[:-1]."""
    bos = torch.full_like(tokens[:, :1], bos_index)
    return torch.cat([bos, tokens[:, :-1]], dim=1)


def causal_mask(length: int, device=None) -> torch.Tensor:
    """Boolean L x L mask, True where attention is not allowed (future positions)."""
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


class TokenEmbeddingTable(nn.Module):
    """Token embeddings plus learned positional embeddings."""

    def __init__(self, vocab_size: int, max_len: int, d_model: int):
        super().__init__()
        self.max_len = max_len
        self.token = nn.Embedding(vocab_size, d_model)
        self.position = nn.Embedding(max_len, d_model)

    def positions(self, length: int) -> torch.Tensor:
        if length > self.max_len:
            raise ValueError(f"Length {length} exceeds the positional table ({self.max_len}).")
        return self.position.weight[:length]

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.token(tokens) + self.positions(tokens.shape[1])


class ContextualEncoder(nn.Module):
    """Stack of post-norm self-attention encoder layers; zero layers is the identity."""

    def __init__(self, d_model: int = 512, num_layers: int = 8, heads: int = 8, ffn_dim: int = 2048,
                 dropout: float = 0.1):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(d_model, heads, ffn_dim, dropout=dropout, batch_first=True)
            for _ in range(num_layers))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> ContextualEncoding:
        padding = ~mask
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=padding)
        return ContextualEncoding(x * mask.unsqueeze(-1).to(x.dtype), mask)


class ContextualDecoder(nn.Module):
    """Stack of post-norm decoder layers: causal self-attention, cross-attention to Z_seq."""

    def __init__(self, d_model: int = 512, num_layers: int = 8, heads: int = 8, ffn_dim: int = 2048,
                 dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.TransformerDecoderLayer(d_model, heads, ffn_dim, dropout=dropout, batch_first=True)
            for _ in range(num_layers))

    def forward(self, y: torch.Tensor, memory: torch.Tensor, memory_mask: torch.Tensor,
                causal: bool = True) -> torch.Tensor:
        tgt_mask = causal_mask(y.shape[1], y.device) if causal else None
        for layer in self.layers:
            y = layer(y, memory, tgt_mask=tgt_mask, memory_key_padding_mask=~memory_mask)
        return y


class AutoEncoder(nn.Module):
    """
    Step-1 sequence autoencoder. Encoder and decoder share one embedding table and
    the output head is tied to its residue rows.
    """

    def __init__(self, config, alphabet: ResidueAlphabet):
        super().__init__()
        self.alphabet = alphabet
        self.embeddings = TokenEmbeddingTable(alphabet.vocab_size, config.max_len, config.d_model)
        self.encoder = ContextualEncoder(config.d_model, config.encoder_layers, config.heads,
                                         config.ffn_dim, config.attn_dropout)
        self.decoder = ContextualDecoder(config.d_model, config.decoder_layers, config.heads,
                                         config.ffn_dim, config.attn_dropout)

    def forward(self, tokens: torch.Tensor, token_mask: torch.Tensor) -> SequenceLogits:
        encoded = self.encoder(self.embeddings(tokens), token_mask)
        y = self.embeddings(shift_right(tokens, self.alphabet.bos_index))
        hidden = self.decoder(y, encoded.features, token_mask)
        logits = hidden @ self.embeddings.token.weight[:self.alphabet.size].T
        return SequenceLogits(logits, token_mask)


class ContextualModule(nn.Module):
    """
    The Step-2 contextual module: Z_struc -> encoder -> Z_seq -> decoder -> D_logits.

    Args:
        config: TrainConfig providing the Transformer sizes and the `nar` switch.
        alphabet (ResidueAlphabet): Residue alphabet.
    """

    def __init__(self, config, alphabet: ResidueAlphabet):
        super().__init__()
        self.alphabet = alphabet
        self.d_model = config.d_model
        self.nar = config.nar
        self.encoder_positions = nn.Embedding(config.max_len, config.d_model)
        self.encoder = ContextualEncoder(config.d_model, config.encoder_layers, config.heads,
                                         config.ffn_dim, config.attn_dropout)
        self.decoder = ContextualDecoder(config.d_model, config.decoder_layers, config.heads,
                                         config.ffn_dim, config.attn_dropout)
        self.decoder_embeddings = TokenEmbeddingTable(alphabet.vocab_size, config.max_len, config.d_model)
        self.head = nn.Linear(config.d_model, alphabet.size)

    def encode(self, z_struc: torch.Tensor, mask: torch.Tensor) -> ContextualEncoding:
        """
        Runs the encoder on Z_struc (B x L x d) plus fresh positional embeddings.

        Raises:
            ValueError: If the width of Z_struc differs from the Transformer width.
        """
        if z_struc.shape[-1] != self.d_model:
            raise ValueError(f"Z_struc width {z_struc.shape[-1]} != Transformer width {self.d_model}.")
        length = z_struc.shape[1]
        if length > self.encoder_positions.num_embeddings:
            raise ValueError(f"Length {length} exceeds the positional table.")
        return self.encoder(z_struc + self.encoder_positions.weight[:length], mask)

    def _logits(self, decoder_inputs: torch.Tensor, z_seq: ContextualEncoding) -> torch.Tensor:
        hidden = self.decoder(decoder_inputs, z_seq.features, z_seq.mask, causal=not self.nar)
        return self.head(hidden)

    def _queries(self, batch_size: int, length: int) -> torch.Tensor:
        return self.decoder_embeddings.positions(length).unsqueeze(0).expand(batch_size, length, -1)

    def decode(self, z_seq: ContextualEncoding, tokens: torch.Tensor | None = None,
               temperature: float = GREEDY_TEMPERATURE, generator: torch.Generator | None = None) -> SequenceLogits:
        """
        Decodes Z_seq into residue logits.

        With `tokens` (native sequence, B x L) the decoder is teacher-forced and all
        positions come out of one pass. Without them it decodes left to right,
        taking the argmax at temperatures up to 1e-6 and sampling above that.

        Raises:
            ValueError: If `tokens` and Z_seq differ in length.
        """
        batch_size, length = z_seq.mask.shape
        if self.nar:
            logits = self._logits(self._queries(batch_size, length), z_seq)
            return SequenceLogits(logits, z_seq.mask, logits.argmax(-1) if tokens is None else None)
        if tokens is not None:
            if tokens.shape != z_seq.mask.shape:
                raise ValueError(f"Native tokens {tuple(tokens.shape)} do not match Z_seq {tuple(z_seq.mask.shape)}.")
            inputs = self.decoder_embeddings(shift_right(tokens, self.alphabet.bos_index))
            return SequenceLogits(self._logits(inputs, z_seq), z_seq.mask)
        return self._rollout(z_seq, temperature, generator)

    def _rollout(self, z_seq: ContextualEncoding, temperature: float,
                 generator: torch.Generator | None) -> SequenceLogits:
        batch_size, length = z_seq.mask.shape
        device = z_seq.features.device
        tokens = torch.full((batch_size, length), self.alphabet.pad_index, dtype=torch.long, device=device)
        steps = []
        for t in range(length):
            prefix = shift_right(tokens, self.alphabet.bos_index)[:, :t + 1]
            step_logits = self._logits(self.decoder_embeddings(prefix), z_seq)[:, t]
            if temperature <= GREEDY_TEMPERATURE:
                choice = step_logits.argmax(-1)
            else:
                probs = torch.softmax(step_logits / temperature, dim=-1)
                choice = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            tokens[:, t] = choice
            steps.append(step_logits)
        return SequenceLogits(torch.stack(steps, dim=1), z_seq.mask, tokens)


def ae_checkpoint(model: AutoEncoder, config, step: int = 0, metrics: dict | None = None) -> Checkpoint:
    return Checkpoint(kind="ae", config_hash=config.fingerprint("contextual"),
                      alphabet_hash=model.alphabet.fingerprint,
                      tensors={f"ae.{k}": v.detach().clone() for k, v in model.state_dict().items()},
                      step=step, metrics=metrics or {})


def _layer_count(checkpoint: Checkpoint, prefix: str) -> int:
    indices = {name[len(prefix):].split(".", 1)[0] for name in checkpoint.tensors if name.startswith(prefix)}
    return len(indices)


def transfer_pcm(checkpoint: Checkpoint, config, alphabet: ResidueAlphabet,
                 seed: int | None = None) -> tuple[ContextualModule, list[str]]:
    """
    Builds a Step-2 contextual module from an autoencoder checkpoint.

    Encoder and decoder layers are copied; the shared embedding table is dropped
    and the decoder input embedding, encoder positions and output head are
    freshly initialised (seeded by `seed`, or `config.seed`).

    Returns:
        tuple[ContextualModule, list[str]]: The module and the checkpoint tensors it took.

    Raises:
        TransferError: On layer-count or shape mismatch with `config`.
    """
    if checkpoint.kind != "ae":
        raise TransferError(f"Expected an autoencoder checkpoint, got '{checkpoint.kind}'.")
    for side, expected in (("encoder", config.encoder_layers), ("decoder", config.decoder_layers)):
        found = _layer_count(checkpoint, f"ae.{side}.layers.")
        if found != expected:
            raise TransferError(f"Checkpoint has {found} {side} layers, config expects {expected}.")

    with torch.random.fork_rng():
        torch.manual_seed(config.seed if seed is None else seed)
        pcm = ContextualModule(config, alphabet).to(getattr(torch, config.dtype))
    taken = []
    try:
        for side in ("encoder", "decoder"):
            loaded = load_module_state(getattr(pcm, side), checkpoint.subset(f"ae.{side}."), f"{side} layers")
            taken.extend(f"ae.{side}.{name}" for name in loaded)
    except CheckpointError as exc:
        raise TransferError(str(exc)) from exc
    logger.info("Transferred %d contextual tensors; embedding tables discarded", len(taken))
    return pcm, taken


def random_pcm(config, alphabet: ResidueAlphabet, seed: int | None = None) -> ContextualModule:
    """Fresh contextual module for the non-pretrained ablation rows."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed if seed is None else seed)
        return ContextualModule(config, alphabet).to(getattr(torch, config.dtype))


@torch.no_grad()
def ae_recovery(model: AutoEncoder, records: list[BackboneRecord], batch_size: int = 5) -> float:
    """Teacher-forced argmax recovery (percent) of the autoencoder on `records`."""
    was_training = model.training
    model.eval()
    matches = total = 0
    for batch in make_batches(records, max_tokens=0, batch_size=batch_size, alphabet=model.alphabet, shuffle=False):
        out = model(batch.tokens, batch.token_mask)
        hit = (out.logits.argmax(-1) == batch.tokens) & batch.token_mask
        matches += int(hit.sum())
        total += int(batch.token_mask.sum())
    model.train(was_training)
    return 100.0 * matches / max(total, 1)


def ae_pretrain(records: list[BackboneRecord], config, alphabet: ResidueAlphabet | None = None,
                seed: int | None = None) -> tuple[AutoEncoder, Checkpoint, list[dict]]:
    """
    Pretrains the autoencoder on training-split sequences (Step 1).

    The encoder reads the embedded native sequence; the decoder is teacher-forced
    on the same sequence shifted right behind BOS; the loss is the sequence
    cross-entropy. Sequences longer than `config.max_len` are skipped.

    Args:
        records (list[BackboneRecord]): Training records (only their sequences are used).
        config: TrainConfig.
        alphabet (ResidueAlphabet): Residue alphabet.
        seed (int | None): Overrides `config.seed`.

    Returns:
        tuple: The trained model, its `ae` checkpoint and the per-epoch history.
    """
    alphabet = alphabet or ResidueAlphabet()
    seed = config.seed if seed is None else seed
    dtype = getattr(torch, config.dtype)
    usable = []
    for record in drop_ungraphable(records, "autoencoder pretraining"):
        if len(record) > config.max_len:
            logger.warning("Skipping %s for autoencoder pretraining: length %d > max_len %d",
                           record.name, len(record), config.max_len)
        elif (alphabet.encode(record.sequence) < alphabet.size).any():
            usable.append(record)
    if not usable:
        raise ValueError("No sequences usable for autoencoder pretraining.")

    torch.manual_seed(seed)
    model = AutoEncoder(config, alphabet).to(dtype)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.ae_lr, momentum=config.momentum)
    model.train()
    history, step = [], 0
    for epoch in range(config.ae_epochs):
        batches = make_batches(usable, max_tokens=config.max_tokens, seed=seed + epoch,
                               batch_size=config.batch_size, token_budget=config.token_budget,
                               alphabet=alphabet, dtype=dtype)
        losses, matches, total = [], 0, 0
        for batch in tqdm(batches, desc=f"autoencoder epoch {epoch}", disable=progress_disabled()):
            out = model(batch.tokens, batch.token_mask)
            loss = seq_ce(out.logits, batch.tokens, batch.token_mask)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            step += 1
            losses.append(float(loss))
            hit = (out.logits.detach().argmax(-1) == batch.tokens) & batch.token_mask
            matches += int(hit.sum())
            total += int(batch.token_mask.sum())
            if config.ae_max_steps and step >= config.ae_max_steps:
                break
        entry = {"epoch": epoch, "step": step, "loss": sum(losses) / len(losses),
                 "recovery": 100.0 * matches / max(total, 1)}
        history.append(entry)
        logger.info("autoencoder epoch %d: loss %.4f recovery %.2f%%", epoch, entry["loss"], entry["recovery"])
        if config.ae_max_steps and step >= config.ae_max_steps:
            break
    return model, ae_checkpoint(model, config, step, history[-1] if history else {}), history


def load_autoencoder(checkpoint: Checkpoint, config, alphabet: ResidueAlphabet) -> AutoEncoder:
    model = AutoEncoder(config, alphabet).to(getattr(torch, config.dtype))
    load_module_state(model, checkpoint.subset("ae."), "autoencoder")
    return model
