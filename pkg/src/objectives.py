"""
Objectives Engine

Training losses of the joint model: the sequence cross-entropy, its
exponential form, and the cross-layer cross-modal alignment term that
distils the contextual encoding into the structural one.
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

PAPER_SUM = "paper_sum"
STABLE_MEAN = "stable_mean"


class LossError(ValueError):
    """Raised for shape mismatches or fully masked inputs."""


class NonFiniteLossError(ValueError):
    """Raised when a loss term is NaN or infinite; carries the offending values."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class LossConfig:
    """
    Attributes:
        distill_temperature (float): Softmax temperature of the alignment term.
        cac_weight (float): Weight of the alignment term in the total loss.
        expce_reduction (str): `stable_mean` or `paper_sum`.
        kl_direction (str): `struc_seq` computes KL(struc || seq); `seq_struc` swaps the arguments.
    """
    distill_temperature: float = 8.0
    cac_weight: float = 1.0
    expce_reduction: str = STABLE_MEAN
    kl_direction: str = "struc_seq"

    def __post_init__(self):
        if self.distill_temperature <= 0:
            raise ValueError("distill_temperature must be positive.")
        if self.cac_weight < 0:
            raise ValueError("cac_weight must be non-negative.")
        if self.expce_reduction not in (PAPER_SUM, STABLE_MEAN):
            raise ValueError(f"Unknown expCE reduction '{self.expce_reduction}'.")
        if self.kl_direction not in ("struc_seq", "seq_struc"):
            raise ValueError(f"Unknown KL direction '{self.kl_direction}'.")

    @classmethod
    def from_train_config(cls, config) -> "LossConfig":
        return cls(config.distill_temperature, config.cac_weight, config.expce_reduction, config.kl_direction)


class ExpCE(NamedTuple):
    """`value` is exp(CE), or log of it when `log_domain` is set."""
    value: torch.Tensor
    log_domain: bool


class LossTerms(NamedTuple):
    total: torch.Tensor
    exp_ce: ExpCE
    cac: torch.Tensor
    ce: torch.Tensor


def _check(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> None:
    if logits.shape[:-1] != tokens.shape or tokens.shape != mask.shape:
        raise LossError(f"Shape mismatch: logits {tuple(logits.shape)}, tokens {tuple(tokens.shape)}, "
                        f"mask {tuple(mask.shape)}.")
    if not mask.any():
        raise LossError("Every position is masked; the loss is undefined.")


def token_nll(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood, zero at masked positions."""
    log_probs = F.log_softmax(logits, dim=-1)
    safe = torch.where(mask, tokens, torch.zeros_like(tokens)).clamp(max=logits.shape[-1] - 1)
    nll = -log_probs.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return nll * mask.to(nll.dtype)


def seq_ce(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Mean cross-entropy over unmasked positions.

    Args:
        logits (torch.Tensor): B x L x M logits.
        tokens (torch.Tensor): B x L native residue indices.
        mask (torch.Tensor): B x L booleans.

    Raises:
        LossError: If the shapes disagree or every position is masked.
    """
    _check(logits, tokens, mask)
    return token_nll(logits, tokens, mask).sum() / mask.sum()


def exp_ce(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor,
           reduction: str = STABLE_MEAN) -> ExpCE:
    """
    Exponential cross-entropy.

    `stable_mean` returns exp of the mean per-token CE over the batch. `paper_sum`
    returns exp of the sum over records of each record's mean CE; if that would
    overflow the dtype, the exponent itself is returned with `log_domain` set.
    """
    _check(logits, tokens, mask)
    nll = token_nll(logits, tokens, mask)
    if reduction == STABLE_MEAN:
        return ExpCE(torch.exp(nll.sum() / mask.sum()), False)
    if reduction != PAPER_SUM:
        raise LossError(f"Unknown expCE reduction '{reduction}'.")
    counts = mask.sum(dim=-1)
    present = counts > 0
    per_record = nll.sum(dim=-1)[present] / counts[present].to(nll.dtype)
    exponent = per_record.sum()
    if float(exponent) >= math.log(torch.finfo(exponent.dtype).max):
        logger.warning("expCE exponent %.2f overflows %s; returning the log-domain value instead",
                       float(exponent), exponent.dtype)
        return ExpCE(exponent, True)
    return ExpCE(torch.exp(exponent), False)


def cac_loss(z_struc: torch.Tensor, z_seq: torch.Tensor, mask: torch.Tensor | None = None,
             temperature: float = 8.0, direction: str = "struc_seq") -> torch.Tensor:
    """
    Cross-layer cross-modal alignment.

    Per position, both encodings are softened by a softmax over the feature axis
    at `temperature`; the KL divergence between them is averaged over unmasked
    positions and scaled by temperature squared. Z_seq acts as the teacher and
    receives no gradient.

    Args:
        z_struc (torch.Tensor): ... x d structural encoding (student).
        z_seq (torch.Tensor): ... x d contextual encoding (teacher).
        mask (torch.Tensor | None): Leading-shape booleans; all positions when None.
        temperature (float): Distillation temperature.
        direction (str): `struc_seq` for KL(struc || seq), `seq_struc` for the reverse.

    Raises:
        LossError: On shape mismatch or an all-masked input.
    """
    if z_struc.shape != z_seq.shape:
        raise LossError(f"Encodings differ in shape: {tuple(z_struc.shape)} vs {tuple(z_seq.shape)}.")
    if temperature <= 0:
        raise LossError("temperature must be positive.")
    if mask is None:
        mask = torch.ones(z_struc.shape[:-1], dtype=torch.bool, device=z_struc.device)
    if mask.shape != z_struc.shape[:-1]:
        raise LossError(f"Mask {tuple(mask.shape)} does not match encodings {tuple(z_struc.shape)}.")
    if not mask.any():
        raise LossError("Every position is masked; the alignment loss is undefined.")

    log_struc = F.log_softmax(z_struc / temperature, dim=-1)
    log_seq = F.log_softmax(z_seq.detach() / temperature, dim=-1)
    if direction == "struc_seq":
        kl = F.kl_div(log_seq, log_struc, reduction="none", log_target=True).sum(-1)
    elif direction == "seq_struc":
        kl = F.kl_div(log_struc, log_seq, reduction="none", log_target=True).sum(-1)
    else:
        raise LossError(f"Unknown KL direction '{direction}'.")
    kl = kl * mask.to(kl.dtype)
    return temperature ** 2 * kl.sum() / mask.sum()


def total_loss(exp_ce_value: torch.Tensor, cac: torch.Tensor, cac_weight: float = 1.0) -> torch.Tensor:
    """
    expCE + weight * CAC.

    Raises:
        NonFiniteLossError: If either term is not finite.
    """
    if not torch.isfinite(exp_ce_value).all() or not torch.isfinite(cac).all():
        raise NonFiniteLossError("Non-finite loss term",
                                 {"exp_ce": float(exp_ce_value), "cac": float(cac), "cac_weight": cac_weight})
    return exp_ce_value + cac_weight * cac


def joint_loss(logits: torch.Tensor, tokens: torch.Tensor, token_mask: torch.Tensor,
               z_struc: torch.Tensor, z_seq: torch.Tensor, struct_mask: torch.Tensor,
               config: LossConfig) -> LossTerms:
    """All training terms for one batch."""
    ce = seq_ce(logits, tokens, token_mask)
    expce = exp_ce(logits, tokens, token_mask, config.expce_reduction)
    if config.cac_weight > 0 and struct_mask.any():
        cac = cac_loss(z_struc, z_seq, struct_mask, config.distill_temperature, config.kl_direction)
    else:
        cac = torch.zeros((), dtype=logits.dtype, device=logits.device)
    return LossTerms(total_loss(expce.value, cac, config.cac_weight), expce, cac, ce)
