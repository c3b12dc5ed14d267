"""Subjective-logic evidence, Dirichlet parameters and uncertainty maps.

Logits are mapped to non-negative evidence with a softplus, the evidence
parameterizes a Dirichlet (alpha = e + 1) and the belief masses and the
uncertainty mass are read off the Dirichlet strength.  The class axis is
``dim`` (default 0 for a single ``C x H x W`` map, pass ``dim=1`` for
batched ``N x C x H x W`` tensors).
"""

from dataclasses import dataclass

import torch

from .errors import DomainError, NumericInputError


@dataclass
class EvidentialState:
    evidence: torch.Tensor
    alpha: torch.Tensor
    strength: torch.Tensor
    belief: torch.Tensor
    uncertainty: torch.Tensor


def stable_softplus(x):
    # max(x, 0) + log1p(exp(-|x|)) never overflows and keeps tiny values > 0
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


def evidence_from_logits(logits):
    if not torch.isfinite(logits).all():
        raise NumericInputError("logits contain NaN or Inf")
    return stable_softplus(logits)


def evidential_state(evidence, dim=0):
    if not torch.isfinite(evidence).all():
        raise NumericInputError("evidence contains NaN or Inf")
    if (evidence < 0).any():
        raise DomainError("evidence must be non-negative")
    num_classes = evidence.shape[dim]
    alpha = evidence + 1.0
    strength = alpha.sum(dim=dim)
    belief = evidence / strength.unsqueeze(dim)
    uncertainty = num_classes / strength
    return EvidentialState(evidence, alpha, strength, belief, uncertainty)


def uncertainty_from_logits(logits, dim=0):
    """Shortcut: per-pixel uncertainty ``C / S`` straight from logits."""
    return evidential_state(evidence_from_logits(logits), dim=dim).uncertainty
