"""Prototype contrastive loss (within a subnet) and patch InfoNCE (across subnets)."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import EmptyBankError, ShapeError


@dataclass(frozen=True)
class TemperatureConfig:
    tau: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


def ife_loss(query_protos, bank, tau=0.5):
    """InfoNCE of each class prototype against the bank.

    Positive key: mean of the class queue.  Negatives: every stored
    prototype of the other classes.  Classes without a usable positive or
    negative set are skipped and the mean is taken over the rest.
    """
    terms = []
    for cls, q in sorted(query_protos.items()):
        try:
            pos = bank.positive_key(cls)
            neg = bank.negative_keys(cls)
        except EmptyBankError:
            continue
        pos = pos.to(q.dtype)
        neg = neg.to(q.dtype)
        logits = torch.cat([(q @ pos).reshape(1), neg @ q]) / tau
        terms.append(torch.logsumexp(logits, dim=0) - logits[0])
    if not terms:
        raise EmptyBankError("no class has both a positive and a negative key")
    return torch.stack(terms).mean()


def ife_loss_batch(features, probs, bank, tau=0.5, min_mass=1e-6):
    """Mean IFE loss over the batch; ``None`` when the bank cannot serve any sample.

    Batched equivalent of ``ife_loss(extract_prototypes(f, p), bank)`` per sample.
    """
    rank = features.dim() - 2
    mode = "bilinear" if rank == 2 else "trilinear"
    mask = F.interpolate(probs.to(features.dtype), size=features.shape[2:], mode=mode, align_corners=False)
    mask = mask.flatten(2)
    present = mask.sum(dim=2) >= min_mass                                  # N x C
    pooled = torch.einsum("nds,ncs->ncd", features.flatten(2), mask) / mask.shape[2]
    queries = F.normalize(pooled, dim=2)
    terms = torch.zeros(present.shape, dtype=features.dtype, device=features.device)
    served = torch.zeros_like(present)
    for cls in range(present.shape[1]):
        try:
            pos = bank.positive_key(cls).to(queries)
            neg = bank.negative_keys(cls).to(queries)
        except EmptyBankError:
            continue
        q = queries[:, cls]
        logits = torch.cat([(q @ pos).unsqueeze(1), q @ neg.t()], dim=1) / tau
        terms[:, cls] = torch.logsumexp(logits, dim=1) - logits[:, 0]
        served[:, cls] = present[:, cls]
    count = served.sum(dim=1)
    keep = count > 0
    if not keep.any():
        return None
    per_sample = (terms * served).sum(dim=1)[keep] / count[keep]
    return per_sample.mean()


def patch_tokens(features, normalize=True):
    """Pool ``D x *spatial`` features into 3-wide cells and return ``N_p x D`` tokens."""
    rank = features.dim() - 1
    if rank not in (2, 3):
        raise ShapeError(f"expected D x H x W or D x Z x H x W features, got {tuple(features.shape)}")
    if min(features.shape[1:]) < 3:
        raise ShapeError(f"spatial dims {tuple(features.shape[1:])} must all be >= 3")
    pool = F.avg_pool2d if rank == 2 else F.avg_pool3d
    pooled = pool(features.unsqueeze(0), kernel_size=3, stride=3)[0]
    tokens = pooled.flatten(1).t()
    return F.normalize(tokens, dim=1) if normalize else tokens


def ic_loss(tokens_a, tokens_b, tau=0.5):
    if tokens_a.shape != tokens_b.shape:
        raise ShapeError(f"token shapes differ: {tuple(tokens_a.shape)} vs {tuple(tokens_b.shape)}")
    sim = tokens_a @ tokens_b.t() / tau
    return (torch.logsumexp(sim, dim=1) - sim.diagonal()).mean()


def ic_loss_stages(feats_a, feats_b, tau=0.5, n_stages=3):
    """Sum over the last ``n_stages`` encoder stages of the batch-mean patch loss."""
    total = 0.0
    for fa, fb in zip(feats_a[-n_stages:], feats_b[-n_stages:]):
        if fa.shape != fb.shape:
            raise ShapeError(f"stage shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        pool = F.avg_pool2d if fa.dim() == 4 else F.avg_pool3d
        ta = F.normalize(pool(fa, kernel_size=3, stride=3).flatten(2), dim=1)   # N x D x P
        tb = F.normalize(pool(fb, kernel_size=3, stride=3).flatten(2), dim=1)
        sim = torch.bmm(ta.transpose(1, 2), tb) / tau                           # N x P x P
        loss = torch.logsumexp(sim, dim=2) - sim.diagonal(dim1=1, dim2=2)
        total = total + loss.mean()
    return total
