"""Training objectives and their schedules.

All losses take probabilities (already softmaxed) and one-hot or soft
targets laid out as ``N x C x *spatial``.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteLossError, ShapeError


@dataclass
class LossWeights:
    lambda_q: float = 0.2
    lambda_c: float = 0.5
    lambda_f: float = 0.1
    beta_warm: float = 15.0
    beta_0: float = 0.01
    epsilon_dice: float = 1e-5
    epsilon_clamp: float = 1e-7

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def one_hot(labels, num_classes, dtype=torch.float32):
    """``N x *spatial`` integer labels -> ``N x C x *spatial`` one-hot."""
    oh = F.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, 1).to(dtype)


def ce_loss(pred_probs, target, eps=1e-7):
    """Element-wise binary cross-entropy averaged over every entry."""
    _same_shape(pred_probs, target)
    p = pred_probs.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def dice_loss(pred_probs, target, eps=1e-5):
    _same_shape(pred_probs, target)
    dims = tuple(range(2, pred_probs.dim()))
    inter = (pred_probs * target).sum(dim=dims)
    denom = (pred_probs + target).sum(dim=dims)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def anneal_beta(t, T, beta_0=0.01):
    return beta_0 * math.exp(-(math.log(beta_0) / T) * t)


def warmup_lambda_u(t, t_max, beta=15.0):
    return beta * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def cu_loss(pred_probs, target, u, beta_t, eps=1e-7):
    """Calibrated-uncertainty loss.

    Rewards low uncertainty on correctly classified pixels and high
    uncertainty on misclassified ones.  ``p`` is the winning class
    probability; the two sums are divided by the number of pixels.
    """
    _same_shape(pred_probs, target)
    if u.shape != pred_probs.shape[:1] + pred_probs.shape[2:]:
        raise ShapeError(f"uncertainty shape {tuple(u.shape)} does not match probs {tuple(pred_probs.shape)}")
    p, pred_label = pred_probs.max(dim=1)
    correct = (pred_label == target.argmax(dim=1)).to(pred_probs.dtype)
    u = u.clamp(eps, 1.0 - eps)
    on_correct = correct * p * torch.log(1.0 - u)
    on_wrong = (1.0 - correct) * (1.0 - p) * torch.log(u)
    n_pix = u.numel()
    return -(beta_t * on_correct.sum() + (1.0 - beta_t) * on_wrong.sum()) / n_pix


def supervised_loss(pred_probs, target, u, beta_t, weights=None):
    w = weights or LossWeights()
    return (ce_loss(pred_probs, target, w.epsilon_clamp)
            + dice_loss(pred_probs, target, w.epsilon_dice)
            + cu_loss(pred_probs, target, u, beta_t, w.epsilon_clamp))


def unsupervised_loss(pred_probs, pseudo, weights=None):
    w = weights or LossWeights()
    pseudo = pseudo.detach()
    return ce_loss(pred_probs, pseudo, w.epsilon_clamp) + dice_loss(pred_probs, pseudo, w.epsilon_dice)


def consistency_loss(probs_a, probs_b, eps=1e-7):
    """Mutual CE between the two subnets, each against the other's detached output."""
    return ce_loss(probs_a, probs_b.detach(), eps), ce_loss(probs_b, probs_a.detach(), eps)


def upg_total(fused_probs, target, u_p, beta_t, weights=None):
    return supervised_loss(fused_probs, target, u_p, beta_t, weights)


def check_finite(**terms):
    for name, value in terms.items():
        if value is None:
            continue
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(name, float(v))


def subnet_total(l_s, l_u, l_q, l_c, t, t_max, weights=None):
    """Per-subnet objective; ``None`` components are treated as disabled."""
    w = weights or LossWeights()
    check_finite(L_s=l_s, L_u=l_u, L_q=l_q, L_c=l_c)
    total = l_s
    if l_u is not None:
        total = total + warmup_lambda_u(t, t_max, w.beta_warm) * l_u
    if l_q is not None:
        total = total + w.lambda_q * l_q
    if l_c is not None:
        total = total + w.lambda_c * l_c
    return total


def grand_total(l_a, l_b, l_p, l_f, weights=None):
    w = weights or LossWeights()
    check_finite(L_A=l_a, L_B=l_b, L_P=l_p, L_f=l_f)
    total = (l_a + l_b) / 2
    if l_p is not None:
        total = total + l_p
    if l_f is not None:
        total = total + w.lambda_f * l_f
    return total
