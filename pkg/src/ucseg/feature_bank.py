"""Per-class FIFO prototype banks with Dice-gated updates."""

from collections import deque
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import EmptyBankError, ShapeError


@dataclass(frozen=True)
class ThresholdSchedule:
    base: float
    slope: float = 0.56
    t_max: int = 1

    @classmethod
    def for_rank(cls, spatial_rank, t_max):
        return cls(base=0.4 if spatial_rank == 2 else 0.2, t_max=t_max)

    def threshold(self, step):
        return self.base + self.slope * (step / self.t_max)


def should_update(dice_on_labeled, step, schedule):
    thr = schedule.threshold(step)
    return dice_on_labeled > thr, thr


def extract_prototypes(features, label_map, min_mass=1e-6):
    """Mask-gated global pooling of one sample's feature map.

    ``features`` is ``D x *spatial'``, ``label_map`` is ``C x *spatial``
    (one-hot or soft).  Returns ``{class: unit D-vector}``; classes whose
    resized mask is (numerically) empty are left out.
    """
    rank = features.dim() - 1
    if label_map.dim() != features.dim() or rank not in (2, 3):
        raise ShapeError(f"features {tuple(features.shape)} and label map {tuple(label_map.shape)} "
                         "must share a spatial rank of 2 or 3")
    mode = "bilinear" if rank == 2 else "trilinear"
    mask = F.interpolate(label_map.unsqueeze(0).to(features.dtype), size=features.shape[1:],
                         mode=mode, align_corners=False)[0]
    protos = {}
    for c in range(mask.shape[0]):
        if mask[c].sum() < min_mass:
            continue
        pooled = (features * mask[c].unsqueeze(0)).flatten(1).mean(dim=1)
        protos[c] = F.normalize(pooled, dim=0)
    return protos


class FeatureBank:
    """``C`` bounded queues of unit-norm ``D``-vectors; oldest entries leave first."""

    def __init__(self, num_classes, dim, capacity=32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.num_classes = num_classes
        self.dim = dim
        self.capacity = capacity
        self.slots = [deque(maxlen=capacity) for _ in range(num_classes)]

    def __len__(self):
        return sum(len(s) for s in self.slots)

    def occupancy(self):
        return [len(s) for s in self.slots]

    def _check_class(self, cls):
        if not 0 <= cls < self.num_classes:
            raise IndexError(f"class {cls} out of range for {self.num_classes} classes")

    def push(self, cls, prototypes):
        self._check_class(cls)
        vecs = torch.as_tensor(prototypes).detach()
        if vecs.dim() == 1:
            vecs = vecs.unsqueeze(0)
        if vecs.dim() != 2 or vecs.shape[1] != self.dim:
            raise ShapeError(f"expected vectors of dimension {self.dim}, got {tuple(vecs.shape)}")
        if not torch.isfinite(vecs).all():
            raise ValueError("prototypes must be finite")
        vecs = F.normalize(vecs.to(torch.float64), dim=1)
        for v in vecs:
            self.slots[cls].append(v.clone())
        return self

    def contents(self, cls):
        self._check_class(cls)
        if not self.slots[cls]:
            return torch.empty(0, self.dim, dtype=torch.float64)
        return torch.stack(list(self.slots[cls]))

    def positive_key(self, cls):
        self._check_class(cls)
        if not self.slots[cls]:
            raise EmptyBankError(f"class {cls} has no stored prototypes")
        return self.contents(cls).mean(dim=0)

    def negative_keys(self, cls):
        self._check_class(cls)
        others = [self.contents(c) for c in range(self.num_classes) if c != cls and self.slots[c]]
        if not others:
            raise EmptyBankError(f"no prototypes stored for classes other than {cls}")
        return torch.cat(others, dim=0)

    def state_dict(self):
        return {f"class{c}": self.contents(c) for c in range(self.num_classes)}

    def load_state_dict(self, state):
        for c in range(self.num_classes):
            self.slots[c].clear()
            stored = state.get(f"class{c}")
            if stored is None:
                continue
            # stored vectors are already unit-norm; renormalizing would perturb the last bits
            for v in torch.as_tensor(stored, dtype=torch.float64).reshape(-1, self.dim):
                self.slots[c].append(v.clone())
