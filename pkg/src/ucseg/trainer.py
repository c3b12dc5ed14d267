"""Semi-supervised cross-training loop, checkpointing and evaluation."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .backbone import SubnetConfig, build_subnet, forward_subnet
from .config import TrainConfig, dump_config
from .contrastive import ic_loss_stages, ife_loss_batch
from .data import Dataset, DatasetSpec, load_dataset, split_semi, synthesize
from .errors import CheckpointError
from .evidential import uncertainty_from_logits
from .feature_bank import FeatureBank, ThresholdSchedule, extract_prototypes, should_update
from .losses import (LossWeights, anneal_beta, check_finite, consistency_loss, grand_total, one_hot,
                     subnet_total, supervised_loss, unsupervised_loss, upg_total, warmup_lambda_u)
from .metrics import aggregate_report, image_metrics
from .upg import build_upg, make_pseudo_label

log = logging.getLogger(__name__)

LOG_NAME = "log.jsonl"
CHECKPOINT_NAME = "checkpoint.zip"


@dataclass
class SemiBatch:
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: torch.Tensor
    # class index where known (pasted labeled pixels), -1 where a pseudo-label is needed
    y_u_hint: torch.Tensor


@dataclass
class TrainState:
    net_a: torch.nn.Module
    net_b: torch.nn.Module
    upg: Optional[torch.nn.Module]
    bank_a: FeatureBank
    bank_b: FeatureBank
    opt_sub: torch.optim.Optimizer
    opt_upg: Optional[torch.optim.Optimizer]
    step: int = 0


def _dtype(cfg):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def loss_weights(cfg):
    return LossWeights(lambda_q=cfg.lambda_q, lambda_c=cfg.lambda_c, lambda_f=cfg.lambda_f,
                       beta_warm=cfg.beta_warm, beta_0=cfg.beta_0)


def uses_unlabeled(cfg):
    return cfg.unsup or cfg.ife or cfg.ic


def subnet_configs(cfg):
    common = dict(in_channels=cfg.in_channels, num_classes=cfg.num_classes, base_width=cfg.base_width,
                  depth=cfg.depth, spatial_rank=cfg.spatial_rank)
    return SubnetConfig(variant="A", **common), SubnetConfig(variant="B", **common)


def init_state(cfg):
    dtype = _dtype(cfg)
    cfg_a, cfg_b = subnet_configs(cfg)
    net_a = build_subnet(cfg_a, seed=cfg.seed, dtype=dtype)
    net_b = build_subnet(cfg_b, seed=cfg.seed + 1, dtype=dtype)
    emb_dim = cfg_a.widths()[-1]
    bank_a = FeatureBank(cfg.num_classes, emb_dim, cfg.bank_capacity)
    bank_b = FeatureBank(cfg.num_classes, emb_dim, cfg.bank_capacity)
    sub_params = list(net_a.parameters()) + list(net_b.parameters())
    opt_sub = torch.optim.SGD(sub_params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    upg = opt_upg = None
    if cfg.upg:
        upg = build_upg(cfg.num_classes, (cfg.image_size,) * cfg.spatial_rank, cfg.patch, seed=cfg.seed + 2,
                        dtype=dtype, use_value_proj=cfg.use_value_proj)
        opt_upg = torch.optim.SGD(upg.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                  weight_decay=cfg.weight_decay)
    return TrainState(net_a, net_b, upg, bank_a, bank_b, opt_sub, opt_upg)


# ---------------------------------------------------------------------------
# batches and augmentation


def box_shape(spatial, ratio):
    """Box extents covering ``ratio`` of the volume (exact when the root is integral)."""
    if ratio <= 0:
        return tuple(0 for _ in spatial)
    frac = ratio ** (1.0 / len(spatial))
    sides = [min(s, int(round(frac * s))) for s in spatial[:-1]]
    lead = math.prod(sides)
    last = 0 if lead == 0 else min(spatial[-1], int(round(ratio * math.prod(spatial) / lead)))
    return tuple(sides) + (last,)


def copy_paste_augment(batch, ratio, rng, prob=1.0):
    """Swap a random box between the i-th labeled and i-th unlabeled sample.

    Images are exchanged inside the box in both directions; the labeled
    masks and the unlabeled hint masks (``-1`` = unknown) are exchanged the
    same way, so a mixed unlabeled sample carries ground truth inside the box.
    """
    x_l, y_l = batch.x_l.clone(), batch.y_l.clone()
    x_u, hint = batch.x_u.clone(), batch.y_u_hint.clone()
    spatial = tuple(x_l.shape[2:])
    sides = box_shape(spatial, ratio)
    if min(sides) == 0:
        return SemiBatch(x_l, y_l, x_u, hint)
    for i in range(min(len(x_l), len(x_u))):
        if prob < 1.0 and rng.random() >= prob:
            continue
        starts = [int(rng.integers(0, s - b + 1)) for s, b in zip(spatial, sides)]
        box = tuple(slice(a, a + b) for a, b in zip(starts, sides))
        img_box = (i, slice(None)) + box
        lab_box = (i,) + box
        x_l[img_box], x_u[img_box] = batch.x_u[img_box], batch.x_l[img_box]
        y_l[lab_box], hint[lab_box] = batch.y_u_hint[lab_box], batch.y_l[lab_box]
    return SemiBatch(x_l, y_l, x_u, hint)


def sample_batch(images, masks, lab_idx, unl_idx, cfg, rng):
    dtype = _dtype(cfg)
    li = rng.choice(lab_idx, cfg.batch_labeled, replace=len(lab_idx) < cfg.batch_labeled)
    ui = rng.choice(unl_idx, cfg.batch_unlabeled, replace=len(unl_idx) < cfg.batch_unlabeled)
    x_l = torch.from_numpy(images[li]).unsqueeze(1).to(dtype)
    x_u = torch.from_numpy(images[ui]).unsqueeze(1).to(dtype)
    y_l = torch.from_numpy(masks[li].astype(np.int64))
    hint = torch.full((len(ui),) + tuple(masks.shape[1:]), -1, dtype=torch.int64)
    return SemiBatch(x_l, y_l, x_u, hint)


# ---------------------------------------------------------------------------
# one optimisation step


def hard_dice(logits, labels, num_classes):
    """Mean foreground Dice of argmax predictions (empty-vs-empty counts as 1)."""
    pred = logits.argmax(dim=1)
    dims = tuple(range(1, pred.dim()))
    scores = []
    for c in range(1, num_classes):
        p, g = pred == c, labels == c
        inter = (p & g).sum(dim=dims).double()
        total = (p.sum(dim=dims) + g.sum(dim=dims)).double()
        scores.append(torch.where(total > 0, 2 * inter / total.clamp(min=1), torch.ones_like(total)))
    return float(torch.stack(scores).mean())


def _update_bank(bank, feats, y_oh, pseudo_oh):
    feats = feats.detach()
    targets = y_oh if pseudo_oh is None else torch.cat([y_oh, pseudo_oh])
    for feat, target in zip(feats, targets):
        for cls, proto in extract_prototypes(feat, target).items():
            bank.push(cls, proto)


def train_step(state, batch, cfg):
    """Run one cross-training iteration in place and return its log record."""
    t, T = state.step, cfg.max_iterations
    w = loss_weights(cfg)
    C = cfg.num_classes
    dtype = _dtype(cfg)
    n_l = batch.x_l.shape[0]
    with_unl = uses_unlabeled(cfg)
    for m in (state.net_a, state.net_b, state.upg):
        if m is not None:
            m.train()

    x = torch.cat([batch.x_l, batch.x_u]) if with_unl else batch.x_l
    out_a = forward_subnet(state.net_a, x)
    out_b = forward_subnet(state.net_b, x)
    prob_a = torch.softmax(out_a.logits, dim=1)
    prob_b = torch.softmax(out_b.logits, dim=1)
    u_a = uncertainty_from_logits(out_a.logits, dim=1)
    u_b = uncertainty_from_logits(out_b.logits, dim=1)
    y_oh = one_hot(batch.y_l, C, dtype)
    beta_t = anneal_beta(t, T, w.beta_0)
    lam_u = warmup_lambda_u(t, T, w.beta_warm)

    ls_a = supervised_loss(prob_a[:n_l], y_oh, u_a[:n_l], beta_t, w)
    ls_b = supervised_loss(prob_b[:n_l], y_oh, u_b[:n_l], beta_t, w)

    l_p = fused = None
    if cfg.upg:
        # detached inputs: L_P can only reach the UPG parameters
        fused = state.upg(out_a.logits.detach(), out_b.logits.detach(), u_a.detach(), u_b.detach())
        l_p = upg_total(torch.softmax(fused.logits[:n_l], dim=1), y_oh, fused.uncertainty[:n_l], beta_t, w)

    pseudo_a = pseudo_b = None
    if with_unl:
        if cfg.upg:
            pseudo_a = pseudo_b = make_pseudo_label(fused.logits[n_l:])
        else:
            pseudo_a = make_pseudo_label(out_b.logits[n_l:])
            pseudo_b = make_pseudo_label(out_a.logits[n_l:])
        known = batch.y_u_hint >= 0
        pseudo_a = torch.where(known, batch.y_u_hint, pseudo_a)
        pseudo_b = torch.where(known, batch.y_u_hint, pseudo_b)
    pseudo_a_oh = None if pseudo_a is None else one_hot(pseudo_a, C, dtype)
    pseudo_b_oh = None if pseudo_b is None else one_hot(pseudo_b, C, dtype)

    lu_a = lu_b = None
    if cfg.unsup:
        lu_a = unsupervised_loss(prob_a[n_l:], pseudo_a_oh, w)
        lu_b = unsupervised_loss(prob_b[n_l:], pseudo_b_oh, w)

    lc_a, lc_b = consistency_loss(prob_a, prob_b, w.epsilon_clamp)

    lq_a = lq_b = None
    if cfg.ife:
        lq_a = ife_loss_batch(out_a.features[-1], prob_a, state.bank_a, cfg.tau)
        lq_b = ife_loss_batch(out_b.features[-1], prob_b, state.bank_b, cfg.tau)

    l_f = ic_loss_stages(out_a.features, out_b.features, cfg.tau) if cfg.ic else None

    l_A = subnet_total(ls_a, lu_a, lq_a, lc_a, t, T, w)
    l_B = subnet_total(ls_b, lu_b, lq_b, lc_b, t, T, w)
    sub_loss = grand_total(l_A, l_B, None, l_f, w)
    check_finite(L_P=l_p)

    state.opt_sub.zero_grad(set_to_none=True)
    sub_loss.backward()
    state.opt_sub.step()
    if l_p is not None:
        state.opt_upg.zero_grad(set_to_none=True)
        l_p.backward()
        state.opt_upg.step()

    record = {"step": t, "lambda_u": lam_u, "beta_t": beta_t}
    terms = {"L_total": sub_loss + (l_p if l_p is not None else 0.0), "L_A": l_A, "L_B": l_B, "L_P": l_p,
             "L_f": l_f, "L_s_A": ls_a, "L_s_B": ls_b, "L_u_A": lu_a, "L_u_B": lu_b, "L_q_A": lq_a,
             "L_q_B": lq_b, "L_c_A": lc_a, "L_c_B": lc_b}
    record.update({k: float(v.detach() if torch.is_tensor(v) else v) for k, v in terms.items() if v is not None})

    with torch.no_grad():
        record["dice_a"] = hard_dice(out_a.logits[:n_l], batch.y_l, C)
        record["dice_b"] = hard_dice(out_b.logits[:n_l], batch.y_l, C)
        if cfg.ife:
            schedule = ThresholdSchedule.for_rank(cfg.spatial_rank, T)
            upd_a, thr = should_update(record["dice_a"], t, schedule)
            upd_b, _ = should_update(record["dice_b"], t, schedule)
            if upd_a:
                _update_bank(state.bank_a, out_a.features[-1], y_oh, pseudo_a_oh)
            if upd_b:
                _update_bank(state.bank_b, out_b.features[-1], y_oh, pseudo_b_oh)
            record.update(threshold=thr, bank_updated_a=upd_a, bank_updated_b=upd_b,
                          bank_a=state.bank_a.occupancy(), bank_b=state.bank_b.occupancy())
    state.step += 1
    return record


def upg_step(state, batch, cfg):
    """Optimise the fusion head alone on the labeled part of ``batch``; returns L_P."""
    w = loss_weights(cfg)
    dtype = _dtype(cfg)
    # frozen subnets: eval mode so batch-norm statistics are not touched either
    modes = [state.net_a.training, state.net_b.training]
    state.net_a.eval()
    state.net_b.eval()
    with torch.no_grad():
        out_a = forward_subnet(state.net_a, batch.x_l)
        out_b = forward_subnet(state.net_b, batch.x_l)
    state.net_a.train(modes[0])
    state.net_b.train(modes[1])
    state.upg.train()
    u_a = uncertainty_from_logits(out_a.logits, dim=1)
    u_b = uncertainty_from_logits(out_b.logits, dim=1)
    fused = state.upg(out_a.logits, out_b.logits, u_a, u_b)
    y_oh = one_hot(batch.y_l, cfg.num_classes, dtype)
    beta_t = anneal_beta(state.step, cfg.max_iterations, w.beta_0)
    l_p = upg_total(torch.softmax(fused.logits, dim=1), y_oh, fused.uncertainty, beta_t, w)
    state.opt_upg.zero_grad(set_to_none=True)
    l_p.backward()
    state.opt_upg.step()
    return float(l_p.detach())


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_tensors(prefix, opt):
    out = {}
    for i, p in enumerate(p for g in opt.param_groups for p in g["params"]):
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[f"{prefix}.{i}"] = buf
    return out


def _load_optimizer(prefix, opt, tensors):
    for i, p in enumerate(p for g in opt.param_groups for p in g["params"]):
        key = f"{prefix}.{i}"
        if key in tensors:
            opt.state[p]["momentum_buffer"] = tensors[key].to(p.dtype).reshape(p.shape).clone()


def save_state(path, state, cfg):
    tensors = {}
    tensors.update(ckpt.flatten_state("net_a", state.net_a.state_dict()))
    tensors.update(ckpt.flatten_state("net_b", state.net_b.state_dict()))
    if state.upg is not None:
        tensors.update(ckpt.flatten_state("upg", state.upg.state_dict()))
    tensors.update(ckpt.flatten_state("bank_a", state.bank_a.state_dict()))
    tensors.update(ckpt.flatten_state("bank_b", state.bank_b.state_dict()))
    tensors.update(_optimizer_tensors("opt_sub", state.opt_sub))
    if state.opt_upg is not None:
        tensors.update(_optimizer_tensors("opt_upg", state.opt_upg))
    meta = {"format": "ucseg-checkpoint/1", "config": cfg.to_dict(), "seed": cfg.seed, "step": state.step}
    return ckpt.save_checkpoint(path, tensors, meta)


def load_state(path):
    """Rebuild ``(TrainState, TrainConfig)`` from a checkpoint archive."""
    tensors, meta = ckpt.load_checkpoint(path)
    try:
        cfg = TrainConfig(**meta["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: metadata lacks a valid config") from exc
    state = init_state(cfg)
    state.net_a.load_state_dict(ckpt.unflatten_state("net_a", tensors, state.net_a.state_dict()))
    state.net_b.load_state_dict(ckpt.unflatten_state("net_b", tensors, state.net_b.state_dict()))
    if state.upg is not None:
        state.upg.load_state_dict(ckpt.unflatten_state("upg", tensors, state.upg.state_dict()))
    for name, bank in (("bank_a", state.bank_a), ("bank_b", state.bank_b)):
        bank.load_state_dict({k[len(name) + 1:]: v for k, v in tensors.items() if k.startswith(name + ".")})
    _load_optimizer("opt_sub", state.opt_sub, tensors)
    if state.opt_upg is not None:
        _load_optimizer("opt_upg", state.opt_upg, tensors)
    state.step = int(meta.get("step", 0))
    return state, cfg


# ---------------------------------------------------------------------------
# fit / predict / evaluate


def training_data(cfg):
    if cfg.data_dir:
        return load_dataset(cfg.data_dir)
    spec = DatasetSpec(n_images=cfg.n_images, image_size=cfg.image_size, spatial_rank=cfg.spatial_rank,
                       seed=cfg.data_seed)
    images, masks = synthesize(spec)
    return Dataset(images, masks, [f"synthetic_{i:05d}" for i in range(len(images))])


def holdout_data(cfg):
    if cfg.test_dir:
        return load_dataset(cfg.test_dir)
    spec = DatasetSpec(n_images=cfg.n_test, image_size=cfg.image_size, spatial_rank=cfg.spatial_rank,
                       seed=cfg.data_seed + 7919)
    images, masks = synthesize(spec)
    return Dataset(images, masks, [f"synthetic_test_{i:05d}" for i in range(len(images))])


@dataclass
class FitResult:
    checkpoint: Path
    log: Path
    state: TrainState
    records: list


def fit(cfg, dataset=None, progress=None):
    """Train for ``cfg.max_iterations`` steps; writes the log and checkpoint(s) to ``cfg.out_dir``."""
    torch.manual_seed(cfg.seed)
    dataset = dataset if dataset is not None else training_data(cfg)
    lab_idx, unl_idx = split_semi(len(dataset), cfg.labeled_fraction, seed=cfg.data_seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    state = init_state(cfg)
    rng = np.random.default_rng(cfg.seed)
    records = []
    log_path = out / LOG_NAME
    with open(log_path, "w") as fh:
        for t in range(cfg.max_iterations):
            batch = sample_batch(dataset.images, dataset.masks, lab_idx, unl_idx, cfg, rng)
            if uses_unlabeled(cfg) and cfg.copy_paste_prob > 0:
                mixed = copy_paste_augment(batch, cfg.copy_paste_ratio, rng, cfg.copy_paste_prob)
                # supervised terms keep the clean labeled images; only the mixed unlabeled side is used
                batch = SemiBatch(batch.x_l, batch.y_l, mixed.x_u, mixed.y_u_hint)
            record = train_step(state, batch, cfg)
            fh.write(json.dumps(record) + "\n")
            records.append(record)
            if progress is not None:
                progress(record)
            every = cfg.checkpoint_every
            if every and (t + 1) % every == 0 and t + 1 < cfg.max_iterations:
                save_state(out / f"checkpoint_{t + 1:06d}.zip", state, cfg)
    ck = save_state(out / CHECKPOINT_NAME, state, cfg)
    log.info("finished %d steps, checkpoint %s", cfg.max_iterations, ck)
    return FitResult(ck, log_path, state, records)


@torch.no_grad()
def predict(state, images, cfg, chunk=32):
    """Label maps from subnet A, subnet B, their probability mean and (if present) the fusion head."""
    dtype = _dtype(cfg)
    for m in (state.net_a, state.net_b, state.upg):
        if m is not None:
            m.eval()
    preds = {"A": [], "B": [], "mean": []}
    if state.upg is not None:
        preds["fused"] = []
    for start in range(0, len(images), chunk):
        x = torch.as_tensor(np.asarray(images[start:start + chunk])).unsqueeze(1).to(dtype)
        la = forward_subnet(state.net_a, x).logits
        lb = forward_subnet(state.net_b, x).logits
        preds["A"].append(la.argmax(1))
        preds["B"].append(lb.argmax(1))
        preds["mean"].append((torch.softmax(la, 1) + torch.softmax(lb, 1)).argmax(1))
        if state.upg is not None:
            fused = state.upg(la, lb, uncertainty_from_logits(la, 1), uncertainty_from_logits(lb, 1))
            preds["fused"].append(make_pseudo_label(fused))
    out = {k: torch.cat(v).numpy() for k, v in preds.items()}
    out["final"] = out["fused"] if "fused" in out else out["mean"]
    return out


def evaluate_state(state, cfg, dataset):
    preds = predict(state, dataset.images, cfg)
    reports = {}
    for name, labels in preds.items():
        per_image = []
        for img_name, p, g in zip(dataset.names, labels, dataset.masks):
            m = image_metrics(p, g, cfg.num_classes)
            m["image"] = img_name
            per_image.append(m)
        reports[name] = aggregate_report(per_image)
    return reports, preds


def evaluate(checkpoint_path, dataset):
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    state, cfg = load_state(checkpoint_path)
    reports, _ = evaluate_state(state, cfg, dataset)
    return reports
