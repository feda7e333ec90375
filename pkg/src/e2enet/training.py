"""Losses, SGD with momentum, the poly schedule and the training loop.

Every ``delta_T`` iterations the fusion masks evolve: the weakest active
kernels are pruned and as many inactive ones are regrown. The SGD step runs
on every iteration, including those that end with an evolution event.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import AugmentSpec, downsample_labels, sample_patch, sliding_window_infer, softmax
from .metrics import count_params, mdice
from .model import ArchConfig, ModelParams, backward, forward, save_checkpoint
from .tensor import DTYPE, spawn_rngs
from .topology import SparsitySchedule, evolve

DICE_EPS = 1e-5


class NonFiniteLossError(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at iteration {record.get('iter')}: {record.get('loss')}")
        self.record = record


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    epochs: int = 20
    iters_per_epoch: int = 50
    delta_T: int = 100
    poly_power: float = 0.9
    batch: int = 2
    seed: int = 0
    loss_weights: tuple = (4 / 7, 2 / 7, 1 / 7)
    static_topology: bool = False
    wd_exclude_norm_bias: bool = True
    alpha: float = 0.5
    flip: bool = True
    noise_sigma: float = 0.05

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.batch < 1:
            raise ValueError("epochs >= 0, iters_per_epoch >= 1 and batch >= 1 required")
        if self.delta_T < 1:
            raise ValueError("delta_T must be >= 1")
        if not self.loss_weights or min(self.loss_weights) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def total_iters(self) -> int:
        return self.epochs * self.iters_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


def head_weights(cfg_weights: Sequence[float], n_heads: int) -> tuple:
    """The first ``n_heads`` weights, renormalized to sum to one."""
    w = np.asarray(cfg_weights[:n_heads], dtype=np.float64)
    if len(w) < n_heads:
        raise ValueError(f"{len(w)} loss weights for {n_heads} outputs")
    return tuple(float(v) for v in w / w.sum())


# --------------------------------------------------------------------------
# losses


def one_hot(labels, num_classes: int):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)


def soft_dice_loss(probs, target_onehot, eps: float = DICE_EPS):
    """``1 - mean_j (2*sum(p_j*y_j) + eps) / (sum p_j + sum y_j + eps)`` and its gradient."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(target_onehot, dtype=np.float64)
    if probs.shape != y.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {y.shape}")
    n = probs.shape[0]
    axes = tuple(range(1, probs.ndim))
    inter = (probs * y).sum(axis=axes)
    den = probs.sum(axis=axes) + y.sum(axis=axes) + eps
    num = 2 * inter + eps
    loss = 1.0 - float(np.mean(num / den))
    shape = (n,) + (1,) * (probs.ndim - 1)
    grad = -(2 * y / den.reshape(shape) - (num / den ** 2).reshape(shape)) / n
    return loss, grad


def cross_entropy_loss(logits, labels):
    """Mean over voxels of ``-log softmax(logits)[label]`` and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[1:] != labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    y = one_hot(labels, logits.shape[0])
    z = logits - logits.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    nvox = labels.size
    loss = -float((logp * y).sum() / nvox)
    grad = (np.exp(logp) - y) / nvox
    return loss, grad


def seg_loss(logits, labels):
    """Cross-entropy plus soft Dice on one output; returns (total, ce, dice, grad)."""
    ce, g_ce = cross_entropy_loss(logits, labels)
    p = softmax(np.asarray(logits, dtype=np.float64))
    dice, g_p = soft_dice_loss(p, one_hot(labels, logits.shape[0]))
    g_dice = p * (g_p - (p * g_p).sum(axis=0, keepdims=True))
    return ce + dice, ce, dice, g_ce + g_dice


def deep_supervised_loss(outputs, labels, weights, factors=None):
    """Weighted sum of per-output losses against nearest-downsampled labels.

    ``factors[k]`` is the subsampling factor from ``labels`` to output ``k``;
    by default it is inferred from the shapes. Returns
    ``(total, ce, dice, grads)`` with one gradient per output.
    """
    if len(weights) < len(outputs):
        raise ValueError(f"{len(weights)} weights for {len(outputs)} outputs")
    total = ce_sum = dice_sum = 0.0
    grads = []
    for k, (out, w) in enumerate(zip(outputs, weights)):
        if factors is None:
            if any(n % m for n, m in zip(labels.shape, out.shape[1:])):
                raise ValueError(f"output {out.shape[1:]} does not divide labels {labels.shape}")
            f = tuple(n // m for n, m in zip(labels.shape, out.shape[1:]))
        else:
            f = factors[k]
        target = downsample_labels(labels, f)
        if target.shape != out.shape[1:]:
            raise ValueError(f"output {out.shape[1:]} vs target {target.shape} at factor {f}")
        l, ce, dice, g = seg_loss(out, target)
        total += w * l
        ce_sum += w * ce
        dice_sum += w * dice
        grads.append(w * g)
    return total, ce_sum, dice_sum, grads


# --------------------------------------------------------------------------
# optimizer


def poly_lr(t: float, total: float, lr0: float = 0.01, power: float = 0.9) -> float:
    if total <= 0:
        return lr0
    frac = min(max(t / total, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()}, 0)


def _decays(name: str, exclude_norm_bias: bool) -> bool:
    if not exclude_norm_bias:
        return True
    return name.endswith(".weight")


def sgd_step(params: ModelParams, grads: dict, opt: OptimizerState, lr: float,
             momentum: float = 0.99, weight_decay: float = 3e-5, exclude_norm_bias: bool = True):
    """``v <- m*v + g + wd*w``; ``w <- w - lr*v``. Inactive kernels stay zero."""
    for name, w in params.tensors.items():
        g = grads[name]
        v = opt.velocity[name]
        v *= momentum
        v += g
        if weight_decay and _decays(name, exclude_norm_bias):
            v += weight_decay * w
        m = params.mask_array(name)
        if m is not None:
            v *= m.T[:, :, None, None, None]
        w -= np.asarray(lr, dtype=w.dtype) * v
    opt.t += 1


def evolve_all(params: ModelParams, opt: Optional[OptimizerState], t: int,
               sched: SparsitySchedule, rng) -> int:
    """One prune-and-grow step on every mask; returns the number of swapped kernels."""
    swapped = 0
    for key in sorted(params.masks):
        mask = params.masks[key]
        name = params.weight_name(key)
        res = evolve(mask, params.tensors[name], t, sched, rng)
        if not res.pruned:
            continue
        params.masks[key] = res.mask
        params.tensors[name] = res.kernels
        if opt is not None:
            v = opt.velocity[name]
            for ci, co in res.pruned + res.grown:
                v[co, ci] = 0.0
        swapped += len(res.pruned)
    return swapped


# --------------------------------------------------------------------------
# loop


def label_factors(arch: ArchConfig):
    return [arch.cumulative_ratio(i) for _, i in arch.heads()]


def train_step(params: ModelParams, arch: ArchConfig, images, labels, weights):
    """Mean loss and gradients over a batch of ``(image, labels)`` patches."""
    factors = label_factors(arch)
    grads = None
    tot = ce = dice = 0.0
    for img, lab in zip(images, labels):
        logits, tape = forward(img, params, arch, keep=True)
        l, c, d, g_logits = deep_supervised_loss(logits, lab, weights, factors)
        g = backward(tape, [x.astype(DTYPE) for x in g_logits], params, arch)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
        tot, ce, dice = tot + l, ce + c, dice + d
    n = len(images)
    for k in grads:
        grads[k] /= n
    return tot / n, ce / n, dice / n, grads


def evaluate(params: ModelParams, arch: ArchConfig, records) -> tuple[list, float]:
    """Per-class and mean Dice over ``records`` pooled per volume then averaged."""
    per = []
    for rec in records:
        pred = sliding_window_infer(params, arch, rec.image)
        per.append(mdice(pred, rec.labels, arch.num_classes)[0])
    per_class = np.mean(np.asarray(per), axis=0).tolist() if per else []
    return per_class, (float(np.mean(per_class)) if per_class else 0.0)


@dataclass
class RunResult:
    params: ModelParams
    records: list
    evolution_events: int


def train(params: ModelParams, arch: ArchConfig, records, cfg: TrainConfig,
          out_dir=None, val_records=None, log=None) -> RunResult:
    """Run ``cfg.epochs * cfg.iters_per_epoch`` SGD iterations with periodic evolution.

    Writes ``metrics.jsonl`` and a checkpoint into ``out_dir`` when given.
    Raises :class:`NonFiniteLossError` (after logging the failing record) if
    the loss stops being finite.
    """
    if not records:
        raise ValueError("empty training set")
    rng_data, rng_evo = spawn_rngs(cfg.seed, 2)
    opt = OptimizerState.zeros_like(params)
    total = cfg.total_iters
    weights = head_weights(cfg.loss_weights, len(arch.heads()))
    dynamic = arch.use_dsff and not cfg.static_topology and total > 0
    sched = SparsitySchedule(arch.S, max(total, 1), cfg.delta_T, cfg.alpha) if dynamic else None
    augment = AugmentSpec(cfg.flip, cfg.noise_sigma)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")

    def emit(rec):
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics_fh.flush()
        if log is not None:
            log(rec)

    history, events = [], 0
    t = 0
    try:
        for epoch in range(cfg.epochs):
            sums = np.zeros(3)
            epoch_events = 0
            for _ in range(cfg.iters_per_epoch):
                idx = rng_data.integers(0, len(records), size=cfg.batch)
                batch = [sample_patch(records[k], arch.patch, augment, rng_data) for k in idx]
                lr = poly_lr(t, total, cfg.lr0, cfg.poly_power)
                loss, ce, dice, grads = train_step(params, arch, [b[0] for b in batch],
                                                   [b[1] for b in batch], weights)
                if not math.isfinite(loss):
                    rec = {"epoch": epoch, "iter": t, "lr": lr, "loss": repr(loss),
                           "loss_ce": repr(ce), "loss_dice": repr(dice), "status": "non-finite loss"}
                    emit(rec)
                    raise NonFiniteLossError(rec)
                sgd_step(params, grads, opt, lr, cfg.momentum, cfg.weight_decay,
                         cfg.wd_exclude_norm_bias)
                t += 1
                sums += (loss, ce, dice)
                if dynamic and t % cfg.delta_T == 0 and t < total:
                    if evolve_all(params, opt, t, sched, rng_evo):
                        epoch_events += 1
            events += epoch_events
            rec = {
                "epoch": epoch,
                "iter": t,
                "lr": poly_lr(t, total, cfg.lr0, cfg.poly_power),
                "loss": float(sums[0] / cfg.iters_per_epoch),
                "loss_ce": float(sums[1] / cfg.iters_per_epoch),
                "loss_dice": float(sums[2] / cfg.iters_per_epoch),
                "active_params": count_params(params),
                "evolution_events": epoch_events,
            }
            if val_records:
                rec["val_mdice"] = evaluate(params, arch, val_records)[1]
            emit(rec)
            history.append(rec)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out is not None:
        save_checkpoint(out, arch, params, t, {"train": cfg.to_dict()})
    return RunResult(params, history, events)
