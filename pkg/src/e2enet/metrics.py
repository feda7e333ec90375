"""Segmentation quality and efficiency accounting.

Parameter counts treat everything outside the masked kernel sets as dense;
for masked tensors only the non-zero entries of active kernels count.
FLOPs follow the per-layer rule ``(2*K*Cin*(1-S) + 1) * Cout * D*H*W``
evaluated on each layer's output grid.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .ops import ConvSpec


def mdice(pred, truth, num_classes: int):
    """Per-class Dice and their mean. A class absent from both scores 1."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    per_class = []
    for c in range(num_classes):
        p = pred == c
        t = truth == c
        denom = int(p.sum()) + int(t.sum())
        if denom == 0:
            per_class.append(1.0)
        else:
            per_class.append(2.0 * int(np.logical_and(p, t).sum()) / denom)
    return per_class, float(np.mean(per_class))


def count_params(params) -> int:
    """Dense count of unmasked tensors plus non-zero entries of active kernels."""
    total = 0
    for name, v in params.tensors.items():
        m = params.mask_array(name)
        if m is None:
            total += int(v.size)
        else:
            nz = (v != 0).reshape(v.shape[0], v.shape[1], -1).sum(axis=2)  # [cout, cin]
            total += int((nz * m.T).sum())
    return total


def nonzero_scan(params) -> int:
    """Independent cross-check: stored values that are non-zero once masks are applied."""
    total = 0
    for name, v in params.tensors.items():
        m = params.mask_array(name)
        if m is not None:
            v = v * m.T[:, :, None, None, None]
        total += int(np.count_nonzero(v))
    return total


def flops_conv(spec: ConvSpec, S: float, out_shape) -> int:
    if not 0.0 <= S < 1.0:
        raise ValueError(f"S must lie in [0, 1), got {S}")
    kd, kh, kw = spec.kernel
    d, h, w = out_shape
    return int(round((2 * kd * kh * kw * spec.cin * (1.0 - S) + 1) * spec.cout * h * w * d))


def flops_fc(cin: int, cout: int, S: float) -> int:
    if not 0.0 <= S < 1.0:
        raise ValueError(f"S must lie in [0, 1), got {S}")
    return int(round((2 * cin * (1.0 - S) + 1) * cout))


def layer_flops(arch, S: Optional[float] = None, patch=None) -> list[tuple[str, int]]:
    """Per-layer FLOPs of one forward pass; shift, norm, activation and pooling are free."""
    if S is None:
        S = arch.S if arch.use_dsff else 0.0
    fusion_S = S if arch.use_dsff else 0.0
    up_S = fusion_S if arch.mask_upsample else 0.0
    patch = arch.patch if patch is None else tuple(patch)
    rows = []
    for lvl in range(1, arch.L + 1):
        out = arch.level_shape(lvl, patch)
        for k in (0, 1):
            rows.append((f"backbone.{lvl}.{k}", flops_conv(arch.backbone_spec(lvl, k), 0.0, out)))
    for j, i in arch.fusion_nodes():
        out = arch.level_shape(i, patch)
        if arch.exists(j - 1, i + 1):
            c = arch.width(i + 1)
            up = ConvSpec(c, c, arch.ratio(i + 1), arch.ratio(i + 1), padding=(0, 0, 0))
            rows.append((f"up.{j}.{i}", flops_conv(up, up_S, out)))
        rows.append((f"fusion.{j}.{i}", flops_conv(arch.fusion_spec(j, i), fusion_S, out)))
    for j, i in arch.heads():
        rows.append((f"head.{j}.{i}", flops_conv(arch.head_spec(j, i), 0.0, arch.level_shape(i, patch))))
    return rows


def model_flops(arch, S: Optional[float] = None, patch=None) -> int:
    return int(sum(f for _, f in layer_flops(arch, S, patch)))


@dataclass
class PTConfig:
    mdice_max: float
    params_min: float
    flops_min: float
    alpha1: float = 1.0
    alpha2: float = 0.5

    def __post_init__(self):
        if min(self.mdice_max, self.params_min, self.flops_min) <= 0:
            raise ValueError("pool extrema must be positive")

    @classmethod
    def from_pool(cls, pool: Iterable[Sequence[float]], alpha1=1.0, alpha2=0.5) -> "PTConfig":
        pool = list(pool)
        if not pool:
            raise ValueError("empty comparison pool")
        return cls(max(p[0] for p in pool), min(p[1] for p in pool), min(p[2] for p in pool),
                   alpha1, alpha2)


def pt_score(mdice_value: float, params: float, flops: float, cfg: PTConfig) -> float:
    """Performance trade-off: normalized accuracy plus inverse-normalized costs.

    Units only need to agree with the pool extrema in ``cfg``.
    """
    if params <= 0 or flops <= 0:
        raise ValueError("params and flops must be positive")
    return (cfg.alpha1 * mdice_value / cfg.mdice_max
            + cfg.alpha2 * (cfg.params_min / params + cfg.flops_min / flops))


@dataclass
class MetricsReport:
    per_class_dice: list
    mdice: Optional[float]
    params: int
    flops: int
    pt_score: Optional[float]
    pool: dict = field(default_factory=dict)
    alpha1: float = 1.0
    alpha2: float = 0.5
    entries: list = field(default_factory=list)

    @property
    def params_M(self) -> float:
        return self.params / 1e6

    @property
    def flops_G(self) -> float:
        return self.flops / 1e9

    def to_json(self) -> dict:
        d = {
            "per_class_dice": [_sig(x) for x in self.per_class_dice],
            "mdice": None if self.mdice is None else _sig(self.mdice),
            "params_M": _sig(self.params_M),
            "flops_G": _sig(self.flops_G),
            "pt_score": None if self.pt_score is None else _sig(self.pt_score),
            "pool": {k: _sig(v) for k, v in self.pool.items()},
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
        }
        if self.entries:
            d["entries"] = self.entries
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(list(d.get("per_class_dice", [])), d.get("mdice"), int(round(d["params_M"] * 1e6)),
                   int(round(d["flops_G"] * 1e9)), d["pt_score"], d.get("pool", {}),
                   d.get("alpha1", 1.0), d.get("alpha2", 0.5), d.get("entries", []))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    def summary(self) -> str:
        pt = "n/a" if self.pt_score is None else f"{self.pt_score:.2f}"
        md = "n/a" if self.mdice is None else f"{100 * self.mdice:.1f}"
        return f"mDice {md}  Params {self.params_M:.2f} M  FLOPs {self.flops_G:.2f} G  PT {pt}"


def _sig(x: float) -> float:
    return float(f"{x:.6g}")


def report(params, arch, pool, per_class_dice=(), mdice_value=None, alpha1: float = 1.0,
           alpha2: float = 0.5, patch=None, mdice_scale: float = 100.0) -> MetricsReport:
    """Score ``params`` against a comparison pool.

    ``pool`` holds ``(mdice, params_M, flops_G)`` triples, or dicts with those
    keys plus an optional ``name``; a dict with ``"self": true`` stands for the
    model being reported. Pool mDice values are on the ``mdice_scale`` scale
    (percent by default) while the report's own mDice is a fraction. Extrema
    come from the pool alone. Without an mDice for the model its PT score is
    ``None``.
    """
    n_params = count_params(params)
    n_flops = model_flops(arch, patch=patch)
    per_class_dice = list(per_class_dice)
    if mdice_value is None and per_class_dice:
        mdice_value = float(np.mean(per_class_dice))
    own = (None if mdice_value is None else mdice_value * mdice_scale, n_params / 1e6, n_flops / 1e9)

    rows = []
    for k, entry in enumerate(pool):
        if isinstance(entry, dict):
            name = entry.get("name", f"entry{k}")
            if entry.get("self") and own[0] is None:
                raise ValueError("pool refers to the model itself but no mDice was given")
            triple = own if entry.get("self") else (entry["mdice"], entry["params_M"], entry["flops_G"])
        else:
            name, triple = f"entry{k}", tuple(entry)
        rows.append((name, tuple(float(v) for v in triple)))
    if not rows:
        raise ValueError("empty comparison pool")
    cfg = PTConfig.from_pool([t for _, t in rows], alpha1, alpha2)
    entries = [{"name": n, "mdice": t[0], "params_M": t[1], "flops_G": t[2],
                "pt_score": round(pt_score(*t, cfg), 6)} for n, t in rows]
    score = None if own[0] is None else pt_score(*own, cfg)
    return MetricsReport(
        per_class_dice, mdice_value, n_params, n_flops, score,
        {"mdice_max": cfg.mdice_max, "params_min_M": cfg.params_min, "flops_min_G": cfg.flops_min},
        alpha1, alpha2, entries,
    )
