"""Connection masks for dynamic sparse feature fusion.

A mask is a boolean ``[cin, cout]`` matrix: entry ``(ci, co)`` says whether
the kernel linking input map ``ci`` to output map ``co`` exists. Sparsity is
kept constant, the count of active connections never changes after
initialization; evolution swaps the weakest active kernels (by L1 norm) for
randomly chosen inactive ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .tensor import Rng, fan_in_bound


class DegenerateSparsityError(ValueError):
    pass


@dataclass
class FusionMask:
    stage: int
    level: int
    active: np.ndarray  # bool [cin, cout]
    kind: str = "fusion"
    groups: Optional[tuple[int, int, int]] = None

    @property
    def cin(self) -> int:
        return self.active.shape[0]

    @property
    def cout(self) -> int:
        return self.active.shape[1]

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def density(self) -> float:
        return self.n_active / self.active.size

    @property
    def key(self) -> str:
        return f"{self.kind}.{self.stage}.{self.level}"

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(a), int(b)) for a, b in np.argwhere(self.active)]

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.active.astype(dtype)

    def copy(self) -> "FusionMask":
        return FusionMask(self.stage, self.level, self.active.copy(), self.kind, self.groups)

    def to_json(self) -> dict:
        d = {
            "stage": self.stage,
            "level": self.level,
            "cin": self.cin,
            "cout": self.cout,
            "active": [list(p) for p in self.pairs()],
            "kind": self.kind,
        }
        if self.groups is not None:
            d["groups"] = list(self.groups)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FusionMask":
        active = np.zeros((d["cin"], d["cout"]), dtype=bool)
        for ci, co in d["active"]:
            active[ci, co] = True
        groups = tuple(d["groups"]) if d.get("groups") is not None else None
        return cls(d["stage"], d["level"], active, d.get("kind", "fusion"), groups)


@dataclass(frozen=True)
class SparsitySchedule:
    S: float
    T: int
    delta_T: int = 1200
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.S < 1.0:
            raise ValueError(f"sparsity must lie in (0, 1), got {self.S}")
        if self.delta_T < 1:
            raise ValueError("delta_T must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")


def n_connections(cin: int, cout: int, S: float) -> int:
    # round half up, tolerant of binary noise: (1 - 0.8) * 100 is 19.999999999999996
    return int(math.floor((1.0 - S) * cin * cout + 0.5 + 1e-9))


def random_mask(stage, level, cin, cout, S, rng: Rng, kind="fusion", groups=None) -> FusionMask:
    k = n_connections(cin, cout, S)
    if k == 0:
        raise DegenerateSparsityError(
            f"{kind} node ({stage},{level}) with {cin}x{cout} kernels keeps no connection at S={S}"
        )
    active = np.zeros(cin * cout, dtype=bool)
    active[rng.choice(cin * cout, size=k, replace=False)] = True
    return FusionMask(stage, level, active.reshape(cin, cout), kind, groups)


def dense_mask(stage, level, cin, cout, kind="fusion", groups=None) -> FusionMask:
    return FusionMask(stage, level, np.ones((cin, cout), dtype=bool), kind, groups)


def init_masks(arch, S: float, rng: Rng) -> list[FusionMask]:
    """Random masks at sparsity ``S`` for every DSFF-managed kernel set of ``arch``.

    ``arch.mask_layout()`` yields ``(kind, stage, level, cin, cout, groups)``.
    """
    if not 0.0 < S < 1.0:
        raise ValueError(f"sparsity must lie in (0, 1), got {S}")
    return [random_mask(j, i, cin, cout, S, rng, kind, groups)
            for kind, j, i, cin, cout, groups in arch.mask_layout()]


def dense_masks(arch) -> list[FusionMask]:
    return [dense_mask(j, i, cin, cout, kind, groups)
            for kind, j, i, cin, cout, groups in arch.mask_layout()]


def decay_fraction(t: float, alpha: float, T: float) -> float:
    """Cosine-decayed update fraction ``alpha/2 * (1 + cos(t*pi/T))``."""
    if t < 0 or t > T:
        raise ValueError(f"t={t} outside [0, {T}]")
    return alpha / 2.0 * (1.0 + math.cos(t * math.pi / T))


def update_count(mask: FusionMask, t: int, sched: SparsitySchedule) -> int:
    raw = mask.cin * mask.cout * decay_fraction(t, sched.alpha, sched.T) * (1.0 - sched.S)
    u = int(math.floor(raw + 1e-9))
    n_active = mask.n_active
    limit = min(n_active - 1, mask.active.size - n_active)
    return max(0, min(u, limit))


def importance(mask: FusionMask, kernels: np.ndarray) -> np.ndarray:
    """L1 norm of every kernel as a ``[cin, cout]`` table."""
    return np.abs(kernels).reshape(kernels.shape[0], kernels.shape[1], -1).sum(axis=2).T


@dataclass
class EvolveResult:
    mask: FusionMask
    kernels: np.ndarray
    pruned: list = field(default_factory=list)
    grown: list = field(default_factory=list)


def evolve(mask: FusionMask, kernels: np.ndarray, t: int, sched: SparsitySchedule,
           rng: Rng, u: Optional[int] = None) -> EvolveResult:
    """Prune the ``u`` weakest active kernels, regrow ``u`` random inactive ones.

    Pruned kernels are zeroed, regrown kernels are re-drawn from the
    initialization distribution. Candidates for regrowth are the connections
    inactive before this step, so nothing pruned here comes straight back.
    Ties in L1 norm are broken by ascending ``(ci, co)``.
    """
    if kernels.shape[:2] != (mask.cout, mask.cin):
        raise ValueError(f"kernels {kernels.shape} do not match mask {mask.cin}x{mask.cout}")
    if u is None:
        u = update_count(mask, t, sched)
    if u == 0:
        return EvolveResult(mask, kernels)

    scores = importance(mask, kernels)
    act = np.argwhere(mask.active)
    order = np.lexsort((act[:, 1], act[:, 0], scores[act[:, 0], act[:, 1]]))
    pruned = act[order[:u]]

    inactive = np.argwhere(~mask.active)
    grown = inactive[np.sort(rng.choice(len(inactive), size=u, replace=False))]

    new_active = mask.active.copy()
    new_active[pruned[:, 0], pruned[:, 1]] = False
    new_active[grown[:, 0], grown[:, 1]] = True

    out = kernels.copy()
    out[pruned[:, 1], pruned[:, 0]] = 0.0
    b = fan_in_bound(kernels.shape)
    fresh = rng.uniform(-b, b, size=(u,) + kernels.shape[2:]).astype(kernels.dtype)
    out[grown[:, 1], grown[:, 0]] = fresh

    new_mask = FusionMask(mask.stage, mask.level, new_active, mask.kind, mask.groups)
    return EvolveResult(new_mask, out,
                        [tuple(map(int, p)) for p in pruned],
                        [tuple(map(int, g)) for g in grown])


def flow_proportions(mask: FusionMask, channel_groups: Iterable[int]) -> tuple[float, float, float]:
    """Share of active connections fed by the downward, forward and upward inputs."""
    n_down, n_fwd, n_up = (int(g) for g in channel_groups)
    if min(n_down, n_fwd, n_up) < 0 or n_down + n_fwd + n_up != mask.cin:
        raise ValueError(f"groups {(n_down, n_fwd, n_up)} inconsistent with cin={mask.cin}")
    per_input = mask.active.sum(axis=1)
    total = per_input.sum()
    if total == 0:
        raise ValueError("mask has no active connections")
    bounds = np.cumsum([0, n_down, n_fwd, n_up])
    counts = [per_input[bounds[k]:bounds[k + 1]].sum() for k in range(3)]
    return tuple(float(c / total) for c in counts)


def dump_topology(masks: Iterable[FusionMask]) -> list[dict]:
    return [m.to_json() for m in masks]


def load_topology(records: Iterable[dict]) -> list[FusionMask]:
    return [FusionMask.from_json(r) for r in records]
