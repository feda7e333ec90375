"""Multi-scale backbone, triangular fusion grid and deep-supervision heads.

Node ``(j, i)`` is the feature map at stage ``j`` and level ``i`` (levels are
1-based, level 1 has the finest resolution). Stage 0 is the backbone; stage
``j >= 1`` has levels ``1 .. L-j`` and each of its nodes fuses

    maxpool(x[j-1, i-1])  |  x[j-1, i]  |  upsample(x[j-1, i+1])

(in that channel order, dropping the neighbours that do not exist), followed
by an optional depth shift, a masked convolution, instance norm and leaky ReLU.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .ops import ConvSpec, LayerParams, ShiftSpec
from .tensor import DTYPE, Rng, ShapeError, init_kernel, spawn_rngs
from .topology import FusionMask, dense_masks, dump_topology, init_masks, load_topology

CHECKPOINT_SCHEMA = 1


def _tuple3(v):
    return tuple(int(a) for a in v)


@dataclass
class ArchConfig:
    L: int = 4
    widths: tuple = (8, 16, 32, 32)
    resample_ratios: tuple = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2))
    in_channels: int = 1
    num_classes: int = 3
    patch: tuple = (16, 32, 32)
    use_shift: bool = True
    use_dsff: bool = True
    S: float = 0.8
    fusion_kernel: tuple = (1, 3, 3)
    backbone_kernel: tuple = (1, 3, 3)
    shift_offsets: tuple = (-1, 0, 1)
    shift_backbone: bool = True
    mask_upsample: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.resample_ratios = tuple(_tuple3(r) for r in self.resample_ratios)
        self.patch = _tuple3(self.patch)
        self.fusion_kernel = _tuple3(self.fusion_kernel)
        self.backbone_kernel = _tuple3(self.backbone_kernel)
        self.shift_offsets = tuple(int(o) for o in self.shift_offsets)
        if self.L < 2:
            raise ValueError("need at least two feature levels")
        if len(self.widths) != self.L:
            raise ValueError(f"{len(self.widths)} widths for L={self.L}")
        if len(self.resample_ratios) != self.L:
            raise ValueError(f"{len(self.resample_ratios)} resample ratios for L={self.L}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.use_dsff and not 0.0 < self.S < 1.0:
            raise ValueError(f"sparsity must lie in (0, 1) when DSFF is on, got {self.S}")
        shape = self.patch
        for lvl, r in enumerate(self.resample_ratios, start=1):
            if any(n % f for n, f in zip(shape, r)):
                raise ShapeError(f"patch {self.patch} not divisible down to level {lvl}")
            shape = tuple(n // f for n, f in zip(shape, r))

    # -- geometry ---------------------------------------------------------

    def width(self, level: int) -> int:
        return self.widths[level - 1]

    def ratio(self, level: int):
        """Resampling ratio from level ``level - 1`` (the image for level 1)."""
        return self.resample_ratios[level - 1]

    def level_shape(self, level: int, patch=None):
        shape = self.patch if patch is None else _tuple3(patch)
        for r in self.resample_ratios[:level]:
            shape = tuple(n // f for n, f in zip(shape, r))
        return shape

    def cumulative_ratio(self, level: int):
        out = (1, 1, 1)
        for r in self.resample_ratios[:level]:
            out = tuple(a * b for a, b in zip(out, r))
        return out

    def exists(self, j: int, i: int) -> bool:
        return 0 <= j <= self.L - 1 and 1 <= i <= self.L - j

    def fusion_nodes(self):
        return [(j, i) for j in range(1, self.L) for i in range(1, self.L - j + 1)]

    def node_groups(self, j: int, i: int):
        """Channel counts ``(down, forward, up)`` entering fusion node ``(j, i)``."""
        down = self.width(i - 1) if self.exists(j - 1, i - 1) else 0
        up = self.width(i + 1) if self.exists(j - 1, i + 1) else 0
        return (down, self.width(i), up)

    def heads(self):
        """Supervised nodes, finest resolution first."""
        return [(self.L - k, k) for k in (1, 2, 3) if self.L - k >= 1]

    def mask_layout(self):
        out = []
        for j, i in self.fusion_nodes():
            groups = self.node_groups(j, i)
            out.append(("fusion", j, i, sum(groups), self.width(i), groups))
        if self.mask_upsample:
            for j, i in self.fusion_nodes():
                if self.exists(j - 1, i + 1):
                    c = self.width(i + 1)
                    out.append(("upsample", j, i, c, c, None))
        return out

    @property
    def shift(self) -> ShiftSpec:
        return ShiftSpec(self.shift_offsets)

    def backbone_spec(self, level: int, k: int) -> ConvSpec:
        cin = self.in_channels if (level == 1 and k == 0) else self.width(level if k else level - 1)
        stride = self.ratio(level) if k == 0 else (1, 1, 1)
        return ConvSpec(cin, self.width(level), self.backbone_kernel, stride)

    def fusion_spec(self, j: int, i: int) -> ConvSpec:
        return ConvSpec(sum(self.node_groups(j, i)), self.width(i), self.fusion_kernel)

    def head_spec(self, j: int, i: int) -> ConvSpec:
        return ConvSpec(self.width(i), self.num_classes, (1, 1, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def full_arch(S: float = 0.7, **kw) -> ArchConfig:
    """Full-size configuration used for efficiency accounting only."""
    base = dict(
        L=6,
        widths=(48, 96, 192, 320, 320, 320),
        resample_ratios=((1, 2, 2),) + ((2, 2, 2),) * 5,
        in_channels=1,
        num_classes=16,
        patch=(128, 128, 128),
        S=S,
    )
    base.update(kw)
    return ArchConfig(**base)


# --------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    tensors: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)

    # name of a masked weight tensor -> mask key
    @staticmethod
    def mask_key(name: str) -> Optional[str]:
        parts = name.split(".")
        if parts[-1] != "weight":
            return None
        if parts[0] == "fusion":
            return f"fusion.{parts[1]}.{parts[2]}"
        if parts[0] == "up":
            return f"upsample.{parts[1]}.{parts[2]}"
        return None

    def mask_array(self, name: str) -> Optional[np.ndarray]:
        key = self.mask_key(name)
        if key is None or key not in self.masks:
            return None
        return self.masks[key].active

    def weight_name(self, mask_key: str) -> str:
        kind, j, i = mask_key.split(".")
        return f"{'fusion' if kind == 'fusion' else 'up'}.{j}.{i}.weight"

    def layer(self, prefix: str) -> LayerParams:
        t = self.tensors
        return LayerParams(
            t[f"{prefix}.weight"], t.get(f"{prefix}.bias"),
            t.get(f"{prefix}.norm_scale"), t.get(f"{prefix}.norm_shift"),
        )

    def apply_masks(self):
        for name in self.tensors:
            m = self.mask_array(name)
            if m is not None:
                self.tensors[name] = ops.masked_weight(self.tensors[name], m)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           {k: m.copy() for k, m in self.masks.items()})


def _add_conv(tensors, prefix, spec: ConvSpec, rng: Rng, norm: bool):
    tensors[f"{prefix}.weight"] = init_kernel(rng, spec.weight_shape)
    tensors[f"{prefix}.bias"] = np.zeros(spec.cout, dtype=DTYPE)
    if norm:
        tensors[f"{prefix}.norm_scale"] = np.ones(spec.cout, dtype=DTYPE)
        tensors[f"{prefix}.norm_shift"] = np.zeros(spec.cout, dtype=DTYPE)


def init_params(arch: ArchConfig, rng_init: Rng, rng_mask: Rng) -> ModelParams:
    t: dict = {}
    for lvl in range(1, arch.L + 1):
        for k in (0, 1):
            _add_conv(t, f"backbone.{lvl}.{k}", arch.backbone_spec(lvl, k), rng_init, norm=True)
    for j, i in arch.fusion_nodes():
        if arch.exists(j - 1, i + 1):
            c = arch.width(i + 1)
            r = arch.ratio(i + 1)
            t[f"up.{j}.{i}.weight"] = init_kernel(rng_init, (c, c) + r)
            t[f"up.{j}.{i}.bias"] = np.zeros(c, dtype=DTYPE)
        _add_conv(t, f"fusion.{j}.{i}", arch.fusion_spec(j, i), rng_init, norm=True)
    for j, i in arch.heads():
        _add_conv(t, f"head.{j}.{i}", arch.head_spec(j, i), rng_init, norm=False)

    masks = init_masks(arch, arch.S, rng_mask) if arch.use_dsff else dense_masks(arch)
    params = ModelParams(t, {m.key: m for m in masks})
    params.apply_masks()
    return params


def build_model(arch: ArchConfig, seed: int) -> ModelParams:
    rng_init, rng_mask = spawn_rngs(seed, 2)
    return init_params(arch, rng_init, rng_mask)


# --------------------------------------------------------------------------
# forward / backward


class _Block:
    """shift -> conv -> instance norm -> leaky ReLU, with cached intermediates."""

    __slots__ = ("prefix", "spec", "shift", "mask", "xs", "cols", "z", "n", "x_shape")

    def __init__(self, prefix, spec, shift, mask):
        self.prefix, self.spec, self.shift, self.mask = prefix, spec, shift, mask

    def forward(self, x, params: ModelParams):
        p = params.layer(self.prefix)
        self.x_shape = x.shape
        self.xs = ops.depth_shift(x, self.shift) if self.shift is not None else x
        self.cols = ops.im2col(self.xs, self.spec)
        self.z = ops.conv3d_forward(self.xs, p, self.spec, self.mask, cols=self.cols)
        self.n = ops.instance_norm(self.z, p.norm_scale, p.norm_shift)
        return ops.leaky_relu(self.n)

    def backward(self, g, params: ModelParams, grads: dict):
        p = params.layer(self.prefix)
        g = ops.leaky_relu_backward(self.n, g)
        g, gs, gb = ops.instance_norm_backward(self.z, p.norm_scale, g)
        _acc(grads, f"{self.prefix}.norm_scale", gs)
        _acc(grads, f"{self.prefix}.norm_shift", gb)
        gx, gw, gbias = ops.conv3d_backward(self.xs, p, self.spec, self.mask, g, cols=self.cols)
        _acc(grads, f"{self.prefix}.weight", gw)
        _acc(grads, f"{self.prefix}.bias", gbias)
        if self.shift is not None:
            gx = ops.depth_shift_backward(gx, self.shift)
        return gx


def _acc(grads: dict, name: str, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g.copy()


@dataclass
class Tape:
    features: dict
    blocks: dict
    pool_idx: dict
    heads: list


def _shift_for(arch: ArchConfig, backbone: bool):
    if not arch.use_shift or (backbone and not arch.shift_backbone):
        return None
    return arch.shift


def backbone_forward(image, params: ModelParams, arch: ArchConfig, tape: Optional[Tape] = None):
    """Stage-0 features ``[x(0,1), ..., x(0,L)]``."""
    if image.ndim != 4 or image.shape[0] != arch.in_channels:
        raise ShapeError(f"image {image.shape} does not have {arch.in_channels} channels")
    for lvl, r in enumerate(arch.resample_ratios, start=1):
        shape = arch.level_shape(lvl - 1, image.shape[1:])
        if any(n % f for n, f in zip(shape, r)):
            raise ShapeError(f"image {image.shape[1:]} not divisible down to level {lvl}")
    feats = []
    x = image
    shift = _shift_for(arch, backbone=True)
    for lvl in range(1, arch.L + 1):
        for k in (0, 1):
            blk = _Block(f"backbone.{lvl}.{k}", arch.backbone_spec(lvl, k), shift, None)
            x = blk.forward(x, params)
            if tape is not None:
                tape.blocks[("backbone", lvl, k)] = blk
        feats.append(x)
    return feats


def _fusion_inputs(grid, j, i, params: ModelParams, arch: ArchConfig, tape: Optional[Tape]):
    parts = []
    if arch.exists(j - 1, i - 1):
        d, idx = ops.maxpool3d(grid[(j - 1, i - 1)], arch.ratio(i))
        parts.append(d)
        if tape is not None:
            tape.pool_idx[(j, i)] = idx
    if (j - 1, i) not in grid:
        raise ShapeError(f"node ({j - 1},{i}) missing for fusion node ({j},{i})")
    parts.append(grid[(j - 1, i)])
    if arch.exists(j - 1, i + 1):
        name = f"up.{j}.{i}.weight"
        p = LayerParams(params.tensors[name], params.tensors[f"up.{j}.{i}.bias"])
        parts.append(ops.transposed_conv3d(grid[(j - 1, i + 1)], p, arch.ratio(i + 1),
                                           params.mask_array(name)))
    return parts


def fusion_node_forward(grid: dict, j: int, i: int, params: ModelParams, arch: ArchConfig,
                        tape: Optional[Tape] = None):
    parts = _fusion_inputs(grid, j, i, params, arch, tape)
    x = ops.concat_channels(parts)
    blk = _Block(f"fusion.{j}.{i}", arch.fusion_spec(j, i), _shift_for(arch, backbone=False),
                 params.mask_array(f"fusion.{j}.{i}.weight"))
    out = blk.forward(x, params)
    expected = (arch.width(i),) + grid[(j - 1, i)].shape[1:]
    if out.shape != expected:
        raise ShapeError(f"node ({j},{i}) came out {out.shape}, expected {expected}")
    if tape is not None:
        tape.blocks[("fusion", j, i)] = blk
    return out


def forward(image, params: ModelParams, arch: ArchConfig, keep: bool = False):
    """Return deep-supervision logits (finest first); with ``keep`` also the tape."""
    tape = Tape({}, {}, {}, []) if keep else None
    grid = {}
    for lvl, f in enumerate(backbone_forward(image, params, arch, tape), start=1):
        grid[(0, lvl)] = f
    for j, i in arch.fusion_nodes():
        grid[(j, i)] = fusion_node_forward(grid, j, i, params, arch, tape)
    logits = []
    for j, i in arch.heads():
        spec = arch.head_spec(j, i)
        logits.append(ops.conv3d_forward(grid[(j, i)], params.layer(f"head.{j}.{i}"), spec))
    if tape is not None:
        tape.features = grid
        tape.heads = arch.heads()
        return logits, tape
    return logits


def backward(tape: Tape, grad_logits, params: ModelParams, arch: ArchConfig) -> dict:
    """Gradients of every parameter tensor given gradients of the head logits."""
    grads: dict = {}
    gfeat: dict = {}
    grid = tape.features
    for (j, i), g in zip(tape.heads, grad_logits):
        spec = arch.head_spec(j, i)
        gx, gw, gb = ops.conv3d_backward(grid[(j, i)], params.layer(f"head.{j}.{i}"), spec, None, g)
        _acc(grads, f"head.{j}.{i}.weight", gw)
        _acc(grads, f"head.{j}.{i}.bias", gb)
        _acc(gfeat, (j, i), gx)

    for j, i in reversed(arch.fusion_nodes()):
        g = gfeat.pop((j, i), None)
        if g is None:
            continue
        gcat = tape.blocks[("fusion", j, i)].backward(g, params, grads)
        down, fwd, up = arch.node_groups(j, i)
        sizes = [s for s in (down, fwd, up) if s]
        chunks = ops.split_channels(gcat, sizes)
        k = 0
        if down:
            _acc(gfeat, (j - 1, i - 1),
                 ops.maxpool3d_backward(chunks[k], tape.pool_idx[(j, i)], arch.ratio(i)))
            k += 1
        _acc(gfeat, (j - 1, i), chunks[k])
        k += 1
        if up:
            name = f"up.{j}.{i}.weight"
            p = LayerParams(params.tensors[name], params.tensors[f"up.{j}.{i}.bias"])
            gx, gw, gb = ops.transposed_conv3d_backward(
                grid[(j - 1, i + 1)], p, arch.ratio(i + 1), chunks[k], params.mask_array(name))
            _acc(grads, name, gw)
            _acc(grads, f"up.{j}.{i}.bias", gb)
            _acc(gfeat, (j - 1, i + 1), gx)

    carry = None
    for lvl in range(arch.L, 0, -1):
        g = gfeat.pop((0, lvl), None)
        if carry is not None:
            g = carry if g is None else g + carry
        if g is None:
            carry = None
            continue
        for k in (1, 0):
            g = tape.blocks[("backbone", lvl, k)].backward(g, params, grads)
        carry = g
    for name, v in params.tensors.items():
        if name not in grads:
            grads[name] = np.zeros_like(v)
    return grads


def num_parameters(params: ModelParams) -> int:
    return int(sum(v.size for v in params.tensors.values()))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, arch: ArchConfig, params: ModelParams, iteration: int,
                    extra: Optional[dict] = None):
    """Write manifest.json, weights.bin (little-endian float32) and topology.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "weights.bin", "wb") as fh:
        for name, v in params.tensors.items():
            data = np.ascontiguousarray(v, dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(v.shape), "offset": offset, "count": int(v.size)})
            offset += int(v.size)
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": arch.to_dict(),
        "S": arch.S if arch.use_dsff else 0.0,
        "iteration": int(iteration),
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    masks = sorted(params.masks.values(), key=lambda m: (m.kind != "fusion", m.stage, m.level))
    (directory / "topology.json").write_text(json.dumps(dump_topology(masks)))


class CheckpointError(ValueError):
    pass


def load_checkpoint(directory):
    """Return ``(arch, params, manifest)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        raw = np.fromfile(directory / "weights.bin", dtype="<f4")
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint in {directory}: {e.filename}") from None
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema')}")
    arch = ArchConfig.from_dict(manifest["arch"])
    tensors = {}
    for e in manifest["tensors"]:
        a, n = e["offset"], e["count"]
        if a + n > raw.size:
            raise CheckpointError("weights.bin is truncated")
        tensors[e["name"]] = raw[a:a + n].astype(DTYPE).reshape(e["shape"])
    masks = {}
    topo = directory / "topology.json"
    if topo.exists():
        masks = {m.key: m for m in load_topology(json.loads(topo.read_text()))}
    return arch, ModelParams(tensors, masks), manifest
