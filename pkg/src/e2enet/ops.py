"""Layer primitives with hand-written backward passes.

Every function works on a single sample laid out ``[C, D, H, W]``. Backward
functions take the forward inputs again (plus optional cached intermediates)
and return gradients in the same order as the forward arguments.

Computation follows the dtype of the inputs, so float64 arrays can be pushed
through for finite-difference checks while training stays in float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 extents, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 3D convolution.

    ``padding=None`` selects "same" padding ``(K-1)//2`` per axis, which
    requires odd kernel extents.
    """

    cin: int
    cout: int
    kernel: Triple = (1, 3, 3)
    stride: Triple = (1, 1, 1)
    padding: Optional[Triple] = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if self.padding is None:
            if any(k % 2 == 0 for k in self.kernel):
                raise ShapeError(f"same padding needs odd kernel extents, got {self.kernel}")
            object.__setattr__(self, "padding", tuple((k - 1) // 2 for k in self.kernel))
        else:
            object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1 or self.cin < 1 or self.cout < 1:
            raise ShapeError(f"invalid conv geometry: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.cout, self.cin) + self.kernel

    def out_shape(self, spatial) -> Triple:
        return tuple(
            (n + 2 * p - k) // s + 1
            for n, p, k, s in zip(spatial, self.padding, self.kernel, self.stride)
        )


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    norm_scale: Optional[np.ndarray] = None
    norm_shift: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ShiftSpec:
    """Per-group depth offsets; channels are split into ``len(offsets)`` groups."""

    offsets: tuple[int, ...] = (-1, 0, 1)

    def groups(self, channels: int) -> list[tuple[int, int, int]]:
        """Return ``(start, stop, offset)`` per group.

        Each group gets ``channels // n`` channels; the remainder joins the
        zero-offset group (the middle group if no offset is zero).
        """
        n = len(self.offsets)
        base = channels // n
        sizes = [base] * n
        extra = channels - base * n
        if 0 in self.offsets:
            sizes[self.offsets.index(0)] += extra
        else:
            sizes[n // 2] += extra
        out, start = [], 0
        for size, off in zip(sizes, self.offsets):
            out.append((start, start + size, off))
            start += size
        return out

    def channel_offsets(self, channels: int) -> np.ndarray:
        off = np.zeros(channels, dtype=int)
        for a, b, o in self.groups(channels):
            off[a:b] = o
        return off


def _check_mask(mask, cin, cout):
    if mask is not None and mask.shape != (cin, cout):
        raise ShapeError(f"mask shape {mask.shape} != ({cin}, {cout})")


def masked_weight(weight: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    """Multiply each kernel ``weight[co, ci]`` by ``mask[ci, co]``."""
    if mask is None:
        return weight
    return weight * mask.T.astype(weight.dtype)[:, :, None, None, None]


# --------------------------------------------------------------------------
# convolution


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Unfold ``x`` into a ``[Cin*K, N]`` matrix of receptive fields."""
    cin = x.shape[0]
    if cin != spec.cin:
        raise ShapeError(f"input has {cin} channels, conv expects {spec.cin}")
    pd, ph, pw = spec.padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(spec.padding) else x
    od, oh, ow = spec.out_shape(x.shape[1:])
    if min(od, oh, ow) < 1:
        raise ShapeError(f"input {x.shape} too small for {spec}")
    sd, sh, sw = spec.stride
    kd, kh, kw = spec.kernel
    cols = np.empty((cin, kd * kh * kw, od, oh, ow), dtype=x.dtype)
    t = 0
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[:, t] = xp[:, a:a + sd * (od - 1) + 1:sd,
                                b:b + sh * (oh - 1) + 1:sh,
                                c:c + sw * (ow - 1) + 1:sw]
                t += 1
    return cols.reshape(cin * kd * kh * kw, od * oh * ow)


def col2im(cols: np.ndarray, spec: ConvSpec, in_spatial) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    pd, ph, pw = spec.padding
    d, h, w = in_spatial
    od, oh, ow = spec.out_shape(in_spatial)
    sd, sh, sw = spec.stride
    kd, kh, kw = spec.kernel
    cols = cols.reshape(spec.cin, kd * kh * kw, od, oh, ow)
    gp = np.zeros((spec.cin, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    t = 0
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                gp[:, a:a + sd * (od - 1) + 1:sd,
                   b:b + sh * (oh - 1) + 1:sh,
                   c:c + sw * (ow - 1) + 1:sw] += cols[:, t]
                t += 1
    return gp[:, pd:pd + d, ph:ph + h, pw:pw + w]


def conv3d_forward(x, p: LayerParams, spec: ConvSpec, mask=None, cols=None):
    """Cross-correlation with zero padding; kernels scaled by ``mask[ci, co]``."""
    _check_mask(mask, spec.cin, spec.cout)
    if p.weight.shape != spec.weight_shape:
        raise ShapeError(f"weight {p.weight.shape} != {spec.weight_shape}")
    if cols is None:
        cols = im2col(x, spec)
    w = masked_weight(p.weight, mask).reshape(spec.cout, -1)
    out = w @ cols
    if p.bias is not None:
        out += p.bias[:, None]
    return out.reshape((spec.cout,) + spec.out_shape(x.shape[1:]))


def conv3d_backward(x, p: LayerParams, spec: ConvSpec, mask, grad_out, cols=None):
    """Return ``(grad_x, grad_weight, grad_bias)`` of :func:`conv3d_forward`."""
    _check_mask(mask, spec.cin, spec.cout)
    expected = (spec.cout,) + spec.out_shape(x.shape[1:])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out {grad_out.shape} != forward output {expected}")
    if cols is None:
        cols = im2col(x, spec)
    g = grad_out.reshape(spec.cout, -1)
    w = masked_weight(p.weight, mask).reshape(spec.cout, -1)
    grad_w = (g @ cols.T).reshape(spec.weight_shape)
    grad_w = masked_weight(grad_w, mask)
    grad_x = col2im(w.T @ g, spec, x.shape[1:])
    grad_b = g.sum(axis=1) if p.bias is not None else None
    return grad_x, grad_w, grad_b


def transposed_conv3d(x, p: LayerParams, stride, mask=None):
    """Non-overlapping transposed convolution (kernel extents equal the stride).

    ``p.weight`` is laid out ``[Cout, Cin, sd, sh, sw]``; the output has
    spatial extents ``input * stride``.
    """
    sd, sh, sw = _triple(stride)
    cout, cin = p.weight.shape[:2]
    if p.weight.shape[2:] != (sd, sh, sw):
        raise ShapeError(f"kernel {p.weight.shape[2:]} must equal stride {(sd, sh, sw)}")
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels, expected {cin}")
    _check_mask(mask, cin, cout)
    _, d, h, w = x.shape
    wm = masked_weight(p.weight, mask).transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    y = (wm @ x.reshape(cin, -1)).reshape(cout, sd, sh, sw, d, h, w)
    y = y.transpose(0, 4, 1, 5, 2, 6, 3).reshape(cout, d * sd, h * sh, w * sw)
    if p.bias is not None:
        y = y + p.bias[:, None, None, None]
    return y


def transposed_conv3d_backward(x, p: LayerParams, stride, grad_out, mask=None):
    sd, sh, sw = _triple(stride)
    cout, cin = p.weight.shape[:2]
    _, d, h, w = x.shape
    if grad_out.shape != (cout, d * sd, h * sh, w * sw):
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward output")
    g = grad_out.reshape(cout, d, sd, h, sh, w, sw).transpose(0, 2, 4, 6, 1, 3, 5)
    g = g.reshape(cout * sd * sh * sw, d * h * w)
    wm = masked_weight(p.weight, mask).transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    grad_x = (wm.T @ g).reshape(x.shape)
    grad_w = (g @ x.reshape(cin, -1).T).reshape(cout, sd, sh, sw, cin).transpose(0, 4, 1, 2, 3)
    grad_w = masked_weight(np.ascontiguousarray(grad_w), mask)
    grad_b = grad_out.sum(axis=(1, 2, 3)) if p.bias is not None else None
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# depth shift


def depth_shift(x, spec: ShiftSpec = ShiftSpec()):
    """Shift contiguous channel groups along depth with zero fill."""
    depth = x.shape[1]
    if depth < 2:
        raise ShapeError(f"depth shift needs D >= 2, got D={depth}")
    out = np.zeros_like(x)
    for a, b, off in spec.groups(x.shape[0]):
        if a == b:
            continue
        if abs(off) >= depth:
            continue
        if off > 0:
            out[a:b, off:] = x[a:b, :-off]
        elif off < 0:
            out[a:b, :off] = x[a:b, -off:]
        else:
            out[a:b] = x[a:b]
    return out


def depth_shift_backward(grad_out, spec: ShiftSpec = ShiftSpec()):
    # the adjoint of a zero-filled shift is the opposite shift
    return depth_shift(grad_out, ShiftSpec(tuple(-o for o in spec.offsets)))


# --------------------------------------------------------------------------
# pooling


def maxpool3d(x, window):
    """Max over non-overlapping windows; returns ``(out, argmax)``.

    ``argmax`` holds the flat position of the winner inside each window
    (first occurrence on ties), which is all the backward pass needs.
    """
    wd, wh, ww = _triple(window)
    c, d, h, w = x.shape
    if d % wd or h % wh or w % ww:
        raise ShapeError(f"extents {(d, h, w)} not divisible by window {(wd, wh, ww)}")
    od, oh, ow = d // wd, h // wh, w // ww
    blocks = x.reshape(c, od, wd, oh, wh, ow, ww).transpose(0, 1, 3, 5, 2, 4, 6)
    blocks = blocks.reshape(c, od, oh, ow, wd * wh * ww)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool3d_backward(grad_out, idx, window):
    wd, wh, ww = _triple(window)
    c, od, oh, ow = grad_out.shape
    blocks = np.zeros((c, od, oh, ow, wd * wh * ww), dtype=grad_out.dtype)
    np.put_along_axis(blocks, idx[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(c, od, oh, ow, wd, wh, ww).transpose(0, 1, 4, 2, 5, 3, 6)
    return blocks.reshape(c, od * wd, oh * wh, ow * ww)


# --------------------------------------------------------------------------
# normalization and activation


def _in_stats(x, eps):
    axes = (1, 2, 3)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return mean, inv_std


def instance_norm(x, scale, shift, eps: float = 1e-5):
    mean, inv_std = _in_stats(x, eps)
    xhat = (x - mean) * inv_std
    return (xhat * scale[:, None, None, None] + shift[:, None, None, None]).astype(x.dtype, copy=False)


def instance_norm_backward(x, scale, grad_out, eps: float = 1e-5):
    """Return ``(grad_x, grad_scale, grad_shift)``."""
    mean, inv_std = _in_stats(x, eps)
    xhat = (x - mean) * inv_std
    axes = (1, 2, 3)
    grad_shift = grad_out.sum(axis=axes)
    grad_scale = (grad_out * xhat).sum(axis=axes)
    gxhat = grad_out * scale[:, None, None, None]
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    grad_x = inv_std * (gxhat - m1 - xhat * m2)
    return grad_x.astype(x.dtype, copy=False), grad_scale, grad_shift


def leaky_relu(x, slope: float = 0.01):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x, grad_out, slope: float = 0.01):
    return np.where(x >= 0, grad_out, grad_out * grad_out.dtype.type(slope))


# --------------------------------------------------------------------------
# concatenation


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    spatial = {p.shape[1:] for p in parts}
    if len(spatial) != 1:
        raise ShapeError(f"spatial extents differ: {sorted(spatial)}")
    return np.concatenate(parts, axis=0)


def split_channels(grad: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Backward of :func:`concat_channels`."""
    return np.split(grad, np.cumsum(sizes)[:-1], axis=0)
