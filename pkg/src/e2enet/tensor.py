"""Dense float32 tensors, seeded generators and kernel initialization.

Tensors are plain ``numpy.ndarray`` objects in row-major order. Feature maps
use the axis order ``[C, D, H, W]`` so a depth shift is a block move along
axis 1; kernels use ``[Cout, Cin, Kd, Kh, Kw]``.

Random streams come from numpy's PCG64 bit generator (128-bit LCG state with
a permuted output function), always constructed from an explicit integer seed
so that no system entropy is ever consulted.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float32

Rng = np.random.Generator


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible."""


def make_rng(seed: int) -> Rng:
    """Return a PCG64 generator seeded deterministically from ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[Rng]:
    """Independent child streams derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def fan_in_bound(shape) -> float:
    _, cin, kd, kh, kw = shape
    return float(np.sqrt(1.0 / (cin * kd * kh * kw)))


def init_kernel(rng: Rng, shape) -> np.ndarray:
    """Uniform fan-in initialization on ``[-b, b]``, ``b = sqrt(1/(Cin*Kd*Kh*Kw))``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"kernel shape must have 5 axes, got {shape}")
    if min(shape) < 1:
        raise ShapeError(f"kernel shape has a zero extent: {shape}")
    b = fan_in_bound(shape)
    return rng.uniform(-b, b, size=shape).astype(DTYPE)


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(a, b)


def pad_crop_depth(x: np.ndarray, offset: int) -> np.ndarray:
    """Move every depth slice of ``x[C, D, H, W]`` by ``offset``, zero filling."""
    depth = x.shape[1]
    if abs(offset) >= depth:
        raise ShapeError(f"|offset|={abs(offset)} leaves nothing of depth {depth}")
    out = np.zeros_like(x)
    if offset > 0:
        out[:, offset:] = x[:, :-offset]
    elif offset < 0:
        out[:, :offset] = x[:, -offset:]
    else:
        out[...] = x
    return out
