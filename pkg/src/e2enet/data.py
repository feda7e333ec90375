"""Synthetic phantoms, the E2EV volume format, patch sampling and tiled inference.

E2EV layout (all integers little-endian)::

    b"E2EV" | u32 version=1 | u32 C, D, H, W | u8 has_labels
    | float32 image [C, D, H, W] | u8 labels [D, H, W] (if has_labels)

Each volume ``<id>.e2ev`` may carry a ``<id>.json`` sidecar with provenance.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .tensor import DTYPE, Rng, ShapeError

MAGIC = b"E2EV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB")


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


@dataclass
class VolumeRecord:
    image: np.ndarray  # float32 [C, D, H, W]
    labels: Optional[np.ndarray]  # uint8 [D, H, W]
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 4:
            raise ShapeError(f"image must be [C,D,H,W], got {self.image.shape}")
        if self.labels is not None and self.labels.shape != self.image.shape[1:]:
            raise ShapeError(f"labels {self.labels.shape} vs image {self.image.shape}")

    @property
    def shape(self):
        return tuple(self.image.shape[1:])


# --------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomSpec:
    num_classes: int = 3
    shape: tuple = (16, 32, 32)
    ellipsoids: tuple = (1, 3)
    radius: tuple = (3.0, 6.0)
    intensity: tuple = (1.0, 2.0)
    intensity_sigma: float = 0.1
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.ellipsoids = tuple(int(n) for n in self.ellipsoids)
        self.radius = tuple(float(r) for r in self.radius)
        self.intensity = tuple(float(v) for v in self.intensity)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ShapeError(f"bad volume shape {self.shape}")
        lo, hi = self.ellipsoids
        if not 1 <= lo <= hi:
            raise ValueError(f"bad ellipsoid count range {self.ellipsoids}")
        rmin, rmax = self.radius
        if not 0 < rmin <= rmax:
            raise ValueError(f"bad radius range {self.radius}")
        if 2 * rmax > min(self.shape):
            raise ShapeError(f"radius {rmax} does not fit inside {self.shape}")
        if len(self.intensity) != self.num_classes - 1:
            # one offset per structure class; a 2-tuple is treated as a linear ramp
            if len(self.intensity) == 2:
                a, b = self.intensity
                n = self.num_classes - 1
                self.intensity = tuple(float(a + (b - a) * k / max(n - 1, 1)) for k in range(n))
            else:
                raise ValueError(f"need {self.num_classes - 1} class intensities")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


def _phantom(spec: PhantomSpec, rng: Rng, rid: str) -> VolumeRecord:
    d, h, w = spec.shape
    image = rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    rmin, rmax = spec.radius
    for cls in range(1, spec.num_classes):
        for _ in range(int(rng.integers(spec.ellipsoids[0], spec.ellipsoids[1] + 1))):
            r = rng.uniform(rmin, rmax, size=3)
            c = [rng.uniform(ri, n - ri) for ri, n in zip(r, spec.shape)]
            inside = ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2 <= 1.0
            labels[inside] = cls
    for cls in range(1, spec.num_classes):
        sel = labels == cls
        image[sel] += spec.intensity[cls - 1] + rng.normal(0.0, spec.intensity_sigma)
    return VolumeRecord(image[None].astype(DTYPE), labels, rid)


def synth_generate(spec: PhantomSpec, count: int, seed: Optional[int] = None, start: int = 0):
    """``count`` phantoms; record ``k`` depends only on ``(seed, k)``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    seed = spec.seed if seed is None else seed
    out = []
    for k in range(start, start + count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), k])))
        out.append(_phantom(spec, rng, f"phantom_{k:04d}"))
    return out


# --------------------------------------------------------------------------
# volume files


def encode_volume(rec: VolumeRecord) -> bytes:
    c, d, h, w = rec.image.shape
    has = rec.labels is not None
    parts = [_HEADER.pack(MAGIC, VERSION, c, d, h, w, int(has)),
             np.ascontiguousarray(rec.image, dtype="<f4").tobytes()]
    if has:
        if rec.labels.size and (rec.labels.min() < 0 or rec.labels.max() > 255):
            raise ValueError("labels must fit in one byte")
        parts.append(np.ascontiguousarray(rec.labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_volume(buf: bytes, rid: str = "") -> VolumeRecord:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not an E2EV volume (magic {buf[:4]!r})")
    if len(buf) < _HEADER.size:
        raise TruncatedVolumeError("header is truncated")
    _, version, c, d, h, w, has = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"E2EV version {version}, expected {VERSION}")
    n_img = c * d * h * w
    need = _HEADER.size + 4 * n_img + (d * h * w if has else 0)
    if len(buf) < need:
        raise TruncatedVolumeError(f"payload has {len(buf)} bytes, expected {need}")
    if len(buf) > need:
        raise VolumeFormatError(f"{len(buf) - need} trailing bytes")
    off = _HEADER.size
    image = np.frombuffer(buf, dtype="<f4", count=n_img, offset=off).astype(DTYPE).reshape(c, d, h, w)
    labels = None
    if has:
        labels = np.frombuffer(buf, dtype=np.uint8, count=d * h * w,
                               offset=off + 4 * n_img).reshape(d, h, w).copy()
    return VolumeRecord(image, labels, rid)


def write_volume(rec: VolumeRecord, path, sidecar: Optional[dict] = None):
    path = Path(path)
    path.write_bytes(encode_volume(rec))
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_volume(path) -> VolumeRecord:
    path = Path(path)
    return decode_volume(path.read_bytes(), path.stem)


def write_dataset(out_dir, records, spec: PhantomSpec, seed: int) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        fname = f"{rec.id}.e2ev"
        write_volume(rec, out_dir / fname, {"id": rec.id, "generator": "phantom", "seed": seed})
        entries.append({"id": rec.id, "path": fname, "shape": list(rec.image.shape),
                        "num_classes": spec.num_classes})
    manifest = {"records": entries, "seed": seed, "spec": spec.to_dict()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(data_dir):
    """Records listed in ``manifest.json`` and the manifest itself."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    records = [read_volume(data_dir / e["path"]) for e in manifest["records"]]
    for rec, e in zip(records, manifest["records"]):
        rec.id = e["id"]
    return records, manifest


def dataset_digest(records) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(encode_volume(rec))
    return h.hexdigest()


# --------------------------------------------------------------------------
# sampling


@dataclass
class AugmentSpec:
    flip: bool = True
    noise_sigma: float = 0.0


def sample_patch(rec: VolumeRecord, patch_shape, augment: Optional[AugmentSpec], rng: Rng):
    """Uniform random crop with optional flips (image and labels) and noise (image only)."""
    patch_shape = tuple(int(p) for p in patch_shape)
    if any(p > n for p, n in zip(patch_shape, rec.shape)):
        raise ShapeError(f"patch {patch_shape} larger than volume {rec.shape}")
    starts = [int(rng.integers(0, n - p + 1)) for p, n in zip(patch_shape, rec.shape)]
    sl = tuple(slice(s, s + p) for s, p in zip(starts, patch_shape))
    img = rec.image[(slice(None),) + sl]
    lab = rec.labels[sl]
    if augment is not None:
        if augment.flip:
            for ax in range(3):
                if rng.random() < 0.5:
                    img = np.flip(img, axis=ax + 1)
                    lab = np.flip(lab, axis=ax)
        if augment.noise_sigma > 0:
            img = img + rng.normal(0.0, augment.noise_sigma, size=img.shape).astype(DTYPE)
    return np.ascontiguousarray(img, dtype=DTYPE), np.ascontiguousarray(lab)


def downsample_labels(labels, factor):
    """Nearest-neighbour subsampling: keep the first voxel of every cell."""
    fd, fh, fw = (int(f) for f in factor)
    d, h, w = labels.shape
    if d % fd or h % fh or w % fw:
        raise ShapeError(f"labels {labels.shape} not divisible by {(fd, fh, fw)}")
    return np.ascontiguousarray(labels[::fd, ::fh, ::fw])


def upsample_linear(x, factor):
    """Separable linear interpolation of ``x[C, d, h, w]`` by integer ``factor``.

    Coarse voxel ``k`` sits at fine coordinate ``k * f`` (the cell corner kept by
    :func:`downsample_labels`); positions past the last sample are clamped.
    """
    for ax, f in enumerate(factor, start=1):
        f = int(f)
        if f == 1:
            continue
        n = x.shape[ax]
        pos = np.arange(n * f) / f
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        t = (pos - lo).astype(x.dtype)
        shape = [1] * x.ndim
        shape[ax] = -1
        t = t.reshape(shape)
        x = np.take(x, lo, axis=ax) * (1 - t) + np.take(x, hi, axis=ax) * t
    return x


# --------------------------------------------------------------------------
# sliding-window inference


@dataclass
class SlidingWindowSpec:
    window: tuple
    overlap: float = 0.5

    def __post_init__(self):
        self.window = tuple(int(w) for w in self.window)
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if min(self.window) < 1:
            raise ShapeError(f"bad window {self.window}")

    @property
    def stride(self):
        return tuple(max(1, int(w * (1.0 - self.overlap))) for w in self.window)


def window_starts(n: int, w: int, s: int) -> list[int]:
    """Window origins along one axis of extent ``n >= w``; the last one is flush with the end."""
    starts = list(range(0, n - w + 1, s))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def softmax(logits, axis=0):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sliding_window_probs(predict: Callable, image, spec: SlidingWindowSpec, num_classes: int):
    """Averaged class probabilities and the per-voxel window counts.

    ``predict(patch[C, *window])`` returns probabilities ``[N, *window]``.
    """
    shape = image.shape[1:]
    pad = [(0, max(0, w - n)) for n, w in zip(shape, spec.window)]
    padded = np.pad(image, [(0, 0)] + pad)
    full = padded.shape[1:]
    acc = np.zeros((num_classes,) + full, dtype=np.float64)
    weight = np.zeros(full, dtype=np.float64)
    axes = [window_starts(n, w, s) for n, w, s in zip(full, spec.window, spec.stride)]
    for a in axes[0]:
        for b in axes[1]:
            for c in axes[2]:
                sl = (slice(a, a + spec.window[0]), slice(b, b + spec.window[1]),
                      slice(c, c + spec.window[2]))
                acc[(slice(None),) + sl] += predict(padded[(slice(None),) + sl])
                weight[sl] += 1.0
    probs = acc / weight
    crop = tuple(slice(0, n) for n in shape)
    return probs[(slice(None),) + crop], weight[crop]


def model_predictor(params, arch):
    """Probability function for one window: finest head, upsampled to window resolution."""
    from .model import forward

    factor = arch.cumulative_ratio(1)

    def predict(patch):
        logits = forward(patch, params, arch)[0]
        return upsample_linear(softmax(logits.astype(np.float64)), factor)

    return predict


def sliding_window_infer(params, arch, image, spec: Optional[SlidingWindowSpec] = None):
    spec = spec or SlidingWindowSpec(arch.patch)
    if spec.window != arch.patch:
        raise ShapeError(f"window {spec.window} differs from model patch {arch.patch}")
    probs, _ = sliding_window_probs(model_predictor(params, arch), image, spec, arch.num_classes)
    return probs.argmax(axis=0).astype(np.uint8)

