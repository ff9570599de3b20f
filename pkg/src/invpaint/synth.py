"""Procedural shape images with class-label conditioning.

Four classes (disk, square, cross, stripes) on a small grayscale canvas,
with jittered position, size, and intensity. Values live in [-1, 1] to match
the diffusion noise scale; the working latent space is pixel space (identity
encoder/decoder).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

CLASS_NAMES = ("disk", "square", "cross", "stripes")


@dataclass(frozen=True)
class SynthSpec:
    resolution: int = 16
    channels: int = 1
    n_classes: int = 4
    pos_jitter: int = 2
    size_jitter: int = 1
    intensity_jitter: float = 0.15

    def __post_init__(self):
        r = self.resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in [1, {len(CLASS_NAMES)}]")


def gen_image(spec: SynthSpec, class_id: int, rng: RngStream) -> np.ndarray:
    """One (C,H,W) float32 image in [-1, 1] for the given class."""
    if not 0 <= class_id < spec.n_classes:
        raise ValueError(f"class_id {class_id} outside [0, {spec.n_classes})")
    r = spec.resolution
    jit = rng.uniform(-1.0, 1.0, shape=(5,), dtype=np.float64)
    cx = r // 2 + int(round(jit[0] * spec.pos_jitter))
    cy = r // 2 + int(round(jit[1] * spec.pos_jitter))
    half = max(2, r // 4 + int(round(jit[2] * spec.size_jitter)))
    fg = 0.8 + jit[3] * spec.intensity_jitter
    bg = -0.8 + jit[4] * spec.intensity_jitter

    yy, xx = np.mgrid[0:r, 0:r]
    name = CLASS_NAMES[class_id]
    if name == "disk":
        sel = (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    elif name == "square":
        sel = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    elif name == "cross":
        arm = max(1, half // 2)
        sel = ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= half)) | (
            (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= half)
        )
    else:  # stripes
        period = max(3, r // 4)
        phase = int(round(jit[0] * spec.pos_jitter)) % period
        sel = ((yy + phase) % period) < period // 2

    img = np.full((r, r), bg, dtype=np.float32)
    img[sel] = fg
    img = np.clip(img, -1.0, 1.0)
    return np.broadcast_to(img, (spec.channels, r, r)).copy()


def gen_batch(spec: SynthSpec, batch: int, class_rng: RngStream,
              shape_rng: RngStream):
    """(images (N,C,H,W), classes (N,)) with uniformly sampled classes.

    Class draws and shape jitter come from separate streams, so changing
    one does not perturb the other.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    classes = class_rng.integers(0, spec.n_classes, shape=(batch,)).astype(np.int64)
    images = np.stack([gen_image(spec, int(c), shape_rng) for c in classes])
    return images, classes


# -- flat binary dump --------------------------------------------------

_MAGIC = b"SYNW1"


def save_dataset(path, spec: SynthSpec, images: np.ndarray,
                 classes: np.ndarray) -> None:
    """Flat records: magic, u32 resolution/channels/count, then per record
    a class byte followed by row-major little-endian float32 pixels."""
    n = len(classes)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", spec.resolution, spec.channels, n))
        for img, c in zip(images, classes):
            f.write(struct.pack("<B", int(c)))
            f.write(img.astype("<f4").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != _MAGIC:
            raise ValueError(f"bad dataset magic {magic!r}")
        res, ch, n = struct.unpack("<III", f.read(12))
        px = res * res * ch
        images = np.empty((n, ch, res, res), dtype=np.float32)
        classes = np.empty(n, dtype=np.int64)
        for i in range(n):
            classes[i] = struct.unpack("<B", f.read(1))[0]
            images[i] = np.frombuffer(f.read(4 * px), dtype="<f4").reshape(ch, res, res)
    return images, classes
