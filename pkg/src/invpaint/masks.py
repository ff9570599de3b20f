"""Random inpainting masks and exact image-to-latent downsampling.

Mask convention: 1 marks the region to fill, 0 the kept context. Families:
polygonal thick/thin strokes, random rectangles, exact half-image splits,
and a mixed sampler over all of them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

FAMILIES = ("thick_stroke", "thin_stroke", "rectangle", "half_image", "mixed")


@dataclass(frozen=True)
class MaskPair:
    M: np.ndarray  # (H, W) image-resolution binary mask
    m: np.ndarray  # latent-resolution counterpart

    def __post_init__(self):
        for arr in (self.M, self.m):
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be exactly 0 or 1")


def require_binary(m: np.ndarray, what: str = "mask") -> None:
    vals = np.asarray(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{what} must be binary (0/1)")


def downsample_mask(M: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool (any-masked) rule; a partially covered cell counts as masked."""
    h, w = M.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"resolution {M.shape} not divisible by factor {factor}")
    require_binary(M)
    if factor == 1:
        return M.copy()
    return (
        M.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))
    ).astype(M.dtype)


def _coverage(M: np.ndarray) -> float:
    return float(M.mean())


def _stroke(res: int, rng: RngStream, radius: int) -> np.ndarray:
    """Random polyline rasterized with a round brush."""
    M = np.zeros((res, res), dtype=np.float32)
    n_pts = int(rng.integers(3, 7))
    pts = rng.uniform(0, res - 1, shape=(n_pts, 2), dtype=np.float64)
    yy, xx = np.mgrid[0:res, 0:res]
    for (y0, x0), (y1, x1) in zip(pts, pts[1:]):
        length = max(abs(y1 - y0), abs(x1 - x0))
        n_samp = int(length * 2) + 2
        for s in np.linspace(0.0, 1.0, n_samp):
            cy, cx = y0 + s * (y1 - y0), x0 + s * (x1 - x0)
            M[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = 1.0
    return M


def _rectangle(res: int, rng: RngStream, bounds) -> np.ndarray:
    lo, hi = bounds
    target = float(rng.uniform(lo, hi))
    area = target * res * res
    aspect = float(rng.uniform(0.5, 2.0))
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, res))
    w = int(np.clip(round(area / h), 1, res))
    y0 = int(rng.integers(0, res - h + 1))
    x0 = int(rng.integers(0, res - w + 1))
    M = np.zeros((res, res), dtype=np.float32)
    M[y0 : y0 + h, x0 : x0 + w] = 1.0
    return M


def _half_image(res: int, rng: RngStream) -> np.ndarray:
    side = int(rng.integers(0, 4))
    M = np.zeros((res, res), dtype=np.float32)
    half = res // 2
    if side == 0:
        M[:half] = 1.0
    elif side == 1:
        M[half:] = 1.0
    elif side == 2:
        M[:, :half] = 1.0
    else:
        M[:, half:] = 1.0
    return M


def sample_mask(resolution: int, family: str, rng: RngStream,
                coverage=(0.1, 0.6), factor: int = 1,
                max_tries: int = 64) -> MaskPair:
    """Binary mask of the requested family with coverage inside bounds.

    half_image always covers exactly 0.5 and ignores the bounds.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown mask family {family!r}; have {FAMILIES}")
    lo, hi = coverage
    if not (0.0 < lo < hi <= 1.0):
        raise ValueError(f"bad coverage bounds {coverage}")
    if family == "half_image":
        M = _half_image(resolution, rng)
        return MaskPair(M=M, m=downsample_mask(M, factor))
    if family == "mixed":
        pick = FAMILIES[int(rng.integers(0, 4))]
        return sample_mask(resolution, pick, rng, coverage, factor, max_tries)

    radius = max(1, resolution // 8) if family == "thick_stroke" else 1
    for _ in range(max_tries):
        if family == "rectangle":
            M = _rectangle(resolution, rng, coverage)
        else:
            M = _stroke(resolution, rng, radius)
            # grow with extra strokes while under the floor
            for _ in range(8):
                if _coverage(M) >= lo:
                    break
                M = np.maximum(M, _stroke(resolution, rng, radius))
        if lo <= _coverage(M) <= hi:
            return MaskPair(M=M, m=downsample_mask(M, factor))
    raise RuntimeError(
        f"could not draw a {family} mask with coverage in {coverage} "
        f"at resolution {resolution}"
    )


# -- packed 1-bit serialization ---------------------------------------

_MAGIC = b"MSK1"


def save_mask(path, M: np.ndarray) -> None:
    """16-byte header (magic, u32 width, u32 height, u32 reserved), then
    1-bit-per-pixel rows, each padded to a byte boundary."""
    require_binary(M)
    h, w = M.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", w, h, 0))
        for row in M.astype(np.uint8):
            f.write(np.packbits(row).tobytes())


def load_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("bad mask magic")
        w, h, _ = struct.unpack("<III", f.read(12))
        row_bytes = (w + 7) // 8
        rows = []
        for _ in range(h):
            packed = np.frombuffer(f.read(row_bytes), dtype=np.uint8)
            rows.append(np.unpackbits(packed)[:w])
    return np.stack(rows).astype(np.float32)
