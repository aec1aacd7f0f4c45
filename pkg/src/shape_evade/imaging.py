"""Grayscale image container, raster I/O, perturbation norms, eps-ball clipping.

Images are float64 grids in [0,1]. Two on-disk formats:
  .pgm  8-bit binary portable graymap (magic P5), bit-exact round-trip
  .f32  little-endian float32 rows behind an 8-byte header (u32 width, u32 height)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, ImageFormatError

MIN_SIDE = 32  # detector receptive-field floor


@dataclass(frozen=True)
class Image:
    """Row-major grayscale raster with values in [0,1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ImageFormatError(f"expected a 2-d raster, got shape {arr.shape}")
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            raise ImageFormatError(
                f"raster {arr.shape[1]}x{arr.shape[0]} below the {MIN_SIDE}px floor"
            )
        if not np.all(np.isfinite(arr)):
            raise ImageFormatError("raster contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageFormatError("raster values outside [0,1]")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PerturbationStats:
    """Norms of the difference between a perturbed image and its original."""

    l2: float
    linf: float
    mse: float


def _require_same_shape(a: Image, b: Image):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def perturbation_stats(original: Image, perturbed: Image) -> PerturbationStats:
    """l2, linf, and per-pixel mean squared difference of (perturbed - original)."""
    _require_same_shape(original, perturbed)
    diff = perturbed.data - original.data
    sumsq = float(np.sum(diff * diff))
    n = diff.size
    return PerturbationStats(
        l2=float(np.sqrt(sumsq)),
        linf=float(np.max(np.abs(diff))) if n else 0.0,
        mse=sumsq / n,
    )


def clip_to_ball(candidate: Image, center: Image, epsilon: float) -> Image:
    """Project candidate into the linf ball of radius epsilon around center, then [0,1].

    Pixels already inside the ball pass through bit-identically.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    _require_same_shape(candidate, center)
    lo = np.maximum(center.data - epsilon, 0.0)
    hi = np.minimum(center.data + epsilon, 1.0)
    return Image(np.clip(candidate.data, lo, hi))


def rms_diff(a: Image, b: Image) -> float:
    """Root-mean-square per-pixel difference; the resolution-free budget measure."""
    return float(np.sqrt(perturbation_stats(a, b).mse))


# ---------------------------------------------------------------------------
# File I/O


def load_image(path) -> Image:
    """Read a .pgm (8-bit P5) or .f32 raster; values scaled to [0,1]."""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"no such image file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return _load_pgm(path)
    if suffix == ".f32":
        return _load_f32(path)
    raise ImageFormatError(f"unsupported raster format: {path.name}")


def save_image(path, image: Image):
    """Write a raster in the format implied by the path suffix (.pgm or .f32)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        _save_pgm(path, image)
    elif suffix == ".f32":
        _save_f32(path, image)
    else:
        raise ImageFormatError(f"unsupported raster format: {path.name}")


def _load_pgm(path: Path) -> Image:
    raw = path.read_bytes()
    if raw[:2] != b"P5":
        raise ImageFormatError(f"{path.name}: not a binary graymap (magic {raw[:2]!r})")
    # header tokens: magic, width, height, maxval; '#' comments run to end of line
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path.name}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path.name}: malformed header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path.name}: unsupported bit depth (maxval {maxval})")
    expected = width * height
    pixels = np.frombuffer(raw, dtype=np.uint8, count=-1, offset=pos)
    if pixels.size != expected:
        raise ImageFormatError(
            f"{path.name}: payload has {pixels.size} bytes, expected {expected}"
        )
    return Image(pixels.reshape(height, width).astype(np.float64) / 255.0)


def _save_pgm(path: Path, image: Image):
    quantized = np.rint(image.data * 255.0).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    path.write_bytes(header + quantized.tobytes())


def _load_f32(path: Path) -> Image:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ImageFormatError(f"{path.name}: truncated header")
    width, height = struct.unpack_from("<II", raw, 0)
    expected = 8 + 4 * width * height
    if len(raw) != expected:
        raise ImageFormatError(
            f"{path.name}: file is {len(raw)} bytes, expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=8).reshape(height, width)
    return Image(data.astype(np.float64))


def _save_f32(path: Path, image: Image):
    payload = image.data.astype("<f4").tobytes()
    path.write_bytes(struct.pack("<II", image.width, image.height) + payload)
