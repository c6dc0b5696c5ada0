"""Image/mask/field containers and their binary file formats.

Images are plain ``float32`` numpy arrays shaped ``(H, W, C)`` with C in {1, 3}
and values in [0, 1].  Masks are ``(H, W)`` float32 arrays holding exactly 0.0
(known) or 1.0 (missing).  Real-valued per-pixel fields travel as
:class:`FieldMap`, which carries a role tag used by the ``SPLT`` file format.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import DimensionError, DomainError, FormatError

ROLE_CODES = {
    "generic": 0,
    "edge": 1,
    "distance": 2,
    "amplitude": 3,
    "splat": 4,
    "attention": 5,
    "mask": 6,
}
ROLE_NAMES = {code: name for name, code in ROLE_CODES.items()}

FIELD_MAGIC = b"SPLT"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sIIII")

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclass(frozen=True)
class FieldMap:
    data: np.ndarray
    role: str = "generic"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DimensionError(f"field must be 2-D, got shape {data.shape}")
        if self.role not in ROLE_CODES:
            raise ValueError(f"unknown field role {self.role!r}")
        if not np.all(np.isfinite(data)):
            raise DomainError(f"{self.role} field contains non-finite values")
        if self.role in ("edge", "distance") and np.any(data < 0):
            raise DomainError(f"{self.role} field must be non-negative")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def as_image(arr) -> np.ndarray:
    """Validate and return ``arr`` as a float32 ``(H, W, C)`` image."""
    img = np.asarray(arr, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DimensionError(f"image must be HxWx1 or HxWx3, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise DomainError("image values must be finite and lie in [0, 1]")
    return img


def as_mask(arr, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a binary mask (1 = missing) and return it as float32 ``(H, W)``."""
    mask = np.asarray(arr, dtype=np.float32)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise DomainError("mask values must be exactly 0 or 1")
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise DimensionError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    return mask


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma for RGB input; single-channel images pass through."""
    img = as_image(image)
    if img.shape[2] == 1:
        return img
    w = np.array([0.299, 0.587, 0.114], dtype=np.float64)
    gray = img.astype(np.float64) @ w
    return np.clip(gray, 0.0, 1.0).astype(np.float32)[:, :, None]


def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] then round half up to 8-bit."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


# ---------------------------------------------------------------- NetPBM

def _read_header(buf: bytes) -> tuple[str, int, int, int, int]:
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated NetPBM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after NetPBM maxval")
    magic = tokens[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"non-integer NetPBM header field: {exc}") from None
    return magic, width, height, maxval, pos + 1


def load_ppm(path) -> np.ndarray:
    """Read a binary P5 (gray) or P6 (RGB) file with maxval 255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, width, height, maxval, offset = _read_header(buf)
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path}: unsupported NetPBM magic {magic!r}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    channels = 1 if magic == "P5" else 3
    need = width * height * channels
    raster = buf[offset:offset + need]
    if len(raster) < need:
        raise OSError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.astype(np.float32) / np.float32(255.0))


def save_ppm(image: np.ndarray, path) -> None:
    """Write P5 or P6 depending on channel count; values are clamped first."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DimensionError(f"cannot save image of shape {img.shape}")
    data = quantize(img)
    magic = b"P5" if img.shape[2] == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.shape[1], img.shape[0])
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())


def save_mask_pgm(mask: np.ndarray, path) -> None:
    """Preview a mask as P5: byte 255 = missing, 0 = known."""
    save_ppm(as_mask(mask)[:, :, None], path)


def load_mask(path) -> np.ndarray:
    """Load a mask from a ``SPLT`` field file or a P5 preview (>=128 = missing)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FIELD_MAGIC:
        return as_mask(load_field(path).data)
    img = load_ppm(path)
    if img.shape[2] != 1:
        raise FormatError(f"{path}: mask image must be grayscale")
    return (img[:, :, 0] >= 0.5).astype(np.float32)


def field_to_pgm(field: FieldMap | np.ndarray, path) -> None:
    """Linear min-max export of a field to 8-bit gray for inspection."""
    data = field.data if isinstance(field, FieldMap) else np.asarray(field, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    scaled = np.zeros_like(data, dtype=np.float64) if hi == lo else (data - lo) / (hi - lo)
    save_ppm(scaled[:, :, None], path)


# ---------------------------------------------------------------- CIFAR-10

def cifar10_count(path) -> int:
    size = os.path.getsize(path)
    if size % CIFAR_RECORD:
        raise FormatError(f"{path}: length {size} is not a multiple of {CIFAR_RECORD}")
    return size // CIFAR_RECORD


def load_cifar10_batch(path, index: int) -> tuple[np.ndarray, int]:
    """Decode record ``index`` of a CIFAR-10 binary batch into (32x32x3 image, label)."""
    count = cifar10_count(path)
    if not 0 <= index < count:
        raise IndexError(f"record {index} out of range for {count} records in {path}")
    with open(path, "rb") as fh:
        fh.seek(index * CIFAR_RECORD)
        rec = fh.read(CIFAR_RECORD)
    label = rec[0]
    if label > 9:
        raise FormatError(f"{path}: record {index} has label byte {label}")
    planes = np.frombuffer(rec, dtype=np.uint8, offset=1).reshape(3, CIFAR_SIDE, CIFAR_SIDE)
    img = planes.transpose(1, 2, 0).astype(np.float32) / np.float32(255.0)
    return img, int(label)


# ---------------------------------------------------------------- SPLT fields

def save_field(field: FieldMap, path) -> None:
    h, w = field.shape
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, ROLE_CODES[field.role], h, w)
    with open(path, "wb") as fh:
        fh.write(header + field.data.astype("<f4").tobytes())


def load_field(path) -> FieldMap:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _FIELD_HEADER.size:
        raise FormatError(f"{path}: file too short for a field header")
    magic, version, role, h, w = _FIELD_HEADER.unpack_from(buf)
    if magic != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported field version {version}")
    if role not in ROLE_NAMES:
        raise FormatError(f"{path}: unknown role code {role}")
    payload = buf[_FIELD_HEADER.size:]
    if len(payload) != 4 * h * w:
        raise FormatError(f"{path}: header says {h}x{w} but payload has {len(payload)} bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
    return FieldMap(data, ROLE_NAMES[role])
