"""Datasets, IDX and PNM codecs, checkpoints."""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Labeled samples.

    ``kind == "images"``: ``images`` holds raw pixel values in [0, 255] shaped
    (n, C, H, W). ``kind == "points"``: real-valued vectors shaped (n, d) that
    need no preprocessing.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    kind: str = "images"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name, self.kind, dict(self.meta))


def gen_gaussians_2d(num_classes: int, n_per_class: int, spread: float, seed: int, radius: float = 1.0) -> Dataset:
    """Isotropic clusters with centroids evenly spaced on a circle."""
    if num_classes < 1 or n_per_class < 1 or spread < 0:
        raise ValueError("num_classes and n_per_class must be positive, spread nonnegative")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centroids = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = centroids[labels] + spread * rng.standard_normal((len(labels), 2))
    return Dataset(x, labels, num_classes, f"gaussians{num_classes}", "points", {"centroids": centroids, "spread": spread})


def gen_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaved half circles, ``n`` points each, roughly centered at 0."""
    if n < 1 or noise < 0:
        raise ValueError("n must be positive, noise nonnegative")
    rng = np.random.default_rng(seed)
    t = np.pi * rng.uniform(size=n)
    s = np.pi * rng.uniform(size=n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1 - np.cos(s), 0.5 - np.sin(s)], axis=1)
    x = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
    x += noise * rng.standard_normal(x.shape)
    labels = np.repeat([0, 1], n)
    return Dataset(x, labels, 2, "moons", "points")


SHAPE_NAMES = ("square", "circle", "cross")


def _shape_image(kind: str, side: int, size: float, value: float) -> np.ndarray:
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    dy, dx = yy - c, xx - c
    if kind == "square":
        mask = (np.abs(dy) <= size) & (np.abs(dx) <= size)
    elif kind == "circle":
        mask = dy**2 + dx**2 <= size**2
    elif kind == "cross":
        arm = max(0.5, size / 3.0)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= size)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= size))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return np.where(mask, value, 0.0)


def gen_shapes(n_per_class: int, side: int, seed: int) -> Dataset:
    """Centered filled square / circle / cross, grayscale, raw values in [0, 255].

    Size and brightness vary per sample; shapes stay centered so each is
    symmetric under quarter turns.
    """
    if n_per_class < 1 or side < 4:
        raise ValueError("n_per_class must be positive and side >= 4")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    half = (side - 1) / 2.0
    for c, kind in enumerate(SHAPE_NAMES):
        for _ in range(n_per_class):
            if kind == "square":
                size = rng.uniform(0.35, 0.6) * half
            elif kind == "circle":
                size = rng.uniform(0.7, 1.0) * half * 1.1
            else:
                size = rng.uniform(0.75, 1.0) * half
            value = float(np.round(rng.uniform(170, 255)))
            images.append(_shape_image(kind, side, size, value)[None])
            labels.append(c)
    return Dataset(np.stack(images), np.array(labels), len(SHAPE_NAMES), f"shapes{side}", "images")


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}


class IdxFormatError(ValueError):
    pass


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"truncated header: expected at least 4 bytes, got {len(buf)}")
    if buf[0] != 0 or buf[1] != 0:
        bad = 0 if buf[0] != 0 else 1
        raise IdxFormatError(f"bad magic byte 0x{buf[bad]:02x} at offset {bad}")
    code, rank = buf[2], buf[3]
    if code not in IDX_TYPES:
        raise IdxFormatError(f"unknown element type 0x{code:02x} at offset 2")
    header = 4 + 4 * rank
    if len(buf) < header:
        raise IdxFormatError(f"truncated header: expected {header} bytes, got {len(buf)}")
    dims = struct.unpack(f">{rank}I", buf[4:header])
    dtype = IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - header
    if actual != expected:
        raise IdxFormatError(f"payload size mismatch: expected {expected} bytes, got {actual}")
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise IdxFormatError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[native]
    head = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + array.astype(IDX_TYPES[code]).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


def load_idx_dataset(images_path, labels_path, name: Optional[str] = None) -> Dataset:
    """Pair an IDX image file (n, H, W) or (n, C, H, W) with a label file (n,)."""
    images = read_idx(images_path).astype(np.float64)
    labels = read_idx(labels_path).astype(np.int64)
    if labels.ndim != 1 or len(labels) != len(images):
        raise IdxFormatError(f"image file shape {images.shape} does not pair with label file shape {labels.shape}")
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise IdxFormatError(f"expected rank-3 or rank-4 image file, got shape {images.shape}")
    return Dataset(images, labels, int(labels.max()) + 1, name or Path(images_path).stem, "images")


# ---------------------------------------------------------------------------
# PNM images
# ---------------------------------------------------------------------------


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8 by round((v + 1) * 127.5); clips with a warning."""
    image = np.asarray(image, dtype=np.float64)
    if np.any(image < -1) or np.any(image > 1):
        warnings.warn("image values outside [-1, 1] were clipped", stacklevel=2)
        image = np.clip(image, -1, 1)
    return np.round((image + 1.0) * 127.5).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 127.5 - 1.0


def encode_pnm(image: np.ndarray) -> bytes:
    """P5 for (H, W) or (1, H, W); P6 for (3, H, W)."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim == 2:
        h, w = image.shape
        return f"P5\n{w} {h}\n255\n".encode() + to_bytes(image).tobytes()
    if image.ndim == 3 and image.shape[0] == 3:
        _, h, w = image.shape
        return f"P6\n{w} {h}\n255\n".encode() + to_bytes(image).transpose(1, 2, 0).tobytes()
    raise ValueError(f"cannot encode image of shape {image.shape}")


def write_pgm(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if not (image.ndim == 2 or (image.ndim == 3 and image.shape[0] == 1)):
        raise ValueError(f"PGM needs a grayscale image, got shape {image.shape}")
    Path(path).write_bytes(encode_pnm(image))


def write_ppm(image: np.ndarray, path) -> None:
    """Write (3, H, W) as P6; grayscale input is written as P5."""
    Path(path).write_bytes(encode_pnm(image))


def read_pnm(path) -> np.ndarray:
    """Inverse of :func:`write_ppm` for files this module wrote; values back in [-1, 1]."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode())
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise ValueError(f"unsupported PNM header {fields}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if magic == "P5":
        return from_bytes(raw.reshape(h, w))
    return from_bytes(raw.reshape(h, w, 3).transpose(2, 0, 1))


def tile_grid(images: np.ndarray, cols: int, pad: int = 1, pad_value: float = -1.0) -> np.ndarray:
    """Lay (n, C, H, W) images out row-major on a grid; returns (C, H', W')."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"tile_grid expects (n, C, H, W), got {images.shape}")
    n, c, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    out = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), pad_value)
    for k in range(n):
        r, q = divmod(k, cols)
        y = pad + r * (h + pad)
        x = pad + q * (w + pad)
        out[:, y : y + h, x : x + w] = images[k]
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"STIC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    descriptor: dict
    params: dict
    tau: int = 0
    seed: int = 0
    version: int = CHECKPOINT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    desc = json.dumps(ckpt.descriptor, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IIQ", ckpt.version, ckpt.tau, ckpt.seed)]
    parts.append(struct.pack("<I", len(desc)) + desc)
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, value in ckpt.params.items():
        value = np.asarray(value, dtype="<f8")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<I", len(bname)) + bname)
        parts.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 24 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"CRC mismatch: stored {crc:#010x}, computed {zlib.crc32(body):#010x}")
    version, tau, seed = struct.unpack_from("<IIQ", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    pos = 20

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n,) = take("<I")
    descriptor = json.loads(body[pos : pos + n].decode("utf-8"))
    pos += n
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (n,) = take("<I")
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64)) * 8
        params[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += size
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after tensors")
    return Checkpoint(descriptor, params, tau, seed, version)


def save_checkpoint(path, model, tau: int = 0, seed: int = 0) -> None:
    Path(path).write_bytes(encode_checkpoint(Checkpoint(model.descriptor, model.state_dict(), tau, seed)))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_model(path):
    """Rebuild the model stored in a checkpoint; returns (model, checkpoint)."""
    from .models import build_model

    ckpt = load_checkpoint(path)
    model = build_model(ckpt.descriptor, seed=0)
    model.load_state_dict(ckpt.params)
    return model, ckpt
