"""Samples, synthetic data, and on-disk formats.

Formats
-------
* Images: binary NetPBM, ``P5`` (grayscale) and ``P6`` (RGB), maxval 255.
  Reading scales bytes to ``[0, 1]`` by ``v / 255``. Perturbed images leave
  ``[0, 1]`` and are never written as NetPBM.
* Raw tensors (``.tensor``): ``b"GMTENSOR"``, uint32 version (1), uint32 rank,
  ``rank`` uint64 dims, then little-endian float64 values in row-major order.
  Round trips are bit-exact.

Directory layout::

    <root>/{train,test}/images/<stem>.pgm     input image
    <root>/{train,test}/masks/<stem>.pgm      label map, 0 / 255 for L=2
    <root>/{train,test}/perturbed/<stem>.tensor
    <root>/{train,test}/deltas/<stem>.tensor
    <root>/{train,test}/traces/<stem>.csv
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor_core import ContractViolation

TENSOR_MAGIC = b"GMTENSOR"
TENSOR_VERSION = 1
SPLITS = ("train", "test")
SUBDIRS = ("images", "masks", "perturbed", "deltas", "traces")


class DataError(ContractViolation):
    """Dataset content violates a contract (bad labels, unpaired files, ...)."""


class FormatError(OSError):
    """A file could not be parsed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path: str | os.PathLike | None = None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [C, H, W] float64
    mask: np.ndarray  # [H, W] int64 labels

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if self.image.ndim != 3:
            raise DataError(f"sample {self.id}: image must be [C,H,W], got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(
                f"sample {self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ")


def stack_samples(samples: Sequence[Sample], num_classes: int | None = None):
    """Return ``(images [N,C,H,W], masks [N,H,W])``; validates labels when ``num_classes`` is given."""
    if num_classes is not None:
        for s in samples:
            if s.mask.size and (s.mask.min() < 0 or s.mask.max() >= num_classes):
                raise DataError(
                    f"sample {s.id}: label {int(s.mask.max())} outside [0, {num_classes - 1}]")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    count: int = 288
    image_size: int = 64
    shape_family: str = "ellipses"  # or "blobs"
    contrast: float = 0.15
    noise: float = 0.2
    texture: bool = True
    train_fraction: float = 8 / 9
    seed: int = 0
    min_foreground: float = 0.03
    max_foreground: float = 0.60

    def validate(self) -> None:
        if self.count < 0:
            raise ContractViolation("count must be non-negative")
        if not 0 < self.contrast <= 1:
            raise ContractViolation("contrast must lie in (0, 1]")
        if self.noise < 0:
            raise ContractViolation("noise must be non-negative")
        if not 0 <= self.train_fraction <= 1:
            raise ContractViolation("train_fraction must lie in [0, 1]")
        if self.shape_family not in ("ellipses", "blobs"):
            raise ContractViolation(f"unknown shape family {self.shape_family!r}")
        if self.image_size < 8:
            raise ContractViolation("image_size must be at least 8")


def _ellipse(yy, xx, rng, size):
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    ry, rx = rng.uniform(0.08, 0.3, size=2) * size
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _blob(yy, xx, rng, size):
    # star-shaped region with a radially perturbed boundary
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    r0 = rng.uniform(0.1, 0.28) * size
    ang = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    k = rng.integers(2, 6)
    amp = rng.uniform(0.1, 0.3, size=k)
    ph = rng.uniform(0, 2 * np.pi, size=k)
    bound = r0 * (1 + sum(a * np.sin((j + 2) * ang + p) for j, (a, p) in enumerate(zip(amp, ph))))
    return rad <= bound


def _smooth_field(yy, xx, rng, size):
    f = np.zeros_like(yy)
    for _ in range(4):
        ky, kx = rng.uniform(0.5, 3.0, size=2) * 2 * np.pi / size
        f += np.sin(ky * yy + kx * xx + rng.uniform(0, 2 * np.pi))
    return f / 4


def _one_sample(rng, cfg: SynthConfig, sid: str) -> Sample:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    draw = _ellipse if cfg.shape_family == "ellipses" else _blob
    while True:
        mask = np.zeros((n, n), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            mask |= draw(yy, xx, rng, n)
        frac = mask.mean()
        if cfg.min_foreground <= frac <= cfg.max_foreground:
            break
    base = rng.uniform(0.3, 0.5)
    img = np.full((n, n), base)
    if cfg.texture:
        img += 0.1 * _smooth_field(yy, xx, rng, n)
    img += cfg.contrast * mask
    img += rng.normal(0.0, cfg.noise, size=(n, n))
    # quantize so the PGM round trip is exact
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Sample(sid, img[None], mask.astype(np.int64))


def generate_synthetic(cfg: SynthConfig) -> tuple[list[Sample], list[Sample]]:
    """Deterministic train/test split of synthetic bright-object-on-noise images."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    samples = [_one_sample(rng, cfg, f"s{i:05d}") for i in range(cfg.count)]
    n_train = int(round(cfg.count * cfg.train_fraction))
    return samples[:n_train], samples[n_train:]


# ---------------------------------------------------------------- atomic writes


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- raw tensors


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def decode_tensor(buf: bytes, path=None) -> np.ndarray:
    if buf[:8] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", 0, path)
    if len(buf) < 16:
        raise FormatError("truncated tensor header", len(buf), path)
    version, rank = struct.unpack_from("<II", buf, 8)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", 8, path)
    off = 16
    if len(buf) < off + 8 * rank:
        raise FormatError("truncated tensor dims", len(buf), path)
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    need = 8 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - off < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - off}", off, path)
    if len(buf) - off > need:
        raise FormatError("trailing bytes after payload", off + need, path)
    return np.frombuffer(buf, dtype="<f8", count=need // 8, offset=off).astype(np.float64).reshape(dims)


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), path)


# ---------------------------------------------------------------- NetPBM


def _pnm_tokens(buf: bytes, count: int, start: int, path):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i = [], start
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= len(buf):
            raise FormatError("truncated header", i, path)
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        tok = buf[i:j]
        if not tok.isdigit():
            raise FormatError(f"non-numeric header field {tok!r}", i, path)
        tokens.append((int(tok), i))
        i = j
    return tokens, i


def decode_pnm(buf: bytes, path=None) -> np.ndarray:
    """Decode P5/P6 bytes into ``uint8`` ``[C, H, W]``."""
    magic = buf[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"bad NetPBM magic {magic!r}", 0, path)
    (tokens, i) = _pnm_tokens(buf, 3, 2, path)
    (w, w_off), (h, h_off), (maxval, m_off) = tokens
    if w == 0 or h == 0:
        raise FormatError("zero image dimension", w_off if w == 0 else h_off, path)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (need 255)", m_off, path)
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise FormatError("missing whitespace after header", i, path)
    i += 1
    need = w * h * channels
    if len(buf) - i < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - i}", i, path)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=i)
    return px.reshape(h, w, channels).transpose(2, 0, 1).copy()


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Encode ``uint8`` ``[C,H,W]`` (C=1 or 3) as P5/P6."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise ContractViolation(f"NetPBM needs 1 or 3 channels, got {c}")
    head = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    return head + np.ascontiguousarray(pixels.transpose(1, 2, 0), dtype=np.uint8).tobytes()


def read_image(path) -> np.ndarray:
    """Read a PGM/PPM as float64 ``[C,H,W]`` in ``[0, 1]``."""
    return decode_pnm(Path(path).read_bytes(), path).astype(np.float64) / 255.0


def write_image(path, image) -> None:
    """Write ``[C,H,W]`` or ``[H,W]`` values in ``[0, 1]``; quantizes to 8 bits."""
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    atomic_write_bytes(path, encode_pnm(q))


def write_labels(path, labels, num_classes: int = 2) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    scale = 255 // max(num_classes - 1, 1)
    atomic_write_bytes(path, encode_pnm((labels * scale).astype(np.uint8)))


def read_labels(path, num_classes: int = 2) -> np.ndarray:
    px = decode_pnm(Path(path).read_bytes(), path)[0].astype(np.int64)
    if num_classes == 2:
        return (px / 255.0 >= 0.5).astype(np.int64)
    return np.rint(px / (255 // (num_classes - 1))).astype(np.int64)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.shape[0] == 1:
        return image
    r, g, b = image[0], image[1], image[2]
    return (0.299 * r + 0.587 * g + 0.114 * b)[None]


# ---------------------------------------------------------------- directories

_IMAGE_EXTS = (".pgm", ".ppm")


def _stems(directory: Path, exts: Iterable[str]) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in exts}


def load_directory(images_dir, masks_dir, num_classes: int = 2) -> list[Sample]:
    """Pair ``images_dir/<stem>.{pgm,ppm}`` with ``masks_dir/<stem>.pgm``.

    Color images are converted to one luminance channel; masks are binarized
    at 0.5 for two classes. All unpaired or mismatched stems are reported in
    a single :class:`DataError`.
    """
    images = _stems(Path(images_dir), _IMAGE_EXTS)
    masks = _stems(Path(masks_dir), (".pgm",))
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DataError(f"images without masks: {', '.join(missing)}")
    samples, mismatched = [], []
    for stem, ipath in images.items():
        img = to_grayscale(read_image(ipath))
        mask = read_labels(masks[stem], num_classes)
        if img.shape[1:] != mask.shape:
            mismatched.append(stem)
            continue
        samples.append(Sample(stem, img, mask))
    if mismatched:
        raise DataError(f"image/mask size mismatch: {', '.join(mismatched)}")
    return samples


@dataclass
class DataLayout:
    root: Path
    num_classes: int = 2

    def dir(self, split: str, kind: str) -> Path:
        if split not in SPLITS or kind not in SUBDIRS:
            raise ContractViolation(f"unknown location {split}/{kind}")
        return Path(self.root) / split / kind

    def write_samples(self, split: str, samples: Sequence[Sample]) -> list[Path]:
        written = []
        for s in samples:
            ext = ".pgm" if s.image.shape[0] == 1 else ".ppm"
            ip = self.dir(split, "images") / f"{s.id}{ext}"
            mp = self.dir(split, "masks") / f"{s.id}.pgm"
            write_image(ip, s.image)
            write_labels(mp, s.mask, self.num_classes)
            written += [ip, mp]
        return written

    def read_samples(self, split: str) -> list[Sample]:
        return load_directory(self.dir(split, "images"), self.dir(split, "masks"),
                              self.num_classes)
