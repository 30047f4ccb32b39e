"""On-disk formats: binary PGM images, DPTH depth rasters and TSV manifests."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List

import numpy as np

DEPTH_MAGIC = b"DPTH"
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    pass


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"write_pgm needs a 2-D image, got shape {image.shape}")
    h, w = image.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + image_to_bytes(image).tobytes())


def write_pgm16(path, raster: np.ndarray) -> None:
    """Write an integer raster as 16-bit big-endian PGM (maxval 65535)."""
    raster = np.asarray(raster)
    if raster.min() < 0 or raster.max() > 65535:
        raise FormatError("write_pgm16: values must lie in [0, 65535]")
    h, w = raster.shape
    _atomic_write(path, f"P5\n{w} {h}\n65535\n".encode("ascii") + raster.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM; 8-bit files come back as floats in [0, 1], 16-bit as integers."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval < 256:
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
        return data.reshape(h, w).astype(np.float64) / maxval
    data = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.int64)


def write_depth(path, depth: np.ndarray) -> None:
    """``DPTH``, u32 LE width, u32 LE height, then float32 LE row-major (+inf for misses)."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise FormatError(f"write_depth needs a 2-D map, got shape {depth.shape}")
    h, w = depth.shape
    _atomic_write(path, DEPTH_MAGIC + struct.pack("<II", w, h) + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad depth magic")
    w, h = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} floats, file has {len(raw) - 12} payload bytes")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)


@dataclass(frozen=True)
class ManifestRecord:
    index: int
    image_path: str
    depth_path: str
    seed: int
    split: str


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    lines = []
    for r in records:
        if r.split not in SPLITS:
            raise FormatError(f"unknown split {r.split!r}")
        lines.append(f"{r.index}\t{r.image_path}\t{r.depth_path}\t{r.seed}\t{r.split}\n")
    _atomic_write(path, "".join(lines).encode("utf-8"))


def read_manifest(path) -> List[ManifestRecord]:
    """Parse a manifest; relative file paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        idx, img, dep, seed, split = parts
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
        out.append(
            ManifestRecord(
                int(idx),
                str(base / img) if img and not os.path.isabs(img) else img,
                str(base / dep) if dep and not os.path.isabs(dep) else dep,
                int(seed),
                split,
            )
        )
    return out


def load_images(records: Iterable[ManifestRecord]) -> np.ndarray:
    return np.stack([read_pgm(r.image_path) for r in records])


def load_depths(records: Iterable[ManifestRecord]) -> np.ndarray:
    return np.stack([read_depth(r.depth_path) for r in records])
