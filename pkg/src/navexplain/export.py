"""PPM images and CSV tables, written atomically."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .sim import FLOOR, FURNITURE, WALL

PALETTE = {FLOOR: (128, 128, 128), WALL: (255, 255, 255), FURNITURE: (255, 0, 0)}


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.clip(rgb, 0, 255).astype(np.uint8).tobytes()


def write_ppm(path, rgb) -> None:
    atomic_write_bytes(path, encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def frame_rgb(frame: np.ndarray) -> np.ndarray:
    lut = np.array([PALETTE[c] for c in sorted(PALETTE)], dtype=np.uint8)
    return lut[np.asarray(frame)]


def mean_frame_rgb(mean_onehot: np.ndarray) -> np.ndarray:
    """Palette colour blended by per-class pixel frequencies, (3, H, W) -> RGB."""
    lut = np.array([PALETTE[c] for c in sorted(PALETTE)], dtype=np.float64)
    return np.rint(np.tensordot(np.moveaxis(mean_onehot, 0, -1), lut, axes=1)).astype(np.uint8)


def map_gray(saliency: np.ndarray) -> np.ndarray:
    g = np.rint(np.clip(saliency, 0, 1) * 255).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)


def overlay(frame: np.ndarray, saliency: np.ndarray, dim: float = 0.4) -> np.ndarray:
    """Dimmed semantic frame with the saliency modulating the red channel."""
    base = frame_rgb(frame).astype(np.float64) * dim
    base[:, :, 0] = np.maximum(base[:, :, 0], np.clip(saliency, 0, 1) * 255)
    return np.rint(base).astype(np.uint8)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def encode_csv(rows, columns) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue().encode()


def write_csv(path, rows, columns) -> None:
    atomic_write_bytes(path, encode_csv(rows, columns))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
