"""Image files: 8-bit PNG for color, PFM (float32, bottom-up) for depth."""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path, img: np.ndarray) -> None:
    """img in [0, 1], (H, W, 3) or (H, W)."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr[..., :3] if arr.ndim == 3 else arr


def save_pfm(path, img: np.ndarray) -> None:
    """Grayscale PFM, little-endian (negative scale), rows bottom to top."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("PFM writer here handles single-channel images only")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(img[::-1].astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype).reshape(h, w, channels)
    img = data[::-1, :, 0] if channels == 1 else data[::-1]
    return np.ascontiguousarray(img.astype(np.float64))
