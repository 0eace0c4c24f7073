"""Per-pixel Gaussian attribute-map providers.

The mapping backend treats the feed-forward network as a pluggable provider:
given the two loopframe images it returns dense per-pixel attribute maps
(rotation, shape ratio, opacity, SH color) plus a validity mask. Two
implementations ship here: a deterministic image-gradient stub, and a
file-backed provider for maps exported offline by a real network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .primitives import color_to_dc, num_sh_bands


class DimensionMismatch(ValueError):
    """Provider images or maps disagree in size."""


@dataclass
class AttributeMaps:
    """Dense per-pixel Gaussian attributes, camera frame, float32 planes."""

    rotation: np.ndarray  # (H, W, 4) unit quaternions where valid
    scale_shape: np.ndarray  # (H, W, 3) positive axis-wise proportions
    opacity_logit: np.ndarray  # (H, W)
    sh: np.ndarray  # (H, W, bands, 3); band 0 is DC
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.valid.shape

    @property
    def n_bands(self) -> int:
        return self.sh.shape[2]


class StubFfmProvider:
    """Deterministic stand-in for a pre-trained feed-forward model.

    Orientation comes from the local image-gradient angle (rotation about
    the optical axis), the shape ratio is a fixed (2, 2, 1) anisotropy in
    that rotated frame, opacity is constant, and DC color copies the pixel.
    Pixels whose gradient magnitude falls below the contrast threshold are
    invalid, so constant regions fall through to the geometric branches.
    """

    def __init__(self, contrast_threshold: float = 0.02, opacity: float = 0.7,
                 sh_order: int = 1):
        self.contrast_threshold = contrast_threshold
        self.opacity = opacity
        self.sh_order = sh_order

    def _maps_for(self, rgb: np.ndarray) -> AttributeMaps:
        rgb = np.asarray(rgb, dtype=np.float32)
        h, w = rgb.shape[:2]
        gray = rgb.mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.sqrt(gx * gx + gy * gy)
        theta = np.arctan2(gy, gx)

        rotation = np.zeros((h, w, 4), dtype=np.float32)
        rotation[..., 0] = np.cos(0.5 * theta)
        rotation[..., 3] = np.sin(0.5 * theta)

        scale_shape = np.empty((h, w, 3), dtype=np.float32)
        scale_shape[..., 0] = 2.0
        scale_shape[..., 1] = 2.0
        scale_shape[..., 2] = 1.0

        opacity_logit = np.full((h, w), np.log(self.opacity / (1 - self.opacity)),
                                dtype=np.float32)

        bands = num_sh_bands(self.sh_order)
        sh = np.zeros((h, w, bands, 3), dtype=np.float32)
        sh[:, :, 0, :] = color_to_dc(rgb).astype(np.float32)

        valid = mag >= self.contrast_threshold
        return AttributeMaps(rotation, scale_shape, opacity_logit, sh, valid)

    def predict(self, prev_rgb: np.ndarray, cur_rgb: np.ndarray,
                prev_index: int = -1, cur_index: int = -1):
        if prev_rgb.shape != cur_rgb.shape:
            raise DimensionMismatch(f"{prev_rgb.shape} vs {cur_rgb.shape}")
        return self._maps_for(prev_rgb), self._maps_for(cur_rgb)


class NullFfmProvider:
    """All pixels invalid; the cascade never takes the model branch."""

    def predict(self, prev_rgb, cur_rgb, prev_index: int = -1, cur_index: int = -1):
        if prev_rgb.shape != cur_rgb.shape:
            raise DimensionMismatch(f"{prev_rgb.shape} vs {cur_rgb.shape}")

        def empty(rgb):
            h, w = rgb.shape[:2]
            return AttributeMaps(
                rotation=np.zeros((h, w, 4), dtype=np.float32),
                scale_shape=np.ones((h, w, 3), dtype=np.float32),
                opacity_logit=np.zeros((h, w), dtype=np.float32),
                sh=np.zeros((h, w, 1, 3), dtype=np.float32),
                valid=np.zeros((h, w), dtype=bool),
            )

        return empty(prev_rgb), empty(cur_rgb)


# ---------------------------------------------------------------------------
# file-backed provider
# ---------------------------------------------------------------------------

_PLANE_ORDER = ("rotation", "scale_shape", "opacity_logit", "sh", "valid")


def _plane_channels(maps: AttributeMaps) -> dict:
    return {
        "rotation": 4,
        "scale_shape": 3,
        "opacity_logit": 1,
        "sh": maps.n_bands * 3,
        "valid": 1,
    }


def save_attribute_maps(directory, prev_maps: AttributeMaps, cur_maps: AttributeMaps) -> None:
    """One directory per loopframe pair: header.json + prev.bin + cur.bin.

    Planes are little-endian float32, concatenated in header order; the
    validity mask is stored as 0/1 floats.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = prev_maps.shape
    header = {
        "height": h,
        "width": w,
        "dtype": "float32",
        "sh_bands": prev_maps.n_bands,
        "planes": [{"name": n, "channels": _plane_channels(prev_maps)[n]} for n in _PLANE_ORDER],
    }
    with open(directory / "header.json", "w") as f:
        json.dump(header, f, indent=1, sort_keys=True)
    for name, maps in (("prev", prev_maps), ("cur", cur_maps)):
        blob = np.concatenate([
            maps.rotation.reshape(h, w, -1),
            maps.scale_shape.reshape(h, w, -1),
            maps.opacity_logit.reshape(h, w, 1),
            maps.sh.reshape(h, w, -1),
            maps.valid.reshape(h, w, 1).astype(np.float32),
        ], axis=2).astype("<f4")
        with open(directory / f"{name}.bin", "wb") as f:
            f.write(blob.tobytes())


def load_attribute_maps(directory):
    directory = Path(directory)
    with open(directory / "header.json") as f:
        header = json.load(f)
    h, w = header["height"], header["width"]
    bands = header["sh_bands"]
    channels = sum(p["channels"] for p in header["planes"])

    def read(name):
        blob = np.fromfile(directory / f"{name}.bin", dtype="<f4").reshape(h, w, channels)
        offs = np.cumsum([0] + [p["channels"] for p in header["planes"]])
        by_name = {p["name"]: blob[:, :, offs[i]:offs[i + 1]]
                   for i, p in enumerate(header["planes"])}
        return AttributeMaps(
            rotation=by_name["rotation"].copy(),
            scale_shape=by_name["scale_shape"].copy(),
            opacity_logit=by_name["opacity_logit"][:, :, 0].copy(),
            sh=by_name["sh"].reshape(h, w, bands, 3).copy(),
            valid=by_name["valid"][:, :, 0] > 0.5,
        )

    return read("prev"), read("cur")


class DirectoryFfmProvider:
    """Loads exported attribute maps; directory per pair: pair_PPPPPP_CCCCCC."""

    def __init__(self, root):
        self.root = Path(root)

    def predict(self, prev_rgb, cur_rgb, prev_index: int, cur_index: int):
        pair_dir = self.root / f"pair_{prev_index:06d}_{cur_index:06d}"
        prev_maps, cur_maps = load_attribute_maps(pair_dir)
        if prev_maps.shape != prev_rgb.shape[:2]:
            raise DimensionMismatch(
                f"maps {prev_maps.shape} vs image {prev_rgb.shape[:2]}")
        return prev_maps, cur_maps


def make_provider(spec: str, contrast_threshold: float = 0.02, sh_order: int = 1):
    """Provider from a CLI-style spec: 'stub', 'off', or 'dir:<path>'."""
    if spec == "stub":
        return StubFfmProvider(contrast_threshold=contrast_threshold, sh_order=sh_order)
    if spec == "off":
        return NullFfmProvider()
    if spec.startswith("dir:"):
        return DirectoryFfmProvider(spec[4:])
    raise ValueError(f"unknown ffm provider spec: {spec!r}")
