"""Shared domain types, intensity normalization, seeded randomness and raw file I/O.

Axis convention used everywhere in the package: volumes are (depth, height, width).
The frontal X-ray integrates along depth and has shape (H, W); the lateral X-ray
integrates along width and has shape (D, H).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DISPLAY_PEAK = 255.0


class VolumeIOError(ValueError):
    """Raised for unreadable, corrupt or inconsistent volume/image files."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    intensity_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.intensity_range = (float(self.intensity_range[0]), float(self.intensity_range[1]))

    @property
    def shape(self):
        return self.data.shape

    def validate(self, normalized: bool = False, desk_scale: bool = True):
        if desk_scale:
            for n in self.shape:
                if n < 4 or n & (n - 1):
                    raise ValueError(f"volume extents must be powers of two >= 4, got {self.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        if normalized and (self.data.min() < -1.0 - 1e-6 or self.data.max() > 1.0 + 1e-6):
            raise ValueError("normalized volume leaves [-1, 1]")
        return self


@dataclass
class ProjectionPair:
    frontal: np.ndarray
    lateral: Optional[np.ndarray] = None
    view_mode: str = "dual"

    def __post_init__(self):
        self.frontal = np.asarray(self.frontal)
        if self.lateral is not None:
            self.lateral = np.asarray(self.lateral)
        if self.view_mode not in ("single", "dual"):
            raise ValueError(f"unknown view_mode {self.view_mode!r}")
        if (self.lateral is not None) != (self.view_mode == "dual"):
            raise ValueError("lateral image must be present iff view_mode == 'dual'")
        for img in (self.frontal, self.lateral):
            if img is None:
                continue
            if img.ndim != 2:
                raise ValueError(f"projection must be 2D, got {img.shape}")
            if not np.all(np.isfinite(img)):
                raise ValueError("projection contains non-finite values")

    def single(self) -> "ProjectionPair":
        return ProjectionPair(self.frontal, None, "single")


@dataclass
class SampleRecord:
    id: str
    xrays: ProjectionPair
    ct: Volume

    def validate(self):
        d, h, w = self.ct.shape
        if self.xrays.frontal.shape != (h, w):
            raise ValueError(f"{self.id}: frontal {self.xrays.frontal.shape} != face {(h, w)}")
        if self.xrays.lateral is not None and self.xrays.lateral.shape != (d, h):
            raise ValueError(f"{self.id}: lateral {self.xrays.lateral.shape} != face {(d, h)}")
        self.ct.validate(normalized=True)
        for img in (self.xrays.frontal, self.xrays.lateral):
            if img is not None and (img.min() < -1.0 - 1e-6 or img.max() > 1.0 + 1e-6):
                raise ValueError(f"{self.id}: projection leaves [-1, 1]")
        return self


@dataclass
class Rng:
    """Counter-based (Philox) random stream; equal seeds give equal draws on any platform."""

    seed: int
    stream: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.stream = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        """Independent child stream for ``(seed, *keys)``, e.g. one per sample index."""
        rng = cls.__new__(cls)
        rng.seed = seed
        rng.stream = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))
        return rng

    def integers(self, low, high=None, size=None):
        return self.stream.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.stream.uniform(low, high, size=size)

    def permutation(self, n):
        return self.stream.permutation(n)

    def state(self) -> dict:
        return self.stream.bit_generator.state

    def set_state(self, state: dict):
        self.stream.bit_generator.state = state


def _check_range(lo: float, hi: float):
    if not lo < hi:
        raise ValueError(f"degenerate intensity range ({lo}, {hi})")


def normalize(vol: Volume) -> Volume:
    """Affine map of ``intensity_range`` onto [-1, 1]; metadata is kept."""
    lo, hi = vol.intensity_range
    _check_range(lo, hi)
    data = (2.0 * (vol.data.astype(np.float64) - lo) / (hi - lo) - 1.0).astype(vol.data.dtype)
    return replace(vol, data=data)


def denormalize(vol: Volume) -> Volume:
    lo, hi = vol.intensity_range
    _check_range(lo, hi)
    data = ((vol.data.astype(np.float64) + 1.0) * 0.5 * (hi - lo) + lo).astype(vol.data.dtype)
    return replace(vol, data=data)


def to_display(x):
    """[-1, 1] -> [0, 255] display scale (no quantization). Works on arrays and tensors."""
    return (x + 1.0) * (DISPLAY_PEAK / 2.0)


# -- raw f32le + JSON sidecar storage -----------------------------------------


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".vol", ".img", ".json"):
        p = p.with_suffix("")
    return p, p.with_suffix(".json")


def _write_raw(base: Path, header: dict, data: np.ndarray, ext: str):
    base.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(data, dtype="<f4")
    payload.tofile(base.with_suffix(ext))
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=1)


def read_header(path) -> dict:
    """Read only the sidecar; the payload is not touched."""
    _, hdr_path = _paths(path)
    try:
        with open(hdr_path) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as err:
        raise VolumeIOError(f"corrupt header {hdr_path}: {err}") from err
    for key in ("shape", "dtype"):
        if key not in header:
            raise VolumeIOError(f"header {hdr_path} missing key {key!r}")
    if header["dtype"] != "f32le":
        raise VolumeIOError(f"unsupported dtype {header['dtype']!r}")
    if not all(isinstance(n, int) and n > 0 for n in header["shape"]):
        raise VolumeIOError(f"bad shape {header['shape']!r} in {hdr_path}")
    return header


def _read_payload(base: Path, ext: str, shape: Sequence[int]) -> np.ndarray:
    raw = np.fromfile(base.with_suffix(ext), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise VolumeIOError(
            f"payload {base.with_suffix(ext)} holds {raw.size} values, header shape {list(shape)} "
            f"needs {int(np.prod(shape))}"
        )
    return raw.reshape(shape).astype(np.float32)


def save_volume(vol: Volume, path) -> Path:
    base, _ = _paths(path)
    header = {
        "shape": [int(n) for n in vol.shape],
        "spacing_mm": list(vol.spacing),
        "intensity_lo": vol.intensity_range[0],
        "intensity_hi": vol.intensity_range[1],
        "dtype": "f32le",
    }
    _write_raw(base, header, vol.data, ".vol")
    return base.with_suffix(".vol")


def load_volume(path) -> Volume:
    base, _ = _paths(path)
    header = read_header(base)
    if len(header["shape"]) != 3:
        raise VolumeIOError(f"{base}: expected a 3D shape, got {header['shape']}")
    data = _read_payload(base, ".vol", header["shape"])
    return Volume(
        data,
        spacing=tuple(header.get("spacing_mm", (1.0, 1.0, 1.0))),
        intensity_range=(header.get("intensity_lo", -1.0), header.get("intensity_hi", 1.0)),
    )


def save_image(img: np.ndarray, path, intensity_range=(-1.0, 1.0)) -> Path:
    base, _ = _paths(path)
    header = {
        "shape": [int(n) for n in img.shape],
        "intensity_lo": float(intensity_range[0]),
        "intensity_hi": float(intensity_range[1]),
        "dtype": "f32le",
    }
    if len(header["shape"]) != 2:
        raise ValueError(f"image must be 2D, got {img.shape}")
    _write_raw(base, header, img, ".img")
    return base.with_suffix(".img")


def load_image(path) -> np.ndarray:
    base, _ = _paths(path)
    header = read_header(base)
    if len(header["shape"]) != 2:
        raise VolumeIOError(f"{base}: expected a 2D shape, got {header['shape']}")
    return _read_payload(base, ".img", header["shape"])


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_writable_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {p}: {err}") from err
    if not os.access(p, os.W_OK):
        raise PermissionError(f"output directory {p} is not writable")
    return p
