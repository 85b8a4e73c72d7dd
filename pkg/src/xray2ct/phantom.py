"""Procedural ellipsoid phantoms and parallel-beam DRRs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .core import (
    ProjectionPair,
    Rng,
    SampleRecord,
    Volume,
    denormalize,
    ensure_writable_dir,
    load_image,
    load_volume,
    normalize,
    save_image,
    save_volume,
)

MIN_EXTENT = 16


@dataclass
class Ellipsoid:
    center: tuple  # voxel coordinates (d, h, w)
    semi_axes: tuple  # voxels
    density: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))


@dataclass
class PhantomSpec:
    n_ellipsoids: int = 8
    density_range: tuple = (-600.0, 600.0)
    background: float = -1000.0
    seed: int = 0
    shape: tuple = (32, 32, 32)
    intensity_range: tuple = (-1000.0, 1000.0)
    body_density: float = 1000.0
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if any(n < MIN_EXTENT for n in self.shape):
            raise ValueError(f"phantom shape {self.shape} below minimum {MIN_EXTENT}^3")
        if self.n_ellipsoids != 0 and not 3 <= self.n_ellipsoids <= 32:
            raise ValueError(f"n_ellipsoids must be 0 or in [3, 32], got {self.n_ellipsoids}")
        lo, hi = self.intensity_range
        if not lo < hi:
            raise ValueError(f"degenerate intensity range {self.intensity_range}")
        if not self.density_range[0] <= self.density_range[1]:
            raise ValueError(f"bad density range {self.density_range}")
        return self


def render_ellipsoids(shape, ellipsoids, background: float, intensity_range) -> np.ndarray:
    """Additive superposition of ellipsoid indicator densities, clipped to the intensity range."""
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"), -1)
    vol = np.full(shape, background, dtype=np.float64)
    for e in ellipsoids:
        local = (grid - np.asarray(e.center)) @ np.asarray(e.rotation)
        r2 = np.sum((local / np.asarray(e.semi_axes)) ** 2, axis=-1)
        vol[r2 <= 1.0] += e.density
    return np.clip(vol, *intensity_range).astype(np.float32)


def sample_ellipsoids(spec: PhantomSpec) -> list[Ellipsoid]:
    """A body ellipsoid plus ``n - 1`` structures nested inside it."""
    if spec.n_ellipsoids == 0:
        return []
    rng = Rng(spec.seed).stream
    ext = np.asarray(spec.shape, dtype=np.float64)
    mid = (ext - 1) / 2
    body_axes = ext * rng.uniform(0.36, 0.44, 3)
    body = Ellipsoid(
        center=tuple(mid + rng.uniform(-0.03, 0.03, 3) * ext),
        semi_axes=tuple(body_axes),
        density=spec.body_density,
        rotation=Rotation.from_euler("x", rng.uniform(-0.2, 0.2)).as_matrix(),
    )
    out = [body]
    lo, hi = spec.density_range
    for _ in range(spec.n_ellipsoids - 1):
        axes = body_axes * rng.uniform(0.12, 0.35, 3)
        # keep the structure inside the body: centre within the shrunken body ellipsoid
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        reach = max(0.0, 1.0 - axes.max() / body_axes.min()) * rng.uniform(0.0, 1.0) ** (1 / 3)
        center = np.asarray(body.center) + direction * body_axes * reach
        rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
        out.append(Ellipsoid(tuple(center), tuple(axes), float(rng.uniform(lo, hi)), rot))
    return out


def generate_phantom(spec: PhantomSpec) -> Volume:
    spec.validate()
    data = render_ellipsoids(spec.shape, sample_ellipsoids(spec), spec.background, spec.intensity_range)
    return Volume(data, spacing=spec.spacing, intensity_range=spec.intensity_range)


AXES = {"frontal": 0, "lateral": 2}


def project_drr(vol, axis: str) -> np.ndarray:
    """Parallel-beam DRR: mean along depth (frontal) or width (lateral)."""
    if axis not in AXES:
        raise ValueError(f"unknown projection axis {axis!r}; expected one of {sorted(AXES)}")
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    return data.mean(axis=AXES[axis], dtype=np.float64).astype(np.float32)


def make_sample(sample_id: str, spec: PhantomSpec) -> SampleRecord:
    ct = normalize(generate_phantom(spec))
    xrays = ProjectionPair(project_drr(ct, "frontal"), project_drr(ct, "lateral"), "dual")
    return SampleRecord(sample_id, xrays, ct)


def split_counts(n: int, test_fraction: float = 0.1) -> tuple[int, int]:
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    if test_fraction == 0.0:
        return n, 0  # train-only dataset (overfit runs)
    n_test = min(n - 1, max(1, int(round(n * test_fraction))))
    return n - n_test, n_test


def build_dataset(n: int, template: PhantomSpec, out_dir, seed: int = 0, test_fraction: float = 0.1):
    """Write ``n`` phantom samples plus ``manifest.json``; returns the manifest list."""
    if n < 2:
        raise ValueError(f"dataset needs at least 2 samples, got {n}")
    template.validate()
    out = ensure_writable_dir(out_dir)
    n_train, _ = split_counts(n, test_fraction)
    order = Rng.derive(seed, 0xD5).permutation(n)
    train_ids = set(int(i) for i in order[:n_train])
    manifest = []
    for i in range(n):
        sid = f"phantom_{i:04d}"
        sample_seed = int(Rng.derive(seed, i).integers(2**62))
        spec = PhantomSpec(**{**template.__dict__, "seed": sample_seed})
        rec = make_sample(sid, spec)
        save_volume(denormalize(rec.ct), out / "ct" / sid)
        save_image(rec.xrays.frontal, out / "xray" / f"{sid}_frontal")
        save_image(rec.xrays.lateral, out / "xray" / f"{sid}_lateral")
        manifest.append({
            "id": sid,
            "ct_path": f"ct/{sid}.vol",
            "frontal_path": f"xray/{sid}_frontal.img",
            "lateral_path": f"xray/{sid}_lateral.img",
            "split": "train" if i in train_ids else "test",
        })
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_manifest(path) -> tuple[Path, list]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError(f"manifest {path} must hold a JSON list")
    return path.parent, entries


def load_sample(root, entry: dict, view_mode: str = "dual") -> SampleRecord:
    root = Path(root)
    ct = normalize(load_volume(root / entry["ct_path"]))
    frontal = load_image(root / entry["frontal_path"])
    lateral = load_image(root / entry["lateral_path"]) if view_mode == "dual" else None
    return SampleRecord(entry["id"], ProjectionPair(frontal, lateral, view_mode), ct).validate()


def load_split(manifest_path, split: str | None, view_mode: str = "dual") -> list[SampleRecord]:
    root, entries = read_manifest(manifest_path)
    chosen = [e for e in entries if split is None or e["split"] == split]
    if not chosen:
        raise ValueError(f"split {split!r} of {manifest_path} is empty")
    return [load_sample(root, e, view_mode) for e in chosen]
