"""Volumetric image-quality metrics on the [0, 255] display scale."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .core import DISPLAY_PEAK, to_display
from .perceptual import LPIPS_LAYERS, PerceptualBackbone, coronal_slices, lpips_distance

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_TRUNCATE = 0.01, 0.03, 1.5, 3.5
METRICS = ("psnr_db", "ssim", "lpips", "nrmse")


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return y, y_hat


def psnr(y, y_hat, peak: float = DISPLAY_PEAK) -> float:
    y, y_hat = _pair(y, y_hat)
    mse = np.mean((y - y_hat) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse)))


def nrmse(y, y_hat) -> float:
    """RMSE normalized by the ground-truth dynamic range (asymmetric by design)."""
    y, y_hat = _pair(y, y_hat)
    rng = y.max() - y.min()
    if rng == 0:
        raise ValueError("ground truth has zero dynamic range")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)) / rng)


def _gauss_kernel():
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    for ax in range(x.ndim):
        x = np.lib.stride_tricks.sliding_window_view(x, g.size, axis=ax) @ g
    return x


def ssim(y, y_hat, peak: float = DISPLAY_PEAK) -> float:
    """Mean local SSIM with a separable 3D Gaussian window over fully-covered positions."""
    y, y_hat = _pair(y, y_hat)
    g = _gauss_kernel()
    if min(y.shape) < g.size:
        raise ValueError(f"SSIM window {g.size} exceeds volume {y.shape}")
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mx, my = _filter_valid(y, g), _filter_valid(y_hat, g)
    sxx = _filter_valid(y * y, g) - mx * mx
    syy = _filter_valid(y_hat * y_hat, g) - my * my
    sxy = _filter_valid(y * y_hat, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    return float(s.mean())


@lru_cache(maxsize=4)
def default_backbone(seed: int = 0, weights_path: str | None = None) -> PerceptualBackbone:
    return PerceptualBackbone(LPIPS_LAYERS, seed=seed, weights_path=weights_path)


@torch.no_grad()
def lpips_slices(y, y_hat, backbone: PerceptualBackbone | None = None, chunk: int = 16) -> np.ndarray:
    """Per coronal slice LPIPS distance (unscaled) between two display-scale volumes."""
    y, y_hat = _pair(y, y_hat)
    backbone = backbone or default_backbone()
    dtype = next(backbone.parameters()).dtype
    a = coronal_slices(torch.as_tensor(y / 127.5 - 1.0, dtype=dtype)[None, None])
    b = coronal_slices(torch.as_tensor(y_hat / 127.5 - 1.0, dtype=dtype)[None, None])
    out = [lpips_distance(a[i:i + chunk], b[i:i + chunk], backbone) for i in range(0, a.shape[0], chunk)]
    return torch.cat(out).double().numpy()


def lpips3d(y, y_hat, backbone: PerceptualBackbone | None = None) -> float:
    """Mean slice LPIPS, reported x100."""
    return float(100.0 * lpips_slices(y, y_hat, backbone).mean())


def error_map(y, y_hat) -> np.ndarray:
    y, y_hat = _pair(y, y_hat)
    return np.clip(np.abs(y - y_hat) / DISPLAY_PEAK, 0.0, 1.0)


PLANES = {"SAG": 2, "COR": 0, "AXI": 1}


def render_error_maps(emap: np.ndarray, out_dir, prefix: str = "error", cmap: str = "jet") -> list[Path]:
    """Central slice of the error volume per plane, saved as PNG on a fixed [0, 1] colour scale."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, axis in PLANES.items():
        sl = np.take(emap, emap.shape[axis] // 2, axis=axis)
        path = out_dir / f"{prefix}_{name}.png"
        plt.imsave(path, sl, cmap=cmap, vmin=0.0, vmax=1.0)
        paths.append(path)
    return paths


def evaluate_volumes(y_norm, y_hat_norm, backbone: PerceptualBackbone | None = None) -> dict:
    """All four metrics for one pair of volumes given in the normalized [-1, 1] range."""
    y, y_hat = to_display(np.asarray(y_norm, np.float64)), to_display(np.asarray(y_hat_norm, np.float64))
    return {
        "psnr_db": psnr(y, y_hat),
        "ssim": ssim(y, y_hat),
        "lpips": lpips3d(y, y_hat, backbone),
        "nrmse": nrmse(y, y_hat),
    }


@dataclass
class MetricReport:
    per_sample: list = field(default_factory=list)

    def add(self, sample_id: str, values: dict):
        self.per_sample.append({"id": sample_id, **{k: float(values[k]) for k in METRICS}})

    @property
    def aggregate(self) -> dict:
        out = {}
        for k in METRICS:
            vals = np.array([row[k] for row in self.per_sample], dtype=np.float64)
            out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self) -> dict:
        return {"per_sample": self.per_sample, "aggregate": self.aggregate}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls(json.loads(Path(path).read_text())["per_sample"])

    def table(self) -> str:
        head = f"{'id':<16}" + "".join(f"{k:>14}" for k in METRICS)
        rows = [head]
        for row in self.per_sample:
            rows.append(f"{row['id']:<16}" + "".join(f"{row[k]:>14.4f}" for k in METRICS))
        agg = self.aggregate
        rows.append(f"{'mean+-std':<16}" + "".join(f"{agg[k]['mean']:>8.3f}+-{agg[k]['std']:<4.2f}" for k in METRICS))
        return "\n".join(rows)
