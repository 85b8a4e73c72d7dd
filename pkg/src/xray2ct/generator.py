"""Two-view 2D->3D generator with Sobel edge guidance.

Each X-ray view has its own 2D encoder, a channel-to-depth bridge and a 3D
decoder. The view decoders live in their own frame (axis 0 = projection axis);
the lateral stream is rotated into the frontal (D, H, W) frame and a fusion
decoder consumes the weighted mean of the aligned view streams at every scale.

Edge guidance: Sobel magnitudes of each input view go through a per-pixel MLP,
are pooled to the two middle encoder resolutions, projected to the encoder width
and *added* to the encoder features there. Projections start at zero, so a fresh
model behaves exactly like its SGG-free counterpart.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ProjectionPair, Volume

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class GeneratorConfig:
    size: int = 64
    base_channels: int = 16
    n_levels: int = 4
    max_channels: int = 128
    head_channels: Optional[int] = None  # full-resolution fusion width; default base // 2
    view_mode: str = "dual"
    sgg_enabled: bool = True
    sgg_hidden: int = 16
    sgg_depth: int = 2
    norm: str = "instance"
    bp_prior: bool = True  # add a learnable-gain backprojection estimate to the output logits

    def validate(self):
        if self.n_levels < 3:
            raise ValueError(f"n_levels must be >= 3, got {self.n_levels}")
        if self.size % (2**self.n_levels) or self.size // 2**self.n_levels < 2:
            raise ValueError(f"size {self.size} must be divisible by 2^n_levels with a >= 2 bottleneck")
        if self.view_mode not in ("single", "dual"):
            raise ValueError(f"unknown view_mode {self.view_mode!r}")
        if self.norm != "instance":
            raise ValueError("only instance normalization is supported")
        if self.base_channels < 1 or self.sgg_hidden < 1 or self.sgg_depth < 1:
            raise ValueError("channel counts must be positive")
        return self

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2**level, self.max_channels)

    @property
    def head(self) -> int:
        return self.head_channels or max(1, self.base_channels // 2)

    @property
    def sgg_levels(self) -> tuple:
        mid = self.n_levels // 2
        return (mid, mid + 1)

    @property
    def views(self) -> tuple:
        return ("frontal", "lateral") if self.view_mode == "dual" else ("frontal",)


def sobel_gradient(img) -> np.ndarray:
    """Sobel gradient magnitude with reflect-padded borders (numpy reference path)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError(f"sobel_gradient needs a 2D image of at least 3x3, got {img.shape}")
    p = np.pad(img, 1, mode="reflect")
    h, w = img.shape
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            win = p[di:di + h, dj:dj + w]
            gx += SOBEL_X[di, dj] * win
            gy += SOBEL_Y[di, dj] * win
    return np.sqrt(gx**2 + gy**2)


def sobel_gradient_torch(x: torch.Tensor) -> torch.Tensor:
    """Batched (N, 1, H, W) version of :func:`sobel_gradient`."""
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ValueError(f"image smaller than the Sobel kernel: {tuple(x.shape)}")
    k = torch.tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None], dtype=x.dtype, device=x.device)
    g = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), k)
    # tiny floor keeps the sqrt differentiable on flat regions
    return torch.sqrt(g.pow(2).sum(dim=1, keepdim=True) + 1e-12) - 1e-6


def _block2d(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


def _block3d(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


def lift(feat2d: torch.Tensor, extent: int) -> torch.Tensor:
    """(B, C, a, b) -> (B, C, extent, a, b): replicate along the projection axis."""
    return feat2d.unsqueeze(2).expand(-1, -1, extent, -1, -1)


def to_frontal_frame(x: torch.Tensor, view: str) -> torch.Tensor:
    """View frame (proj, img0, img1) -> volume frame (D, H, W)."""
    if view == "frontal":
        return x
    # lateral frame is (W, D, H)
    return x.permute(0, 1, 3, 4, 2)


class SGG(nn.Module):
    """Sobel gradient guider for one view."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        layers, cin = [], 1
        for _ in range(cfg.sgg_depth):
            layers += [nn.Conv2d(cin, cfg.sgg_hidden, 1), nn.ReLU(inplace=True)]
            cin = cfg.sgg_hidden
        self.mlp = nn.Sequential(*layers)
        self.levels = cfg.sgg_levels
        self.proj = nn.ModuleDict()
        for k in self.levels:
            conv = nn.Conv2d(cfg.sgg_hidden, cfg.channels(k), 1)
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            self.proj[str(k)] = conv

    def embed(self, grad_map: torch.Tensor, level_shapes: dict) -> dict:
        """Per-level additive features; ``level_shapes`` maps level -> (C, h, w) of the encoder."""
        h = self.mlp(grad_map)
        out = {}
        for k in self.levels:
            factor = 2**k
            pooled = F.avg_pool2d(h, factor) if factor > 1 else h
            feat = self.proj[str(k)](pooled)
            if tuple(feat.shape[1:]) != tuple(level_shapes[k]):
                raise ValueError(f"SGG level {k}: {tuple(feat.shape[1:])} != encoder {tuple(level_shapes[k])}")
            out[k] = feat
        return out


class ViewBranch(nn.Module):
    """2D encoder + bridge + 3D decoder for one X-ray view, in the view's own frame."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_levels
        self.stem = _block2d(1, cfg.channels(0))
        self.down = nn.ModuleList()
        for k in range(1, n + 1):
            self.down.append(nn.Sequential(_block2d(cfg.channels(k - 1), cfg.channels(k), stride=2),
                                           _block2d(cfg.channels(k), cfg.channels(k))))
        self.bottleneck = cfg.size // 2**n
        cn = cfg.channels(n)
        self.bridge2d = nn.Conv2d(cn, cn * self.bottleneck, 1)
        self.bridge3d = _block3d(cn, cn)
        self.dec = nn.ModuleDict()
        for k in range(n - 1, 0, -1):
            cin = (cfg.channels(n) if k == n - 1 else cfg.channels(k + 1)) + cfg.channels(k)
            self.dec[str(k)] = _block3d(cin, cfg.channels(k))
        self.sgg = SGG(cfg) if cfg.sgg_enabled else None

    def encode(self, img: torch.Tensor, trace: Optional[list] = None) -> list:
        feats = [self.stem(img)]
        guide = None
        if self.sgg is not None:
            shapes = {k: (self.cfg.channels(k), self.cfg.size // 2**k, self.cfg.size // 2**k)
                      for k in self.sgg.levels}
            guide = self.sgg.embed(sobel_gradient_torch(img), shapes)
        for k, block in enumerate(self.down, start=1):
            f = block(feats[-1])
            if guide is not None and k in guide:
                f = f + guide[k]
            feats.append(f)
        if trace is not None:
            trace.extend(("enc2d", k, tuple(f.shape[1:])) for k, f in enumerate(feats))
        return feats

    def bridge(self, e: torch.Tensor) -> torch.Tensor:
        b, c, h, w = e.shape
        x = self.bridge2d(e).view(b, c, h, h, w)
        return self.bridge3d(x)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg.validate()
        n = cfg.n_levels
        self.branches = nn.ModuleDict({v: ViewBranch(cfg) for v in cfg.views})
        self.fuse = nn.ModuleDict()
        for k in range(n - 1, 0, -1):
            cin = (cfg.channels(n) if k == n - 1 else cfg.channels(k + 1)) + cfg.channels(k)
            self.fuse[str(k)] = _block3d(cin, cfg.channels(k))
        # +1: raw X-ray intensities lifted into the volume (instance norm discards their level)
        self.fuse_full = _block3d(cfg.channels(1) + cfg.channels(0) + 1, cfg.head)
        self.out = nn.Conv3d(cfg.head, 1, 1)
        self.prior_gain = None
        if cfg.bp_prior:
            # a fresh model returns the backprojection estimate; the network learns the residual
            self.prior_gain = nn.Parameter(torch.ones(()))
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        w = torch.full((len(cfg.views),), 1.0 / len(cfg.views))
        self.register_buffer("view_weights", w)

    def _fuse(self, per_view: dict) -> torch.Tensor:
        aligned = [to_frontal_frame(per_view[v], v) for v in self.cfg.views]
        return sum(w * a for w, a in zip(self.view_weights, aligned))

    def forward(self, frontal: torch.Tensor, lateral: Optional[torch.Tensor] = None,
                trace: Optional[list] = None) -> torch.Tensor:
        cfg = self.cfg
        if cfg.view_mode == "single" and lateral is not None:
            raise ValueError("single-view generator was given a lateral X-ray")
        if cfg.view_mode == "dual" and lateral is None:
            raise ValueError("dual-view generator needs a lateral X-ray")
        inputs = {"frontal": frontal, "lateral": lateral}
        for v in cfg.views:
            if tuple(inputs[v].shape[-2:]) != (cfg.size, cfg.size) or inputs[v].dim() != 4:
                raise ValueError(f"{v} X-ray must be (B, 1, {cfg.size}, {cfg.size}), got {tuple(inputs[v].shape)}")

        n = cfg.n_levels
        enc, state = {}, {}
        for v in cfg.views:
            enc[v] = self.branches[v].encode(inputs[v], trace if v == "frontal" else None)
            state[v] = self.branches[v].bridge(enc[v][n])
        fused = self._fuse(state)
        if trace is not None:
            trace.append(("bridge", n, tuple(fused.shape[1:])))
        for k in range(n - 1, 0, -1):
            for v in cfg.views:
                ext = cfg.size // 2**k
                x = torch.cat([_up(state[v]), lift(enc[v][k], ext)], dim=1)
                state[v] = self.branches[v].dec[str(k)](x)
            fused = self.fuse[str(k)](torch.cat([_up(fused), self._fuse(state)], dim=1))
            if trace is not None:
                trace.append(("dec3d", k, tuple(fused.shape[1:])))
        skip0 = self._fuse({v: lift(torch.cat([enc[v][0], inputs[v]], dim=1), cfg.size) for v in cfg.views})
        fused = self.fuse_full(torch.cat([_up(fused), skip0], dim=1))
        if trace is not None:
            trace.append(("dec3d", 0, tuple(fused.shape[1:])))
        logits = self.out(fused)
        if self.prior_gain is not None:
            bp = skip0[:, -1:]  # view-weighted mean of the lifted X-rays
            logits = logits + self.prior_gain * torch.atanh(bp.clamp(-0.99, 0.99))
        return torch.tanh(logits)


def xrays_to_tensors(xrays: ProjectionPair, dtype=torch.float32):
    f = torch.as_tensor(xrays.frontal, dtype=dtype)[None, None]
    lat = None if xrays.lateral is None else torch.as_tensor(xrays.lateral, dtype=dtype)[None, None]
    return f, lat


@torch.no_grad()
def generator_forward(model: Generator, xrays: ProjectionPair) -> Volume:
    """Reconstruct one volume (in [-1, 1]) from a projection pair."""
    if model.cfg.view_mode == "single" and xrays.lateral is not None:
        raise ValueError("single-view generator was given a lateral X-ray")
    dtype = next(model.parameters()).dtype
    f, lat = xrays_to_tensors(xrays, dtype)
    was_training = model.training
    model.eval()
    try:
        out = model(f, lat)
    finally:
        model.train(was_training)
    return Volume(out[0, 0].cpu().numpy().astype(np.float32))
