"""Conditional 3D discriminator with autoencoder taps (DAE).

The encoder halves the resolution at every stage. ``f1`` is taken after three
stages (stride 8, so 16^3 for a 128^3 input) and ``f2`` after four (stride 16,
8^3 for 128^3). One more strided stage plus a 3x3x3 head gives the realness map.

Two simple decoders map a random half-crop of ``f1`` and the whole of ``f2`` back
to intensity space at 1/4 of the input extent. They may only ever see taps from
real volumes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .core import ProjectionPair, Rng, Volume
from .generator import lift, xrays_to_tensors

F1_STRIDE = 8
F2_STRIDE = 16
DECODER_UPSAMPLE = 4  # two x2 blocks


class RealOnlyViolation(RuntimeError):
    """A simple decoder was asked to decode taps of a generated volume."""


@dataclass
class DiscriminatorConfig:
    base_channels: int = 16
    max_channels: int = 128
    view_mode: str = "dual"
    dae: bool = True
    decoder_channels: int = 16

    def validate(self):
        if self.view_mode not in ("single", "dual"):
            raise ValueError(f"unknown view_mode {self.view_mode!r}")
        if self.base_channels < 1 or self.decoder_channels < 1:
            raise ValueError("channel counts must be positive")
        return self

    def channels(self, stage: int) -> int:
        return min(self.base_channels * 2**stage, self.max_channels)


@dataclass(frozen=True)
class CropRecord:
    offsets: tuple  # (d0, h0, w0) in f1 voxels
    extent: tuple  # crop size in f1 voxels
    source_extent: tuple  # full f1 extent the crop was cut from

    def __post_init__(self):
        for o, e, s in zip(self.offsets, self.extent, self.source_extent):
            if o < 0 or e < 1 or o + e > s:
                raise ValueError(f"crop {self} does not fit inside f1 {self.source_extent}")


@dataclass
class DiscriminatorOutput:
    score_map: torch.Tensor
    f1: torch.Tensor
    f2: torch.Tensor
    real: bool


def _enc(cin, cout, norm=True):
    layers = [nn.Conv3d(cin, cout, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm3d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


class SimpleDecoder(nn.Module):
    """(upsample x2 -> conv -> norm -> ReLU) then (upsample x2 -> conv -> tanh)."""

    def __init__(self, cin: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, hidden, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(hidden, affine=True)
        self.conv2 = nn.Conv3d(hidden, 1, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        x = F.relu(self.norm1(self.conv1(x)))
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return torch.tanh(self.conv2(x))


class DAEDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg.validate()
        cin = 1 + (2 if cfg.view_mode == "dual" else 1)
        c = cfg.channels
        self.stage1 = _enc(cin, c(0), norm=False)
        self.stage2 = _enc(c(0), c(1))
        self.stage3 = _enc(c(1), c(2))  # -> f1
        self.stage4 = _enc(c(2), c(3))  # -> f2
        # realness map is often 1 voxel wide here, so no instance norm
        self.stage5 = _enc(c(3), c(3), norm=False)
        self.head = nn.Conv3d(c(3), 1, 3, padding=1)
        if cfg.dae:
            self.dec_part = SimpleDecoder(c(2), cfg.decoder_channels)
            self.dec_global = SimpleDecoder(c(3), cfg.decoder_channels)
        else:
            self.dec_part = self.dec_global = None

    def condition(self, ct: torch.Tensor, frontal: torch.Tensor, lateral: Optional[torch.Tensor]) -> torch.Tensor:
        """Concatenate the CT with its X-rays replicated along their projection axes."""
        b, _, d, h, w = ct.shape
        if tuple(frontal.shape[-2:]) != (h, w):
            raise ValueError(f"frontal {tuple(frontal.shape)} does not match CT face {(h, w)}")
        chans = [ct, lift(frontal, d)]
        if self.cfg.view_mode == "dual":
            if lateral is None or tuple(lateral.shape[-2:]) != (d, h):
                raise ValueError(f"lateral X-ray must match CT face {(d, h)}")
            # lateral (D, H) replicated along width
            chans.append(lateral.unsqueeze(-1).expand(-1, -1, -1, -1, w))
        elif lateral is not None:
            raise ValueError("single-view discriminator was given a lateral X-ray")
        return torch.cat(chans, dim=1)

    def forward(self, ct, frontal, lateral=None, real: bool = False) -> DiscriminatorOutput:
        if min(ct.shape[-3:]) < 2 * F2_STRIDE or any(n % (2 * F2_STRIDE) for n in ct.shape[-3:]):
            raise ValueError(f"CT extent {tuple(ct.shape[-3:])} must be a multiple of {2 * F2_STRIDE}")
        x = self.condition(ct, frontal, lateral)
        f1 = self.stage3(self.stage2(self.stage1(x)))
        f2 = self.stage4(f1)
        score = self.head(self.stage5(f2))
        return DiscriminatorOutput(score, f1, f2, real)

    def _check_real(self, out: DiscriminatorOutput):
        if self.dec_part is None:
            raise RuntimeError("discriminator was built without autoencoder decoders")
        if not out.real:
            raise RealOnlyViolation("simple decoders are trained on real-volume taps only")

    def decode_part(self, out: DiscriminatorOutput, crop: CropRecord) -> torch.Tensor:
        self._check_real(out)
        return self.dec_part(apply_crop(out.f1, crop))

    def decode_global(self, out: DiscriminatorOutput) -> torch.Tensor:
        self._check_real(out)
        return self.dec_global(out.f2)


def random_half_crop(f1: torch.Tensor, rng: Rng):
    """Cut a random block of half the extent per axis; offsets uniform over valid positions."""
    ext = tuple(int(n) for n in f1.shape[-3:])
    if any(n % 2 for n in ext):
        raise ValueError(f"f1 extent {ext} must be even on every axis")
    half = tuple(n // 2 for n in ext)
    offsets = tuple(int(rng.integers(0, h + 1)) for h in half)
    crop = CropRecord(offsets, half, ext)
    return apply_crop(f1, crop), crop


def apply_crop(f1: torch.Tensor, crop: CropRecord) -> torch.Tensor:
    if tuple(f1.shape[-3:]) != tuple(crop.source_extent):
        raise ValueError(f"crop record for f1 {crop.source_extent} applied to {tuple(f1.shape[-3:])}")
    (d, h, w), (ed, eh, ew) = crop.offsets, crop.extent
    return f1[..., d:d + ed, h:h + eh, w:w + ew]


def make_targets(ct: torch.Tensor, crop: CropRecord):
    """Real-volume targets for the two decoders.

    ``I_part``: the input region under the f1 crop (f1 voxel = ``F1_STRIDE`` input voxels),
    mean-pooled to the part decoder's resolution. ``I``: whole volume mean-pooled to the
    global decoder's resolution.
    """
    ext = tuple(int(n) for n in ct.shape[-3:])
    if tuple(n * F1_STRIDE for n in crop.source_extent) != ext:
        raise ValueError(f"stale crop record: f1 {crop.source_extent} x{F1_STRIDE} != CT {ext}")
    lo = [o * F1_STRIDE for o in crop.offsets]
    hi = [(o + e) * F1_STRIDE for o, e in zip(crop.offsets, crop.extent)]
    region = ct[..., lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    part_pool = F1_STRIDE // DECODER_UPSAMPLE
    glob_pool = F2_STRIDE // DECODER_UPSAMPLE
    i_part = F.avg_pool3d(region, part_pool) if part_pool > 1 else region
    i_glob = F.avg_pool3d(ct, glob_pool)
    return i_part, i_glob


def discriminate(model: DAEDiscriminator, ct: Volume, xrays: ProjectionPair, real: bool = True) -> DiscriminatorOutput:
    """Single-sample convenience wrapper around ``model.forward``."""
    d, h, w = ct.shape
    if xrays.frontal.shape != (h, w) or (xrays.lateral is not None and xrays.lateral.shape != (d, h)):
        raise ValueError("CT and X-ray shapes are inconsistent")
    dtype = next(model.parameters()).dtype
    f, lat = xrays_to_tensors(xrays, dtype)
    if model.cfg.view_mode == "single":
        lat = None
    vol = torch.as_tensor(ct.data, dtype=dtype)[None, None]
    return model(vol, f, lat, real=real)
