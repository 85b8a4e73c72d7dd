"""VGG16-topology feature extractor used by the slice perceptual losses and LPIPS-3D.

Pretrained weights are loaded from a local ``state_dict`` file when one is given.
Otherwise the network is initialised from a fixed seed, which keeps tests and CI
offline and deterministic.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn
from torchvision.models import vgg16

log = logging.getLogger(__name__)

# index of the ReLU closing each VGG16 block inside ``vgg16().features``
VGG16_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22, "relu5_3": 29}
# number of 2x max-pools in front of each tap
_POOLS = {"relu1_2": 0, "relu2_2": 1, "relu3_3": 2, "relu4_3": 3, "relu5_3": 4}
LPIPS_LAYERS = tuple(VGG16_TAPS)
LOSS_LAYERS = ("relu1_2", "relu2_2", "relu3_3")

# input scaling of the LPIPS reference implementation (inputs in [-1, 1])
_SHIFT = (-0.030, -0.088, -0.188)
_SCALE = (0.458, 0.448, 0.450)


class BackboneUnavailable(RuntimeError):
    pass


class PerceptualBackbone(nn.Module):
    """Frozen VGG16 feature taps for single-channel slices in [-1, 1]."""

    def __init__(
        self,
        layers: Sequence[str] = LPIPS_LAYERS,
        layer_weights: Optional[Sequence[float]] = None,
        seed: int = 0,
        weights_path: Optional[str] = None,
        allow_fallback: bool = True,
    ):
        super().__init__()
        unknown = [name for name in layers if name not in VGG16_TAPS]
        if unknown or not layers:
            raise ValueError(f"unknown VGG16 taps {unknown}; choose from {list(VGG16_TAPS)}")
        self.layers = tuple(sorted(layers, key=VGG16_TAPS.get))
        self.layer_weights = tuple(float(w) for w in (layer_weights or [1.0] * len(self.layers)))
        if len(self.layer_weights) != len(self.layers):
            raise ValueError("one weight per layer required")
        depth = VGG16_TAPS[self.layers[-1]] + 1

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            features = vgg16(weights=None).features[:depth]
            # variance-preserving (fan-in) He init keeps activations O(input) at every tap
            for m in features:
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        self.pretrained = False
        if weights_path is not None and Path(weights_path).is_file():
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier")}
            features.load_state_dict({k: v for k, v in state.items() if int(k.split(".")[0]) < depth})
            self.pretrained = True
        elif not allow_fallback:
            raise BackboneUnavailable(f"no VGG16 weights at {weights_path!r} and fallback disabled")
        else:
            log.debug("perceptual backbone: seeded random VGG16 (seed=%d)", seed)
        self.features = features
        self.seed = seed
        self.register_buffer("shift", torch.tensor(_SHIFT).view(1, 3, 1, 1))
        self.register_buffer("scale", torch.tensor(_SCALE).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def min_input_size(self) -> int:
        return 2 ** _POOLS[self.layers[-1]]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``x``: (N, 1, H, W) slices. Returns one feature map per configured tap."""
        if x.shape[1] != 1:
            raise ValueError(f"expected single-channel slices, got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.min_input_size():
            raise ValueError(
                f"slices {tuple(x.shape[-2:])} too small for tap {self.layers[-1]} "
                f"(needs >= {self.min_input_size()})"
            )
        h = (x.expand(-1, 3, -1, -1) - self.shift) / self.scale
        taps = {VGG16_TAPS[name]: name for name in self.layers}
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in taps:
                out.append(h)
        return out


def feature_distance(a: torch.Tensor, b: torch.Tensor, backbone: PerceptualBackbone) -> torch.Tensor:
    """Per-image squared feature distance: channel sum, spatial mean, weighted layer sum. Returns (N,)."""
    total = 0.0
    for w, fa, fb in zip(backbone.layer_weights, backbone(a), backbone(b)):
        total = total + w * (fa - fb).pow(2).sum(dim=1).mean(dim=(1, 2))
    return total


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def lpips_distance(a: torch.Tensor, b: torch.Tensor, backbone: PerceptualBackbone, channel_weights=None) -> torch.Tensor:
    """LPIPS-style distance per image (N,): unit-normalized taps, channel-weighted squared
    difference, spatial mean, summed over layers. ``channel_weights`` default to ones."""
    total = 0.0
    for i, (fa, fb) in enumerate(zip(backbone(a), backbone(b))):
        d = (_unit(fa) - _unit(fb)).pow(2)
        if channel_weights is not None:
            d = d * channel_weights[i].view(1, -1, 1, 1).to(d)
        total = total + backbone.layer_weights[i] * d.sum(dim=1).mean(dim=(1, 2))
    return total


def coronal_slices(vol: torch.Tensor) -> torch.Tensor:
    """(B, 1, D, H, W) -> (B*D, 1, H, W): one image per depth index."""
    if vol.dim() != 5 or vol.shape[1] != 1:
        raise ValueError(f"expected (B, 1, D, H, W), got {tuple(vol.shape)}")
    b, _, d, h, w = vol.shape
    return vol.permute(0, 2, 1, 3, 4).reshape(b * d, 1, h, w)
