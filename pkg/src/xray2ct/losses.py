"""Generator and discriminator objectives.

Every squared / absolute norm is an element-wise mean, so magnitudes do not
depend on volume size. Perceptual terms are the exception in one respect: the
feature distance at a spatial position is the squared norm over channels (see
:func:`xray2ct.perceptual.feature_distance`), averaged over positions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .perceptual import BackboneUnavailable, PerceptualBackbone, coronal_slices, feature_distance

VARIANTS = ("none", "DAE-A", "DAE-B")


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 10.0
    lambda3: float = 10.0
    lambda4: float = 0.01
    variant: str = "DAE-B"
    g3dpcept_enabled: bool = True
    # reconstruction weights of the discriminator's autoencoder; None -> lambda2 / lambda4
    dae_lambda2: Optional[float] = None
    dae_lambda4: Optional[float] = None
    voxel_loss: str = "mse"  # "mse" | "smooth_l2" (Huber)

    def validate(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "dae_lambda2", "dae_lambda4"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.voxel_loss not in ("mse", "smooth_l2"):
            raise ValueError(f"voxel_loss must be 'mse' or 'smooth_l2', got {self.voxel_loss!r}")
        return self

    @property
    def d_lambda2(self) -> float:
        return self.lambda2 if self.dae_lambda2 is None else self.dae_lambda2

    @property
    def d_lambda4(self) -> float:
        return self.lambda4 if self.dae_lambda4 is None else self.dae_lambda4

    @property
    def dae(self) -> bool:
        return self.variant != "none"


def _finite(x: torch.Tensor, what: str):
    if not torch.isfinite(x).all():
        raise ValueError(f"non-finite values in {what}")


def adv_loss_g(score_fake: torch.Tensor) -> torch.Tensor:
    _finite(score_fake, "discriminator scores")
    return (1.0 - score_fake).pow(2).mean()


def adv_loss_d(score_real: torch.Tensor, score_fake: torch.Tensor) -> torch.Tensor:
    _finite(score_real, "real scores")
    _finite(score_fake, "fake scores")
    return score_fake.pow(2).mean() + (1.0 - score_real).pow(2).mean()


def voxel_loss(y: torch.Tensor, y_hat: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if kind == "smooth_l2":
        return F.smooth_l1_loss(y_hat, y, beta=1.0)
    return (y - y_hat).pow(2).mean()


def mean_projections(v: torch.Tensor):
    """Axial, coronal, sagittal mean projections of (..., D, H, W)."""
    return v.mean(dim=-2), v.mean(dim=-3), v.mean(dim=-1)


def projection_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    terms = [(a - b).abs().mean() for a, b in zip(mean_projections(y), mean_projections(y_hat))]
    return sum(terms) / 3.0


def perceptual_3d_loss(y, y_hat, backbone: Optional[PerceptualBackbone], slices=None) -> torch.Tensor:
    """Mean over samples and coronal (depth) slices of the squared feature distance.

    ``slices`` optionally restricts the average to a subset of depth indices, an
    unbiased estimate used to keep 64^3 training affordable.
    """
    if backbone is None:
        raise BackboneUnavailable("perceptual loss requested but no backbone configured")
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if slices is not None:
        y, y_hat = y[:, :, slices], y_hat[:, :, slices]
    return feature_distance(coronal_slices(y), coronal_slices(y_hat), backbone).mean()


@dataclass
class GeneratorTerms:
    adv: torch.Tensor
    voxel: torch.Tensor
    projection: torch.Tensor
    perceptual: Optional[torch.Tensor] = None


def total_g(terms: GeneratorTerms, w: LossWeights) -> torch.Tensor:
    total = w.lambda1 * terms.adv + w.lambda2 * terms.voxel + w.lambda3 * terms.projection
    if w.g3dpcept_enabled:
        if terms.perceptual is None:
            raise ValueError("g3dpcept enabled but no perceptual term supplied")
        total = total + w.lambda4 * terms.perceptual
    return total


@dataclass
class ReconstrTerms:
    voxel: torch.Tensor
    perceptual: Optional[torch.Tensor]
    total: torch.Tensor


def d_reconstr_terms(pairs, w: LossWeights, backbone: Optional[PerceptualBackbone] = None) -> ReconstrTerms:
    """``pairs`` = [(I'_part, I_part), (I', I)]; each pair weighs 1/2."""
    if w.variant == "none":
        raise ValueError("reconstruction loss requested for a discriminator without autoencoder")
    vox = sum(voxel_loss(target, decoded, w.voxel_loss) for decoded, target in pairs) / len(pairs)
    total = w.d_lambda2 * vox
    pcept = None
    if w.variant == "DAE-B":
        pcept = sum(perceptual_3d_loss(target, decoded, backbone) for decoded, target in pairs) / len(pairs)
        total = total + w.d_lambda4 * pcept
    return ReconstrTerms(vox, pcept, total)


def d_reconstr_loss(pairs, w: LossWeights, backbone: Optional[PerceptualBackbone] = None) -> torch.Tensor:
    return d_reconstr_terms(pairs, w, backbone).total


def total_d(adv: torch.Tensor, reconstr, w: LossWeights) -> torch.Tensor:
    return w.lambda1 * adv + (0.0 if reconstr is None else reconstr)
