"""Epoch-0 loss-scale audit, checkpoint evaluation and ablation orchestration."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig
from .core import Rng, SampleRecord
from .discriminator import DAEDiscriminator, make_targets, random_half_crop
from .generator import Generator, generator_forward
from .losses import LossWeights, perceptual_3d_loss, voxel_loss
from .metrics import MetricReport, default_backbone, evaluate_volumes
from .perceptual import PerceptualBackbone
from .phantom import PhantomSpec, load_split, make_sample
from .trainer import build_models, stack_batch, train, load_generator

log = logging.getLogger(__name__)

IDENTITY_HOOK = "identity-hook"


# -- loss-scale audit ------------------------------------------------------------


@dataclass
class PrincipleResult:
    numerator: str
    denominator: str
    log10_ratio: float
    passed: bool
    drift: bool  # nearest orders of magnitude differ


@dataclass
class AuditReport:
    raw: dict
    weighted: dict
    weights: dict
    principle1: PrincipleResult
    principle2: PrincipleResult

    def to_dict(self) -> dict:
        return asdict(self)

    def text(self) -> str:
        lines = ["epoch-0 loss-scale audit"]
        for k in self.raw:
            lines.append(f"  {k:<12} raw {self.raw[k]:.6g}  weighted {self.weighted[k]:.6g}")
        for label, p in (("Principle 1", self.principle1), ("Principle 2", self.principle2)):
            verdict = "PASS" if p.passed else "FAIL"
            drift = "  [magnitude drift]" if p.drift else ""
            lines.append(f"{label}: {verdict}  log10({p.numerator}/{p.denominator}) = {p.log10_ratio:+.3f}{drift}")
        return "\n".join(lines)


def _principle(num_name, num, den_name, den) -> PrincipleResult:
    ratio = math.log10(num / den) if num > 0 and den > 0 else math.inf
    return PrincipleResult(num_name, den_name, ratio, abs(ratio) <= 1.0, round(ratio) != 0 if math.isfinite(ratio) else True)


def audit_batch(seed: int = 0, n: int = 2, size: int = 32, view_mode: str = "dual") -> list[SampleRecord]:
    """The fixed seeded phantom batch used when no dataset is configured."""
    return [make_sample(f"audit_{i}", PhantomSpec(seed=int(Rng.derive(seed, 7, i).integers(2**62)),
                                                  shape=(size,) * 3))
            for i in range(n)]


@torch.no_grad()
def loss_scale_audit(gen: Generator, disc: DAEDiscriminator, batch: list[SampleRecord], w: LossWeights,
                     backbone: PerceptualBackbone, rng: Rng) -> AuditReport:
    """Epoch-0 magnitudes of L_gVoxel, L_dVoxel and L_d3DPcept, weighted as they enter the totals."""
    if disc.dec_part is None:
        raise ValueError("audit needs a discriminator with autoencoder decoders")
    view_mode = gen.cfg.view_mode
    ct, frontal, lateral = stack_batch(batch, view_mode, next(gen.parameters()).dtype)
    fake = gen(frontal, lateral)
    out = disc(ct, frontal, lateral, real=True)
    _, crop = random_half_crop(out.f1, rng)
    pairs = [(disc.decode_part(out, crop), None), (disc.decode_global(out), None)]
    targets = make_targets(ct, crop)
    pairs = [(dec, tgt) for (dec, _), tgt in zip(pairs, targets)]
    raw = {
        "g_voxel": float(voxel_loss(ct, fake, w.voxel_loss)),
        "d_voxel": float(sum(voxel_loss(t, d, w.voxel_loss) for d, t in pairs) / 2),
        "d_pcept": float(sum(perceptual_3d_loss(t, d, backbone) for d, t in pairs) / 2),
    }
    weighted = {
        "g_voxel": w.lambda2 * raw["g_voxel"],
        "d_voxel": w.d_lambda2 * raw["d_voxel"],
        "d_pcept": w.d_lambda4 * raw["d_pcept"],
    }
    return AuditReport(
        raw, weighted,
        {"lambda2": w.lambda2, "dae_lambda2": w.d_lambda2, "dae_lambda4": w.d_lambda4},
        _principle("g_voxel", weighted["g_voxel"], "d_voxel", weighted["d_voxel"]),
        _principle("d_voxel", weighted["d_voxel"], "d_pcept", weighted["d_pcept"]),
    )


def audit_from_config(cfg: TrainConfig, batch: Optional[list[SampleRecord]] = None) -> AuditReport:
    cfg = cfg.replace(**{"weights.variant": "DAE-B"}) if cfg.weights.variant == "none" else cfg
    cfg.validate()
    if batch is None:
        if cfg.manifest:
            batch = load_split(cfg.manifest, "train", cfg.view_mode)[: cfg.batch_size]
        else:
            batch = audit_batch(cfg.seed, cfg.batch_size, cfg.generator.size, cfg.view_mode)
            if cfg.view_mode == "single":
                batch = [SampleRecord(s.id, s.xrays.single(), s.ct) for s in batch]
    gen, disc = build_models(cfg)
    b = cfg.backbone
    backbone = PerceptualBackbone(b.loss_layers, seed=b.seed, weights_path=b.weights_path)
    return loss_scale_audit(gen, disc, batch, cfg.weights, backbone, Rng.derive(cfg.seed, 1))


# -- evaluation --------------------------------------------------------------------


def evaluate(checkpoint, manifest, split: str = "test", backbone: Optional[PerceptualBackbone] = None,
             view_mode: Optional[str] = None) -> MetricReport:
    """Run the generator of ``checkpoint`` over a manifest split and score every sample.

    ``checkpoint`` may be a checkpoint directory, an in-memory :class:`Generator`, or
    ``"identity-hook"`` (returns the ground truth; used to check the metric plumbing).
    """
    if isinstance(checkpoint, Generator):
        gen = checkpoint
    elif str(checkpoint) == IDENTITY_HOOK:
        gen = None
    else:
        gen = load_generator(checkpoint)
    mode = view_mode or (gen.cfg.view_mode if gen is not None else "dual")
    samples = load_split(manifest, split, mode)
    backbone = backbone or default_backbone()
    report = MetricReport()
    for s in samples:
        pred = s.ct.data if gen is None else generator_forward(gen, s.xrays).data
        report.add(s.id, evaluate_volumes(s.ct.data, pred, backbone))
    return report


# -- ablation ------------------------------------------------------------------------


@dataclass
class Variant:
    name: str
    variant: str = "none"  # none | DAE-A | DAE-B
    g3dpcept: bool = False
    sgg: bool = False

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return cfg.replace(**{
            "name": self.name,
            "weights.variant": self.variant,
            "weights.g3dpcept_enabled": self.g3dpcept,
            "generator.sgg_enabled": self.sgg,
        })


# rows of the component ablation table (DAE-A, DAE-B, g3DPcept, SGG)
TABLE3_GRID = [
    Variant("baseline"),
    Variant("dae_a", "DAE-A"),
    Variant("dae_b", "DAE-B"),
    Variant("g3dpcept", g3dpcept=True),
    Variant("sgg", sgg=True),
    Variant("dae_a+g3dpcept", "DAE-A", g3dpcept=True),
    Variant("dae_a+g3dpcept+sgg", "DAE-A", g3dpcept=True, sgg=True),
    Variant("dae_b+g3dpcept", "DAE-B", g3dpcept=True),
    Variant("dae_b+sgg", "DAE-B", sgg=True),
    Variant("g3dpcept+sgg", g3dpcept=True, sgg=True),
    Variant("dae_b+g3dpcept+sgg", "DAE-B", g3dpcept=True, sgg=True),
]


def run_ablation(base: TrainConfig, grid=None, split: str = "test", out_dir=None,
                 backbone: Optional[PerceptualBackbone] = None) -> list[dict]:
    """Train and evaluate every variant on the same data and seed; returns table rows."""
    grid = grid or TABLE3_GRID
    rows = []
    for v in grid:
        cfg = v.apply(base)
        if out_dir is not None:
            cfg.out_dir = str(out_dir)
        cfg.validate()
        log.info("ablation variant %s", v.name)
        trainer = train(cfg)
        report = evaluate(trainer.gen, cfg.manifest, split, backbone)
        report.save(cfg.run_dir / f"metrics_{split}.json")
        agg = report.aggregate
        rows.append({
            "name": v.name,
            "DAE-A": v.variant == "DAE-A",
            "DAE-B": v.variant == "DAE-B",
            "g3DPcept": v.g3dpcept,
            "SGG": v.sgg,
            "psnr_mean": agg["psnr_db"]["mean"], "psnr_std": agg["psnr_db"]["std"],
            "lpips_mean": agg["lpips"]["mean"], "lpips_std": agg["lpips"]["std"],
            "n_disc_params": sum(p.numel() for p in trainer.disc.parameters()),
        })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(rows, indent=1))
        (Path(out_dir) / "ablation.txt").write_text(ablation_table(rows))
    return rows


def ablation_table(rows: list[dict]) -> str:
    mark = lambda b: "x" if b else " "  # noqa: E731
    lines = [f"{'DAE-A':>6}{'DAE-B':>6}{'g3DP':>6}{'SGG':>6}  {'PSNR':>16}  {'LPIPS':>16}  name"]
    for r in rows:
        lines.append(
            f"{mark(r['DAE-A']):>6}{mark(r['DAE-B']):>6}{mark(r['g3DPcept']):>6}{mark(r['SGG']):>6}  "
            f"{r['psnr_mean']:>9.3f}+-{r['psnr_std']:<5.3f}  {r['lpips_mean']:>9.3f}+-{r['lpips_std']:<5.3f}  {r['name']}"
        )
    return "\n".join(lines)
