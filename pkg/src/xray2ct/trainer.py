"""Alternating D/G optimisation, checkpointing and the per-step loss log."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig, from_dict
from .core import Rng, SampleRecord
from .discriminator import DAEDiscriminator, make_targets, random_half_crop
from .generator import Generator
from .losses import (
    GeneratorTerms,
    adv_loss_d,
    adv_loss_g,
    d_reconstr_terms,
    perceptual_3d_loss,
    projection_loss,
    total_d,
    total_g,
    voxel_loss,
)
from .perceptual import PerceptualBackbone
from .phantom import load_split

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch", "step", "lr",
    "g_adv", "g_voxel", "g_proj", "g_pcept", "g_total",
    "d_adv", "d_voxel", "d_pcept", "d_reconstr", "d_total",
)


class TrainingDiverged(RuntimeError):
    pass


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Constant until ``decay_start``, then linear to zero at ``epochs``."""
    if epoch < cfg.decay_start:
        return cfg.lr
    return cfg.lr * max(0.0, 1.0 - (epoch - cfg.decay_start) / (cfg.epochs - cfg.decay_start))


def set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_models(cfg: TrainConfig, dtype=torch.float32):
    cfg.sync()
    set_determinism(cfg.seed)
    gen = Generator(cfg.generator).to(dtype)
    disc = DAEDiscriminator(cfg.discriminator).to(dtype)
    return gen, disc


def build_backbone(cfg: TrainConfig, dtype=torch.float32) -> Optional[PerceptualBackbone]:
    w = cfg.weights
    if not (w.g3dpcept_enabled or w.variant == "DAE-B"):
        return None
    b = cfg.backbone
    return PerceptualBackbone(b.loss_layers, seed=b.seed, weights_path=b.weights_path).to(dtype)


def stack_batch(samples: list[SampleRecord], view_mode: str, dtype=torch.float32):
    ct = torch.as_tensor(np.stack([s.ct.data for s in samples]), dtype=dtype)[:, None]
    frontal = torch.as_tensor(np.stack([s.xrays.frontal for s in samples]), dtype=dtype)[:, None]
    lateral = None
    if view_mode == "dual":
        lateral = torch.as_tensor(np.stack([s.xrays.lateral for s in samples]), dtype=dtype)[:, None]
    return ct, frontal, lateral


def param_digest(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns models, optimisers and the random streams of one training run."""

    def __init__(self, cfg: TrainConfig, samples: Optional[list[SampleRecord]] = None, dtype=torch.float32):
        self.cfg = cfg.validate()
        self.dtype = dtype
        if samples is None:
            samples = load_split(cfg.manifest, "train", cfg.view_mode)
        if not samples:
            raise ValueError("training set is empty")
        self.samples = samples
        self.gen, self.disc = build_models(cfg, dtype)
        self.backbone = build_backbone(cfg, dtype)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr, betas=betas)
        self.crop_rng = Rng.derive(cfg.seed, 1)
        self.epoch = 0
        self.global_step = 0
        self.history: list[dict] = []
        self.hooks: list = []  # callables(trainer, record) for instrumentation

    # -- one optimisation step ---------------------------------------------

    def _check(self, name: str, value: torch.Tensor, batch_ids):
        if not torch.isfinite(value).all():
            dump = self.cfg.run_dir / f"diverged_step{self.global_step}.json"
            dump.parent.mkdir(parents=True, exist_ok=True)
            dump.write_text(json.dumps({"term": name, "step": self.global_step, "epoch": self.epoch,
                                        "batch": list(batch_ids), "value": float(value.detach().sum())}))
            raise TrainingDiverged(f"non-finite {name} at step {self.global_step} (batch {batch_ids}); dump: {dump}")

    def d_step(self, ct, frontal, lateral, fake, batch_ids=()):
        w = self.cfg.weights
        self.disc.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        out_real = self.disc(ct, frontal, lateral, real=True)
        out_fake = self.disc(fake.detach(), frontal, lateral, real=False)
        adv = adv_loss_d(out_real.score_map, out_fake.score_map)
        rec = None
        record = {"d_adv": adv}
        if w.dae:
            _, crop = random_half_crop(out_real.f1, self.crop_rng)
            decoded_part = self.disc.decode_part(out_real, crop)
            decoded_glob = self.disc.decode_global(out_real)
            i_part, i_glob = make_targets(ct, crop)
            rec = d_reconstr_terms([(decoded_part, i_part), (decoded_glob, i_glob)], w, self.backbone)
            record.update(d_voxel=rec.voxel, d_pcept=rec.perceptual, d_reconstr=rec.total, crop=crop,
                          decoded_part_shape=tuple(decoded_part.shape), target_part_shape=tuple(i_part.shape))
        loss = total_d(adv, None if rec is None else rec.total, w)
        record["d_total"] = loss
        for name in ("d_adv", "d_voxel", "d_pcept", "d_total"):
            if isinstance(record.get(name), torch.Tensor):
                self._check(name, record[name], batch_ids)
        loss.backward()
        self.opt_d.step()
        return record

    def g_step(self, ct, frontal, lateral, fake, batch_ids=()):
        w = self.cfg.weights
        self.disc.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=True)
        out = self.disc(fake, frontal, lateral, real=False)
        pcept = None
        if w.g3dpcept_enabled:
            slices = None
            if self.cfg.pcept_slices is not None and self.cfg.pcept_slices < ct.shape[2]:
                slices = np.sort(self.crop_rng.stream.choice(ct.shape[2], self.cfg.pcept_slices, replace=False))
                slices = torch.as_tensor(slices)
            pcept = perceptual_3d_loss(ct, fake, self.backbone, slices)
        terms = GeneratorTerms(adv_loss_g(out.score_map), voxel_loss(ct, fake, w.voxel_loss),
                               projection_loss(ct, fake), pcept)
        loss = total_g(terms, w)
        record = {"g_adv": terms.adv, "g_voxel": terms.voxel, "g_proj": terms.projection,
                  "g_pcept": terms.perceptual, "g_total": loss}
        for name, value in record.items():
            if value is not None:
                self._check(name, value, batch_ids)
        loss.backward()
        self.opt_g.step()
        self.disc.requires_grad_(True)
        return record

    def train_step(self, batch_samples: list[SampleRecord]) -> dict:
        ct, frontal, lateral = stack_batch(batch_samples, self.cfg.view_mode, self.dtype)
        ids = [s.id for s in batch_samples]
        self.gen.train()
        self.disc.train()
        fake = self.gen(frontal, lateral)
        self._check("generator output", fake, ids)
        record = self.d_step(ct, frontal, lateral, fake, ids)
        record.update(self.g_step(ct, frontal, lateral, fake, ids))
        for hook in self.hooks:
            hook(self, record)
        row = {"epoch": self.epoch, "step": self.global_step, "lr": self.opt_g.param_groups[0]["lr"]}
        for col in LOG_COLUMNS[3:]:
            v = record.get(col)
            row[col] = float(v.detach()) if isinstance(v, torch.Tensor) else None
        self.global_step += 1
        return row

    # -- epochs ----------------------------------------------------------------

    def _set_lr(self, epoch: int):
        lr = lr_at(self.cfg, epoch)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def epoch_batches(self, epoch: int):
        order = Rng.derive(self.cfg.seed, 2, epoch).permutation(len(self.samples))
        bs = self.cfg.batch_size
        return [[self.samples[i] for i in order[j:j + bs]] for j in range(0, len(order), bs)]

    def fit(self, epochs: Optional[int] = None, write: bool = True) -> list[dict]:
        """Train until ``epochs`` (default: ``cfg.epochs``); returns the rows produced by this call."""
        end = self.cfg.epochs if epochs is None else epochs
        rows = []
        while self.epoch < end:
            self._set_lr(self.epoch)
            for batch in self.epoch_batches(self.epoch):
                rows.append(self.train_step(batch))
            epoch_rows = [r for r in rows if r["epoch"] == self.epoch]
            log.info("epoch %d lr %.2e g_voxel %.4f d_total %.4f", self.epoch, epoch_rows[-1]["lr"],
                     np.median([r["g_voxel"] for r in epoch_rows]), epoch_rows[-1]["d_total"])
            self.history.extend(epoch_rows)
            if write:
                append_log(self.cfg.run_dir / "loss_log.csv", epoch_rows)
            self.epoch += 1
            if write and (self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.epochs):
                self.save_checkpoint()
        return rows

    # -- checkpoints -----------------------------------------------------------

    def checkpoint_dir(self, epoch: Optional[int] = None) -> Path:
        return self.cfg.run_dir / f"ckpt_{self.epoch if epoch is None else epoch:04d}"

    def save_checkpoint(self, path=None) -> Path:
        path = Path(path) if path is not None else self.checkpoint_dir()
        path.mkdir(parents=True, exist_ok=True)
        save_weights(path / "weights.npz", {"generator": self.gen, "discriminator": self.disc})
        torch.save({
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "crop_rng": self.crop_rng.state(),
            "torch_rng": torch.get_rng_state(),
            "epoch": self.epoch,
            "global_step": self.global_step,
        }, path / "train_state.pt")
        (path / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1))
        return path

    @classmethod
    def resume(cls, path, samples=None, cfg: Optional[TrainConfig] = None) -> "Trainer":
        path = Path(path)
        cfg = cfg or from_dict(json.loads((path / "config.json").read_text()))
        trainer = cls(cfg, samples)
        load_weights(path / "weights.npz", {"generator": trainer.gen, "discriminator": trainer.disc})
        state = torch.load(path / "train_state.pt", weights_only=False)
        trainer.opt_g.load_state_dict(state["opt_g"])
        trainer.opt_d.load_state_dict(state["opt_d"])
        trainer.crop_rng.set_state(state["crop_rng"])
        torch.set_rng_state(state["torch_rng"])
        trainer.epoch = state["epoch"]
        trainer.global_step = state["global_step"]
        return trainer


def save_weights(path, modules: dict):
    """Single ``.npz`` archive; a ``manifest.json`` member lists names, shapes and dtypes."""
    arrays, manifest = {}, []
    for prefix, module in modules.items():
        for name, t in module.state_dict().items():
            key = f"{prefix}/{name}"
            arrays[key] = t.detach().cpu().numpy()
            manifest.append({"name": key, "shape": list(t.shape), "dtype": str(arrays[key].dtype)})
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    with zipfile.ZipFile(path, "a") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))


def read_weights_manifest(path) -> list:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_weights(path, modules: dict):
    manifest = read_weights_manifest(path)
    with np.load(path) as npz:
        for prefix, module in modules.items():
            expected = module.state_dict()
            entries = {m["name"][len(prefix) + 1:]: m for m in manifest if m["name"].startswith(prefix + "/")}
            if set(entries) != set(expected):
                missing = sorted(set(expected) - set(entries))
                extra = sorted(set(entries) - set(expected))
                raise ValueError(f"{path}: {prefix} parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
            state = {}
            for name, ref in expected.items():
                arr = npz[f"{prefix}/{name}"]
                if list(arr.shape) != list(ref.shape):
                    raise ValueError(f"{path}: {prefix}/{name} has shape {arr.shape}, expected {tuple(ref.shape)}")
                state[name] = torch.as_tensor(arr).to(ref.dtype)
            module.load_state_dict(state)


def load_generator(ckpt_dir) -> Generator:
    ckpt_dir = Path(ckpt_dir)
    cfg = from_dict(json.loads((ckpt_dir / "config.json").read_text()))
    gen, disc = build_models(cfg)
    load_weights(ckpt_dir / "weights.npz", {"generator": gen, "discriminator": disc})
    return gen.eval()


def append_log(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path) as fh:
        rows = []
        for raw in csv.DictReader(fh):
            rows.append({k: (math.nan if v == "" else float(v)) for k, v in raw.items()})
        return rows


def train(cfg: TrainConfig, samples=None) -> Trainer:
    """Fresh run: clears nothing, refuses to mix logs with an existing run directory."""
    log_path = cfg.run_dir / "loss_log.csv"
    if log_path.exists():
        raise FileExistsError(f"{log_path} exists; choose a new run name or output directory")
    trainer = Trainer(cfg, samples)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    trainer.fit()
    return trainer
