"""Overfit two 32^3 phantoms with the full model and report training-set metrics.

    python scripts/overfit_smoke.py --out runs/smoke
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from xray2ct.config import TrainConfig
from xray2ct.discriminator import DiscriminatorConfig
from xray2ct.evaluation import evaluate
from xray2ct.generator import GeneratorConfig
from xray2ct.phantom import PhantomSpec, build_dataset
from xray2ct.trainer import read_log, train


def smoke_config(out: Path, seed: int = 0, epochs: int = 50) -> TrainConfig:
    return TrainConfig(
        name="overfit", manifest=str(out / "data" / "manifest.json"), out_dir=str(out / "runs"),
        epochs=epochs, decay_start=(4 * epochs) // 5, lr=2e-3, batch_size=1, seed=seed, checkpoint_every=epochs,
        generator=GeneratorConfig(size=32, base_channels=32, n_levels=4, head_channels=16),
        discriminator=DiscriminatorConfig(base_channels=16),
    )


def run(out, seed=0, epochs=50):
    out = Path(out)
    build_dataset(2, PhantomSpec(shape=(32, 32, 32)), out / "data", seed=seed, test_fraction=0.0)
    cfg = smoke_config(out, seed, epochs)
    t0 = time.time()
    trainer = train(cfg)
    report = evaluate(trainer.gen, cfg.manifest, "train")
    rows = read_log(cfg.run_dir / "loss_log.csv")
    medians = [float(np.median([r["g_voxel"] for r in rows if r["epoch"] == e])) for e in range(epochs)]
    return {"seconds": time.time() - t0, "metrics": report.aggregate, "g_voxel_medians": medians,
            "log_rows": len(rows), "run_dir": str(cfg.run_dir)}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = run(args.out, args.seed, args.epochs)
    print(json.dumps({k: v for k, v in result.items() if k != "g_voxel_medians"}, indent=1))
    print("g_voxel epoch medians:", " ".join(f"{m:.4f}" for m in result["g_voxel_medians"]))
