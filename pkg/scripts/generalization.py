"""Generalization smoke and two-row ablation on 16 phantoms at 64^3.

Trains the full model (DAE-B + g3DPcept + SGG) and the plain baseline on the same
14-sample training split and seed, then scores both and an untrained generator on
the 2 held-out phantoms.

    python scripts/generalization.py --out runs/general            # about 1 h on one CPU core
    python scripts/generalization.py --out runs/general --grid full  # all 11 ablation rows
"""
import argparse
import json
import logging
import time
from pathlib import Path

from xray2ct.config import TrainConfig
from xray2ct.discriminator import DiscriminatorConfig
from xray2ct.evaluation import TABLE3_GRID, Variant, ablation_table, evaluate, run_ablation
from xray2ct.generator import GeneratorConfig
from xray2ct.phantom import PhantomSpec, build_dataset
from xray2ct.trainer import build_models

FULL = Variant("dae_b+g3dpcept+sgg", "DAE-B", g3dpcept=True, sgg=True)
BASELINE = Variant("baseline")


def base_config(out: Path, seed: int = 0, epochs: int = 100) -> TrainConfig:
    return TrainConfig(
        name="base", manifest=str(out / "data" / "manifest.json"), out_dir=str(out / "runs"),
        epochs=epochs, decay_start=epochs // 2, lr=1e-3, batch_size=2, seed=seed,
        checkpoint_every=max(1, epochs // 4), pcept_slices=8,
        generator=GeneratorConfig(size=64, base_channels=8, n_levels=4),
        discriminator=DiscriminatorConfig(base_channels=8),
    )


def run(out, seed=0, epochs=100, grid=None):
    out = Path(out)
    build_dataset(16, PhantomSpec(shape=(64, 64, 64)), out / "data", seed=seed)
    base = base_config(out, seed, epochs)
    full_cfg = FULL.apply(base)
    untrained, _ = build_models(full_cfg)
    before = evaluate(untrained, base.manifest, "test").aggregate
    t0 = time.time()
    rows = run_ablation(base, grid or [FULL, BASELINE], "test", out / "runs")
    result = {"seconds": time.time() - t0, "untrained": before, "rows": rows}
    (out / "generalization.json").write_text(json.dumps(result, indent=1))
    return result


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/general")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--grid", choices=["pair", "full"], default="pair")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = run(args.out, args.seed, args.epochs, TABLE3_GRID if args.grid == "full" else None)
    print(f"untrained test PSNR {res['untrained']['psnr_db']['mean']:.3f} dB, "
          f"LPIPS {res['untrained']['lpips']['mean']:.3f}")
    print(ablation_table(res["rows"]))
    print(f"{res['seconds']:.0f} s")
