"""Epoch-0 loss-scale audit for the two autoencoder weight groups and a forced violation.

    python scripts/audit_table2.py [--size 32]
"""
import argparse

from xray2ct.config import TrainConfig
from xray2ct.evaluation import audit_from_config
from xray2ct.generator import GeneratorConfig

GROUPS = {
    "a (dae_lambda2=10, dae_lambda4=0.01)": {},
    "b (dae_lambda2=100, dae_lambda4=0.1)": {"weights.dae_lambda2": 100.0, "weights.dae_lambda4": 0.1},
    "forced (dae_lambda4 x1000)": {"weights.dae_lambda4": 10.0},
}

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    base = TrainConfig(seed=args.seed, generator=GeneratorConfig(size=args.size))
    for name, changes in GROUPS.items():
        print(f"== group {name}")
        print(audit_from_config(base.replace(**changes) if changes else base).text())
