"""End-to-end logits SNR for no rotation, a random rotation and a learned rotation.

Prints per-seed SNR (dB) on W4A4 toy models, then the means.

Usage: python scripts/run_snr.py [--seeds 20] [--iterations 100]
"""

import argparse

import numpy as np

from rotquant.cayley import CayleyConfig
from rotquant.experiments import build_setup, compare_rotations
from rotquant.model import ModelConfig, QuantSites


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--pretrain-steps", type=int, default=200)
    args = ap.parse_args()

    cfg = ModelConfig(vocab=64, d_model=64, n_layers=2, n_heads=4, d_ffn=128, max_seq=32)
    sites = QuantSites.wakv(4, 4, None)
    rows = []
    print("seed,none_db,random_db,learned_db")
    for seed in range(args.seeds):
        setup = build_setup(cfg, seed, 32, 32, 32, pretrain_steps=args.pretrain_steps, outlier_channels=1)
        c = compare_rotations(setup, sites, seed, CayleyConfig(iterations=args.iterations), r4=True,
                              with_weight_quant=True)
        rows.append((c.none["snr_db"], c.random["snr_db"], c.learned["snr_db"]))
        print(f"{seed},{rows[-1][0]:.3f},{rows[-1][1]:.3f},{rows[-1][2]:.3f}")
    m = np.mean(rows, axis=0)
    print(f"mean,{m[0]:.3f},{m[1]:.3f},{m[2]:.3f}")


if __name__ == "__main__":
    main()
