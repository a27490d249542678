"""Random-rotation variance study on W4A4 toy models.

For each meta-seed: quantized eval loss of N random Hadamard and N random
orthogonal rotations, plus one rotation learned with Cayley SGD from a
random Hadamard start. Prints one CSV row per meta-seed.

Usage: python scripts/run_variance.py [--seeds 10] [--trials 25] [--iterations 100]
"""

import argparse

from rotquant.cayley import CayleyConfig
from rotquant.experiments import build_setup, variance_study
from rotquant.model import ModelConfig, QuantSites


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--trials", type=int, default=25)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--pretrain-steps", type=int, default=200)
    args = ap.parse_args()

    cfg = ModelConfig(vocab=64, d_model=64, n_layers=2, n_heads=4, d_ffn=128, max_seq=32)
    sites = QuantSites.wakv(4, 4, None)
    print("seed,hadamard_median,hadamard_spread,orthogonal_median,orthogonal_spread,init_loss,learned_loss")
    for seed in range(args.seeds):
        setup = build_setup(cfg, seed, 32, 32, 32, pretrain_steps=args.pretrain_steps, outlier_channels=1)
        st = variance_study(setup, sites, seed, args.trials, CayleyConfig(iterations=args.iterations),
                            r4=True, with_weight_quant=True)
        print(f"{seed},{st.median('random_hadamard'):.5f},{st.spread('random_hadamard'):.5f},"
              f"{st.median('random_orthogonal'):.5f},{st.spread('random_orthogonal'):.5f},"
              f"{st.init_loss:.5f},{st.learned_loss:.5f}")

if __name__ == "__main__":
    main()
