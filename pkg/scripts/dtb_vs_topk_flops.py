"""Attention FLOPs under dtb, top-k (K = M/2) and dense masking.

Two views: a randomly initialised model at several input sizes, and a
two-layer sparse attention pipeline on synthetic bimodal scores where the
high-score group is smaller than M/2.

    python scripts/dtb_vs_topk_flops.py --sizes 32 64 --trials 100
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from hdwsr import engine
from hdwsr.config import RunConfig

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import bimodal_scores, two_layer_flops  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--sizes", type=int, nargs="+", default=[32, 64])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    net = engine.build_model(RunConfig(seed=args.seed))
    print("model (default config, random weights)")
    print(f"{'size':>6} {'dtb':>14} {'topk':>14} {'dense':>14} {'dtb/topk':>9}")
    for size in args.sizes:
        rep = engine.compare_attention_flops(net, size, seed=args.seed)
        d, t, n = rep["dtb"]["total"], rep["topk"]["total"], rep["dense"]["total"]
        print(f"{size:>6} {d:>14,} {t:>14,} {n:>14,} {d / t:>9.3f}")

    rng = np.random.default_rng(args.seed)
    wins, ratios = 0, []
    for _ in range(args.trials):
        n, m = int(rng.integers(16, 65)), int(rng.integers(16, 65))
        q, k = bimodal_scores(rng, n, m, int(rng.integers(1, m // 2)))
        v = rng.standard_normal((m, 8))
        dtb = two_layer_flops(q, k, v, "dtb")
        topk = two_layer_flops(q, k, v, "topk", m // 2)
        wins += dtb <= topk
        ratios.append(dtb / topk)
    print(f"\nbimodal synthetic: dtb <= topk in {wins}/{args.trials} trials, "
          f"median dtb/topk {np.median(ratios):.3f}")


if __name__ == "__main__":
    main()
