"""Sweep the HE/HA loss weight on a small synthetic set and report PSNR/SSIM.

Each run only differs in ``model.beta_weight``; everything else, including
the seed, is shared.

    python scripts/beta_sweep.py --betas 0.1 0.2 0.5 0.8 --iterations 300
"""
import argparse
from pathlib import Path

from hdwsr import engine
from hdwsr.config import RunConfig
from hdwsr.imageio import write_png
from hdwsr.synthetic import textured_patch


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--betas", type=float, nargs="+", default=[0.1, 0.2, 0.5, 0.8])
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs/beta_sweep")
    args = p.parse_args()

    root = Path(args.out_dir)
    train_dir, eval_dir = root / "train", root / "eval"
    for d, offset in ((train_dir, 0), (eval_dir, 100)):
        d.mkdir(parents=True, exist_ok=True)
        for i in range(args.images):
            write_png(d / f"img{i}.png", textured_patch(64, offset + i))

    rows = []
    for beta in args.betas:
        cfg = RunConfig().with_overrides({
            "model.base_channels": 4,
            "model.levels": 2,
            "model.dfa_repeats": [1, 1],
            "model.decoder_repeats": [1, 1],
            "model.T": 20,
            "model.beta_weight": beta,
            "data.train_dir": str(train_dir),
            "data.patch": 32,
            "data.scale": 4,
            "optim.lr": 1e-3,
            "optim.iterations": args.iterations,
            "optim.batch_size": 2,
            "optim.checkpoint_every": args.iterations,
            "seed": args.seed,
            "out_dir": str(root / f"beta_{beta}"),
        })
        ckpt = engine.train(cfg)
        result = engine.evaluate(ckpt, eval_dir, seed=args.seed, max_size=32)
        rows.append((beta, result["mean_psnr"], result["mean_ssim"]))
        print(f"beta={beta:.2f}  psnr={result['mean_psnr']:.3f}  ssim={result['mean_ssim']:.4f}", flush=True)

    print("\nbeta   PSNR     SSIM")
    for beta, p_, s_ in rows:
        print(f"{beta:4.2f}  {p_:7.3f}  {s_:.4f}")


if __name__ == "__main__":
    main()
