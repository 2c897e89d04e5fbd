"""Overfit one 64x64 synthetic patch and report SR PSNR as training proceeds.

    python scripts/overfit_single_patch.py --iterations 5000 --eval-every 1000
"""
import argparse
import time

import torch

from hdwsr import engine
from hdwsr.config import RunConfig
from hdwsr.data import PatchStream
from hdwsr.imageio import write_png
from hdwsr.metrics import psnr
from hdwsr.presr import bicubic_downscale, bicubic_upscale
from hdwsr.synthetic import textured_patch


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--eval-every", type=int, default=1000)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--residual-scale", type=float, default=16.0)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--prediction", choices=["eps", "x0", "v"], default="v")
    p.add_argument("--image-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs/overfit")
    args = p.parse_args()

    cfg = RunConfig().with_overrides({
        "model.base_channels": args.channels,
        "model.dfa_repeats": [1, 1, 1],
        "model.decoder_repeats": [1, 1, 1],
        "model.pfa_repeats": 1,
        "model.residual_scale": args.residual_scale,
        "model.prediction": args.prediction,
        "model.T": args.T,
        "model.beta_start": 0.1 / args.T,
        "model.beta_end": 20.0 / args.T,
        "optim.lr": args.lr,
        "optim.iterations": args.iterations,
        "optim.batch_size": 1,
        "optim.checkpoint_every": args.eval_every,
        "seed": args.seed,
        "out_dir": args.out_dir,
    })
    hr = textured_patch(64, args.image_seed)
    lr = bicubic_downscale(hr, 4)
    print(f"bicubic PSNR {psnr(bicubic_upscale(lr, 4), hr):.2f} dB")
    trainer = engine.Trainer(cfg, PatchStream([hr], 64, 4, seed=args.seed))
    print(f"parameters {trainer.net.num_parameters()}")
    start = time.perf_counter()
    while trainer.iteration < args.iterations:
        trainer.run(min(trainer.iteration + args.eval_every, args.iterations))
        sr = engine.sample(trainer.net, lr, engine.presr_source(cfg), seed=0)
        trainer.net.train()
        _, l_he, l_ha, _ = trainer.history[-1]
        print(f"iter {trainer.iteration:5d}  {time.perf_counter() - start:7.1f}s  "
              f"l_he {l_he:.4f}  l_ha {l_ha:.4f}  PSNR {psnr(sr, hr):.2f} dB", flush=True)
    write_png(f"{args.out_dir}/sr.png", sr)
    write_png(f"{args.out_dir}/hr.png", hr)


if __name__ == "__main__":
    torch.set_num_threads(1)
    main()
