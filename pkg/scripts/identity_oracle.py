"""Degenerate problem: T0 is the source itself, so G should come out close to the identity."""
import argparse

import numpy as np
import torch

from dotra.config import load_config
from dotra.domains import load_mnist
from dotra.pipeline import extrapolate_domain, solve_dti


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--data-dir")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--scale", default="desk")
    p.add_argument("--plain-generator", action="store_true")
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = load_config({"scale": args.scale, "residual_generator": not args.plain_generator})
    source = load_mnist("train", args.data_dir).subset(np.arange(args.n))
    held = load_mnist("test", args.data_dir).subset(np.arange(1000))
    sol = solve_dti(source, source.unlabeled(), cfg, seed=0)
    moved = np.abs(extrapolate_domain(sol.transformer, held, 1).images - held.images).mean()
    print(f"mean |G(x) - x| on held-out images: {moved:.4f}")
    for k, v in sol.stage_losses.items():
        print(f"  {k}: {v:.4f}")


if __name__ == "__main__":
    main()
