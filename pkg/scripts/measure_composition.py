"""Deviation between chained and single-step rotate / zoom on MNIST-test images."""
import argparse

import numpy as np

from dotra.domains import load_mnist, rotate, zoom_center


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--data-dir")
    p.add_argument("--n", type=int, default=100)
    args = p.parse_args()
    x = load_mnist("test", args.data_dir).images[:args.n]
    cases = {
        "rotate 45+45 vs 90": (rotate(rotate(x, 45), 45), rotate(x, 90)),
        "zoom 1.33^2 vs 1.7689": (zoom_center(zoom_center(x, 1.33), 1.33), zoom_center(x, 1.7689)),
    }
    for name, (two, one) in cases.items():
        d = np.abs(two - one)
        per_image = d.reshape(len(x), -1)
        print(f"{name}: max {d.max():.4f}  mean {d.mean():.4f}  "
              f"median per-image max {np.median(per_image.max(1)):.4f}  worst per-image mean {per_image.mean(1).max():.4f}")


if __name__ == "__main__":
    main()
