"""Can the latent Cycle-GAN recover a known map between two code sets?

Target codes are built from a source encoder: either an exact copy of the codes of
other images (true map = identity) or those codes under a random rotation. After
training, each source code is sent through G_E and matched to its nearest target
code; if G_E found the true map, that neighbour usually has the same digit label.

    python scripts/latent_identifiability.py --run-dir results/desk/shift/0
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from dotra.domains import load_mnist
from dotra.models import AutoencoderSpec, LatentGanSpec, build_autoencoder, load_checkpoint
from dotra.training import AeHparams, CycleGanHparams, apply_batched, as_tensor, train_autoencoder, train_latent_cyclegan


def nn_label_agreement(mapped, targets, target_labels, source_labels):
    nearest = torch.cdist(mapped, targets).argmin(1).numpy()
    return float((target_labels[nearest] == source_labels).mean())


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--data-dir")
    p.add_argument("--run-dir", help="reuse encoder_source from a finished run instead of training one")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--gan-epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=3)
    args = p.parse_args()
    torch.set_num_threads(1)

    train = load_mnist("train", args.data_dir)
    perm = np.random.default_rng(0).permutation(len(train))
    a, b = perm[:args.n], perm[args.n:2 * args.n]
    if args.run_dir:
        enc, _ = build_autoencoder(AutoencoderSpec())
        ckpt = sorted(Path(args.run_dir, "checkpoints").glob("encoder_source_*.ckpt"))[-1]
        enc = load_checkpoint(enc, ckpt).eval()
    else:
        enc = train_autoencoder(train.images[a], hp=AeHparams(epochs=10), seed=0).encoder
    z_a = apply_batched(enc, as_tensor(train.images[a]))
    z_b = apply_batched(enc, as_tensor(train.images[b]))
    y_a, y_b = train.labels[a], train.labels[b]
    probe = slice(0, 2000)

    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(64, 64)))
    maps = {"identity": torch.eye(64), "rotation": torch.tensor(q, dtype=torch.float32)}
    hp = CycleGanHparams(epochs=args.gan_epochs, decay_start=int(args.gan_epochs * 0.625))
    for residual in (False, True):
        for name, Q in maps.items():
            z_t = z_b @ Q
            gan = train_latent_cyclegan(z_a, z_t, LatentGanSpec(residual=residual), hp, seed=args.seed)
            with torch.no_grad():
                mapped = gan.G_E(z_a[probe])
            truth = z_a[probe] @ Q
            got = nn_label_agreement(mapped, z_t, y_b, y_a[probe])
            best = nn_label_agreement(truth, z_t, y_b, y_a[probe])
            err = ((mapped - truth).norm() / truth.norm()).item()
            kind = "residual" if residual else "plain"
            print(f"{kind:8s} {name:8s}: nn-label agreement {got:.3f} (true map {best:.3f}), relative map error {err:.3f}")


if __name__ == "__main__":
    main()
