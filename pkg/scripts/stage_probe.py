"""Where is accuracy lost? Score each stage of a finished run with a classifier trained on true T0.

Printed accuracies on the T0 test split:
  true T0 images                 (probe classifier quality)
  DE_T0(EN_T0(x_T0))             (target autoencoder ceiling)
  DE_T0(G_E(EN_S(x_S)))          (teacher composition)
  G(x_S)                         (distilled transformer)

    python scripts/stage_probe.py results/desk/shift/0
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from dotra.config import load_config, read_flat
from dotra.domains import load_mnist
from dotra.models import (AutoencoderSpec, LatentGanSpec, TransformerSpec, build_autoencoder,
                          build_domain_transformer, build_latent_gan, load_checkpoint)
from dotra.pipeline import evaluate_classifier, prepare_domains
from dotra.training import ClassifierHparams, apply_batched, as_tensor, train_classifier


def latest(run: Path, network: str) -> Path:
    return sorted((run / "checkpoints").glob(f"{network}_*.ckpt"))[-1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("run_dir", type=Path)
    p.add_argument("--data-dir")
    p.add_argument("--probe-epochs", type=int, default=5)
    args = p.parse_args()
    torch.set_num_threads(1)
    run = args.run_dir
    cfg = load_config(read_flat(run / "config.txt"))
    data_dir = args.data_dir or cfg.data_dir
    train, test = load_mnist("train", data_dir), load_mnist("test", data_dir)
    split = prepare_domains(train, test, cfg, cfg.seed)

    gan_spec = LatentGanSpec(residual=cfg.residual_generator)
    enc_s, _ = build_autoencoder(AutoencoderSpec())
    enc_t, dec_t = build_autoencoder(AutoencoderSpec())
    G_E = build_latent_gan(gan_spec)[0]
    G = build_domain_transformer(TransformerSpec())
    for module, name in ((enc_s, "encoder_source"), (enc_t, "encoder_target"), (dec_t, "decoder_target"),
                         (G_E, "generator_st"), (G, "transformer")):
        load_checkpoint(module, latest(run, name)).eval()

    # probe classifier sees ground-truth T0 training images with labels: diagnostics only
    truth_train = train.subset(np.arange(cfg.n_train or len(train))).with_images(
        cfg.op(train.images[: cfg.n_train or len(train)]))
    probe = train_classifier(truth_train.images, truth_train.labels,
                             hp=ClassifierHparams(epochs=args.probe_epochs, milestones=()), seed=99)
    src, t0 = split.test_domains[0], split.test_domains[1]
    with torch.no_grad():
        x_s, x_t = as_tensor(src.images), as_tensor(t0.images)
        variants = {
            "true T0 images": t0,
            "target AE reconstruction": t0.with_images(apply_batched(lambda b: dec_t(enc_t(b)), x_t).numpy()),
            "teacher DE_T0(G_E(EN_S(x)))": src.with_images(apply_batched(lambda b: dec_t(G_E(enc_s(b))), x_s).numpy()),
            "distilled G(x)": src.with_images(apply_batched(G, x_s).numpy()),
        }
    for name, data in variants.items():
        print(f"{name:30s} {evaluate_classifier(probe, data):.4f}")


if __name__ == "__main__":
    main()
