"""Losses and the staged training procedures: autoencoders, latent Cycle-GAN, distillation, classifiers."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import (
    AutoencoderSpec, ClassifierSpec, LatentGanSpec, TransformerSpec,
    build_autoencoder, build_classifier, build_domain_transformer, build_latent_gan,
)

log = logging.getLogger(__name__)


@dataclass
class AeHparams:
    lr: float = 2e-4
    epochs: int = 30
    batch_size: int = 128
    holdout: int = 1000


@dataclass
class CycleGanHparams:
    lambda_cyc: float = 10.0
    lr: float = 2e-4
    beta1: float = 0.5
    epochs: int = 150
    decay_start: int = 100
    batch_size: int = 128


@dataclass
class DistillHparams:
    lr: float = 2e-4
    epochs: int = 30
    batch_size: int = 128
    holdout: int = 1000


@dataclass
class ClassifierHparams:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 80
    milestones: tuple = (40, 60)
    gamma: float = 0.1


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, epoch: int, loss_name: str):
        super().__init__(f"{stage}: {loss_name} became non-finite at epoch {epoch}")
        self.stage = stage
        self.epoch = epoch


# ------------------------------------------------------------------- metrics

@dataclass
class MetricsLog:
    seed: int | None = None
    rows: list = field(default_factory=list)
    _t0: float = field(default_factory=time.time)

    def add(self, stage: str, epoch: int, loss_name: str, value: float):
        self.rows.append((stage, epoch, loss_name, float(value), self.seed, round(time.time() - self._t0, 3)))

    def last(self, stage: str, loss_name: str) -> float:
        for row in reversed(self.rows):
            if row[0] == stage and row[2] == loss_name:
                return row[3]
        raise KeyError((stage, loss_name))

    def series(self, stage: str, loss_name: str) -> list[float]:
        return [r[3] for r in self.rows if r[0] == stage and r[2] == loss_name]

    COLUMNS = ("stage", "epoch", "loss_name", "value", "seed", "wall_seconds")

    def append_csv(self, path):
        path = Path(path)
        new = not path.exists()
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(self.COLUMNS)
            w.writerows(self.rows)


def _check_finite(value: float, stage: str, epoch: int, name: str):
    if not math.isfinite(value):
        raise TrainingDiverged(stage, epoch, name)


# -------------------------------------------------------------------- losses

def ae_loss(x: torch.Tensor, encoder, decoder) -> torch.Tensor:
    """Mean squared reconstruction error over batch and pixels."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    recon = decoder(encoder(x))
    if recon.shape != x.shape:
        raise ValueError(f"reconstruction shape {tuple(recon.shape)} != input shape {tuple(x.shape)}")
    return F.mse_loss(recon, x)


def distill_loss(student_out: torch.Tensor, teacher_out: torch.Tensor) -> torch.Tensor:
    if student_out.shape != teacher_out.shape:
        raise ValueError(f"student shape {tuple(student_out.shape)} != teacher shape {tuple(teacher_out.shape)}")
    return F.mse_loss(student_out, teacher_out)


def _ls(score: torch.Tensor, target: float) -> torch.Tensor:
    return ((score - target) ** 2).mean()


@dataclass
class CycleGanLosses:
    generator: torch.Tensor       # adversarial + lambda * cycle
    discriminator: torch.Tensor   # D_S term + D_T term
    adversarial: torch.Tensor     # both generators' least-squares terms
    cycle: torch.Tensor           # unweighted L1 cycle residual
    disc_source: torch.Tensor
    disc_target: torch.Tensor


def cyclegan_losses(z_s, z_t, G_E, F_E, D_S, D_T, lambda_cyc: float = 10.0) -> CycleGanLosses:
    """Least-squares Cycle-GAN objective on latent code batches.

    `discriminator` is computed on detached fakes, so backpropagating it never
    touches generator parameters. Each discriminator term carries the 0.5 factor
    of the reference implementation, which puts the no-information equilibrium
    (score 0.5 everywhere) at 0.25 per discriminator.
    """
    if z_s.shape[0] == 0 or z_t.shape[0] == 0:
        raise ValueError("empty latent batch")
    if z_s.shape[1] != z_t.shape[1]:
        raise ValueError(f"latent dims differ: {z_s.shape[1]} vs {z_t.shape[1]}")
    fake_t = G_E(z_s)
    fake_s = F_E(z_t)
    adversarial = _ls(D_T(fake_t), 1.0) + _ls(D_S(fake_s), 1.0)
    cycle = (F_E(fake_t) - z_s).abs().mean() + (G_E(fake_s) - z_t).abs().mean()
    disc_t = 0.5 * (_ls(D_T(z_t), 1.0) + _ls(D_T(fake_t.detach()), 0.0))
    disc_s = 0.5 * (_ls(D_S(z_s), 1.0) + _ls(D_S(fake_s.detach()), 0.0))
    return CycleGanLosses(
        generator=adversarial + lambda_cyc * cycle,
        discriminator=disc_s + disc_t,
        adversarial=adversarial,
        cycle=cycle,
        disc_source=disc_s,
        disc_target=disc_t,
    )


# ----------------------------------------------------------------- schedules

def classifier_lr(epoch: int, hp: ClassifierHparams) -> float:
    """Step decay; `epoch` is 0-based, so with milestones (40, 60) epoch 40 is the first decayed one."""
    k = sum(epoch >= m for m in hp.milestones)
    return hp.lr * hp.gamma ** k


def cyclegan_lr(epoch: int, hp: CycleGanHparams) -> float:
    """Constant until `decay_start`, then linear towards 0 at `epochs`."""
    if epoch < hp.decay_start:
        return hp.lr
    span = max(hp.epochs - hp.decay_start, 1)
    return hp.lr * max(0.0, 1.0 - (epoch - hp.decay_start) / span)


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for g in opt.param_groups:
        g["lr"] = lr


# ------------------------------------------------------------------- helpers

def as_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.float()
    a = np.asarray(images, dtype=np.float32)
    # dataset arrays are read-only; torch wants writable memory
    return torch.from_numpy(a if a.flags.writeable else a.copy())


def _batches(n: int, batch_size: int, gen: torch.Generator, drop_last: bool = False):
    perm = torch.randperm(n, generator=gen)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for i in range(0, stop, batch_size):
        yield perm[i:i + batch_size]


def _split_holdout(n: int, holdout: int, gen: torch.Generator):
    holdout = min(holdout, n // 10)
    perm = torch.randperm(n, generator=gen)
    return perm[holdout:], perm[:holdout]


@torch.no_grad()
def apply_batched(fn, x: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]) if len(x) else x


def freeze(*modules: nn.Module):
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


# ---------------------------------------------------------------- procedures

@dataclass
class AutoencoderResult:
    encoder: nn.Module
    decoder: nn.Module
    holdout_mse: float
    initial_loss: float
    final_loss: float


def train_autoencoder(images, spec: AutoencoderSpec = AutoencoderSpec(), hp: AeHparams = AeHparams(),
                      seed: int = 0, metrics: MetricsLog | None = None, stage: str = "ae") -> AutoencoderResult:
    x = as_tensor(images)
    if len(x) == 0:
        raise ValueError("cannot train an autoencoder on an empty dataset")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    encoder, decoder = build_autoencoder(spec)
    train_idx, held_idx = _split_holdout(len(x), hp.holdout, gen)
    x_train, x_held = x[train_idx], x[held_idx]
    opt = torch.optim.Adam([*encoder.parameters(), *decoder.parameters()], lr=hp.lr)

    initial = None
    for epoch in range(hp.epochs):
        encoder.train(), decoder.train()
        total, count = 0.0, 0
        for idx in _batches(len(x_train), hp.batch_size, gen):
            loss = ae_loss(x_train[idx], encoder, decoder)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if initial is None:
                initial = loss.item()
            total += loss.item() * len(idx)
            count += len(idx)
        epoch_loss = total / count
        _check_finite(epoch_loss, stage, epoch, "recon_mse")
        if metrics is not None:
            metrics.add(stage, epoch, "recon_mse", epoch_loss)
        log.info("%s epoch %d recon %.5f", stage, epoch, epoch_loss)

    freeze(encoder, decoder)
    held = x_held if len(x_held) else x_train
    holdout_mse = F.mse_loss(apply_batched(lambda b: decoder(encoder(b)), held), held).item()
    if metrics is not None:
        metrics.add(stage, hp.epochs, "holdout_recon_mse", holdout_mse)
    return AutoencoderResult(encoder, decoder, holdout_mse, initial if initial is not None else float("nan"),
                             epoch_loss if hp.epochs else float("nan"))


@dataclass
class CycleGanResult:
    G_E: nn.Module
    F_E: nn.Module
    D_S: nn.Module
    D_T: nn.Module
    initial_cycle: float
    final_cycle: float


@torch.no_grad()
def cycle_residual(z_s, z_t, G_E, F_E) -> float:
    """Mean L1 cycle residual summed over both directions, in eval mode."""
    return ((F_E(G_E(z_s)) - z_s).abs().mean() + (G_E(F_E(z_t)) - z_t).abs().mean()).item()


def train_latent_cyclegan(z_source, z_target, spec: LatentGanSpec = LatentGanSpec(),
                          hp: CycleGanHparams = CycleGanHparams(), seed: int = 0,
                          metrics: MetricsLog | None = None, stage: str = "cyclegan") -> CycleGanResult:
    z_s, z_t = torch.as_tensor(z_source, dtype=torch.float32), torch.as_tensor(z_target, dtype=torch.float32)
    if len(z_s) == 0 or len(z_t) == 0:
        raise ValueError("both code collections must be non-empty")
    if z_s.shape[1] != z_t.shape[1] or z_s.shape[1] != spec.latent_dim:
        raise ValueError(f"latent dims {z_s.shape[1]} / {z_t.shape[1]} do not match spec {spec.latent_dim}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    G_E, F_E, D_S, D_T = build_latent_gan(spec)
    opt_g = torch.optim.Adam([*G_E.parameters(), *F_E.parameters()], lr=hp.lr, betas=(hp.beta1, 0.999))
    opt_d = torch.optim.Adam([*D_S.parameters(), *D_T.parameters()], lr=hp.lr, betas=(hp.beta1, 0.999))
    nets = (G_E, F_E, D_S, D_T)

    for m in nets:
        m.eval()
    initial_cycle = cycle_residual(z_s, z_t, G_E, F_E)
    steps = max(len(z_s), len(z_t)) // hp.batch_size or 1
    bs_s, bs_t = min(hp.batch_size, len(z_s)), min(hp.batch_size, len(z_t))

    for epoch in range(hp.epochs):
        lr = cyclegan_lr(epoch, hp)
        _set_lr(opt_g, lr), _set_lr(opt_d, lr)
        for m in nets:
            m.train()
        sums = dict(generator=0.0, discriminator=0.0, cycle=0.0, adversarial=0.0)
        for _ in range(steps):
            # BatchNorm1d needs at least two samples per batch
            bs = torch.randint(0, len(z_s), (max(bs_s, 2),), generator=gen)
            bt = torch.randint(0, len(z_t), (max(bs_t, 2),), generator=gen)
            losses = cyclegan_losses(z_s[bs], z_t[bt], G_E, F_E, D_S, D_T, hp.lambda_cyc)
            opt_g.zero_grad()
            # discriminator grads from the generator loss are cleared below before their step
            losses.generator.backward()
            opt_g.step()
            opt_d.zero_grad()
            losses.discriminator.backward()
            opt_d.step()
            for k in sums:
                sums[k] += getattr(losses, k).item()
        for k, v in sums.items():
            v /= steps
            _check_finite(v, stage, epoch, k)
            if metrics is not None:
                metrics.add(stage, epoch, k, v)
        log.info("%s epoch %d lr %.2e G %.4f D %.4f cyc %.4f", stage, epoch, lr,
                 sums["generator"] / steps, sums["discriminator"] / steps, sums["cycle"] / steps)

    freeze(*nets)
    final_cycle = cycle_residual(z_s, z_t, G_E, F_E)
    if metrics is not None:
        metrics.add(stage, hp.epochs, "eval_cycle_residual", final_cycle)
    return CycleGanResult(G_E, F_E, D_S, D_T, initial_cycle, final_cycle)


@dataclass
class DistillResult:
    transformer: nn.Module
    holdout_mse: float
    initial_loss: float
    final_loss: float


def teacher_outputs(images, EN_S, G_E, DE_T0, batch_size: int = 1000) -> torch.Tensor:
    """DE_T0(G_E(EN_S(x))) with all three networks in eval mode."""
    freeze(EN_S, G_E, DE_T0)
    return apply_batched(lambda b: DE_T0(G_E(EN_S(b))), as_tensor(images), batch_size)


def distill_transformer(images, EN_S, G_E, DE_T0, spec: TransformerSpec = TransformerSpec(),
                        hp: DistillHparams = DistillHparams(), seed: int = 0,
                        metrics: MetricsLog | None = None, stage: str = "distill") -> DistillResult:
    x = as_tensor(images)
    if len(x) == 0:
        raise ValueError("cannot distill on an empty dataset")
    # teacher is frozen, so its targets are computed once
    y = teacher_outputs(x, EN_S, G_E, DE_T0)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    G = build_domain_transformer(spec)
    train_idx, held_idx = _split_holdout(len(x), hp.holdout, gen)
    opt = torch.optim.Adam(G.parameters(), lr=hp.lr)

    initial = None
    epoch_loss = float("nan")
    for epoch in range(hp.epochs):
        G.train()
        total, count = 0.0, 0
        for idx in _batches(len(train_idx), hp.batch_size, gen):
            b = train_idx[idx]
            loss = distill_loss(G(x[b]), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if initial is None:
                initial = loss.item()
            total += loss.item() * len(b)
            count += len(b)
        epoch_loss = total / count
        _check_finite(epoch_loss, stage, epoch, "distill_mse")
        if metrics is not None:
            metrics.add(stage, epoch, "distill_mse", epoch_loss)
        log.info("%s epoch %d mse %.5f", stage, epoch, epoch_loss)

    freeze(G)
    held = held_idx if len(held_idx) else train_idx
    holdout_mse = F.mse_loss(apply_batched(G, x[held]), y[held]).item()
    if metrics is not None:
        metrics.add(stage, hp.epochs, "holdout_distill_mse", holdout_mse)
    return DistillResult(G, holdout_mse, initial if initial is not None else float("nan"), epoch_loss)


def train_classifier(images, labels, spec: ClassifierSpec = ClassifierSpec(), hp: ClassifierHparams = ClassifierHparams(),
                     seed: int = 0, metrics: MetricsLog | None = None, stage: str = "classifier") -> nn.Module:
    x = as_tensor(images)
    y = labels.long() if isinstance(labels, torch.Tensor) else torch.as_tensor(np.array(labels), dtype=torch.long)
    if len(x) == 0:
        raise ValueError("cannot train a classifier on an empty dataset")
    if len(y) != len(x):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes - 1}]")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = build_classifier(spec)
    opt = torch.optim.SGD(model.parameters(), lr=hp.lr, momentum=hp.momentum, weight_decay=hp.weight_decay)

    for epoch in range(hp.epochs):
        _set_lr(opt, classifier_lr(epoch, hp))
        model.train()
        total, correct, count = 0.0, 0, 0
        # drop a trailing batch of one; BatchNorm rejects it in train mode
        for idx in _batches(len(x), hp.batch_size, gen):
            if len(idx) < 2:
                continue
            logits = model(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += (logits.argmax(1) == y[idx]).sum().item()
            count += len(idx)
        epoch_loss = total / max(count, 1)
        _check_finite(epoch_loss, stage, epoch, "cross_entropy")
        if metrics is not None:
            metrics.add(stage, epoch, "cross_entropy", epoch_loss)
            metrics.add(stage, epoch, "train_accuracy", correct / max(count, 1))
        log.info("%s epoch %d ce %.4f acc %.4f", stage, epoch, epoch_loss, correct / max(count, 1))

    freeze(model)
    return model


@torch.no_grad()
def predict(model: nn.Module, images, batch_size: int = 1000) -> np.ndarray:
    model.eval()
    logits = apply_batched(model, as_tensor(images), batch_size)
    return logits.argmax(1).numpy()
