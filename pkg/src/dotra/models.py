"""Network builders: VGG-style classifier, convolutional autoencoder, latent Cycle-GAN, domain transformer."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn


@dataclass(frozen=True)
class ClassifierSpec:
    num_classes: int = 10
    block_widths: tuple = (32, 64, 128, 256, 256)
    dropout_rate: float = 0.5


@dataclass(frozen=True)
class AutoencoderSpec:
    latent_dim: int = 64
    encoder_widths: tuple = (32, 64, 128, 256, 256)
    leak: float = 0.05
    kernel: int = 4
    stride: int = 2


@dataclass(frozen=True)
class LatentGanSpec:
    latent_dim: int = 64
    hidden_dim: int = 128
    leak: float = 0.2
    residual: bool = True


@dataclass(frozen=True)
class TransformerSpec:
    down_widths: tuple = (32, 64)
    mid_width: int = 64
    up_widths: tuple = (64, 32)
    leak: float = 0.05


class ImageShapeCheck(nn.Module):
    """Rejects anything that is not a batch of 1x32x32 images."""

    def forward(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, 32, 32):
            raise ValueError(f"expected input of shape (B, 1, 32, 32), got {tuple(x.shape)}")
        return x


class LatentShapeCheck(nn.Module):
    def __init__(self, latent_dim: int):
        super().__init__()
        self.latent_dim = latent_dim

    def forward(self, z):
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent codes of shape (B, {self.latent_dim}), got {tuple(z.shape)}")
        return z


def crbm(c_in: int, c_out: int) -> list[nn.Module]:
    return [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(c_out), nn.MaxPool2d(2)]


def cbl(c_in: int, c_out: int, kernel: int = 4, stride: int = 2, leak: float = 0.05) -> list[nn.Module]:
    pad = (kernel - stride + 1) // 2
    return [nn.Conv2d(c_in, c_out, kernel, stride, pad), nn.BatchNorm2d(c_out), nn.LeakyReLU(leak, inplace=True)]


def dbl(c_in: int, c_out: int, kernel: int = 4, stride: int = 2, leak: float = 0.05, last: bool = False) -> list[nn.Module]:
    pad = (kernel - stride + 1) // 2
    deconv = nn.ConvTranspose2d(c_in, c_out, kernel, stride, pad)
    if last:
        # output block: bounded symmetric activation instead of BN + leaky relu
        return [deconv, nn.Tanh()]
    return [deconv, nn.BatchNorm2d(c_out), nn.LeakyReLU(leak, inplace=True)]


def build_classifier(spec: ClassifierSpec = ClassifierSpec()) -> nn.Sequential:
    if len(spec.block_widths) != 5:
        raise ValueError("classifier needs exactly 5 block widths")
    widths = (1, *spec.block_widths)
    layers: list[nn.Module] = [ImageShapeCheck()]
    for c_in, c_out in zip(widths, widths[1:]):
        layers += crbm(c_in, c_out)
    layers += [nn.Flatten(), nn.Dropout(spec.dropout_rate), nn.Linear(widths[-1], spec.num_classes)]
    return nn.Sequential(*layers)


def build_autoencoder(spec: AutoencoderSpec = AutoencoderSpec()) -> tuple[nn.Sequential, nn.Sequential]:
    """Returns (encoder, decoder). The 5 stride-2 blocks take 32x32 down to 1x1."""
    if len(spec.encoder_widths) != 5:
        raise ValueError("autoencoder needs exactly 5 encoder widths")
    widths = (1, *spec.encoder_widths)
    k, s, a = spec.kernel, spec.stride, spec.leak

    enc: list[nn.Module] = [ImageShapeCheck()]
    for c_in, c_out in zip(widths, widths[1:]):
        enc += cbl(c_in, c_out, k, s, a)
    enc += [nn.Flatten(), nn.Linear(widths[-1], spec.latent_dim)]

    rev = widths[::-1]
    dec: list[nn.Module] = [LatentShapeCheck(spec.latent_dim), nn.Linear(spec.latent_dim, rev[0]), nn.Unflatten(1, (rev[0], 1, 1))]
    for i, (c_in, c_out) in enumerate(zip(rev, rev[1:])):
        dec += dbl(c_in, c_out, k, s, a, last=i == len(rev) - 2)
    return nn.Sequential(*enc), nn.Sequential(*dec)


def _mlp(spec: LatentGanSpec, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        LatentShapeCheck(spec.latent_dim),
        nn.Linear(spec.latent_dim, spec.hidden_dim),
        nn.BatchNorm1d(spec.hidden_dim),
        nn.LeakyReLU(spec.leak, inplace=True),
        nn.Linear(spec.hidden_dim, out_dim),
    )


class ResidualGenerator(nn.Module):
    """z + net(z), with the last layer zeroed so a fresh generator is the identity map."""

    def __init__(self, net: nn.Sequential):
        super().__init__()
        self.net = net
        nn.init.zeros_(net[-1].weight)
        nn.init.zeros_(net[-1].bias)

    def forward(self, z):
        return z + self.net(z)


def build_latent_gan(spec: LatentGanSpec = LatentGanSpec()):
    """Returns (G_E, F_E, D_S, D_T).

    G_E maps source codes to target codes, F_E the reverse. D_S scores source codes,
    D_T target codes; scores are unbounded reals for the least-squares loss.
    """
    def generator():
        net = _mlp(spec, spec.latent_dim)
        return ResidualGenerator(net) if spec.residual else net

    return generator(), generator(), _mlp(spec, 1), _mlp(spec, 1)


def build_domain_transformer(spec: TransformerSpec = TransformerSpec()) -> nn.Sequential:
    (d1, d2), (u1, u2) = spec.down_widths, spec.up_widths
    m, a = spec.mid_width, spec.leak
    layers: list[nn.Module] = [ImageShapeCheck()]
    layers += cbl(1, d1, leak=a) + cbl(d1, d2, leak=a)
    layers += [nn.Conv2d(d2, m, 3, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(m),
               nn.Conv2d(m, u1, 3, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(u1)]
    layers += dbl(u1, u2, leak=a) + dbl(u2, 1, leak=a, last=True)
    return nn.Sequential(*layers)


# ------------------------------------------------------------------ checkpoints

def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def save_checkpoint(module: nn.Module, directory, network: str, epoch: int, spec=None, seed: int | None = None) -> Path:
    """Write `{network}_{epoch}.ckpt` plus a `.meta` sidecar of `key = value` lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{network}_{epoch}.ckpt"
    torch.save(module.state_dict(), path)
    meta = {"network": network, "epoch": epoch, "seed": seed}
    if spec is not None:
        meta["spec"] = type(spec).__name__
        meta.update({f"spec.{k}": v for k, v in asdict(spec).items()})
    lines = [f"{k} = {_format_value(v)}" for k, v in meta.items()]
    path.with_suffix(".meta").write_text("\n".join(lines) + "\n")
    return path


def read_checkpoint_meta(path) -> dict:
    meta = {}
    for line in Path(path).with_suffix(".meta").read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def spec_from_meta(meta: dict, spec_cls):
    """Rebuild a spec dataclass from the sidecar written by save_checkpoint."""
    kwargs = {}
    for f in fields(spec_cls):
        raw = meta[f"spec.{f.name}"]
        default = f.default
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(int(x) for x in raw.split(","))
        else:
            kwargs[f.name] = type(default)(raw)
    return spec_cls(**kwargs)


def load_checkpoint(module: nn.Module, path) -> nn.Module:
    module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return module
