"""End-to-end orchestration: solve for G from (D_S, D_T0), extrapolate, train and score per-domain classifiers."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import config as cfgmod
from .config import ExperimentConfig
from .domains import LabeledDataset, UnlabeledDataset, load_mnist, make_domain_sequence
from .models import AutoencoderSpec, ClassifierSpec, LatentGanSpec, TransformerSpec, save_checkpoint
from .training import (
    MetricsLog, TrainingDiverged, apply_batched, as_tensor, distill_transformer, predict,
    train_autoencoder, train_classifier, train_latent_cyclegan,
)

log = logging.getLogger(__name__)


def domain_keys(num_target_domains: int) -> list[str]:
    return ["S"] + [f"T{i}" for i in range(num_target_domains)]


@dataclass
class RunResult:
    method: str                    # "dotra" or "source_only"
    operation: str
    magnitude: float
    seed: int
    converged: bool
    accuracies: dict               # "S", "T0", ... -> fraction in [0, 1]
    predicted_mse: dict = field(default_factory=dict)   # "T0", ... -> mean per-pixel MSE vs ground truth
    stage_losses: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        return cls(**json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunResult":
        return cls.from_json(Path(path).read_text())


# -------------------------------------------------------------------- solver

@dataclass
class DtiSolution:
    transformer: nn.Module
    stage_losses: dict
    networks: dict                 # name -> (module, spec, epochs) for checkpointing


def solve_dti(source: LabeledDataset, target0: UnlabeledDataset, config: ExperimentConfig,
              seed: int | None = None, metrics: MetricsLog | None = None) -> DtiSolution:
    """Learn the pixel-space transformer G from labeled source images and unlabeled T0 images.

    Only images are read. T0 must arrive as a plain UnlabeledDataset so that no
    labels can reach this code path.
    """
    if not isinstance(source, UnlabeledDataset):
        raise TypeError(f"source must be a dataset, got {type(source).__name__}")
    if type(target0) is not UnlabeledDataset:
        raise TypeError(f"target0 must be an UnlabeledDataset, got {type(target0).__name__}")
    if len(source) == 0 or len(target0) == 0:
        raise ValueError("solve_dti needs non-empty source and target datasets")
    seed = config.seed if seed is None else seed

    ae_spec = AutoencoderSpec()
    gan_spec = LatentGanSpec(latent_dim=ae_spec.latent_dim, residual=config.residual_generator)
    tr_spec = TransformerSpec()

    # both autoencoders start from the same initialisation; with identical data they coincide
    ae_s = train_autoencoder(source.images, ae_spec, config.ae, seed, metrics, stage="ae_source")
    ae_t = train_autoencoder(target0.images, ae_spec, config.ae, seed, metrics, stage="ae_target")
    z_s = apply_batched(ae_s.encoder, as_tensor(source.images))
    z_t = apply_batched(ae_t.encoder, as_tensor(target0.images))
    gan = train_latent_cyclegan(z_s, z_t, gan_spec, config.gan, seed + 1, metrics)
    dist = distill_transformer(source.images, ae_s.encoder, gan.G_E, ae_t.decoder, tr_spec, config.distill,
                               seed + 2, metrics)

    losses = {
        "ae_source_holdout_mse": ae_s.holdout_mse,
        "ae_target_holdout_mse": ae_t.holdout_mse,
        "cycle_initial": gan.initial_cycle,
        "cycle_final": gan.final_cycle,
        "distill_holdout_mse": dist.holdout_mse,
    }
    networks = {
        "encoder_source": (ae_s.encoder, ae_spec, config.ae.epochs),
        "decoder_source": (ae_s.decoder, ae_spec, config.ae.epochs),
        "encoder_target": (ae_t.encoder, ae_spec, config.ae.epochs),
        "decoder_target": (ae_t.decoder, ae_spec, config.ae.epochs),
        "generator_st": (gan.G_E, gan_spec, config.gan.epochs),
        "generator_ts": (gan.F_E, gan_spec, config.gan.epochs),
        "discriminator_s": (gan.D_S, gan_spec, config.gan.epochs),
        "discriminator_t": (gan.D_T, gan_spec, config.gan.epochs),
        "transformer": (dist.transformer, tr_spec, config.distill.epochs),
    }
    return DtiSolution(dist.transformer, losses, networks)


def extrapolate_domain(G: nn.Module, data: LabeledDataset, steps: int) -> LabeledDataset:
    """Apply G `steps` times; labels pass through untouched."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return data
    x = as_tensor(data.images)
    G.eval()
    for _ in range(steps):
        x = apply_batched(G, x)
    return data.with_images(x.numpy())


def evaluate_classifier(classifier, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = classifier(data.images) if not isinstance(classifier, nn.Module) else predict(classifier, data.images)
    return float(np.mean(np.asarray(pred) == data.labels))


# --------------------------------------------------------------- experiments

@dataclass
class DomainSplit:
    source: LabeledDataset          # labeled train images, domain S
    target0: UnlabeledDataset       # unlabeled train images, domain T0
    test_domains: list              # ground truth [S, T0, ..., T_{k-1}] built from the test split


def prepare_domains(train: LabeledDataset, test: LabeledDataset, config: ExperimentConfig, seed: int) -> DomainSplit:
    """Pick source and T0 training images.

    When 2 * n_train fits in the training split both come from disjoint subsets,
    otherwise T0 reuses images in an independent order. Either way nothing pairs
    a source image with its transformed version.
    """
    n_all = len(train)
    n = min(config.n_train or n_all, n_all)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_all)
    src_idx = perm[:n]
    tgt_idx = perm[n:2 * n] if 2 * n <= n_all else rng.permutation(n_all)[:n]
    op = config.op
    source = train.subset(np.sort(src_idx))
    target0 = UnlabeledDataset(op(train.images[np.sort(tgt_idx)]))
    return DomainSplit(source, target0, make_domain_sequence(test, op, config.num_target_domains + 1))


def run_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.out_dir) / config.operation / str(seed)


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def _source_classifier(split: DomainSplit, config: ExperimentConfig, seed: int, metrics: MetricsLog):
    return train_classifier(split.source.images, split.source.labels, ClassifierSpec(), config.classifier,
                            seed + 10, metrics, stage="classifier_S")


def run_single(config: ExperimentConfig, seed: int, train: LabeledDataset, test: LabeledDataset,
               dotra: bool = True, baseline: bool = True, save: bool = True) -> dict:
    """One seeded run. Returns {"dotra": RunResult, "source_only": RunResult} for the requested methods."""
    torch.manual_seed(seed)
    t0 = time.time()
    keys = domain_keys(config.num_target_domains)
    out = run_dir(config, seed)
    metrics = MetricsLog(seed=seed)
    split = prepare_domains(train, test, config, seed)
    results = {}

    if save:
        cfgmod.write_flat(dataclasses.replace(config, seed=seed, runs=1), out / "config.txt")

    clf_s = _source_classifier(split, config, seed, metrics)
    acc_s = evaluate_classifier(clf_s, split.test_domains[0])
    if save:
        save_checkpoint(clf_s, out / "checkpoints", "classifier_S", config.classifier.epochs, ClassifierSpec(), seed)

    if baseline:
        accs = {k: evaluate_classifier(clf_s, d) for k, d in zip(keys, split.test_domains)}
        results["source_only"] = RunResult("source_only", config.operation, config.op.magnitude, seed, True, accs,
                                           wall_seconds=round(time.time() - t0, 1))

    if dotra:
        accs, mses, losses, error, converged = {"S": acc_s}, {}, {}, None, True
        try:
            # the solver sees labeled source train images and unlabeled T0 train images, nothing else
            sol = solve_dti(split.source, split.target0, config, seed, metrics)
            losses = sol.stage_losses
            if save:
                for name, (module, spec, epochs) in sol.networks.items():
                    save_checkpoint(module, out / "checkpoints", name, epochs, spec, seed)
            for i, key in enumerate(keys[1:]):
                predicted = extrapolate_domain(sol.transformer, split.source, i + 1)
                clf = train_classifier(predicted.images, predicted.labels, ClassifierSpec(), config.classifier,
                                       seed + 11 + i, metrics, stage=f"classifier_{key}")
                accs[key] = evaluate_classifier(clf, split.test_domains[i + 1])
                truth = split.test_domains[i + 1]
                mses[key] = _mse(extrapolate_domain(sol.transformer, split.test_domains[0], i + 1).images, truth.images)
                log.info("seed %d %s accuracy %.4f mse %.4f", seed, key, accs[key], mses[key])
        except TrainingDiverged as e:
            # kept in the sample; unreachable domains score zero
            converged, error = False, str(e)
            log.warning("seed %d aborted: %s", seed, e)
            accs.update({k: 0.0 for k in keys[1:] if k not in accs})
        results["dotra"] = RunResult("dotra", config.operation, config.op.magnitude, seed, converged, accs, mses,
                                     losses, round(time.time() - t0, 1), error)

    if save:
        if "dotra" in results:
            results["dotra"].save(out / "result.json")
        if "source_only" in results:
            results["source_only"].save(out / "source_only.json")
        metrics.append_csv(out / "metrics.csv")
        metrics.append_csv(out.parent / "metrics.csv")
    return results


def _load_data(config: ExperimentConfig):
    return load_mnist("train", config.data_dir), load_mnist("test", config.data_dir)


def _worker(flat: dict, seed: int, dotra: bool, baseline: bool) -> dict:
    torch.set_num_threads(1)
    config = cfgmod.apply(ExperimentConfig(), flat)
    train, test = _load_data(config)
    res = run_single(config, seed, train, test, dotra, baseline)
    return {k: dataclasses.asdict(v) for k, v in res.items()}


def run_experiment(config: ExperimentConfig, dotra: bool = True, baseline: bool = True, data=None) -> dict:
    """Runs every seed; returns {"dotra": [...], "source_only": [...]} in seed order."""
    config.validate()
    seeds = config.run_seeds()
    collected = {"dotra": [], "source_only": []}
    if config.parallel_runs > 1 and len(seeds) > 1:
        import multiprocessing as mp

        flat = cfgmod.to_flat(config)
        with ProcessPoolExecutor(config.parallel_runs, mp_context=mp.get_context("spawn")) as pool:
            futures = [pool.submit(_worker, flat, s, dotra, baseline) for s in seeds]
            for fut in futures:
                for k, v in fut.result().items():
                    collected[k].append(RunResult(**v))
    else:
        train, test = data if data is not None else _load_data(config)
        for s in seeds:
            for k, v in run_single(config, s, train, test, dotra, baseline).items():
                collected[k].append(v)
    return collected


def run_dotra_experiment(config: ExperimentConfig, data=None) -> list[RunResult]:
    """DoTra runs; the source-only numbers fall out of the same source classifier and are saved alongside."""
    return run_experiment(config, dotra=True, baseline=True, data=data)["dotra"]


def run_source_only_baseline(config: ExperimentConfig, data=None) -> list[RunResult]:
    return run_experiment(config, dotra=False, baseline=True, data=data)["source_only"]
