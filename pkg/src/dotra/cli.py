"""Command line entry point: run, baseline, report, grids, smoke."""
from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, read_flat
from .domains import OPERATIONS, DataFormatError, LabeledDataset, load_mnist, make_domain_sequence
from .training import TrainingDiverged

log = logging.getLogger("dotra")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors (exit 1), not argparse's default 2
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--op", dest="operation", choices=OPERATIONS)
    p.add_argument("--magnitude", type=float)
    p.add_argument("--scale", choices=("full", "desk"))
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-target-domains", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--parallel-runs", type=int)
    for stage in ("ae", "gan", "distill", "classifier"):
        p.add_argument(f"--epochs-{stage}", type=int)
    p.add_argument("--plain-generator", action="store_true",
                   help="latent generators without the identity skip connection")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dotra", description="Domain transformation learning and extrapolation on MNIST.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _experiment_flags(sub.add_parser("run", help="DoTra runs (also records the source-only numbers)"))
    _experiment_flags(sub.add_parser("baseline", help="source-only classifier runs"))
    rep = sub.add_parser("report", help="aggregate result files into results tables")
    rep.add_argument("--out-dir", default="results")
    grids = sub.add_parser("grids", help="sample grids from saved transformers")
    grids.add_argument("--out-dir", default="results")
    grids.add_argument("--data-dir")
    grids.add_argument("--seed", type=int, help="run to draw from (default: lowest seed found)")
    smoke = sub.add_parser("smoke", help="tiny end-to-end run on synthetic data")
    smoke.add_argument("--out-dir")
    return parser


def config_from_args(args) -> ExperimentConfig:
    flags = {
        "operation": args.operation, "magnitude": args.magnitude, "scale": args.scale, "runs": args.runs,
        "seed": args.seed, "num_target_domains": args.num_target_domains, "n_train": args.n_train,
        "data_dir": args.data_dir, "out_dir": args.out_dir, "parallel_runs": args.parallel_runs,
        "ae.epochs": args.epochs_ae, "gan.epochs": args.epochs_gan,
        "distill.epochs": args.epochs_distill, "classifier.epochs": args.epochs_classifier,
    }
    if args.plain_generator:
        flags["residual_generator"] = False
    return load_config(flags, args.config)


def _cmd_run(args, baseline_only: bool) -> int:
    from .pipeline import run_experiment

    cfg = config_from_args(args)
    out = run_experiment(cfg, dotra=not baseline_only, baseline=True)
    key = "source_only" if baseline_only else "dotra"
    for r in out[key]:
        accs = " ".join(f"{k}={v:.4f}" for k, v in r.accuracies.items())
        print(f"{cfg.operation} seed {r.seed} {key}: {accs}{'' if r.converged else ' (not converged)'}")
    aborted = [r for r in out[key] if not r.converged]
    if aborted:
        print(f"error: {len(aborted)} run(s) aborted during training: {aborted[0].error}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


def _cmd_report(args) -> int:
    from .reporting import report

    csv_path, md_path = report(args.out_dir)
    print(md_path.read_text(), end="")
    print(f"wrote {csv_path} and {md_path}")
    return EXIT_OK


def _cmd_grids(args) -> int:
    import torch

    from .models import TransformerSpec, build_domain_transformer, load_checkpoint, read_checkpoint_meta, spec_from_meta
    from .pipeline import extrapolate_domain
    from .reporting import emit_sample_grid

    out_dir = Path(args.out_dir)
    written = 0
    test_cache = {}
    for op_dir in sorted(p for p in out_dir.iterdir() if p.is_dir()):
        runs = sorted((int(d.name), d) for d in op_dir.iterdir()
                      if d.is_dir() and d.name.isdigit() and list((d / "checkpoints").glob("transformer_*.ckpt")))
        if args.seed is not None:
            runs = [r for r in runs if r[0] == args.seed]
        if not runs:
            continue
        seed, run = runs[0]
        cfg = load_config(read_flat(run / "config.txt"))
        data_dir = args.data_dir or cfg.data_dir
        if data_dir not in test_cache:
            test_cache[data_dir] = load_mnist("test", data_dir)
        test = test_cache[data_dir]
        ckpt = sorted((run / "checkpoints").glob("transformer_*.ckpt"))[-1]
        spec = spec_from_meta(read_checkpoint_meta(ckpt), TransformerSpec)
        G = load_checkpoint(build_domain_transformer(spec), ckpt).eval()
        k = cfg.num_target_domains
        with torch.no_grad():
            predicted = [extrapolate_domain(G, test, i) for i in range(k + 1)]
        emit_sample_grid(predicted, out_dir / f"samples_{cfg.operation}.png")
        emit_sample_grid(make_domain_sequence(test, cfg.op, k + 1), out_dir / f"truth_{cfg.operation}.png")
        print(f"{cfg.operation}: grids from seed {seed} -> samples_{cfg.operation}.png, truth_{cfg.operation}.png")
        written += 1
    if not written:
        raise DataFormatError(f"no saved transformers under {out_dir}")
    return EXIT_OK


def synthetic_digits(n: int, seed: int = 0) -> LabeledDataset:
    """Ten fixed blob templates plus noise, standing in for MNIST in smoke runs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32]
    templates = []
    for c in range(10):
        t = np.full((32, 32), -1.0)
        for _ in range(3):
            cy, cx = rng.uniform(9, 23, size=2)
            t = np.maximum(t, 2 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 8.0) - 1)
        templates.append(t)
    labels = rng.integers(0, 10, size=n)
    noise = rng.normal(0, 0.05, size=(n, 32, 32))
    images = np.clip(np.stack(templates)[labels] + noise, -1, 1).astype(np.float32)[:, None]
    return LabeledDataset(images, labels.astype(np.int64))


def _cmd_smoke(args) -> int:
    from .pipeline import run_single
    from .reporting import aggregate_all, emit_results_table, emit_sample_grid

    with tempfile.TemporaryDirectory() as tmp:
        out_dir = Path(args.out_dir or tmp)
        flags = {"operation": "shift", "runs": 1, "n_train": 200, "out_dir": str(out_dir),
                 "ae.epochs": 1, "gan.epochs": 1, "gan.decay_start": 0, "distill.epochs": 1,
                 "classifier.epochs": 1, "ae.holdout": 20, "distill.holdout": 20, "classifier.batch_size": 64}
        cfg = load_config(flags)
        train, test = synthetic_digits(400, 0), synthetic_digits(100, 1)
        res = run_single(cfg, cfg.seed, train, test)
        table = aggregate_all(res.values())
        emit_results_table(table, out_dir / "results_table.csv")
        emit_sample_grid(make_domain_sequence(test, cfg.op, 4), out_dir / "samples_smoke.png")
        for key, r in res.items():
            print(key, " ".join(f"{k}={v:.3f}" for k, v in r.accuracies.items()))
        print(f"smoke ok: {len(list(out_dir.rglob('*')))} files written")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command in ("run", "baseline"):
            return _cmd_run(args, baseline_only=args.command == "baseline")
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "grids":
            return _cmd_grids(args)
        return _cmd_smoke(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except ValueError as e:
        # empty collections and the like surface from the pipeline as data problems
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
