import ast
import gc
import inspect
import json
import textwrap

import numpy as np
import pytest
import torch
import torch.nn as nn

from dotra import pipeline, training
from dotra.cli import synthetic_digits
from dotra.config import load_config
from dotra.domains import LabeledDataset, UnlabeledDataset, load_mnist, shift_vertical
from dotra.pipeline import (
    RunResult, evaluate_classifier, extrapolate_domain, prepare_domains, run_dir, run_experiment,
    run_single, solve_dti,
)
from dotra.training import TrainingDiverged

from conftest import mnist_dir, requires_mnist, synthetic_mnist_dir, tiny_flags


@pytest.fixture(scope="module")
def synth():
    return synthetic_digits(300, 0), synthetic_digits(60, 1)


def indexed_train(n=100):
    """Images whose row 10 encodes the sample index, readable after a 6-pixel shift at row 4."""
    x = np.full((n, 1, 32, 32), -1.0, dtype=np.float32)
    x[:, 0, 10, 0] = np.arange(n) / n
    return LabeledDataset(x, np.arange(n) % 10)


# ------------------------------------------------------------------ firewall

def test_solve_dti_rejects_labeled_target(synth):
    train, _ = synth
    cfg = load_config(tiny_flags("unused"))
    with pytest.raises(TypeError):
        solve_dti(train, train, cfg)
    with pytest.raises(TypeError):
        solve_dti(train, train.images, cfg)


def test_solve_dti_rejects_empty(synth):
    train, _ = synth
    cfg = load_config(tiny_flags("unused"))
    with pytest.raises(ValueError):
        solve_dti(train, UnlabeledDataset(np.zeros((0, 1, 32, 32), np.float32)), cfg)


def _attributes(fn) -> set:
    tree = ast.parse(textwrap.dedent(inspect.getsource(fn)))
    return {node.attr for node in ast.walk(tree) if isinstance(node, ast.Attribute)}


def test_solver_code_never_touches_labels():
    # static half: nothing on the solver path reads a `.labels` attribute
    for fn in (solve_dti, training.train_autoencoder, training.train_latent_cyclegan, training.distill_transformer,
               training.teacher_outputs):
        assert "labels" not in _attributes(fn), fn.__name__


def _reachable_ids(roots, limit=200_000) -> set:
    seen, stack = set(), list(roots)
    while stack and len(seen) < limit:
        obj = stack.pop()
        if id(obj) in seen or isinstance(obj, type):
            continue
        seen.add(id(obj))
        stack.extend(gc.get_referents(obj))
        base = getattr(obj, "base", None)
        if isinstance(obj, np.ndarray) and base is not None:
            stack.append(base)
    return seen


def test_solver_inputs_cannot_reach_target_labels_or_future_domains(synth, monkeypatch, tmp_path):
    train, test = synth
    captured = {}

    def spy(source, target0, config, seed=None, metrics=None):
        captured["args"] = (source, target0, config)
        raise TrainingDiverged("spy", 0, "stop")

    monkeypatch.setattr(pipeline, "solve_dti", spy)
    cfg = load_config(tiny_flags(tmp_path))
    split = prepare_domains(train, test, cfg, cfg.seed)
    run_single(cfg, cfg.seed, train, test, baseline=False, save=False)

    source, target0, config = captured["args"]
    assert type(target0) is UnlabeledDataset
    np.testing.assert_array_equal(source.images, split.source.images)
    np.testing.assert_array_equal(target0.images, split.target0.images)

    reachable = _reachable_ids(captured["args"])
    forbidden = [train.labels, train, test, test.labels]
    for d in split.test_domains:
        forbidden += [d, d.images, d.labels]
    assert not any(id(obj) in reachable for obj in forbidden)
    # source labels are the only labels on the solver side, and they belong to source images only
    assert len(source.labels) == len(source.images) == cfg.n_train


# ----------------------------------------------------------- small helpers

def test_extrapolate_steps_and_labels(synth):
    train, _ = synth
    data = train.subset(np.arange(20))
    G = nn.Sequential(nn.Conv2d(1, 1, 3, padding=1), nn.Tanh())
    assert extrapolate_domain(G, data, 0) is data
    two = extrapolate_domain(G, data, 2)
    again = extrapolate_domain(G, extrapolate_domain(G, data, 1), 1)
    np.testing.assert_allclose(two.images, again.images, atol=1e-6)
    np.testing.assert_array_equal(two.labels, data.labels)
    assert sorted(two.labels) == sorted(data.labels)
    with pytest.raises(ValueError):
        extrapolate_domain(G, data, -1)


def test_evaluate_classifier_oracles():
    x = np.zeros((4, 1, 32, 32), np.float32)
    data = LabeledDataset(x, np.array([0, 1, 2, 3]))
    assert evaluate_classifier(lambda imgs: np.array([0, 1, 2, 3]), data) == 1.0
    assert evaluate_classifier(lambda imgs: np.array([0, 1, 2, 9]), data) == 0.75
    balanced = LabeledDataset(np.zeros((1000, 1, 32, 32), np.float32), np.arange(1000) % 10)
    assert evaluate_classifier(lambda imgs: np.zeros(len(imgs), int), balanced) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        evaluate_classifier(lambda imgs: imgs, data.subset(np.array([], dtype=int)))


def test_prepare_domains_disjoint_when_possible():
    train, test = indexed_train(100), indexed_train(30)
    cfg = load_config(tiny_flags("unused", n_train=40, num_target_domains=3))
    split = prepare_domains(train, test, cfg, seed=3)
    src = set(np.rint(split.source.images[:, 0, 10, 0] * 100).astype(int))
    tgt = set(np.rint(split.target0.images[:, 0, 4, 0] * 100).astype(int))
    assert len(src) == len(tgt) == 40 and not src & tgt
    np.testing.assert_array_equal(split.target0.images[:, 0, 10:], -1)


def test_prepare_domains_full_scale_reuses_images_unpaired():
    train, test = indexed_train(100), indexed_train(30)
    cfg = load_config(tiny_flags("unused", n_train=None))
    split = prepare_domains(train, test, cfg, seed=0)
    assert len(split.source) == len(split.target0) == 100
    # both cover every image; sorted index order is shared only as sets, never as a pairing
    codes = np.rint(split.target0.images[:, 0, 4, 0] * 100).astype(int)
    assert sorted(codes) == list(range(100))


def test_prepare_domains_ground_truth_test_sequence():
    train, test = indexed_train(100), indexed_train(30)
    cfg = load_config(tiny_flags("unused", n_train=40, num_target_domains=3))
    doms = prepare_domains(train, test, cfg, seed=0).test_domains
    assert len(doms) == 4
    for i, d in enumerate(doms):
        np.testing.assert_array_equal(d.images, shift_vertical(test.images, 6 * i))
        np.testing.assert_array_equal(d.labels, test.labels)


# -------------------------------------------------------------- whole runs

def test_run_single_artifacts(synth, tmp_path):
    train, test = synth
    cfg = load_config(tiny_flags(tmp_path))
    res = run_single(cfg, 0, train, test)
    d = run_dir(cfg, 0)
    for name in ("result.json", "source_only.json", "config.txt", "metrics.csv"):
        assert (d / name).exists(), name
    assert (tmp_path / "shift" / "metrics.csv").exists()
    ckpts = {p.name for p in (d / "checkpoints").glob("*.ckpt")}
    assert {"transformer_1.ckpt", "encoder_source_1.ckpt", "generator_st_1.ckpt", "classifier_S_1.ckpt"} <= ckpts

    stored = json.loads((d / "result.json").read_text())
    assert {"operation", "seed", "converged", "accuracies", "stage_losses"} <= set(stored)
    assert list(stored["accuracies"]) == ["S", "T0", "T1", "T2"]
    assert RunResult.load(d / "result.json") == res["dotra"]
    assert all(0 <= v <= 1 for v in res["dotra"].accuracies.values())
    assert res["dotra"].accuracies["S"] == res["source_only"].accuracies["S"]
    assert list(res["dotra"].predicted_mse) == ["T0", "T1", "T2"]

    # the frozen config re-creates this run
    frozen = load_config(config_file=d / "config.txt")
    assert frozen.run_seeds() == [0] and frozen.ae == cfg.ae and frozen.n_train == cfg.n_train


def test_run_single_reproducible(synth, tmp_path):
    train, test = synth
    cfg = load_config(tiny_flags(tmp_path))
    a = run_single(cfg, 5, train, test, save=False)
    b = run_single(cfg, 5, train, test, save=False)
    for key in ("dotra", "source_only"):
        for dom, v in a[key].accuracies.items():
            assert abs(v - b[key].accuracies[dom]) <= 1e-4
    assert a["dotra"].stage_losses == pytest.approx(b["dotra"].stage_losses, abs=1e-5)


def test_diverged_run_is_kept(synth, tmp_path, monkeypatch):
    train, test = synth

    def boom(*a, **k):
        raise TrainingDiverged("cyclegan", 3, "generator")

    monkeypatch.setattr(pipeline, "solve_dti", boom)
    cfg = load_config(tiny_flags(tmp_path))
    r = run_single(cfg, 0, train, test)["dotra"]
    assert not r.converged and "cyclegan" in r.error
    assert r.accuracies["T0"] == r.accuracies["T2"] == 0.0 and "S" in r.accuracies
    assert RunResult.load(run_dir(cfg, 0) / "result.json").converged is False


def test_run_experiment_seeds_and_baseline(synth, tmp_path):
    cfg = load_config(tiny_flags(tmp_path, runs=2, seed=7, num_target_domains=2))
    out = run_experiment(cfg, data=synth)
    assert [r.seed for r in out["dotra"]] == [7, 8]
    assert [r.method for r in out["source_only"]] == ["source_only"] * 2
    assert list(out["dotra"][0].accuracies) == ["S", "T0", "T1"]
    only = pipeline.run_source_only_baseline(load_config(tiny_flags(tmp_path / "b", runs=1)), data=synth)
    assert len(only) == 1 and not (tmp_path / "b" / "shift" / "0" / "result.json").exists()


def test_parallel_matches_sequential(tmp_path):
    data_dir = synthetic_mnist_dir(tmp_path / "mnist")
    seq = run_experiment(load_config(tiny_flags(tmp_path / "seq", runs=2, data_dir=str(data_dir))))
    par = run_experiment(load_config(tiny_flags(tmp_path / "par", runs=2, parallel_runs=2, data_dir=str(data_dir))))
    for a, b in zip(seq["dotra"], par["dotra"]):
        assert a.seed == b.seed
        assert a.accuracies == pytest.approx(b.accuracies, abs=1e-4)
    assert (tmp_path / "par" / "shift" / "1" / "result.json").exists()


@requires_mnist
def test_identical_domains_give_near_identity_transformer():
    # desk-sized degenerate problem, about 10 minutes on one core
    train, test = load_mnist("train", mnist_dir()), load_mnist("test", mnist_dir())
    source = train.subset(np.arange(10000))
    sol = solve_dti(source, source.unlabeled(), load_config({"scale": "desk"}), seed=0)
    held = test.subset(np.arange(1000))
    moved = np.abs(extrapolate_domain(sol.transformer, held, 1).images - held.images).mean()
    assert moved <= 0.1
    assert sol.stage_losses["distill_holdout_mse"] <= 0.03
