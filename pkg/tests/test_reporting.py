import csv
import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dotra.domains import LabeledDataset
from dotra.pipeline import RunResult
from dotra.reporting import (
    aggregate_all, aggregate_results, collect_results, domain_magnitudes, emit_results_table,
    emit_sample_grid, format_markdown, lower_quartile, report, to_pixels,
)

floats = st.floats(-1e6, 1e6, allow_nan=False)


def result(accs, seed=0, method="dotra", op="shift", magnitude=6):
    keys = ["S", "T0", "T1", "T2"][:len(accs)]
    return RunResult(method, op, magnitude, seed, True, dict(zip(keys, accs)))


@pytest.mark.parametrize("values, expected", [
    ([5.0], 5.0),
    ([10, 20, 30, 40], 17.5),
    ([1, 1, 1, 100], 1.0),
    ([40, 10, 30, 20], 17.5),
])
def test_lower_quartile_hand_cases(values, expected):
    assert lower_quartile(values) == pytest.approx(expected, abs=1e-12)


def test_lower_quartile_empty():
    with pytest.raises(ValueError):
        lower_quartile([])


def test_lower_quartile_matches_numpy_on_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.normal(size=rng.integers(1, 40)) * rng.uniform(0.1, 100)
        assert abs(lower_quartile(v) - np.percentile(v, 25, method="linear")) <= 1e-9


@given(st.lists(floats, min_size=1, max_size=30), st.randoms())
def test_lower_quartile_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert lower_quartile(shuffled) == lower_quartile(values)


@given(st.lists(floats, min_size=1, max_size=30))
def test_lower_quartile_adding_new_minimum_never_increases(values):
    assert lower_quartile(values + [min(values) - 1.0]) <= lower_quartile(values)


@given(floats, st.integers(1, 50))
def test_lower_quartile_constant(x, n):
    assert lower_quartile([x] * n) == x


def test_aggregate_identical_runs_equal_single():
    runs = [result([0.995, 0.991, 0.932, 0.617], seed=s) for s in range(12)]
    table = aggregate_results(runs)
    assert table.cells[("dotra", "shift")] == [99.5, 99.1, 93.2, 61.7]
    assert table.runs[("dotra", "shift")] == 12


def test_aggregate_outlier_pull():
    runs = [result([1.0, a]) for a in (0.99, 0.98, 0.10, 0.97)]
    # sorted T0: 0.10 0.97 0.98 0.99, position 0.75 -> 0.10 + 0.75 * 0.87 = 0.7525
    assert aggregate_results(runs).cells[("dotra", "shift")][1] == 75.2


def test_aggregate_rejects_mixed_operations():
    with pytest.raises(ValueError):
        aggregate_results([result([1, 1]), result([1, 1], op="zoom", magnitude=1.33)])
    with pytest.raises(ValueError):
        aggregate_results([])


def test_magnitude_headers():
    assert domain_magnitudes("zoom", 1.33, 4) == ["0", "1.33", "1.77", "2.35"]
    assert domain_magnitudes("rotate", 45.0, 4) == ["0", "45", "90", "135"]
    assert domain_magnitudes("shift", 6, 4) == ["0", "6", "12", "18"]


def _write_runs(root, op="shift", n=4):
    rng = np.random.default_rng(1)
    for s in range(n):
        d = root / op / str(s)
        result(list(rng.uniform(0.5, 1.0, 4)), seed=s, op=op).save(d / "result.json")
        RunResult("source_only", op, 6, s, True,
                  dict(zip(["S", "T0", "T1", "T2"], rng.uniform(0.05, 1.0, 4)))).save(d / "source_only.json")


def test_report_roundtrip_and_idempotent(tmp_path):
    _write_runs(tmp_path)
    csv_path, md_path = report(tmp_path)
    first = csv_path.read_bytes(), md_path.read_bytes()
    report(tmp_path)
    assert (csv_path.read_bytes(), md_path.read_bytes()) == first

    rows = list(csv.DictReader(io.StringIO(csv_path.read_text())))
    assert [r["method"] for r in rows] == ["DoTra", "Source"]
    runs = collect_results(tmp_path)
    for row in rows:
        method = "dotra" if row["method"] == "DoTra" else "source_only"
        for key in ("S", "T0", "T1", "T2"):
            recomputed = round(100 * lower_quartile([r.accuracies[key] for r in runs if r.method == method]), 1)
            assert float(row[key]) == recomputed


def test_markdown_layout(tmp_path):
    _write_runs(tmp_path)
    text = format_markdown(aggregate_all(collect_results(tmp_path)))
    lines = text.splitlines()
    assert lines[0] == ("| Method/*Operation* | Source Domain | Target Domain 0 | Target Domain 1 "
                        "| Target Domain 2 | Given Target Domains |")
    assert "| *Shift* | *0* | *6* | *12* | *18* |  |" in lines
    assert sum(line.startswith("| DoTra") for line in lines) == 1
    assert sum(line.startswith("| Source") for line in lines) == 1


def test_emit_table_bad_format(tmp_path):
    table = aggregate_results([result([1, 1, 1, 1])])
    with pytest.raises(ValueError):
        emit_results_table(table, tmp_path / "t.txt", "latex")
    with pytest.raises(OSError):
        emit_results_table(table, tmp_path / "missing" / "t.csv")


def test_pixel_map_endpoints():
    assert to_pixels(np.array([-1.0, 1.0, 0.0, -5.0])).tolist() == [0, 255, 128, 0]


def _labeled(n=50, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.uniform(-1, 1, (n, 1, 32, 32)).astype(np.float32), np.arange(n) % 10)


def test_sample_grid_layout(tmp_path):
    data = _labeled()
    path = emit_sample_grid([data] * 4, tmp_path / "g.png", pad=2)
    img = np.asarray(Image.open(path))
    assert img.shape == (10 * 34 + 2, 4 * 34 + 2)
    # row of digit 3, column 2 holds the first image labelled 3
    np.testing.assert_array_equal(img[2 + 3 * 34: 2 + 3 * 34 + 32, 2 + 2 * 34: 2 + 2 * 34 + 32],
                                  to_pixels(data.images[3, 0]))


def test_sample_grid_missing_class_warns(tmp_path):
    data = _labeled()
    only_even = data.subset(np.flatnonzero(data.labels % 2 == 0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        path = emit_sample_grid([only_even], tmp_path / "g.png")
    assert len(caught) == 5
    img = np.asarray(Image.open(path))
    assert (img[2 + 34: 2 + 34 + 32, 2:34] == 128).all()


def test_sample_grid_needs_a_dataset(tmp_path):
    with pytest.raises(ValueError):
        emit_sample_grid([], tmp_path / "g.png")
