"""Cross-run aggregation, results tables and sample grids."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .pipeline import RunResult

METHOD_LABELS = {"dotra": "DoTra", "source_only": "Source"}
METHOD_ORDER = ("dotra", "source_only")
OP_LABELS = {"rotate": "Rotation", "zoom": "Zoom", "shift": "Shift", "split": "SplitMid"}
# which given target domains each method had access to
GIVEN_TARGETS = {"dotra": "0", "source_only": "-"}


def lower_quartile(values) -> float:
    """25th percentile, linear interpolation at position (n - 1) / 4 of the sorted values."""
    v = sorted(float(x) for x in values)
    if not v:
        raise ValueError("lower_quartile of an empty sequence")
    pos = (len(v) - 1) * 0.25
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def domain_magnitudes(operation: str, magnitude: float, num_domains: int) -> list[str]:
    """Header labels: cumulative op magnitude per domain (zoom multiplies, the others add)."""
    out = []
    for i in range(num_domains):
        value = magnitude ** i if operation == "zoom" else magnitude * i
        if operation == "zoom" and i > 0:
            out.append(f"{value:.2f}")
        else:
            out.append(f"{value:g}" if i else "0")
    return out


@dataclass
class AggregateTable:
    columns: list                                   # "S", "T0", ...
    rows: list = field(default_factory=list)        # (method, operation)
    cells: dict = field(default_factory=dict)       # (method, operation) -> [percent per column]
    runs: dict = field(default_factory=dict)        # (method, operation) -> number of runs
    magnitudes: dict = field(default_factory=dict)  # operation -> magnitude

    def merge(self, other: "AggregateTable") -> "AggregateTable":
        if other.columns != self.columns:
            raise ValueError("cannot merge tables with different domain columns")
        for row in other.rows:
            if row not in self.cells:
                self.rows.append(row)
            self.cells[row] = other.cells[row]
            self.runs[row] = other.runs[row]
        self.magnitudes.update(other.magnitudes)
        self.rows.sort(key=lambda r: (list(OP_LABELS).index(r[1]) if r[1] in OP_LABELS else 99, r[1],
                                      METHOD_ORDER.index(r[0]) if r[0] in METHOD_ORDER else 99))
        return self


def aggregate_results(results) -> AggregateTable:
    """Per-domain lower quartile over runs of a single (method, operation), in percent with 1 decimal."""
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    ops = {(r.operation, r.magnitude) for r in results}
    methods = {r.method for r in results}
    if len(ops) != 1:
        raise ValueError(f"results mix operations: {sorted(ops)}")
    if len(methods) != 1:
        raise ValueError(f"results mix methods: {sorted(methods)}")
    columns = list(results[0].accuracies)
    if any(list(r.accuracies) != columns for r in results):
        raise ValueError("results disagree on the domain set")
    (operation, magnitude), method = ops.pop(), methods.pop()
    row = (method, operation)
    cells = [round(100 * lower_quartile([r.accuracies[c] for r in results]), 1) for c in columns]
    return AggregateTable(columns, [row], {row: cells}, {row: len(results)}, {operation: magnitude})


def collect_results(out_dir) -> list[RunResult]:
    out_dir = Path(out_dir)
    paths = sorted(out_dir.glob("*/*/result.json")) + sorted(out_dir.glob("*/*/source_only.json"))
    return [RunResult.load(p) for p in paths]


def aggregate_all(results) -> AggregateTable:
    groups: dict = {}
    for r in results:
        groups.setdefault((r.method, r.operation), []).append(r)
    if not groups:
        raise ValueError("no results found")
    table = None
    for key in sorted(groups):
        part = aggregate_results(sorted(groups[key], key=lambda r: r.seed))
        table = part if table is None else table.merge(part)
    return table


def _column_titles(columns) -> list[str]:
    return ["Source Domain" if c == "S" else f"Target Domain {c[1:]}" for c in columns]


def format_csv(table: AggregateTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["operation", "method", *table.columns, "given_target_domains", "runs"])
    for method, op in table.rows:
        cells = [f"{v:.1f}" for v in table.cells[(method, op)]]
        w.writerow([op, METHOD_LABELS.get(method, method), *cells, GIVEN_TARGETS.get(method, ""),
                    table.runs[(method, op)]])
    return buf.getvalue()


def format_markdown(table: AggregateTable) -> str:
    header = ["Method/*Operation*", *_column_titles(table.columns), "Given Target Domains"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    last_op = None
    for method, op in table.rows:
        if op != last_op:
            mags = domain_magnitudes(op, table.magnitudes[op], len(table.columns))
            lines.append("| " + " | ".join([f"*{OP_LABELS.get(op, op)}*", *[f"*{m}*" for m in mags], ""]) + " |")
            last_op = op
        cells = [f"{v:.1f}" for v in table.cells[(method, op)]]
        label = METHOD_LABELS.get(method, method)
        lines.append("| " + " | ".join([label, *cells, GIVEN_TARGETS.get(method, "")]) + " |")
    return "\n".join(lines) + "\n"


def emit_results_table(table: AggregateTable, path, format: str = "csv") -> Path:
    if format not in ("csv", "markdown"):
        raise ValueError(f"format must be csv or markdown, got {format!r}")
    text = format_csv(table) if format == "csv" else format_markdown(table)
    path = Path(path)
    path.write_bytes(text.encode())
    return path


def report(out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    table = aggregate_all(collect_results(out_dir))
    return (emit_results_table(table, out_dir / "results_table.csv", "csv"),
            emit_results_table(table, out_dir / "results_table.md", "markdown"))


# --------------------------------------------------------------------- grids

def to_pixels(images) -> np.ndarray:
    """[-1, 1] floats to uint8, -1 -> 0 and +1 -> 255."""
    x = np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def emit_sample_grid(datasets, path, per_class: int = 1, num_classes: int = 10, pad: int = 2,
                     scale: int = 1) -> Path:
    """One column per dataset, per_class rows per digit. Samples are picked from the first dataset's
    labels and the same indices are shown in every column, so a row follows one image across domains."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    labels = datasets[0].labels
    cell = 32
    rows, cols = num_classes * per_class, len(datasets)
    canvas = np.full((rows * (cell + pad) + pad, cols * (cell + pad) + pad), 255, dtype=np.uint8)
    for digit in range(num_classes):
        idx = np.flatnonzero(labels == digit)[:per_class]
        if len(idx) < per_class:
            warnings.warn(f"class {digit} has {len(idx)} of {per_class} samples; leaving blank cells")
        for k in range(per_class):
            r = digit * per_class + k
            for c, data in enumerate(datasets):
                y, x = pad + r * (cell + pad), pad + c * (cell + pad)
                if k < len(idx):
                    canvas[y:y + cell, x:x + cell] = to_pixels(data.images[idx[k], 0])
                else:
                    canvas[y:y + cell, x:x + cell] = 128
    img = Image.fromarray(canvas)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path
