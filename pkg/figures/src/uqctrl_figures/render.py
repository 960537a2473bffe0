"""Figure rendering from uqctrl CSV files.

Each figure kind reads one or two CSVs by their documented columns and
draws with matplotlib's Agg backend. Values pass through unchanged; the
only transforms are the absolute values and log scales of the axes.
Output is PNG with fixed size, dpi, and stripped writer metadata so
re-rendering the same inputs reproduces the file byte for byte.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("eigdecay", "taylor-errors", "mse-table", "convergence", "field")

# input CSVs per kind, in the order the command expects them
EXPECTED_INPUTS = {
    "eigdecay": ("spectrum", "trace errors"),
    "taylor-errors": ("samples",),
    "mse-table": ("mean moments", "variance moments"),
    "convergence": ("optimizer trace",),
    "field": ("field values",),
}

SAVE_DPI = 120


class SchemaError(Exception):
    """Missing file, missing column, or rows that cannot be plotted."""


@dataclass
class FigureSpec:
    """One figure to render.

    ``log_value_axis`` overrides the kind's default scale on the value
    axis (the y axis everywhere except ``field``, which ignores it).
    """

    kind: str
    inputs: list[Path]
    out: Path
    log_value_axis: bool | None = None
    options: dict = field(default_factory=dict)


def load_table(path: Path, required: tuple[str, ...]) -> dict[str, list[str]]:
    """Columns of a CSV as lists of raw strings.

    Fails fast: a missing file, an empty file, a file without data
    rows, or a header lacking a required column all raise SchemaError
    naming the problem.
    """
    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                raise SchemaError(f"{path}: empty CSV")
            for column in required:
                if column not in reader.fieldnames:
                    raise SchemaError(f"{path}: missing column {column!r}")
            rows = list(reader)
    except OSError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    if any(None in row.values() or None in row for row in rows):
        raise SchemaError(f"{path}: ragged row")
    return {name: [row[name] for row in rows] for name in reader.fieldnames}


def floats(table: dict[str, list[str]], column: str, path: Path) -> np.ndarray:
    try:
        return np.array([float(value) for value in table[column]])
    except ValueError as exc:
        raise SchemaError(f"{path}: column {column!r}: {exc}") from None


def _scale(ax, spec: FigureSpec, default_log: bool) -> None:
    log = default_log if spec.log_value_axis is None else spec.log_value_axis
    if log:
        ax.set_yscale("log")


def render(spec: FigureSpec) -> Path:
    """Draw one figure and write it to spec.out; returns the path."""
    if spec.kind not in KINDS:
        raise SchemaError(f"unknown figure kind {spec.kind!r}")
    expected = EXPECTED_INPUTS[spec.kind]
    if len(spec.inputs) != len(expected):
        raise SchemaError(
            f"{spec.kind} needs {len(expected)} input file(s): "
            + ", ".join(expected)
        )
    if spec.out.suffix != ".png":
        raise SchemaError(
            f"output must be a .png path, got {spec.out.name!r}"
        )
    fig = _DRAW[spec.kind](spec)
    spec.out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.out, dpi=SAVE_DPI, metadata={"Software": None})
    plt.close(fig)
    return spec.out


def draw_eigdecay(spec: FigureSpec):
    spectrum = load_table(spec.inputs[0], ("j", "lambda", "sign"))
    errors = load_table(spec.inputs[1], ("N", "error1", "error2"))
    j = floats(spectrum, "j", spec.inputs[0])
    lam = floats(spectrum, "lambda", spec.inputs[0])
    sign = floats(spectrum, "sign", spec.inputs[0])
    n = floats(errors, "N", spec.inputs[1])
    e1 = floats(errors, "error1", spec.inputs[1])
    e2 = floats(errors, "error2", spec.inputs[1])

    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    pos, neg = sign > 0, sign < 0
    ax.plot(j[pos], lam[pos], "o", color="tab:blue", ms=4, label="positive eigenvalue")
    ax.plot(j[neg], lam[neg], "s", mfc="none", color="tab:red", ms=5,
            label="negative eigenvalue")
    ax.plot(n, np.abs(e1), "-", color="tab:green", lw=1.2, label="trace error, linear")
    ax.plot(n, np.abs(e2), "--", color="tab:purple", lw=1.2, label="trace error, squared")
    _scale(ax, spec, default_log=True)
    ax.set_xlabel("index j / retained N")
    ax.set_ylabel("magnitude")
    ax.set_title("eigenvalue decay and trace-estimate errors")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    return fig


def draw_taylor_errors(spec: FigureSpec):
    path = spec.inputs[0]
    table = load_table(
        path,
        ("i", "rel_err_Q_lin", "rel_err_Q_quad", "rel_err_q_lin", "rel_err_q_quad"),
    )
    i = floats(table, "i", path)
    fig, (left, right) = plt.subplots(1, 2, figsize=(9.0, 4.0), sharey=True)
    for ax, prefix, title in (
        (left, "Q", "objective Q"),
        (right, "q", "variance integrand q"),
    ):
        ax.plot(i, floats(table, f"rel_err_{prefix}_lin", path), "o",
                color="tab:blue", ms=4, label="linear")
        ax.plot(i, floats(table, f"rel_err_{prefix}_quad", path), "^",
                color="tab:orange", ms=4, label="quadratic")
        _scale(ax, spec, default_log=True)
        ax.set_xlabel("sample index")
        ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
    left.set_ylabel("relative error")
    left.legend(fontsize=8)
    fig.tight_layout()
    return fig


def draw_mse_table(spec: FigureSpec):
    mean = load_table(spec.inputs[0], ("control-id", "M", "Ehat"))
    var = load_table(spec.inputs[1], ("control-id", "M", "Vhat"))
    fig, axes = plt.subplots(2, 1, figsize=(10.0, 3.6))
    for ax, table, title in (
        (axes[0], mean, "mean estimators"),
        (axes[1], var, "variance estimators"),
    ):
        ax.axis("off")
        columns = list(table)
        cells = list(zip(*(table[name] for name in columns)))
        drawn = ax.table(
            cellText=[list(row) for row in cells],
            colLabels=columns,
            loc="center",
            cellLoc="right",
        )
        drawn.auto_set_font_size(False)
        drawn.set_fontsize(7)
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return fig


def draw_convergence(spec: FigureSpec):
    path = spec.inputs[0]
    table = load_table(path, ("stage", "iter", "J", "pg_norm"))
    j_values = floats(table, "J", path)
    pg = floats(table, "pg_norm", path)
    stages = table["stage"]
    x = np.arange(len(stages))

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7.0, 5.5), sharex=True)
    seen: list[str] = []
    for name in stages:
        if name not in seen:
            seen.append(name)
    for name in seen:
        mask = np.array([stage == name for stage in stages])
        top.plot(x[mask], j_values[mask], "-o", ms=3, label=name)
        bottom.plot(x[mask], pg[mask], "-o", ms=3, label=name)
    _scale(top, spec, default_log=False)
    top.set_ylabel("cost J")
    top.legend(fontsize=8)
    top.grid(True, alpha=0.3)
    bottom.set_yscale("log")
    bottom.set_ylabel("projected gradient norm")
    bottom.set_xlabel("cumulative iteration")
    bottom.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    return fig


def draw_field(spec: FigureSpec):
    path = spec.inputs[0]
    table = load_table(path, ("x", "y", "value"))
    x = floats(table, "x", path)
    y = floats(table, "y", path)
    value = floats(table, "value", path)
    xs, ys = np.unique(x), np.unique(y)
    if xs.size * ys.size != value.size:
        raise SchemaError(f"{path}: points do not form a structured grid")
    order = np.lexsort((x, y))
    grid = value[order].reshape(ys.size, xs.size)

    fig, ax = plt.subplots(figsize=(7.0, 3.8))
    mesh = ax.pcolormesh(xs, ys, grid, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="value")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal")
    ax.set_title(path.stem.replace("_", " "))
    fig.tight_layout()
    return fig


_DRAW = {
    "eigdecay": draw_eigdecay,
    "taylor-errors": draw_taylor_errors,
    "mse-table": draw_mse_table,
    "convergence": draw_convergence,
    "field": draw_field,
}
