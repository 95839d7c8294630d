"""CSV / JSON artifact formats.

Every CSV starts with a comment line naming the format and its version,
followed by a header row. Floats are written with 17 significant digits so
files round-trip exactly and reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .jko import SolutionCurve, StepMeta
from .measures import DiscreteMeasure

__all__ = [
    "TRAJECTORY_FORMAT",
    "STEPS_FORMAT",
    "TRACE_FORMAT",
    "ORACLE_FORMAT",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_steps_csv",
    "read_steps_csv",
    "write_table_csv",
    "read_table_csv",
    "write_json",
    "read_json",
    "read_measure",
]

TRAJECTORY_FORMAT = "wjko-trajectory v1"
STEPS_FORMAT = "wjko-steps v1"
TRACE_FORMAT = "wjko-trace v1"
ORACLE_FORMAT = "wjko-oracle v1"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def _write(path: Path, fmt_name: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {fmt_name}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _read(path: Path, fmt_name: str) -> tuple[list, list]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# {fmt_name}":
            raise ValueError(f"{path}: expected format line '# {fmt_name}', got {first!r}")
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: missing header row")
    return rows[0], rows[1:]


def write_trajectory_csv(sol: SolutionCurve, path) -> None:
    """One row per (time, particle): ``t, id, x1..xd, weight``."""
    d = sol.dim
    header = ["t", "id"] + [f"x{j + 1}" for j in range(d)] + ["weight"]

    def rows():
        for i, t in enumerate(sol.times):
            for p in range(sol.points.shape[1]):
                yield [t, p, *sol.points[i, p], sol.weights[p]]

    _write(path, TRAJECTORY_FORMAT, header, rows())


def read_trajectory_csv(path) -> SolutionCurve:
    header, rows = _read(path, TRAJECTORY_FORMAT)
    d = len(header) - 3
    if d < 1 or header[:2] != ["t", "id"] or header[-1] != "weight":
        raise ValueError(f"{path}: unexpected trajectory header {header}")
    data = np.array([[float(v) for v in r] for r in rows])
    times = np.unique(data[:, 0])
    n = int(data[:, 1].max()) + 1
    if data.shape[0] != times.size * n:
        raise ValueError(f"{path}: trajectory rows do not form a (time, particle) grid")
    pts = data[:, 2:2 + d].reshape(times.size, n, d)
    weights = data[:n, -1]
    return SolutionCurve(times, pts, weights)


_STEP_FIELDS = ["w2_step", "energy_before", "energy_after", "inner_iters", "inner_converged", "grad_norm"]


def write_steps_csv(sol: SolutionCurve, path) -> None:
    header = ["step", "t_start", "t_end"] + _STEP_FIELDS

    def rows():
        for i, m in enumerate(sol.steps):
            yield [i, sol.times[i], sol.times[i + 1]] + [getattr(m, f) for f in _STEP_FIELDS]

    _write(path, STEPS_FORMAT, header, rows())


def read_steps_csv(path) -> list[StepMeta]:
    header, rows = _read(path, STEPS_FORMAT)
    idx = {name: header.index(name) for name in _STEP_FIELDS}
    out = []
    for r in rows:
        out.append(StepMeta(
            float(r[idx["w2_step"]]), float(r[idx["energy_before"]]), float(r[idx["energy_after"]]),
            int(r[idx["inner_iters"]]), r[idx["inner_converged"]] == "1", float(r[idx["grad_norm"]]),
        ))
    return out


def write_table_csv(path, fmt_name: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    _write(path, fmt_name, header, rows)


def read_table_csv(path, fmt_name: str) -> tuple[list, list]:
    return _read(path, fmt_name)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def write_json(obj, path) -> None:
    """Deterministic JSON (sorted keys; non-finite floats as strings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def read_measure(path) -> DiscreteMeasure:
    """Load a measure from JSON (``{dim, points, weights}``) or CSV (``x1..xd[,weight]``).

    CSV files without a weight column get uniform weights.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        return DiscreteMeasure.from_json(read_json(path))
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty measure file")
    header, body = rows[0], rows[1:]
    cols = [c.strip() for c in header]
    xs = [j for j, c in enumerate(cols) if c.startswith("x")]
    if not xs or not body:
        raise ValueError(f"{path}: measure CSV needs columns x1..xd and at least one row")
    pts = np.array([[float(r[j]) for j in xs] for r in body])
    if "weight" in cols:
        w = np.array([float(r[cols.index("weight")]) for r in body])
        return DiscreteMeasure(pts, w)
    return DiscreteMeasure.uniform(pts)
