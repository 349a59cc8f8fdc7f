"""CSV / JSON artifact writers.

Floats are written with 17 significant digits so every value round-trips
exactly. Column order is fixed per file family and nothing time-dependent
(wall clock, host name) is emitted, so equal inputs give equal bytes.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .errors import StackBSDEError

FLOAT_FMT = "%.17g"


class ExportError(StackBSDEError):
    exit_code = 1


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from None
    return path


def read_csv(path):
    """Header and float matrix of a numeric CSV written by this module."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, len(header))
    return header, data


def _matrix_columns(name: str, shape) -> List[str]:
    return [f"{name}[{i},{j}]" for i in range(shape[0]) for j in range(shape[1])]


def export_riccati(paths: Mapping[str, "object"], t: np.ndarray, out) -> Path:
    """One row per grid time: t then every matrix entry of every path, row-major, in mapping order."""
    header, blocks = ["t"], []
    for name in paths:
        v = np.asarray(paths[name].values if hasattr(paths[name], "values") else paths[name])
        header += _matrix_columns(name, v.shape[1:])
        blocks.append(v.reshape(len(v), -1))
    data = np.column_stack([t] + blocks) if blocks else t[:, None]
    return write_csv(out, header, data.tolist())


def export_path_processes(processes: Mapping[str, np.ndarray], t: np.ndarray, out, max_paths: Optional[int] = None) -> Path:
    """Long format: t, path, then the components of each named (M, N+1, d) array in mapping order."""
    names = list(processes)
    header = ["t", "path"]
    arrays = []
    for name in names:
        a = np.asarray(processes[name], dtype=float)
        if a.ndim == 2:
            a = a[..., None]
        arrays.append(a)
        header += [f"{name}[{k}]" for k in range(a.shape[2])] if a.shape[2] > 1 else [name]
    M = min(a.shape[0] for a in arrays) if arrays else 0
    if max_paths is not None:
        M = min(M, max_paths)

    def rows():
        for j in range(M):
            for i, ti in enumerate(t):
                row = [float(ti), j]
                for a in arrays:
                    row.extend(a[j, i].tolist())
                yield row

    return write_csv(out, header, rows())


def export_affine(processes: Mapping[str, "object"], out) -> Path:
    """Filter coefficient paths on the grid: t, then a/b/c components of each affine process."""
    names = list(processes)
    if not names:
        return write_csv(out, ["t"], [])
    g = processes[names[0]].grid
    header, cols = ["t"], [g.t]
    for name in names:
        p = processes[name]
        for key, v in (("a", p.a_grid), ("b", p.b_grid), ("c", p.c_grid)):
            if v is None:
                continue
            header += [f"{name}.{key}[{k}]" for k in range(v.shape[1])]
            cols.append(v)
    return write_csv(out, header, np.column_stack(cols).tolist())


def export_verification(rows: Sequence[Mapping], out) -> Path:
    """criterion, quantity, value, threshold, pass."""
    header = ["criterion", "quantity", "value", "threshold", "pass"]
    return write_csv(out, header, ([r["criterion"], r["quantity"], r["value"], r["threshold"], bool(r["pass"])]
                                    for r in rows))


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        # JSON has no inf/nan; keep them readable as strings
        return f if math.isfinite(f) else repr(f)
    return obj


def write_json(obj, out) -> Path:
    path = Path(out)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from None
    return path


__all__ = ["write_csv", "read_csv", "export_riccati", "export_path_processes", "export_affine",
           "export_verification", "write_json", "ExportError", "FLOAT_FMT"]
