"""CSV and JSON helpers shared by the runners and the CLI.

Floats are written with ``repr`` so files round-trip exactly and re-runs are
byte-identical. Complex matrices are stored as nested [re, im] pairs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def matrix_to_json(m):
    m = np.asarray(m, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]


def matrix_from_json(data):
    a = np.asarray(data, dtype=float)
    if a.ndim == 2:  # plain real matrix
        return a.astype(complex)
    if a.ndim != 3 or a.shape[-1] != 2:
        raise ValueError("expected an N x N array of [re, im] pairs")
    return a[..., 0] + 1j * a[..., 1]


def _default(o):
    if isinstance(o, np.ndarray):
        if np.iscomplexobj(o):
            return matrix_to_json(o) if o.ndim == 2 else [[float(z.real), float(z.imag)] for z in o.ravel()]
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, default=_default, indent=2, sort_keys=True)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
