"""CSV and JSON writers with byte-stable formatting.

Every CSV gets a header row and a sibling ``<name>.json`` recording the
config hash and seed. Floats are written with 17 significant digits so a
round trip through text is exact.
"""

import json
import os
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # json has no nan/inf; keep the exact repr as a string instead
        return v if np.isfinite(v) else repr(v)
    return obj


class OutputWriter:
    """Writes into one directory; tracks files for the run summary."""

    def __init__(self, directory, config_hash, seed):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.seed = seed
        self.written = []

    def _write_text(self, name, text):
        path = self.dir / name
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
        self.written.append(name)
        return path

    def json(self, name, payload):
        text = json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n"
        return self._write_text(name, text)

    def table(self, name, columns, rows, **meta):
        lines = [",".join(columns)]
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"{name}: row of length {len(row)} for {len(columns)} columns")
            lines.append(",".join(_fmt(v) for v in row))
        path = self._write_text(name, "\n".join(lines) + "\n")
        sidecar = {"file": name, "columns": list(columns), "rows": len(lines) - 1,
                   "config_hash": self.config_hash, "seed": self.seed}
        sidecar.update(meta)
        self.json(name + ".json", sidecar)
        return path

    def field(self, name, grid, values, **meta):
        """One row per node, ``x1, x2, value``, x1 varying fastest."""
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n,):
            raise ValueError(f"{name}: field has shape {values.shape}, grid has {grid.n} nodes")
        pts = grid.points
        rows = zip(pts[:, 0], pts[:, 1], values)
        meta.setdefault("nx", grid.nx)
        meta.setdefault("ny", grid.ny)
        return self.table(name, ("x1", "x2", "value"), rows, **meta)


def read_table(path):
    """Read a CSV written by :class:`OutputWriter`; returns (columns, array)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data
