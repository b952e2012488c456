"""Single writer for CSV tables and JSON manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from . import __version__


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return "%.17g" % v
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


class Table:
    """Append-only CSV with a fixed header; every row is flushed immediately."""

    def __init__(self, path: Path, columns):
        self.path = path
        self.columns = list(columns)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self.n_rows = 0

    def append(self, row: dict) -> None:
        self._w.writerow([format_value(row.get(c)) for c in self.columns])
        self._fh.flush()
        self.n_rows += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


class Writer:
    """Owns an output directory; all files of a run go through one instance."""

    def __init__(self, out_dir, command: str, config: dict, seed):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.seed = seed
        self.files: list[str] = []
        self._tables: list[Table] = []

    def table(self, name: str, columns) -> Table:
        t = Table(self.dir / name, columns)
        self._tables.append(t)
        self.files.append(name)
        return t

    def write_rows(self, name: str, columns, rows) -> Path:
        t = self.table(name, columns)
        for r in rows:
            t.append(r)
        t.close()
        return t.path

    def write_json(self, name: str, payload) -> Path:
        path = self.dir / name
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        self.files.append(name)
        return path

    def manifest(self, status: str, **extra) -> Path:
        for t in self._tables:
            t.close()
        payload = {
            "command": self.command,
            "status": status,
            "seed": self.seed,
            "version": __version__,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "outputs": sorted(set(self.files)),
            **extra,
        }
        path = self.dir / "manifest.json"
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path
