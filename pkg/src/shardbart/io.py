"""Dataset ingestion and model persistence."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bart import Forest
from .errors import InputError, ParseError
from .sharding import SbtFit, SbtSample
from .tree import dump_tree, parse_tree

MODEL_MAGIC = "sbt-model 1"
SPEC_VERSION = "1"


class DegenerateColumnWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs rescaled to the unit cube, with the affine map kept for reuse."""

    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...]
    x_min: np.ndarray
    x_max: np.ndarray
    y_column: str

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def rescale(self, X_raw) -> np.ndarray:
        return rescale(X_raw, self.x_min, self.x_max)


def rescale(X_raw, x_min, x_max) -> np.ndarray:
    """Apply the stored min-max map; constant columns map to 0.5; clip to [0, 1]."""
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    x_min, x_max = np.asarray(x_min, dtype=float), np.asarray(x_max, dtype=float)
    if X_raw.shape[1] != len(x_min):
        raise InputError(f"expected {len(x_min)} input columns, got {X_raw.shape[1]}")
    span = x_max - x_min
    out = np.full(X_raw.shape, 0.5)
    ok = span > 0
    out[:, ok] = (X_raw[:, ok] - x_min[ok]) / span[ok]
    return np.clip(out, 0.0, 1.0)


def read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    """Header plus a float matrix; raises ``ParseError`` with row and column."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path} is empty", row=0) from None
        rows = []
        for r, record in enumerate(reader, start=1):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(record)}", row=r)
            values = []
            for name, cell in zip(header, record):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", row=r, column=name) from None
            rows.append(values)
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if not np.all(np.isfinite(data)):
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise ParseError("non-finite cell", row=int(r) + 1, column=header[c])
    return header, data


def load_dataset(path, y_col: str | None = None) -> Dataset:
    """Read a CSV with a header; the response is ``y_col`` or the last column."""
    header, data = read_numeric_csv(path)
    if len(header) < 2:
        raise InputError("need at least one input column and a response column")
    if len(set(header)) != len(header):
        raise InputError(f"duplicate column names in {header}")
    if y_col is None:
        j = len(header) - 1
    elif y_col in header:
        j = header.index(y_col)
    else:
        raise InputError(f"response column {y_col!r} not in {header}")
    if len(data) == 0:
        raise InputError(f"{path} has no data rows")
    keep = [k for k in range(len(header)) if k != j]
    X_raw = data[:, keep]
    x_min, x_max = X_raw.min(axis=0), X_raw.max(axis=0)
    columns = tuple(header[k] for k in keep)
    for name, lo, hi in zip(columns, x_min, x_max):
        if lo == hi:
            warnings.warn(f"column {name!r} is constant; mapped to 0.5", DegenerateColumnWarning)
    return Dataset(rescale(X_raw, x_min, x_max), data[:, j].copy(), columns, x_min, x_max,
                   header[j])


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def write_dataset(path, X, y, columns: Sequence[str] | None = None, y_name: str = "y") -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    columns = list(columns) if columns is not None else [f"x{k}" for k in range(X.shape[1])]
    write_csv(path, columns + [y_name], np.column_stack([X, y]))


# --- model dump -------------------------------------------------------------------

def dump_model(samples: Sequence[SbtSample], meta: dict) -> str:
    """Text dump: magic line, JSON metadata line, then each sample's trees."""
    lines = [MODEL_MAGIC, json.dumps(meta, sort_keys=True)]
    for idx, sample in enumerate(samples):
        lines.append(f"sample {idx} sigma2={sample.sigma2!r} shards={sample.B}")
        lines.append(dump_tree(sample.tree_u, axis="u").rstrip("\n"))
        for b, (forest, size) in enumerate(zip(sample.forests, sample.sizes)):
            lines.append(f"forest shard={b} size={size} ntree={forest.m} offset={forest.offset!r}")
            for tree in forest.trees:
                lines.append(dump_tree(tree, axis="x").rstrip("\n"))
    return "\n".join(lines) + "\n"


def _fields(line: str, tag: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != tag:
        raise ParseError(f"expected a '{tag}' line, got {line!r}")
    return dict(p.split("=", 1) for p in parts[1:] if "=" in p)


def load_model(text: str) -> tuple[list[SbtSample], dict]:
    lines = text.rstrip("\n").split("\n")
    if not lines or lines[0] != MODEL_MAGIC:
        raise ParseError("not a model dump", row=1)
    try:
        meta = json.loads(lines[1])
    except (IndexError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad metadata line: {exc}", row=2) from None
    pos = 2
    samples = []
    try:
        while pos < len(lines):
            head = _fields(lines[pos], "sample")
            pos += 1
            tree_u, axis, used = parse_tree(lines[pos:])
            if axis != "u":
                raise ParseError("sharding tree must be tagged axis=u", row=pos + 1)
            pos += used
            forests, sizes = [], []
            for _ in range(int(head["shards"])):
                fh = _fields(lines[pos], "forest")
                pos += 1
                trees = []
                for _ in range(int(fh["ntree"])):
                    tree, _, used = parse_tree(lines[pos:])
                    trees.append(tree)
                    pos += used
                forests.append(Forest.from_trees(trees, float(fh["offset"])))
                sizes.append(int(fh["size"]))
            samples.append(SbtSample(tree_u, tuple(forests), float(head["sigma2"]), tuple(sizes)))
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseError(f"malformed model dump: {exc}", row=pos + 1) from None
    return samples, meta


def manifest(fit: SbtFit, config: dict, seed: int, n_mcmc: int, burn: int,
             dataset: Dataset) -> dict:
    return {
        "spec_version": SPEC_VERSION,
        "seed": seed,
        "config": config,
        "iterations": {"nmcmc": n_mcmc, "burn": burn, "saved": len(fit.samples)},
        "data": {"n": dataset.n, "d": dataset.d, "columns": list(dataset.columns),
                 "response": dataset.y_column},
        "shard_sizes": [list(s.sizes) for s in fit.samples],
    }


DIAGNOSTIC_FIELDS = ("iteration", "u_move", "u_accepted", "tree_accept_rate", "n_shards",
                     "shard_sizes", "sigma2", "seconds")


def write_diagnostics(path, diagnostics: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_FIELDS)
        writer.writeheader()
        for row in diagnostics:
            writer.writerow({k: row[k] for k in DIAGNOSTIC_FIELDS})
