"""Tabular schema, encoding to numeric matrices, and deterministic splits.

Encoding policy
---------------
* categorical feature -> one-hot block, categories in vocabulary order
* numeric feature     -> min-max scaled into [0, 1]
* protected column    -> integer group index ``s`` (kept out of ``X``)
* target column       -> ``y = 1`` iff the value equals ``Column.positive``

Models that condition on the protected attribute consume ``X`` with
``onehot(s)`` appended, see :meth:`Dataset.with_group`.
"""
from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (
    EmptyFile,
    MissingColumn,
    NonFiniteNumeric,
    SchemaError,
    TooFewRows,
    UnknownCategory,
    WidthMismatch,
)

NUMERIC, CATEGORICAL = "numeric", "categorical"
FEATURE, PROTECTED, TARGET = "feature", "protected", "target"
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    role: str = FEATURE
    categories: tuple[str, ...] | None = None
    minimum: float | None = None
    maximum: float | None = None
    integer: bool = False
    positive: str | None = None

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == CATEGORICAL else 1

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.kind == CATEGORICAL:
            out["categories"] = list(self.categories)
        else:
            out.update(minimum=self.minimum, maximum=self.maximum, integer=self.integer)
        if self.positive is not None:
            out["positive"] = self.positive
        return out


@dataclass(frozen=True)
class TabularSchema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        for role in (PROTECTED, TARGET):
            n = sum(c.role == role for c in self.columns)
            if n != 1:
                raise SchemaError(f"exactly one {role} column required, got {n}")
        for c in self.columns:
            if c.kind not in (NUMERIC, CATEGORICAL):
                raise SchemaError(f"{c.name}: unknown kind {c.kind!r}")
            if c.role not in (FEATURE, PROTECTED, TARGET):
                raise SchemaError(f"{c.name}: unknown role {c.role!r}")
            if c.kind == CATEGORICAL:
                if not c.categories:
                    raise SchemaError(f"{c.name}: empty vocabulary")
                if len(set(c.categories)) != len(c.categories):
                    raise SchemaError(f"{c.name}: duplicate categories")
            else:
                if c.minimum is None or c.maximum is None or not c.minimum <= c.maximum:
                    raise SchemaError(f"{c.name}: invalid numeric range")
                if c.role != FEATURE:
                    raise SchemaError(f"{c.name}: {c.role} column must be categorical")
        if len(self.protected.categories) < 2:
            raise SchemaError("protected column needs at least two groups")
        t = self.target
        if len(t.categories) != 2:
            raise SchemaError("target column must be binary")
        if t.positive is None:
            object.__setattr__(self, "columns", tuple(
                replace(c, positive=c.categories[1]) if c.role == TARGET else c
                for c in self.columns))
        elif t.positive not in t.categories:
            raise SchemaError(f"positive label {t.positive!r} not in target vocabulary")

    @property
    def features(self) -> list[Column]:
        return [c for c in self.columns if c.role == FEATURE]

    @property
    def protected(self) -> Column:
        return next(c for c in self.columns if c.role == PROTECTED)

    @property
    def target(self) -> Column:
        return next(c for c in self.columns if c.role == TARGET)

    @property
    def n_groups(self) -> int:
        return len(self.protected.categories)

    @property
    def encoded_width(self) -> int:
        return sum(c.width for c in self.features)

    def blocks(self) -> list[tuple[Column, slice]]:
        """Feature columns paired with their slice in the encoded matrix."""
        out, start = [], 0
        for c in self.features:
            out.append((c, slice(start, start + c.width)))
            start += c.width
        return out

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        cols = []
        for c in d["columns"]:
            c = dict(c)
            if c.get("categories") is not None:
                c["categories"] = tuple(str(v) for v in c["categories"])
            cols.append(Column(**c))
        return cls(tuple(cols))

    @classmethod
    def infer(cls, path, specs: Sequence[dict]) -> "TabularSchema":
        """Fill vocabularies and numeric ranges from a CSV file.

        ``specs`` lists ``{"name", "kind", "role"}`` dicts (optionally with
        ``categories``, ``minimum``/``maximum``, ``integer``, ``positive``);
        anything missing is read off the data. Vocabularies are sorted.
        """
        header, rows = _read_rows(path)
        cols = []
        for spec in specs:
            spec = dict(spec)
            name = spec["name"]
            if name not in header:
                raise MissingColumn(name)
            j = header.index(name)
            values = [r[j] for r in rows]
            kind = spec.get("kind", CATEGORICAL)
            if kind == CATEGORICAL:
                if spec.get("categories") is None:
                    spec["categories"] = tuple(sorted(set(values)))
                else:
                    spec["categories"] = tuple(str(v) for v in spec["categories"])
            else:
                nums = _parse_numeric(name, values)
                spec.setdefault("minimum", float(nums.min()) if len(nums) else 0.0)
                spec.setdefault("maximum", float(nums.max()) if len(nums) else 0.0)
                spec.setdefault("integer", bool(len(nums)) and bool(np.all(nums == np.round(nums))))
            cols.append(Column(**spec))
        return cls(tuple(cols))


@dataclass
class Dataset:
    """Encoded view of a table: ``X`` (n x encoded_width), ``s`` and ``y``."""

    schema: TabularSchema
    X: np.ndarray
    s: np.ndarray
    y: np.ndarray
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64).ravel()
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            # a schema may have no encoded features at all, so -1 cannot be inferred
            X = X.reshape(len(self.s), self.schema.encoded_width)
        self.X = X
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if self.index is None:
            self.index = np.arange(len(self.X))
        if not len(self.X) == len(self.s) == len(self.y) == len(self.index):
            raise WidthMismatch("X, s, y lengths differ")

    @property
    def rows(self) -> int:
        return len(self.X)

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.schema, self.X[idx], self.s[idx], self.y[idx], self.index[idx])

    def group_onehot(self) -> np.ndarray:
        return np.eye(self.schema.n_groups)[self.s]

    def with_group(self) -> np.ndarray:
        """``X`` with the one-hot protected attribute appended (model input)."""
        return np.hstack([self.X, self.group_onehot()])

    def validate(self) -> None:
        """Raise ``ValueError`` if any encoding invariant is violated."""
        check_encoded(self.X, self.schema)
        if len(self.s) and (self.s.min() < 0 or self.s.max() >= self.schema.n_groups):
            raise ValueError("group index out of range")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("target must be 0/1")


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    test: Dataset
    seed: int


def check_encoded(X: np.ndarray, schema: TabularSchema) -> None:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != schema.encoded_width:
        raise WidthMismatch(f"expected width {schema.encoded_width}, got {X.shape}")
    for col, sl in schema.blocks():
        block = X[:, sl]
        if col.kind == CATEGORICAL:
            if not (np.isin(block, (0.0, 1.0)).all() and (block.sum(axis=1) == 1).all()):
                raise ValueError(f"invalid one-hot block for {col.name}")
        elif ((block < 0) | (block > 1)).any():
            raise ValueError(f"scaled values out of [0, 1] for {col.name}")


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(str(path))
        rows = [r for r in reader if r]
    return [h.strip() for h in header], rows


def _parse_numeric(name: str, values: Iterable[str]) -> np.ndarray:
    out = []
    for i, v in enumerate(values):
        try:
            f = float(v)
        except ValueError:
            raise NonFiniteNumeric(name, i) from None
        if not math.isfinite(f):
            raise NonFiniteNumeric(name, i)
        out.append(f)
    return np.asarray(out, dtype=np.float64)


def _category_codes(col: Column, values: Sequence[str]) -> np.ndarray:
    lookup = {v: i for i, v in enumerate(col.categories)}
    codes = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        try:
            codes[i] = lookup[v]
        except KeyError:
            raise UnknownCategory(col.name, i, v) from None
    return codes


def encode_columns(columns: dict[str, Sequence], schema: TabularSchema) -> Dataset:
    """Encode raw column values (strings or numbers) keyed by column name."""
    for c in schema.columns:
        if c.name not in columns:
            raise MissingColumn(c.name)
    n = len(columns[schema.target.name])
    parts = []
    for col in schema.features:
        raw = columns[col.name]
        if col.kind == CATEGORICAL:
            codes = _category_codes(col, [str(v) for v in raw])
            parts.append(np.eye(col.width)[codes].reshape(n, col.width))
        else:
            vals = _parse_numeric(col.name, [str(v) for v in raw])
            span = col.maximum - col.minimum
            scaled = (vals - col.minimum) / span if span > 0 else np.zeros(n)
            bad = np.flatnonzero((scaled < 0) | (scaled > 1))
            if len(bad):
                raise NonFiniteNumeric(col.name, int(bad[0]))
            parts.append(scaled.reshape(n, 1))
    X = np.hstack(parts) if parts else np.zeros((n, 0))
    s = _category_codes(schema.protected, [str(v) for v in columns[schema.protected.name]])
    t = schema.target
    y = (_category_codes(t, [str(v) for v in columns[t.name]]) == t.categories.index(t.positive))
    return Dataset(schema, X, s, y.astype(np.int64))


def load_csv(path, schema: TabularSchema) -> Dataset:
    """Read a header-first CSV (optionally gzipped) and encode it.

    Columns not named in the schema are ignored. Row order is preserved.
    """
    header, rows = _read_rows(path)
    for c in schema.columns:
        if c.name not in header:
            raise MissingColumn(c.name)
    columns = {c.name: [r[header.index(c.name)] for r in rows] for c in schema.columns}
    return encode_columns(columns, schema)


def split_80_20(d: Dataset, seed: int) -> SplitPair:
    """Shuffle with ``seed`` and keep ``floor(0.8 n)`` rows for training.

    Both halves keep the original relative row order.
    """
    n = d.rows
    if n < 5:
        raise TooFewRows(f"need at least 5 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(TRAIN_FRACTION * n))
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return SplitPair(d.subset(train_idx), d.subset(test_idx), seed)


def decode_columns(encoded, schema: TabularSchema) -> dict[str, np.ndarray]:
    """Map encoded rows back to per-column values (categories / de-scaled numbers)."""
    encoded = np.atleast_2d(np.asarray(encoded, dtype=np.float64))
    if encoded.shape[1] != schema.encoded_width:
        raise WidthMismatch(f"expected width {schema.encoded_width}, got {encoded.shape[1]}")
    out = {}
    for col, sl in schema.blocks():
        block = encoded[:, sl]
        if col.kind == CATEGORICAL:
            out[col.name] = np.asarray(col.categories, dtype=object)[block.argmax(axis=1)]
        else:
            v = np.clip(block[:, 0], 0.0, 1.0) * (col.maximum - col.minimum) + col.minimum
            v = np.clip(v, col.minimum, col.maximum)
            out[col.name] = np.round(v).astype(np.int64) if col.integer else v
    return out


def decode_rows(encoded, schema: TabularSchema, s=None, y=None) -> list[dict]:
    """Inverse of the encoding: argmax per one-hot block, inverse min-max for numerics.

    ``s`` and ``y`` (group indices / 0-1 labels) fill the protected and target
    columns when given.
    """
    cols = decode_columns(encoded, schema)
    n = len(np.atleast_2d(encoded))
    if s is not None:
        cols[schema.protected.name] = np.asarray(schema.protected.categories, dtype=object)[np.asarray(s)]
    if y is not None:
        t = schema.target
        neg = next(c for c in t.categories if c != t.positive)
        cols[t.name] = np.where(np.asarray(y) == 1, t.positive, neg).astype(object)
    names = [c.name for c in schema.columns if c.name in cols]
    return [{k: _py(cols[k][i]) for k in names} for i in range(n)]


def _py(v):
    return v.item() if isinstance(v, np.generic) else v


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(int(v)) if v.is_integer() else repr(v)
    return str(v)


def write_csv(records: list[dict], schema: TabularSchema, path) -> None:
    names = [c.name for c in schema.columns]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in records:
            w.writerow([format_value(r[k]) for k in names])
