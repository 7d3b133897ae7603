"""Append-only observation store, CSV ingestion and categorical encoding.

Every other part of the package refers to observations by their integer
row index in a :class:`DataStore`.  Rows are never modified or removed, so
an index stays valid for the lifetime of the store.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed input data."""


class DataStore:
    """Append-only table of covariate vectors and responses.

    Parameters
    ----------
    d : int
        Covariate dimension, fixed for the lifetime of the store.
    n_classes : int, optional
        Number of response classes.  ``None`` (default) means real-valued
        responses.
    binary : sequence of bool, optional
        Per-column flags marking 0/1 indicator columns.  Grow moves split
        these at the canonical value 0.5.
    """

    def __init__(self, d: int, n_classes: int | None = None, binary=None, capacity: int = 64):
        if d < 1:
            raise DataError("covariate dimension must be at least 1")
        if n_classes is not None and n_classes < 1:
            raise DataError("n_classes must be positive")
        self.d = int(d)
        self.n_classes = None if n_classes is None else int(n_classes)
        self.binary = np.zeros(d, dtype=bool) if binary is None else np.asarray(binary, dtype=bool)
        if self.binary.shape != (d,):
            raise DataError("binary flags must have one entry per column")
        capacity = max(int(capacity), 1)
        self._X = np.empty((capacity, d))
        self._y = np.empty(capacity)
        self.n = 0

    @property
    def classification(self) -> bool:
        return self.n_classes is not None

    @property
    def X(self) -> np.ndarray:
        return self._X[: self.n]

    @property
    def y(self) -> np.ndarray:
        """Responses; integer class labels when the store is categorical."""
        if self.classification:
            return self._y[: self.n].astype(np.int64)
        return self._y[: self.n]

    @property
    def yf(self) -> np.ndarray:
        """Responses as a float view (class labels stored as whole numbers)."""
        return self._y[: self.n]

    def __len__(self) -> int:
        return self.n

    def _grow(self) -> None:
        cap = 2 * self._X.shape[0]
        X = np.empty((cap, self.d))
        X[: self.n] = self._X[: self.n]
        y = np.empty(cap)
        y[: self.n] = self._y[: self.n]
        self._X, self._y = X, y

    def check(self, x, y):
        """Validate one observation and return it in storage form."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.d:
            raise DataError(f"expected {self.d} covariates, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise DataError("covariates must be finite")
        if self.classification:
            if isinstance(y, (float, np.floating)) and not float(y).is_integer():
                raise DataError(f"class response must be an integer, got {y!r}")
            try:
                c = int(y)
            except (TypeError, ValueError):
                raise DataError(f"class response must be an integer, got {y!r}") from None
            if not 0 <= c < self.n_classes:
                raise DataError(f"class {c} outside 0..{self.n_classes - 1}")
            return x, c
        try:
            v = float(y)
        except (TypeError, ValueError):
            raise DataError(f"real response expected, got {y!r}") from None
        if not math.isfinite(v):
            raise DataError("response must be finite")
        return x, v

    def append(self, x, y) -> int:
        """Append one row and return its index."""
        x, y = self.check(x, y)
        if self.n == self._X.shape[0]:
            self._grow()
        self._X[self.n] = x
        self._y[self.n] = y
        self.n += 1
        return self.n - 1

    def extend(self, X, y) -> range:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        start = self.n
        for xi, yi in zip(X, y, strict=True):
            self.append(xi, yi)
        return range(start, self.n)

    def copy(self) -> DataStore:
        out = DataStore(self.d, self.n_classes, self.binary.copy(), capacity=max(self.n, 1))
        out._X[: self.n] = self.X
        out._y[: self.n] = self.y
        out.n = self.n
        return out

    def head(self, n: int) -> DataStore:
        """A new store holding the first ``n`` rows."""
        out = DataStore(self.d, self.n_classes, self.binary.copy(), capacity=max(n, 1))
        out.extend(self.X[:n], self.y[:n])
        return out

    @classmethod
    def from_arrays(cls, X, y, n_classes=None, binary=None) -> DataStore:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.ndim != 2:
            raise DataError("X must be two-dimensional")
        store = cls(X.shape[1], n_classes, binary, capacity=max(len(X), 1))
        store.extend(X, y)
        return store

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_classes": self.n_classes,
            "binary": self.binary.tolist(),
            "X": self.X.tolist(),
            "y": self.y.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> DataStore:
        store = cls(payload["d"], payload["n_classes"], payload["binary"], capacity=max(len(payload["y"]), 1))
        if payload["y"]:
            store.extend(np.asarray(payload["X"], dtype=float), payload["y"])
        return store


def _parse_number(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return value


def read_table(path) -> dict[str, list[str]]:
    """Read a headed CSV file into a column-name -> raw-strings mapping."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names")
        columns: dict[str, list[str]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            for h, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell.upper() in {"NA", "NAN"}:
                    raise DataError(f"{path}: row {lineno}, column {h!r}: missing value")
                columns[h].append(cell)
    if not next(iter(columns.values()), []):
        raise DataError(f"{path}: no data rows")
    return columns


def _response_values(raw: Sequence[str], name: str, classification: bool):
    values = [_parse_number(v, i + 2, name) for i, v in enumerate(raw)]
    if not classification:
        return values, None
    integral = [v.is_integer() for v in values]
    if not all(integral):
        bad = integral.index(False)
        raise DataError(
            f"row {bad + 2}, column {name!r}: class response {raw[bad]!r} is not an integer "
            "(mixed response kinds)"
        )
    labels = [int(v) for v in values]
    if min(labels) < 0:
        raise DataError(f"column {name!r}: class labels must be non-negative")
    return labels, max(labels) + 1


def load_csv(path, response: str, classification: bool = False) -> DataStore:
    """Load a numeric CSV file into a new store.

    Every column other than ``response`` is a covariate, kept in file order.
    """
    columns = read_table(path)
    if response not in columns:
        raise DataError(f"response column {response!r} not found")
    names = [c for c in columns if c != response]
    if not names:
        raise DataError("no covariate columns")
    X = np.column_stack(
        [[_parse_number(v, i + 2, c) for i, v in enumerate(columns[c])] for c in names]
    )
    y, n_classes = _response_values(columns[response], response, classification)
    binary = [_is_binary(X[:, j]) for j in range(X.shape[1])]
    return DataStore.from_arrays(X, y, n_classes=n_classes, binary=binary)


def save_csv(store: DataStore, path, names: Sequence[str] | None = None, response: str = "y") -> None:
    """Write a store as CSV; ``load_csv`` on the result gives identical rows."""
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(store.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*names, response])
        for xi, yi in zip(store.X, store.y):
            writer.writerow([*(repr(float(v)) for v in xi), int(yi) if store.classification else repr(float(yi))])


def _is_binary(column: np.ndarray) -> bool:
    return bool(np.all((column == 0.0) | (column == 1.0)))


def one_hot_encode(
    table: Mapping[str, Sequence],
    categorical: Sequence[str],
    response: str,
    classification: bool = False,
):
    """Expand categorical columns into 0/1 indicator columns.

    Parameters
    ----------
    table : mapping
        Column name -> sequence of raw values (e.g. from :func:`read_table`).
    categorical : sequence of str
        Columns to encode.  A column whose values are already numeric 0/1 is
        passed through as a single indicator column.
    response : str
        Name of the response column.

    Returns
    -------
    store : DataStore
    mapping : dict
        ``{column: {label: encoded index}}`` for encoded columns and
        ``{column: index}`` for pass-through columns.
    """
    for name in [*categorical, response]:
        if name not in table:
            raise DataError(f"unknown column {name!r}")
    categorical = set(categorical)
    blocks: list[np.ndarray] = []
    binary: list[bool] = []
    mapping: dict = {}
    col = 0
    for name, raw in table.items():
        if name == response:
            continue
        raw = list(raw)
        if name in categorical:
            numeric = _try_numeric(raw)
            if numeric is not None and _is_binary(numeric):
                blocks.append(numeric[:, None])
                binary.append(True)
                mapping[name] = col
                col += 1
                continue
            labels = sorted({str(v) for v in raw})
            codes = {lab: k for k, lab in enumerate(labels)}
            block = np.zeros((len(raw), len(labels)))
            block[np.arange(len(raw)), [codes[str(v)] for v in raw]] = 1.0
            blocks.append(block)
            binary.extend([True] * len(labels))
            mapping[name] = {lab: col + k for lab, k in codes.items()}
            col += len(labels)
        else:
            values = np.array([_parse_number(str(v), i + 2, name) for i, v in enumerate(raw)])
            blocks.append(values[:, None])
            binary.append(_is_binary(values))
            mapping[name] = col
            col += 1
    if not blocks:
        raise DataError("no covariate columns")
    X = np.hstack(blocks)
    y, n_classes = _response_values([str(v) for v in table[response]], response, classification)
    store = DataStore.from_arrays(X, y, n_classes=n_classes, binary=binary)
    return store, mapping


def _try_numeric(raw: Sequence) -> np.ndarray | None:
    try:
        out = np.array([float(v) for v in raw])
    except (TypeError, ValueError):
        return None
    return out if np.all(np.isfinite(out)) else None
