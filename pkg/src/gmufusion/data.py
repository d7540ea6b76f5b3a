"""Multimodal multilabel datasets and their CSV form.

A dataset on disk is one CSV per modality (``id`` column then feature
columns) plus a label CSV (``id`` column then one 0/1 column per label).
Rows are joined on id; the label file fixes the row order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class MultilabelDataset:
    features: tuple[np.ndarray, ...]
    labels: np.ndarray
    label_names: tuple[str, ...]
    ids: tuple[str, ...] = ()
    feature_names: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        feats = tuple(np.asarray(f, dtype=np.float64) for f in self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        n = labels.shape[0]
        for i, f in enumerate(feats):
            if f.ndim != 2 or f.shape[0] != n:
                raise DatasetError(f"modality {i} has shape {f.shape}, expected {n} rows")
            if not np.all(np.isfinite(f)):
                raise DatasetError(f"modality {i} contains non-finite features")
            f.setflags(write=False)
        if np.any((labels != 0) & (labels != 1)):
            raise DatasetError("labels must be 0/1")
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_names", tuple(self.label_names))
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(n)))
        if not self.feature_names:
            object.__setattr__(
                self, "feature_names",
                tuple(tuple(f"f{j}" for j in range(f.shape[1])) for f in feats),
            )

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    def subset(self, rows) -> "MultilabelDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            features=tuple(f[rows] for f in self.features),
            labels=self.labels[rows],
            ids=tuple(self.ids[i] for i in rows),
        )

    def select(self, modalities: Sequence[int]) -> "MultilabelDataset":
        return replace(
            self,
            features=tuple(self.features[i] for i in modalities),
            feature_names=tuple(self.feature_names[i] for i in modalities),
        )

    def split(self, fractions: Sequence[float], rng: np.random.Generator) -> list["MultilabelDataset"]:
        """Random partition; the last part takes whatever the fractions leave."""
        perm = rng.permutation(self.n)
        cuts = np.floor(np.cumsum(fractions) * self.n).astype(int)
        return [self.subset(np.sort(part)) for part in np.split(perm, cuts)]


def _read_csv(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or len(header) < 2:
                raise DatasetError(f"{path}: header needs an id column and at least one data column")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                rows.append((lineno, row))
    except FileNotFoundError:
        raise DatasetError(f"{path}: file not found") from None
    return header, rows


def _index_rows(path, rows) -> dict[str, tuple[int, list[str]]]:
    index = {}
    for lineno, row in rows:
        key = row[0]
        if key in index:
            raise DatasetError(f"{path}:{lineno}: duplicate id {key!r} (first seen on line {index[key][0]})")
        index[key] = (lineno, row)
    return index


def load_dataset(feature_paths: Sequence[str | Path], label_path: str | Path) -> MultilabelDataset:
    label_path = Path(label_path)
    label_header, label_rows = _read_csv(label_path)
    _index_rows(label_path, label_rows)
    ids = [row[0] for _, row in label_rows]
    labels = np.zeros((len(ids), len(label_header) - 1), dtype=np.int64)
    for r, (lineno, row) in enumerate(label_rows):
        for c, cell in enumerate(row[1:], start=1):
            if cell.strip() not in ("0", "1"):
                raise DatasetError(
                    f"{label_path}:{lineno}: non-binary label {cell!r} in column {label_header[c]!r}")
            labels[r, c - 1] = int(cell)

    features, names = [], []
    for path in map(Path, feature_paths):
        header, rows = _read_csv(path)
        index = _index_rows(path, rows)
        mat = np.zeros((len(ids), len(header) - 1))
        for r, key in enumerate(ids):
            if key not in index:
                raise DatasetError(f"{path}: id {key!r} from {label_path} is missing")
            lineno, row = index[key]
            for c, cell in enumerate(row[1:], start=1):
                try:
                    value = float(cell)
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: column {header[c]!r} is not a number: {cell!r}") from None
                if not math.isfinite(value):
                    raise DatasetError(f"{path}:{lineno}: non-finite feature in column {header[c]!r}")
                mat[r, c - 1] = value
        features.append(mat)
        names.append(tuple(header[1:]))
    return MultilabelDataset(tuple(features), labels, tuple(label_header[1:]), tuple(ids), tuple(names))


def save_dataset(dataset: MultilabelDataset, directory: str | Path, stem: str = "modality") -> tuple[list[Path], Path]:
    """Write ``dataset`` as CSVs that :func:`load_dataset` reads back exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (mat, names) in enumerate(zip(dataset.features, dataset.feature_names)):
        path = directory / f"{stem}{i}.csv"
        write_matrix(path, dataset.ids, names, mat)
        paths.append(path)
    label_path = directory / "labels.csv"
    write_matrix(label_path, dataset.ids, dataset.label_names, dataset.labels)
    return paths, label_path


def write_matrix(path: str | Path, ids: Sequence[str], columns: Sequence[str], values) -> None:
    values = np.asarray(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *columns])
        for key, row in zip(ids, values):
            w.writerow([key, *(repr(float(v)) if values.dtype.kind == "f" else str(int(v)) for v in row)])


def read_matrix(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    """Generic reader for id-keyed numeric CSVs (predictions, gate dumps)."""
    path = Path(path)
    header, rows = _read_csv(path)
    mat = np.zeros((len(rows), len(header) - 1))
    for r, (lineno, row) in enumerate(rows):
        try:
            mat[r] = [float(c) for c in row[1:]]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric value") from None
    if not np.all(np.isfinite(mat)):
        raise DatasetError(f"{path}: non-finite values")
    _index_rows(path, rows)
    return [row[0] for _, row in rows], header[1:], mat
