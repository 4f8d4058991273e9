"""Tabular dataset ingestion, splitting, preprocessing and noise sampling."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.special import ndtri

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
TASKS = ("regression", "binary", "multiclass")


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    cardinality: int | None = None
    categories: tuple[str, ...] | None = None


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        if not self.columns:
            raise ValueError("schema needs at least one column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        for c in self.columns:
            if c.kind not in (NUMERICAL, CATEGORICAL):
                raise ValueError(f"column {c.name!r}: unknown kind {c.kind!r}")
            if c.kind == CATEGORICAL and (c.cardinality is None or c.cardinality < 1):
                raise ValueError(f"categorical column {c.name!r} needs cardinality >= 1")

    @property
    def d(self) -> int:
        return len(self.columns)

    @property
    def numerical_idx(self) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.kind == NUMERICAL]

    @property
    def categorical_idx(self) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.kind == CATEGORICAL]

    def fingerprint(self) -> str:
        return "|".join(f"{c.name}:{c.kind}:{c.cardinality or 0}" for c in self.columns)

    def to_dict(self) -> dict:
        return {"columns": [
            {"name": c.name, "kind": c.kind, "cardinality": c.cardinality,
             "categories": list(c.categories) if c.categories is not None else None}
            for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        cols = []
        for c in d["columns"]:
            cats = c.get("categories")
            cols.append(Column(c["name"], c["kind"], c.get("cardinality"), tuple(cats) if cats is not None else None))
        return cls(tuple(cols))


@dataclass(frozen=True)
class Task:
    kind: Literal["regression", "binary", "multiclass"]
    n_classes: int = 1

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}")
        if self.kind == "binary" and self.n_classes != 2:
            object.__setattr__(self, "n_classes", 2)
        if self.kind == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass task needs n_classes >= 2")

    @property
    def is_regression(self) -> bool:
        return self.kind == "regression"

    @property
    def n_outputs(self) -> int:
        return 1 if self.is_regression else self.n_classes


@dataclass(frozen=True)
class Dataset:
    """Rows are float64; categorical cells hold integer codes."""

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    task: Task

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.schema.d:
            raise ValueError(f"rows must be N x {self.schema.d}, got {X.shape}")
        y = np.asarray(self.y, dtype=np.float64 if self.task.is_regression else np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError(f"{X.shape[0]} rows but labels of shape {y.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("dataset contains missing or non-finite cells")
        for j in self.schema.categorical_idx:
            col = X[:, j]
            card = self.schema.columns[j].cardinality
            if np.any(col != np.round(col)) or np.any(col < 0) or np.any(col >= card):
                raise ValueError(f"column {self.schema.columns[j].name!r}: codes outside [0, {card})")
        if not self.task.is_regression and len(y) and (y.min() < 0 or y.max() >= self.task.n_classes):
            raise ValueError("class labels out of range")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def take(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])


@dataclass(frozen=True)
class Split:
    train: Dataset
    val: Dataset
    test: Dataset
    indices: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


# ------------------------------------------------------------------ loading

def _parse_float(text: str) -> float | None:
    try:
        v = float(text)
    except ValueError:
        return None
    return v if np.isfinite(v) else None


def load_schema_file(path: str | Path) -> tuple[list[dict], str]:
    spec = json.loads(Path(path).read_text())
    return spec["columns"], spec["label"]


def load_csv(path: str | Path, label: str, task: Task,
             kinds: dict[str, str] | None = None, schema: FeatureSchema | None = None) -> Dataset:
    """Read a headered CSV.

    ``schema`` (a previously fitted one) pins column kinds and category codes;
    otherwise ``kinds`` may declare kinds per column and the rest are inferred
    (all cells parse as float -> numerical).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if label not in header:
        raise IngestionError(f"{path}: label column {label!r} not in header")
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise IngestionError(f"{path}: row {i} has {len(r)} cells, expected {len(header)}")
    li = header.index(label)
    feat_names = [h for h in header if h != label]
    raw = {h: [r[header.index(h)].strip() for r in rows] for h in feat_names}

    columns, cols_data = [], []
    for name in feat_names:
        values = raw[name]
        if schema is not None:
            col = next((c for c in schema.columns if c.name == name), None)
            if col is None:
                raise IngestionError(f"{path}: column {name!r} not in schema")
            kind = col.kind
        elif kinds and name in kinds:
            kind = kinds[name]
        else:
            kind = NUMERICAL if all(_parse_float(v) is not None for v in values) else CATEGORICAL
        if kind == NUMERICAL:
            parsed = []
            for i, v in enumerate(values, start=1):
                f = _parse_float(v)
                if f is None:
                    raise IngestionError(f"{path}: cannot parse {v!r} at row {i}, column {name!r}")
                parsed.append(f)
            columns.append(Column(name, NUMERICAL))
            cols_data.append(parsed)
        else:
            cats = col.categories if schema is not None else tuple(sorted(set(values)))
            lookup = {c: k for k, c in enumerate(cats)}
            codes = []
            for i, v in enumerate(values, start=1):
                if v not in lookup:
                    raise IngestionError(f"{path}: unknown category {v!r} at row {i}, column {name!r}")
                codes.append(lookup[v])
            columns.append(Column(name, CATEGORICAL, len(cats), cats))
            cols_data.append(codes)

    labels_raw = [r[li].strip() for r in rows]
    if task.is_regression:
        y = []
        for i, v in enumerate(labels_raw, start=1):
            f = _parse_float(v)
            if f is None:
                raise IngestionError(f"{path}: cannot parse label {v!r} at row {i}")
            y.append(f)
        y = np.array(y)
    else:
        classes = sorted(set(labels_raw), key=lambda s: (_parse_float(s) is None, _parse_float(s) or 0.0, s))
        lookup = {c: k for k, c in enumerate(classes)}
        y = np.array([lookup[v] for v in labels_raw], dtype=np.int64)
        if task.kind == "multiclass" and task.n_classes < len(classes):
            task = Task("multiclass", len(classes))
    X = np.array(cols_data, dtype=np.float64).T.reshape(len(rows), len(columns))
    return Dataset(FeatureSchema(tuple(columns)), X, y, task)


# ---------------------------------------------------------------- splitting

def split_dataset(ds: Dataset, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> Split:
    n = len(ds)
    if n < 3:
        raise ValueError(f"need at least 3 rows to split, got {n}")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) == 0:
        raise ValueError(f"ratios {ratios} leave an empty part for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return Split(ds.take(tr), ds.take(va), ds.take(te), (tr, va, te))


# ------------------------------------------------------------ preprocessing

@dataclass
class ColumnTransform:
    mode: str  # "identity" | "zscore" | "quantile"
    mean: float = 0.0
    std: float = 1.0
    support: np.ndarray | None = None  # sorted unique training values
    ranks: np.ndarray | None = None  # average 1-based rank of each support value
    n: int = 0

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.mode == "identity":
            return v.copy()
        if self.mode == "zscore":
            return (v - self.mean) / self.std
        if self.support.size == 1:
            return np.zeros_like(v)
        v = np.clip(v, self.support[0], self.support[-1])
        rank = np.interp(v, self.support, self.ranks)
        return ndtri((rank - 0.5) / self.n)

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "mean": self.mean, "std": self.std, "n": self.n}
        if self.support is not None:
            d["support"] = self.support.tolist()
            d["ranks"] = self.ranks.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnTransform":
        sup = d.get("support")
        return cls(d["mode"], d["mean"], d["std"],
                   None if sup is None else np.array(sup), None if sup is None else np.array(d["ranks"]), d["n"])


def fit_column(values: np.ndarray, mode: str) -> ColumnTransform:
    if mode == "zscore":
        std = float(np.std(values))
        if std <= 0 or not np.isfinite(std):
            return ColumnTransform("identity")
        return ColumnTransform("zscore", float(np.mean(values)), std)
    if mode == "quantile":
        sorted_v = np.sort(values)
        support, first, counts = np.unique(sorted_v, return_index=True, return_counts=True)
        # average of ranks first+1 .. first+count
        ranks = first + (counts + 1) / 2.0
        return ColumnTransform("quantile", support=support, ranks=ranks, n=len(values))
    raise ValueError(f"unknown preprocessing mode {mode!r}")


@dataclass
class Preprocessor:
    schema_fingerprint: str
    columns: dict[int, ColumnTransform]
    label: ColumnTransform | None

    def transform_X(self, X: np.ndarray) -> np.ndarray:
        out = np.array(X, dtype=np.float64)
        for j, t in self.columns.items():
            out[:, j] = t.apply(out[:, j])
        return out

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return y if self.label is None else self.label.apply(np.asarray(y, dtype=np.float64))

    def inverse_y(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.label is None or self.label.mode == "identity":
            return y
        return y * self.label.std + self.label.mean

    def apply(self, ds: Dataset) -> Dataset:
        if ds.schema.fingerprint() != self.schema_fingerprint:
            raise ValueError("dataset schema does not match the fitted preprocessor")
        return replace(ds, X=self.transform_X(ds.X), y=self.transform_y(ds.y) if ds.task.is_regression else ds.y)

    def to_dict(self) -> dict:
        return {"schema": self.schema_fingerprint,
                "columns": {str(j): t.to_dict() for j, t in self.columns.items()},
                "label": None if self.label is None else self.label.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        return cls(d["schema"], {int(j): ColumnTransform.from_dict(t) for j, t in d["columns"].items()},
                   None if d["label"] is None else ColumnTransform.from_dict(d["label"]))


def fit_apply_preprocessor(split: Split, mode: str = "quantile") -> tuple[Preprocessor, Split]:
    train = split.train
    if len(train) == 0:
        raise ValueError("empty training part")
    cols = {j: fit_column(train.X[:, j], mode) for j in train.schema.numerical_idx}
    label = None
    if train.task.is_regression:
        label = fit_column(train.y, "zscore")
    pre = Preprocessor(train.schema.fingerprint(), cols, label)
    return pre, Split(pre.apply(split.train), pre.apply(split.val), pre.apply(split.test), split.indices)


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class EmpiricalSampler:
    """Per-column training values; draws are uniform over training rows."""

    values: np.ndarray  # (n_train, d)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "EmpiricalSampler":
        v = np.array(ds.X, dtype=np.float64)
        v.setflags(write=False)
        return cls(v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def sample(self, column: int, rng: np.random.Generator, size=None):
        if not 0 <= column < self.d:
            raise IndexError(f"column {column} out of range for {self.d} columns")
        rows = rng.integers(0, self.values.shape[0], size=size)
        return self.values[rows, column]

    def sample_rows(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n x d draws, each cell independently from its column's marginal."""
        rows = rng.integers(0, self.values.shape[0], size=(n, self.d))
        return self.values[rows, np.arange(self.d)]


def empirical_sample(sampler: EmpiricalSampler, column: int, rng: np.random.Generator) -> float:
    return float(sampler.sample(column, rng))


def inject_feature_noise(ds: Dataset, ratio: float, sampler: EmpiricalSampler,
                         rng: np.random.Generator) -> Dataset:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if ratio == 0.0:
        return ds
    mask = rng.random(ds.X.shape) < ratio
    noise = sampler.sample_rows(len(ds), rng)
    return replace(ds, X=np.where(mask, noise, ds.X))


def inject_missing(split: Split, ratio: float, rng: np.random.Generator) -> Split:
    """Drop cells at ``ratio`` in every part and impute with train mean / mode."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"missing ratio must be in [0, 1), got {ratio}")
    if ratio == 0.0:
        return split
    schema = split.train.schema
    parts = []
    masks = [rng.random(p.X.shape) < ratio for p in (split.train, split.val, split.test)]
    fill = np.zeros(schema.d)
    train_mask = masks[0]
    for j in range(schema.d):
        kept = split.train.X[~train_mask[:, j], j]
        if kept.size == 0:
            kept = split.train.X[:, j]
        if j in schema.categorical_idx:
            codes, counts = np.unique(kept, return_counts=True)
            fill[j] = codes[np.argmax(counts)]
        else:
            fill[j] = kept.mean()
    for part, mask in zip((split.train, split.val, split.test), masks):
        parts.append(replace(part, X=np.where(mask, fill[None, :], part.X)))
    return Split(*parts, split.indices)


# --------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    task: str = "regression"
    N: int = 1000
    d_num: int = 8
    d_cat: int = 0
    noise_std: float = 0.0
    seed: int = 0
    n_classes: int = 2
    cardinality: int = 3


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Linear ground truth over standard-normal numericals and one-hot categoricals."""
    if spec.N < 10 or spec.d_num < 0 or spec.d_cat < 0 or spec.d_num + spec.d_cat < 1:
        raise ValueError(f"invalid synthetic spec {spec}")
    if spec.noise_std < 0 or spec.cardinality < 1:
        raise ValueError(f"invalid synthetic spec {spec}")
    task = Task(spec.task, spec.n_classes if spec.task != "regression" else 1)
    rng = np.random.default_rng(spec.seed)
    x_num = rng.normal(size=(spec.N, spec.d_num))
    x_cat = rng.integers(0, spec.cardinality, size=(spec.N, spec.d_cat)).astype(np.float64)
    n_out = task.n_outputs
    w_num = rng.normal(size=(spec.d_num, n_out))
    w_cat = rng.normal(size=(spec.d_cat, spec.cardinality, n_out))
    bias = rng.normal(size=n_out)
    score = x_num @ w_num + bias
    for j in range(spec.d_cat):
        score = score + w_cat[j, x_cat[:, j].astype(int)]
    score = score + spec.noise_std * rng.normal(size=score.shape)
    y = score[:, 0] if task.is_regression else np.argmax(score, axis=1)
    cols = [Column(f"num{j}", NUMERICAL) for j in range(spec.d_num)]
    cols += [Column(f"cat{j}", CATEGORICAL, spec.cardinality, tuple(str(k) for k in range(spec.cardinality)))
             for j in range(spec.d_cat)]
    return Dataset(FeatureSchema(tuple(cols)), np.hstack([x_num, x_cat]), y, task)


def write_csv(ds: Dataset, path: str | Path, label: str = "target") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([c.name for c in ds.schema.columns] + [label])
        for row, y in zip(ds.X, ds.y):
            cells = []
            for c, v in zip(ds.schema.columns, row):
                cells.append(c.categories[int(v)] if c.kind == CATEGORICAL and c.categories else repr(float(v)))
            w.writerow(cells + [repr(float(y)) if ds.task.is_regression else str(int(y))])
