"""Dataset ingestion, preprocessing and split construction.

Each dataset is described by an INI schema (see ``schemas/``) mapping columns
to a kind: ``numeric``, ``categorical``, ``label``, ``attack_category`` or
``drop``. Rows with missing or non-numeric values in kept columns are dropped
and counted. Categorical columns are one-hot encoded with categories fitted on
the training rows; numeric and encoded columns are then standardized with
statistics from the training rows only.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

KINDS = ("numeric", "categorical", "label", "attack_category", "drop")
NORMAL = "normal"
SNAPSHOT_FORMAT = "hqcae-split/1"
BUILTIN_SCHEMAS = ("unsw_nb15", "nsl_kdd", "cic_ids2017")


class SchemaError(ValueError):
    pass


@dataclass
class FeatureSchema:
    dataset_id: str
    columns: dict[str, str]
    header: bool = True
    default_kind: str | None = None
    split: str = "official"
    train_fraction: float = 0.05
    exclude_files: tuple[str, ...] = ()
    normal_labels: tuple[str, ...] = ("0",)
    normal_category: str | None = None
    category_source: str = "column"
    category_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, kind in self.columns.items():
            if kind not in KINDS:
                raise SchemaError(f"column {name!r} has unknown kind {kind!r}")
        if self.default_kind is not None and self.default_kind not in ("numeric", "drop"):
            raise SchemaError("default_kind must be numeric or drop")
        labels = [c for c, k in self.columns.items() if k == "label"]
        if len(labels) != 1:
            raise SchemaError(f"schema needs exactly one label column, found {len(labels)}")
        if sum(k == "attack_category" for k in self.columns.values()) > 1:
            raise SchemaError("schema allows at most one attack_category column")
        if not self.header and self.default_kind is not None:
            raise SchemaError("headerless files need every column listed")
        if self.split not in ("official", "sample"):
            raise SchemaError(f"split must be official or sample, got {self.split!r}")

    @property
    def label_column(self) -> str:
        return next(c for c, k in self.columns.items() if k == "label")

    @property
    def category_column(self) -> str | None:
        return next((c for c, k in self.columns.items() if k == "attack_category"), None)

    def fingerprint(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _csv_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def load_schema(name_or_path: str | Path) -> FeatureSchema:
    """Load a builtin schema by name (``unsw_nb15``...) or an INI file by path."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";",), interpolation=None)
    parser.optionxform = str
    if str(name_or_path) in BUILTIN_SCHEMAS:
        text = resources.files("hqcae.schemas").joinpath(f"{name_or_path}.ini").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise FileNotFoundError(f"schema file not found: {path}")
        text = path.read_text()
    parser.read_string(text)
    ds = parser["dataset"]
    return FeatureSchema(
        dataset_id=ds["id"],
        columns=dict(parser["columns"]),
        header=ds.getboolean("header", True),
        default_kind=ds.get("default_kind"),
        split=ds.get("split", "official"),
        train_fraction=ds.getfloat("train_fraction", 0.05),
        exclude_files=_csv_list(ds.get("exclude_files", "")),
        normal_labels=_csv_list(ds.get("normal_labels", "0")),
        normal_category=ds.get("normal_category"),
        category_source=ds.get("category_source", "column"),
        category_map=dict(parser["category_map"]) if parser.has_section("category_map") else {},
    )


# ---------------------------------------------------------------------------
# parsing


@dataclass
class RawRecords:
    """Typed feature columns plus binary labels and attack categories (``normal`` for benign rows)."""

    frame: pd.DataFrame
    labels: np.ndarray
    categories: np.ndarray
    n_dropped: int = 0
    sources: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> RawRecords:
        return RawRecords(self.frame.iloc[idx].reset_index(drop=True), self.labels[idx], self.categories[idx],
                          self.n_dropped, self.sources)

    @staticmethod
    def concat(parts: list[RawRecords]) -> RawRecords:
        return RawRecords(
            pd.concat([p.frame for p in parts], ignore_index=True),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.categories for p in parts]),
            sum(p.n_dropped for p in parts),
            tuple(s for p in parts for s in p.sources),
        )


def _resolve_kinds(schema: FeatureSchema, names: list[str]) -> dict[str, str]:
    kinds = {}
    for name in names:
        kind = schema.columns.get(name, schema.default_kind)
        if kind is None:
            raise SchemaError(f"column {name!r} is not described by schema {schema.dataset_id}")
        kinds[name] = kind
    return kinds


def parse_csv(path: str | Path, schema: FeatureSchema) -> RawRecords:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    if schema.header:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
        frame.columns = [c.strip() for c in frame.columns]
        missing = [c for c in schema.columns if c not in frame.columns]
        if missing:
            raise SchemaError(f"{path.name}: header lacks schema columns {missing}")
    else:
        names = list(schema.columns)
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, header=None)
        if len(frame) and frame.shape[1] != len(names):
            raise SchemaError(f"{path.name}: expected {len(names)} columns, found {frame.shape[1]}")
        if not len(frame):
            frame = pd.DataFrame(columns=names)
        frame.columns = names

    kinds = _resolve_kinds(schema, list(frame.columns))
    frame = frame.apply(lambda s: s.str.strip())
    bad = np.zeros(len(frame), dtype=bool)
    typed = {}
    for name, kind in kinds.items():
        col = frame[name]
        if kind == "numeric":
            values = pd.to_numeric(col, errors="coerce").to_numpy(dtype=float)
            bad |= ~np.isfinite(values)
            typed[name] = values
        elif kind == "categorical":
            bad |= (col == "").to_numpy()
            typed[name] = col.to_numpy(dtype=object)
    label_raw = frame[schema.label_column].to_numpy(dtype=object)
    bad |= label_raw == ""

    keep = ~bad
    n_dropped = int(bad.sum())
    if n_dropped:
        logger.info("%s: dropped %d malformed row(s)", path.name, n_dropped)

    label_raw = label_raw[keep]
    normal_set = {v.lower() for v in schema.normal_labels}
    labels = np.array([str(v).lower() not in normal_set for v in label_raw], dtype=np.int64)
    if schema.category_source == "label":
        raw_cat = label_raw
    elif schema.category_column is not None:
        raw_cat = frame[schema.category_column].to_numpy(dtype=object)[keep]
    else:
        raw_cat = np.where(labels == 1, "attack", NORMAL).astype(object)
    categories = np.array(
        [NORMAL if y == 0 else schema.category_map.get(str(c), str(c)) for c, y in zip(raw_cat, labels)],
        dtype=object,
    )
    features = pd.DataFrame({k: v[keep] for k, v in typed.items()})
    return RawRecords(features, labels, categories, n_dropped, (str(path),))


# ---------------------------------------------------------------------------
# encoding and scaling


def one_hot_encode(
    records: RawRecords, schema: FeatureSchema, categories: dict[str, list[str]] | None = None
) -> tuple[np.ndarray, dict[str, list[str]]]:
    """Encode categorical columns; unseen values map to an all-zero block.

    Without ``categories`` the levels are fitted (sorted) from ``records``.
    """
    cat_cols = [c for c in records.frame.columns if _resolve_kinds(schema, [c])[c] == "categorical"]
    if categories is None:
        categories = {c: sorted(set(records.frame[c])) for c in cat_cols}
    blocks = []
    for c in cat_cols:
        levels = np.array(categories[c], dtype=object)
        values = records.frame[c].to_numpy(dtype=object)
        blocks.append((values[:, None] == levels[None, :]).astype(float))
    matrix = np.hstack(blocks) if blocks else np.zeros((len(records), 0))
    return matrix, categories


@dataclass
class StandardScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> StandardScaler:
        x = np.asarray(x, dtype=float)
        if x.shape[0] == 0:
            raise ValueError("cannot fit a scaler on zero rows")
        mean, std = x.mean(axis=0), x.std(axis=0)
        # rounding can leave a constant column with a tiny nonzero mean offset / std
        exact = np.ptp(x, axis=0) == 0
        mean[exact] = x[0, exact]
        std[exact | (std == 0)] = 1.0
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


def fit_standardize(x: np.ndarray) -> StandardScaler:
    return StandardScaler.fit(x)


def apply(scaler: StandardScaler, x: np.ndarray) -> np.ndarray:
    return scaler.transform(x)


def _feature_matrix(records: RawRecords, schema: FeatureSchema, categories=None):
    numeric = [c for c in records.frame.columns if _resolve_kinds(schema, [c])[c] == "numeric"]
    num = records.frame[numeric].to_numpy(dtype=float) if numeric else np.zeros((len(records), 0))
    onehot, categories = one_hot_encode(records, schema, categories)
    names = numeric + [f"{c}={v}" for c, levels in categories.items() for v in levels]
    return np.hstack([num, onehot]), categories, names


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    dataset_id: str
    x_train: np.ndarray
    y_train: np.ndarray
    cat_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    cat_test: np.ndarray
    feature_names: list[str]
    scaler: StandardScaler
    categories: dict[str, list[str]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    @property
    def x_train_normal(self) -> np.ndarray:
        return self.x_train[self.y_train == 0]

    @property
    def attack_categories(self) -> list[str]:
        return sorted(set(self.cat_test[self.y_test == 1]))

    def summary(self) -> dict:
        return {
            "dataset": self.dataset_id,
            "features": self.n_features,
            "train_rows": int(len(self.y_train)),
            "train_normal": int((self.y_train == 0).sum()),
            "train_attack": int((self.y_train == 1).sum()),
            "test_rows": int(len(self.y_test)),
            "test_normal": int((self.y_test == 0).sum()),
            "test_attack": int((self.y_test == 1).sum()),
            "categories": self.attack_categories,
            "dropped_rows": self.provenance.get("dropped_rows", 0),
        }

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x_train, self.y_train, self.x_test, self.y_test, self.scaler.mean, self.scaler.std):
            h.update(np.ascontiguousarray(arr).tobytes())
        for arr in (self.cat_train, self.cat_test):
            h.update("\x1f".join(map(str, arr)).encode())
        h.update(json.dumps(self.feature_names).encode())
        return h.hexdigest()[:16]

    def save(self, path: str | Path, extra_meta: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": SNAPSHOT_FORMAT,
            "dataset_id": self.dataset_id,
            "feature_names": self.feature_names,
            "categories": self.categories,
            "provenance": self.provenance,
            "content_hash": self.content_hash(),
            **(extra_meta or {}),
        }
        np.savez_compressed(
            path,
            meta=np.array(json.dumps(meta, sort_keys=True)),
            x_train=self.x_train, y_train=self.y_train, cat_train=self.cat_train.astype(str),
            x_test=self.x_test, y_test=self.y_test, cat_test=self.cat_test.astype(str),
            scaler_mean=self.scaler.mean, scaler_std=self.scaler.std,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetSplit:
        with np.load(path, allow_pickle=False) as d:
            meta = json.loads(str(d["meta"]))
            if meta.get("format") != SNAPSHOT_FORMAT:
                raise ValueError(f"{path}: unsupported snapshot format {meta.get('format')!r}")
            return cls(
                meta["dataset_id"], d["x_train"], d["y_train"], d["cat_train"].astype(object),
                d["x_test"], d["y_test"], d["cat_test"].astype(object), meta["feature_names"],
                StandardScaler(d["scaler_mean"], d["scaler_std"]), meta["categories"], meta["provenance"],
            )


def snapshot_name(dataset_id: str, seed: int, schema_hash: str) -> str:
    return f"{dataset_id}-seed{seed}-{schema_hash[:12]}.npz"


def _as_paths(value) -> list[Path]:
    if isinstance(value, (str, Path)):
        return [Path(value)]
    return [Path(v) for v in value]


def build_split(
    dataset_id: str, train: RawRecords, test: RawRecords, schema: FeatureSchema, provenance: dict
) -> DatasetSplit:
    x_tr, categories, names = _feature_matrix(train, schema)
    x_te, _, _ = _feature_matrix(test, schema, categories)
    scaler = fit_standardize(x_tr)
    return DatasetSplit(
        dataset_id, scaler.transform(x_tr), train.labels, train.categories,
        scaler.transform(x_te), test.labels, test.categories, names, scaler, categories, provenance,
    )


def make_splits(
    dataset_id: str, files: dict, seed: int = 0, schema: FeatureSchema | None = None
) -> DatasetSplit:
    """Build the train/test split for a real dataset.

    ``official`` schemas read ``files["train"]`` and ``files["test"]``.
    ``sample`` schemas read every path in ``files["files"]`` (skipping names that
    match ``exclude_files``), then draw exactly ``train_fraction`` of the rows
    uniformly at random as the training set.
    """
    schema = schema or load_schema(dataset_id)
    for key, value in files.items():
        for p in _as_paths(value):
            if not p.is_file():
                raise FileNotFoundError(f"{dataset_id}: required file {key}={p} not found")

    prov = {"seed": seed, "schema": schema.dataset_id, "schema_hash": schema.fingerprint()}
    if schema.split == "official":
        for key in ("train", "test"):
            if key not in files:
                raise FileNotFoundError(f"{dataset_id}: required file entry {key!r} missing")
        train = RawRecords.concat([parse_csv(p, schema) for p in _as_paths(files["train"])])
        test = RawRecords.concat([parse_csv(p, schema) for p in _as_paths(files["test"])])
        prov["sources"] = list(train.sources + test.sources)
        prov["dropped_rows"] = train.n_dropped + test.n_dropped
        return build_split(dataset_id, train, test, schema, prov)

    if "files" not in files:
        raise FileNotFoundError(f"{dataset_id}: required file entry 'files' missing")
    paths = []
    for p in _as_paths(files["files"]):
        if any(pat.lower() in p.name.lower() for pat in schema.exclude_files):
            logger.info("%s: excluding %s", dataset_id, p.name)
            continue
        paths.append(p)
    if not paths:
        raise FileNotFoundError(f"{dataset_id}: no input files left after exclusions")
    records = RawRecords.concat([parse_csv(p, schema) for p in paths])
    n_train = int(round(schema.train_fraction * len(records)))
    rng = np.random.default_rng(seed)
    train_idx = np.sort(rng.choice(len(records), size=n_train, replace=False))
    mask = np.zeros(len(records), dtype=bool)
    mask[train_idx] = True
    prov["sources"] = list(records.sources)
    prov["excluded"] = [str(p) for p in _as_paths(files["files"]) if p not in paths]
    prov["dropped_rows"] = records.n_dropped
    return build_split(dataset_id, records.subset(np.flatnonzero(mask)), records.subset(np.flatnonzero(~mask)),
                       schema, prov)


@dataclass
class LOAOPlan:
    held_out: str
    train_x: np.ndarray
    train_y: np.ndarray
    train_cat: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    eval_cat: np.ndarray


def make_loao_plans(split: DatasetSplit) -> list[LOAOPlan]:
    """One plan per attack category present in the test set."""
    cats = split.attack_categories
    if not cats:
        raise ValueError(f"{split.dataset_id}: no attack categories available for leave-one-attack-out")
    plans = []
    for cat in cats:
        tr = split.cat_train != cat
        ev = (split.y_test == 0) | (split.cat_test == cat)
        plans.append(LOAOPlan(
            cat, split.x_train[tr], split.y_train[tr], split.cat_train[tr],
            split.x_test[ev], split.y_test[ev], split.cat_test[ev],
        ))
    return plans


# ---------------------------------------------------------------------------
# synthetic data

SYNTHETIC_CATEGORIES = ("scatter", "shift")


def synthetic_dataset(
    seed: int = 0,
    n_normal: int = 2000,
    n_anomalies: int = 200,
    dim: int = 32,
    n_test_normal: int = 1000,
    n_train_anomalies: int = 200,
    intrinsic_dim: int = 4,
    noise: float = 0.1,
    shift: float = 3.0,
) -> DatasetSplit:
    """Normals on a random low-dimensional linear manifold; two anomaly families.

    ``scatter`` anomalies are isotropic full-rank Gaussians; ``shift`` anomalies
    are manifold points displaced by ``shift`` along a direction orthogonal to
    the manifold. Families alternate so each covers half the anomalies.
    ``n_train_anomalies`` labelled anomalies are added to the training split
    for the supervised baseline; the autoencoders only ever see the normals.
    """
    if dim < 2:
        raise ValueError("synthetic data needs dim >= 2")
    k = min(intrinsic_dim, dim - 1)
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    manifold, off = basis[:, :k], basis[:, k:]
    scales = np.linspace(1.5, 3.0, k)

    def normals(n: int) -> np.ndarray:
        return (rng.normal(size=(n, k)) * scales) @ manifold.T + noise * rng.normal(size=(n, dim))

    def anomalies(n: int) -> tuple[np.ndarray, np.ndarray]:
        cats = np.array([SYNTHETIC_CATEGORIES[i % 2] for i in range(n)], dtype=object)
        x = np.empty((n, dim))
        scatter = cats == "scatter"
        x[scatter] = rng.normal(size=(int(scatter.sum()), dim)) * scales.mean() / np.sqrt(2)
        m = int((~scatter).sum())
        direction = off @ rng.normal(size=(off.shape[1], m))
        direction /= np.linalg.norm(direction, axis=0, keepdims=True)
        x[~scatter] = normals(m) + shift * direction.T
        return x, cats

    def assemble(n_norm: int, n_anom: int):
        xn = normals(n_norm)
        xa, ca = anomalies(n_anom)
        x = np.vstack([xn, xa])
        y = np.r_[np.zeros(n_norm, dtype=np.int64), np.ones(n_anom, dtype=np.int64)]
        c = np.concatenate([np.full(n_norm, NORMAL, dtype=object), ca])
        return x, y, c

    x_tr, y_tr, c_tr = assemble(n_normal, n_train_anomalies)
    x_te, y_te, c_te = assemble(n_test_normal, n_anomalies)
    scaler = fit_standardize(x_tr)
    params = dict(seed=seed, n_normal=n_normal, n_anomalies=n_anomalies, dim=dim, n_test_normal=n_test_normal,
                  n_train_anomalies=n_train_anomalies, intrinsic_dim=intrinsic_dim, noise=noise, shift=shift)
    return DatasetSplit(
        "synthetic", scaler.transform(x_tr), y_tr, c_tr, scaler.transform(x_te), y_te, c_te,
        [f"f{i}" for i in range(dim)], scaler, {}, {"generator": "synthetic", **params, "dropped_rows": 0},
    )
