"""Clinical-metadata schema and encoding, synthetic dataset generation,
stratified cross-validation folds, and the on-disk formats.

File formats:
  - metadata CSV: UTF-8, comma separated, header row, empty cell = missing
  - schema JSON: ordered column list with kind, levels/min/max, missing policy
  - image tensor blob: magic ``FBTS``, version byte, u32 rank, u32 dims,
    little-endian float64 payload
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

BOOL_TRUE = {"1", "true", "True"}
BOOL_FALSE = {"0", "false", "False"}


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # categorical | numeric | boolean | label
    levels: tuple[str, ...] = ()
    min: float | None = None
    max: float | None = None
    missing: str = "zero"  # zero | indicator

    def __post_init__(self):
        if self.kind not in ("categorical", "numeric", "boolean", "label"):
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in ("categorical", "label") and not self.levels:
            raise ConfigError(f"column {self.name!r}: {self.kind} needs levels")
        if self.missing not in ("zero", "indicator"):
            raise ConfigError(
                f"column {self.name!r}: unknown missing policy {self.missing!r}"
            )

    @property
    def encoded_width(self) -> int:
        base = {"categorical": len(self.levels), "numeric": 1, "boolean": 1}[self.kind]
        return base + (1 if self.missing == "indicator" else 0)


@dataclass(frozen=True)
class MetadataSchema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        labels = [c for c in self.columns if c.kind == "label"]
        if len(labels) != 1:
            raise ConfigError(f"schema needs exactly one label column, got {len(labels)}")

    @property
    def label_column(self) -> Column:
        return next(c for c in self.columns if c.kind == "label")

    @property
    def feature_columns(self) -> tuple[Column, ...]:
        return tuple(c for c in self.columns if c.kind != "label")

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.label_column.levels

    @property
    def encoded_dim(self) -> int:
        return sum(c.encoded_width for c in self.feature_columns)

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            entry: dict = {"name": c.name, "kind": c.kind, "missing": c.missing}
            if c.levels:
                entry["levels"] = list(c.levels)
            if c.min is not None:
                entry["min"] = c.min
            if c.max is not None:
                entry["max"] = c.max
            cols.append(entry)
        return {"columns": cols}

    @staticmethod
    def from_dict(d: dict) -> "MetadataSchema":
        try:
            cols = tuple(
                Column(
                    name=e["name"],
                    kind=e["kind"],
                    levels=tuple(e.get("levels", ())),
                    min=e.get("min"),
                    max=e.get("max"),
                    missing=e.get("missing", "zero"),
                )
                for e in d["columns"]
            )
        except KeyError as exc:
            raise DataFormatError(f"schema entry missing key {exc}") from exc
        return MetadataSchema(cols)


def save_schema(schema: MetadataSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=1), encoding="utf-8")


def load_schema(path) -> MetadataSchema:
    try:
        return MetadataSchema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"schema file {path} is not valid JSON: {exc}") from exc


@dataclass
class Dataset:
    """Images (n,C,H,W) or None, raw metadata records, integer labels."""

    schema: MetadataSchema
    records: list[dict]
    labels: np.ndarray
    images: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.images is not None and len(self.images) != len(self.labels):
            raise ConfigError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.records) != len(self.labels):
            raise ConfigError(
                f"{len(self.records)} records but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.schema.class_names)


# ---------------------------------------------------------------------------
# CSV parsing
# ---------------------------------------------------------------------------

def _parse_cell(raw: str, col: Column, row_num: int):
    if raw == "":
        return None
    if col.kind == "numeric":
        try:
            return float(raw)
        except ValueError:
            raise DataFormatError(
                f"row {row_num}, column {col.name!r}: cannot parse {raw!r} as numeric"
            ) from None
    if col.kind == "boolean":
        if raw in BOOL_TRUE:
            return True
        if raw in BOOL_FALSE:
            return False
        raise DataFormatError(
            f"row {row_num}, column {col.name!r}: cannot parse {raw!r} as boolean"
        )
    if col.kind in ("categorical", "label"):
        if raw not in col.levels:
            raise DataFormatError(
                f"row {row_num}, column {col.name!r}: unknown level {raw!r}"
            )
        return raw
    raise AssertionError(col.kind)


def load_csv_metadata(path, schema: MetadataSchema, images: np.ndarray | None = None) -> Dataset:
    """Parse a metadata CSV against the schema; images may be attached."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        expected = [c.name for c in schema.columns]
        if header != expected:
            raise DataFormatError(
                f"{path}: header {header} does not match schema columns {expected}"
            )
        records: list[dict] = []
        labels: list[int] = []
        label_col = schema.label_column
        for row_num, row in enumerate(reader, start=1):
            if len(row) != len(schema.columns):
                raise DataFormatError(
                    f"row {row_num}: expected {len(schema.columns)} cells, got {len(row)}"
                )
            record: dict = {}
            for raw, col in zip(row, schema.columns):
                value = _parse_cell(raw, col, row_num)
                if col.kind == "label":
                    if value is None:
                        raise DataFormatError(f"row {row_num}: missing label")
                    labels.append(col.levels.index(value))
                else:
                    record[col.name] = value
            records.append(record)
    return Dataset(schema=schema, records=records, labels=np.array(labels, dtype=int),
                   images=images)


def _format_cell(value, col: Column) -> str:
    if value is None:
        return ""
    if col.kind == "boolean":
        return "1" if value else "0"
    if col.kind == "numeric":
        return repr(float(value))
    return str(value)


def save_csv_metadata(dataset: Dataset, path) -> None:
    schema = dataset.schema
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([c.name for c in schema.columns])
        for record, label in zip(dataset.records, dataset.labels):
            row = []
            for col in schema.columns:
                if col.kind == "label":
                    row.append(schema.class_names[label])
                else:
                    row.append(_format_cell(record[col.name], col))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

class MetadataEncoder:
    """One-hot categoricals, {0,1} booleans, min-max scaled numerics, with
    per-column missing indicators when the schema enables them.

    Numeric scaling statistics come from the fit split only, so validation
    values may legitimately land outside [0,1]."""

    def __init__(self, schema: MetadataSchema):
        self.schema = schema
        self.numeric_range: dict[str, tuple[float, float]] = {}

    def fit(self, dataset: Dataset, indices: np.ndarray | None = None) -> "MetadataEncoder":
        rows = dataset.records if indices is None else [dataset.records[i] for i in indices]
        for col in self.schema.feature_columns:
            if col.kind != "numeric":
                continue
            values = [r[col.name] for r in rows if r[col.name] is not None]
            if not values:
                self.numeric_range[col.name] = (0.0, 0.0)
                continue
            lo, hi = min(values), max(values)
            if lo == hi:
                warnings.warn(
                    f"numeric column {col.name!r} is constant on the fit split; "
                    "encoding it as 0"
                )
            self.numeric_range[col.name] = (float(lo), float(hi))
        return self

    def transform(self, dataset: Dataset, indices: np.ndarray | None = None) -> np.ndarray:
        if indices is None:
            indices = np.arange(len(dataset))
        out = np.zeros((len(indices), self.schema.encoded_dim))
        for row_i, i in enumerate(indices):
            record = dataset.records[int(i)]
            pos = 0
            for col in self.schema.feature_columns:
                width = col.encoded_width
                value = record[col.name]
                if value is None:
                    if col.missing == "indicator":
                        out[row_i, pos + width - 1] = 1.0
                elif col.kind == "categorical":
                    out[row_i, pos + col.levels.index(value)] = 1.0
                elif col.kind == "boolean":
                    out[row_i, pos] = 1.0 if value else 0.0
                else:  # numeric
                    lo, hi = self.numeric_range[col.name]
                    out[row_i, pos] = 0.0 if hi == lo else (value - lo) / (hi - lo)
                pos += width
        return out


def encode_metadata(dataset: Dataset, fit_indices: np.ndarray | None = None) -> np.ndarray:
    """Encode the whole dataset, fitting numeric ranges on ``fit_indices``
    (defaults to all rows)."""
    return MetadataEncoder(dataset.schema).fit(dataset, fit_indices).transform(dataset)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SIGNAL_MODES = ("image-only", "metadata-only", "both")

LESION_CLASSES = ("BCC", "SCC", "ACK", "SEK", "MEL", "NEV")

BODY_REGIONS = (
    "face", "scalp", "nose", "ear", "neck", "chest", "back", "abdomen",
    "arm", "forearm", "hand", "thigh", "shin", "foot",
)

BOOLEAN_FEATURES = (
    "itch", "grew", "hurt", "changed", "bleed", "elevation", "smoke", "drink",
    "pesticide", "skin_cancer_history", "cancer_history", "has_piped_water",
    "has_sewage_system", "male", "uses_sunscreen", "rural_area",
)


def pad_like_schema(num_classes: int = 6) -> MetadataSchema:
    """21 clinical feature columns (3 numeric, 2 categorical, 16 boolean)
    plus the diagnosis label."""
    columns = [
        Column("age", "numeric", min=0, max=100),
        Column("diameter_1", "numeric", min=0, max=30),
        Column("diameter_2", "numeric", min=0, max=30),
        Column("region", "categorical", levels=BODY_REGIONS),
        Column("fitzpatrick", "categorical", levels=("I", "II", "III", "IV", "V", "VI")),
    ]
    columns += [Column(name, "boolean") for name in BOOLEAN_FEATURES]
    columns.append(Column("diagnosis", "label", levels=LESION_CLASSES[:num_classes]))
    return MetadataSchema(tuple(columns))


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 600
    num_classes: int = 6
    image_size: int = 32
    mode: str = "both"
    delta: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SIGNAL_MODES:
            raise ConfigError(f"unknown signal mode {self.mode!r}; use one of {SIGNAL_MODES}")
        if self.n < self.num_classes:
            raise ConfigError(f"n={self.n} smaller than the number of classes {self.num_classes}")
        if self.num_classes > len(LESION_CLASSES):
            raise ConfigError(f"at most {len(LESION_CLASSES)} classes supported")


def _class_channel_template(c: int) -> np.ndarray:
    # deterministic, pairwise-distinct directions in channel space
    theta = 2 * np.pi * c / 6
    return np.array([np.cos(theta), np.sin(theta), 0.5 * np.cos(2 * theta)])


def _sign(c: int, j: int, k: int) -> float:
    return 1.0 if (j + c) % k < k / 2 else -1.0


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class-conditional Gaussian data shaped like a clinical lesion table.

    ``image-only`` shifts per-class image channel means and leaves metadata
    as noise; ``metadata-only`` reverses that; ``both`` shifts both. The
    separation strength saturates at delta=3.
    """
    rng = np.random.default_rng(spec.seed)
    schema = pad_like_schema(spec.num_classes)
    n, k = spec.n, spec.num_classes
    labels = np.arange(n) % k

    strength = min(spec.delta, 3.0) / 3.0
    meta_strength = strength if spec.mode in ("metadata-only", "both") else 0.0
    image_strength = strength if spec.mode in ("image-only", "both") else 0.0

    records: list[dict] = []
    numeric_cols = [c for c in schema.feature_columns if c.kind == "numeric"]
    categorical_cols = [c for c in schema.feature_columns if c.kind == "categorical"]
    boolean_cols = [c for c in schema.feature_columns if c.kind == "boolean"]
    for i in range(n):
        c = int(labels[i])
        record: dict = {}
        for j, col in enumerate(numeric_cols):
            center = 0.5 + 0.3 * meta_strength * _sign(c, j, k)
            raw = center + 0.08 * rng.standard_normal()
            lo, hi = col.min, col.max
            record[col.name] = lo + raw * (hi - lo)
        for j, col in enumerate(categorical_cols):
            n_levels = len(col.levels)
            preferred = (c * 2 + j) % n_levels
            p = np.full(n_levels, (1.0 - meta_strength * 0.85) / n_levels)
            p[preferred] += meta_strength * 0.85
            record[col.name] = col.levels[rng.choice(n_levels, p=p)]
        for j, col in enumerate(boolean_cols):
            p_true = 0.5 + 0.4 * meta_strength * _sign(c, j, k)
            record[col.name] = bool(rng.random() < p_true)
        records.append(record)

    size = spec.image_size
    images = 0.5 + 0.15 * rng.standard_normal((n, 3, size, size))
    if image_strength > 0:
        shifts = np.stack([_class_channel_template(c) for c in range(k)])
        images += (0.3 * image_strength * shifts[labels])[:, :, None, None]

    return Dataset(schema=schema, records=records, labels=labels, images=images)


# ---------------------------------------------------------------------------
# cross-validation folds and batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray  # fold index per sample
    seed: int

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def stratified_kfold(labels: np.ndarray, k: int = 5, seed: int = 0,
                     groups: np.ndarray | None = None) -> FoldPlan:
    """Per-class seeded shuffle and round-robin fold assignment, so per-class
    counts across folds differ by at most one.

    With ``groups`` given, whole groups are assigned to folds (stratified by
    each group's first label); the per-class balance guarantee then holds at
    group granularity only.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for c in classes:
        if (labels == c).sum() < k:
            raise ConfigError(
                f"class {c} has only {(labels == c).sum()} samples, fewer than k={k}"
            )
    assignments = np.empty(len(labels), dtype=int)
    if groups is None:
        for offset, c in enumerate(classes):
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            # rotate the starting fold per class so fold totals stay even
            assignments[idx] = (np.arange(len(idx)) + offset) % k
    else:
        groups = np.asarray(groups)
        group_label = {}
        group_members: dict = {}
        for i, g in enumerate(groups):
            group_members.setdefault(g, []).append(i)
            group_label.setdefault(g, labels[i])
        by_class: dict = {}
        for g, lab in group_label.items():
            by_class.setdefault(lab, []).append(g)
        for offset, (lab, gs) in enumerate(sorted(by_class.items())):
            gs = sorted(gs)
            rng.shuffle(gs)
            for pos, g in enumerate(gs):
                for i in group_members[g]:
                    assignments[i] = (pos + offset) % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def batch_iter(indices: np.ndarray, batch_size: int = 30, seed: int = 0,
               epoch: int = 0) -> list[np.ndarray]:
    """Seeded per-(seed, epoch) shuffle of ``indices`` split into batches;
    the final batch may be shorter."""
    indices = np.asarray(indices)
    order = np.random.default_rng([seed, epoch]).permutation(len(indices))
    shuffled = indices[order]
    return [shuffled[i : i + batch_size] for i in range(0, len(indices), batch_size)]


# ---------------------------------------------------------------------------
# binary tensor file
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"FBTS"
TENSOR_VERSION = 1


def write_tensor_file(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    with Path(path).open("wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(bytes([TENSOR_VERSION]))
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.astype("<f8").tobytes())


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {TENSOR_MAGIC!r}")
    if raw[4] != TENSOR_VERSION:
        raise DataFormatError(f"{path}: unsupported version {raw[4]}")
    (rank,) = struct.unpack_from("<I", raw, 5)
    dims = struct.unpack_from(f"<{rank}I", raw, 9)
    offset = 9 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 8 * count
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: payload size {len(raw) - offset} does not match dims {dims}"
        )
    return np.frombuffer(raw, dtype="<f8", offset=offset, count=count).reshape(dims).copy()


def save_dataset(dataset: Dataset, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_csv_metadata(dataset, out_dir / "metadata.csv")
    save_schema(dataset.schema, out_dir / "schema.json")
    if dataset.images is not None:
        write_tensor_file(out_dir / "images.fbts", dataset.images)


def load_dataset(csv_path, schema_path, images_path=None) -> Dataset:
    schema = load_schema(schema_path)
    images = read_tensor_file(images_path) if images_path else None
    return load_csv_metadata(csv_path, schema, images=images)
