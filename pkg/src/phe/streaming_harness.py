"""Dataset ingestion and the predict-evaluate-update streaming protocol.

Every arriving batch is scored before the model sees its targets
(prequential evaluation), then handed to the model's online update.  The
continual-learning runner partitions one categorical column's vocabulary
into disjoint groups, trains through them sequentially, and fills the
R[t][a] matrix (performance on group a after training through group t).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import DataError

COLUMN_KINDS = ("categorical", "numeric", "target_class", "target_real",
                "target_count", "timestamp", "ignore")
TARGET_KINDS = ("target_class", "target_real", "target_count")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise DataError(f"unknown column kind {self.kind!r} for column {self.name!r}")


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]
    missing_token: str = "<missing>"

    def __post_init__(self):
        targets = [c for c in self.columns if c.kind in TARGET_KINDS]
        if len(targets) != 1:
            raise DataError(f"schema needs exactly one target column, found {len(targets)}")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")

    @property
    def target(self) -> Column:
        return next(c for c in self.columns if c.kind in TARGET_KINDS)

    @property
    def categorical_columns(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.kind == "categorical")

    @property
    def numeric_columns(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.kind == "numeric")

    @property
    def timestamp_column(self) -> str | None:
        for c in self.columns:
            if c.kind == "timestamp":
                return c.name
        return None

    @classmethod
    def from_config(cls, cols: list[dict], missing_token: str = "<missing>") -> "Schema":
        return cls(tuple(Column(c["name"], c["kind"]) for c in cols), missing_token)


@dataclass
class StreamRecord:
    categoricals: dict
    numerics: np.ndarray
    target: object
    timestamp: float | None = None


class Dataset:
    """Column-major storage of one ingested table."""

    def __init__(self, schema: Schema, categoricals: dict, numerics: np.ndarray,
                 targets_raw: list, timestamps: np.ndarray | None,
                 rejected_lines: list | None = None):
        self.schema = schema
        self.categoricals = categoricals          # column -> list[str]
        self.numerics = numerics                  # (n, n_numeric)
        self.targets_raw = targets_raw            # strings as read
        self.timestamps = timestamps
        self.rejected_lines = rejected_lines or []

    def __len__(self) -> int:
        return len(self.targets_raw)

    @property
    def n(self) -> int:
        return len(self)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.schema,
            {c: [v[i] for i in idx] for c, v in self.categoricals.items()},
            self.numerics[idx],
            [self.targets_raw[i] for i in idx],
            self.timestamps[idx] if self.timestamps is not None else None,
        )

    def record(self, i: int) -> StreamRecord:
        return StreamRecord({c: v[i] for c, v in self.categoricals.items()},
                            self.numerics[i], self.targets_raw[i],
                            float(self.timestamps[i]) if self.timestamps is not None else None)

    def vocabulary(self, column: str) -> list[str]:
        return sorted(set(self.categoricals[column]))


def ingest_csv(path, schema: Schema) -> Dataset:
    """Typed records from a CSV file with a header row.

    Rows whose target fails to parse are rejected and reported with their
    line numbers; unparseable numeric features are an error.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        positions = {}
        for col in schema.columns:
            if col.kind == "ignore":
                continue
            if col.name not in header:
                raise DataError(f"{path}: missing column {col.name!r} in header")
            positions[col.name] = header.index(col.name)
        target = schema.target
        cats: dict[str, list[str]] = {c: [] for c in schema.categorical_columns}
        nums: list[list[float]] = []
        targets: list[str] = []
        stamps: list[float] = []
        rejected: list[int] = []
        ts_col = schema.timestamp_column
        for line_no, row in enumerate(reader, start=2):
            raw_target = row[positions[target.name]]
            if target.kind == "target_real":
                try:
                    float(raw_target)
                except ValueError:
                    rejected.append(line_no)
                    continue
            elif target.kind == "target_count":
                try:
                    if int(raw_target) < 0:
                        rejected.append(line_no)
                        continue
                except ValueError:
                    rejected.append(line_no)
                    continue
            elif raw_target == "":
                rejected.append(line_no)
                continue
            num_row = []
            for name in schema.numeric_columns:
                cell = row[positions[name]]
                try:
                    num_row.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{line_no}: cannot parse numeric "
                                    f"column {name!r} value {cell!r}") from None
            if ts_col is not None:
                try:
                    stamps.append(float(row[positions[ts_col]]))
                except ValueError:
                    raise DataError(f"{path}:{line_no}: cannot parse timestamp "
                                    f"{row[positions[ts_col]]!r}") from None
            for name in schema.categorical_columns:
                cell = row[positions[name]]
                cats[name].append(cell if cell != "" else schema.missing_token)
            nums.append(num_row)
            targets.append(raw_target)
    numerics = np.asarray(nums, dtype=np.float64).reshape(len(targets), len(schema.numeric_columns))
    timestamps = np.asarray(stamps, dtype=np.float64) if ts_col is not None else None
    return Dataset(schema, cats, numerics, targets, timestamps, rejected)


class Preprocessor:
    """Target encoding plus z-score normalization fitted on the init split only."""

    def __init__(self, schema: Schema):
        self.schema = schema
        self.classes: list[str] | None = None
        self.num_mean = None
        self.num_sd = None

    def fit(self, dataset: Dataset, init_indices=None,
            norm_dataset: "Dataset | None" = None) -> "Preprocessor":
        """Class labels come from `dataset` (the full table, so the output
        dimension is stable); normalization statistics come from the
        initialization split only."""
        if self.schema.target.kind == "target_class":
            self.classes = sorted(set(dataset.targets_raw))
        if norm_dataset is not None:
            sub = norm_dataset.numerics
        elif init_indices is not None:
            sub = dataset.numerics[np.asarray(init_indices)]
        else:
            sub = dataset.numerics
        if sub.shape[1]:
            self.num_mean = sub.mean(axis=0)
            sd = sub.std(axis=0)
            self.num_sd = np.where(sd > 0, sd, 1.0)
        else:
            self.num_mean = np.zeros(0)
            self.num_sd = np.ones(0)
        return self

    def encode_targets(self, dataset: Dataset) -> np.ndarray:
        kind = self.schema.target.kind
        if kind == "target_class":
            lut = {c: i for i, c in enumerate(self.classes)}
            return np.array([lut[t] for t in dataset.targets_raw], dtype=np.intp)
        if kind == "target_count":
            return np.array([int(t) for t in dataset.targets_raw], dtype=np.float64)
        return np.array([float(t) for t in dataset.targets_raw], dtype=np.float64)

    def model_inputs(self, dataset: Dataset):
        nums = (dataset.numerics - self.num_mean) / self.num_sd
        return dataset.categoricals, nums, self.encode_targets(dataset)

    @property
    def n_classes(self) -> int:
        return len(self.classes) if self.classes is not None else 0


@dataclass
class VocabGroup:
    items: tuple[str, ...]
    train: Dataset
    test: Dataset
    full: Dataset


def partition_by_vocab(dataset: Dataset, column: str, n_groups: int, seed: int) -> list[VocabGroup]:
    """Split a categorical column's vocabulary into disjoint near-equal item
    groups; each record follows its item.  Within each group records are
    split 2:1 into train and test, seeded."""
    if column not in dataset.schema.categorical_columns:
        raise DataError(f"{column!r} is not a categorical column")
    vocab = dataset.vocabulary(column)
    if n_groups > len(vocab):
        raise DataError(f"cannot split {len(vocab)} items into {n_groups} groups")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(vocab)))
    item_sets = [tuple(sorted(vocab[i] for i in chunk))
                 for chunk in np.array_split(np.asarray(order), n_groups)]
    values = dataset.categoricals[column]
    groups = []
    for items in item_sets:
        member = set(items)
        idx = np.array([i for i, v in enumerate(values) if v in member], dtype=np.intp)
        full = dataset.subset(idx)
        perm = rng.permutation(len(idx))
        n_train = int(round(len(idx) * 2 / 3))
        groups.append(VocabGroup(items,
                                 full.subset(perm[:n_train]),
                                 full.subset(perm[n_train:]),
                                 full))
    return groups


class MetricsLog:
    """Append-only per-step records plus the continual-learning R matrix."""

    def __init__(self, model_id: str, metric_name: str):
        self.model_id = model_id
        self.metric_name = metric_name
        self.records: list[dict] = []
        self.R: list[list[float]] = []
        self._sum = 0.0
        self._count = 0
        self.started = time.perf_counter()

    def append_step(self, step: int, stage: int, scores: np.ndarray) -> None:
        self._sum += float(scores.sum())
        self._count += len(scores)
        self.records.append({
            "step": step, "stage": stage, "model": self.model_id, "n": int(len(scores)),
            "metric": float(scores.mean()), "cum_metric": self._sum / self._count,
        })

    @property
    def cumulative(self) -> float:
        return self._sum / self._count if self._count else float("nan")

    @property
    def step_metrics(self) -> np.ndarray:
        return np.array([r["metric"] for r in self.records])

    def append_continual(self, row: list[float]) -> None:
        self.R.append(list(row))

    @property
    def r_bar(self) -> list[float]:
        return [sum(row) / len(row) for row in self.R]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def summary(self, embedding_params: int | None = None) -> dict:
        out = {
            "model": self.model_id,
            "metric": self.metric_name,
            "final_metric": self.cumulative,
            "n_records": self._count,
            "wall_time_s": time.perf_counter() - self.started,
        }
        if embedding_params is not None:
            out["embedding_params"] = embedding_params
        if self.R:
            out["R"] = self.R
            out["R_bar"] = self.r_bar
        return out


def score_predictions(predictions: np.ndarray, targets: np.ndarray, target_kind: str) -> np.ndarray:
    """Per-record scores: accuracy for class targets (argmax with
    lowest-index tie-break), absolute error otherwise."""
    if target_kind == "target_class":
        picks = np.argmax(np.asarray(predictions), axis=1)
        return (picks == np.asarray(targets)).astype(np.float64)
    return np.abs(np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64))


def stream_batches(dataset: Dataset, batch_size: int, seed: int,
                   timestamp_order: bool = False):
    """Row-index batches: seeded shuffle, or stable timestamp order."""
    n = len(dataset)
    if timestamp_order:
        if dataset.timestamps is None:
            raise DataError("timestamp-ordered streaming needs a timestamp column")
        order = np.argsort(dataset.timestamps, kind="stable")
    else:
        order = np.random.default_rng(seed).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def run_stream(model, dataset: Dataset, pre: Preprocessor, batch_size: int,
               seed: int, update: bool = True, timestamp_order: bool = False,
               model_id: str | None = None) -> MetricsLog:
    """The predict-evaluate-update loop over one dataset.

    Scores for each batch are computed and logged strictly before the model
    is updated on that batch, so no score ever reflects its own targets.
    """
    target_kind = pre.schema.target.kind
    metric = "accuracy" if target_kind == "target_class" else "abs_error"
    log = MetricsLog(model_id or getattr(model, "model_id", "model"), metric)
    for step, rows in enumerate(stream_batches(dataset, batch_size, seed, timestamp_order)):
        batch = dataset.subset(rows)
        cats, nums, targets = pre.model_inputs(batch)
        preds = model.predict_batch(cats, nums)
        scores = score_predictions(preds, targets, target_kind)
        stage = getattr(getattr(model, "state", model), "stage", 0)
        log.append_step(step, stage, scores)
        if update:
            model.update(cats, nums, targets)
    return log


def evaluate(model, dataset: Dataset, pre: Preprocessor) -> float:
    """Mean score on a held-out dataset (no update)."""
    cats, nums, targets = pre.model_inputs(dataset)
    preds = model.predict_batch(cats, nums)
    return float(score_predictions(preds, targets, pre.schema.target.kind).mean())


def run_continual(model, groups: list[VocabGroup], pre: Preprocessor,
                  model_id: str | None = None) -> MetricsLog:
    """Sequential training over vocabulary groups.

    Group 1 is the initial fit; every later group is one online stage.
    After each group t the model is scored on the test splits of groups
    1..t, filling R[t][a].
    """
    target_kind = pre.schema.target.kind
    metric = "accuracy" if target_kind == "target_class" else "abs_error"
    log = MetricsLog(model_id or getattr(model, "model_id", "model"), metric)
    for t, group in enumerate(groups):
        cats, nums, targets = pre.model_inputs(group.train)
        if t == 0:
            model.fit_initial(cats, nums, targets)
        else:
            model.update(cats, nums, targets)
        row = [evaluate(model, groups[a].test, pre) for a in range(t + 1)]
        log.append_continual(row)
    return log


def smooth_gaussian(series, bandwidth: float):
    """Gaussian kernel smoothing with reflected boundaries; presentation
    only, never part of a metric."""
    series = np.asarray(series, dtype=np.float64)
    if bandwidth <= 0:
        return series.copy()
    return gaussian_filter1d(series, sigma=bandwidth, mode="reflect")
