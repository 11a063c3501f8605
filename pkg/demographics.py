"""
demographics.py — turn a temporal relation into weighted demographic time series.

A temporal relation is a CSV with one timestamp column, one value column and
categorical feature columns. Rows are grouped by a fixed combination of
feature columns; each surviving combination becomes a Demographic with a
one-hot feature vector, an importance weight (summed value) and a daily series.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from common import DataError, log, warn

DATE_FORMAT        = "%Y-%m-%d"
LABEL_JOIN         = " ∧ "
SYNTHETIC_TRAITS   = ("segment", "region", "channel", "tier")
NEUTRAL_VALUE      = "other"


# ─────────────────────────────────────────────
#  Types
# ─────────────────────────────────────────────
@dataclass(frozen=True)
class TemporalRecord:
    timestamp: int                      # day index since the relation's first day
    value: float
    features: tuple                     # ((attribute, value), ...)

    def feature(self, name):
        for attr, val in self.features:
            if attr == name:
                return val
        raise KeyError(name)


@dataclass
class TemporalRelation:
    """Parsed records plus ingest bookkeeping. Behaves like a list of records."""
    records: list
    skipped: int = 0
    start_date: str = ""
    days: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


@dataclass(frozen=True)
class Demographic:
    id: int
    label: str
    feature_vector: np.ndarray
    weight: float
    series: np.ndarray


@dataclass
class Dataset:
    demographics: list
    feature_names: list
    total_weight: float
    date_range: tuple
    dropped_weight: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.demographics)

    @property
    def features(self) -> np.ndarray:
        return np.array([d.feature_vector for d in self.demographics], dtype=np.uint8)

    @property
    def weights(self) -> np.ndarray:
        return np.array([d.weight for d in self.demographics], dtype=float)

    @property
    def series_matrix(self) -> np.ndarray:
        return np.array([d.series for d in self.demographics], dtype=float)

    @property
    def labels(self) -> list:
        return [d.label for d in self.demographics]


# ─────────────────────────────────────────────
#  Ingest
# ─────────────────────────────────────────────
def load_temporal_relation(path, schema: dict) -> TemporalRelation:
    """
    Parse a CSV temporal relation.

    schema keys: "timestamp" (column name), "value" (column name),
    "features" (list of column names), optional "date_format".
    Rows whose timestamp or value does not parse are skipped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"relation file not found: {path}")

    ts_col = schema.get("timestamp")
    val_col = schema.get("value")
    feat_cols = list(schema.get("features") or [])
    if not ts_col or not val_col or not feat_cols:
        raise DataError("schema needs a timestamp column, a value column and >= 1 feature column")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: zero parseable rows") from None

    missing = [c for c in [ts_col, val_col] + feat_cols if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: schema column(s) absent: {', '.join(missing)}")

    stamps = pd.to_datetime(frame[ts_col], format=schema.get("date_format", DATE_FORMAT), errors="coerce")
    values = pd.to_numeric(frame[val_col], errors="coerce")
    ok = stamps.notna() & values.notna() & (values >= 0)
    skipped = int((~ok).sum())
    if skipped:
        warn(f"{path.name}: skipped {skipped} row(s) with unparseable timestamp/value")
    if not ok.any():
        raise DataError(f"{path}: zero parseable rows")

    stamps = stamps[ok]
    start = stamps.min()
    day_idx = (stamps - start).dt.days.to_numpy()
    vals = values[ok].to_numpy(dtype=float)
    feats = frame.loc[ok, feat_cols].to_numpy()

    records = [
        TemporalRecord(int(d), float(v), tuple(zip(feat_cols, (str(x) for x in row))))
        for d, v, row in zip(day_idx, vals, feats)
    ]
    days = int(day_idx.max()) + 1
    log("DATA", f"{path.name}: {len(records)} records over {days} day(s)")
    return TemporalRelation(records, skipped, start.strftime(DATE_FORMAT), days)


def aggregate_demographics(records, combo_features, min_weight_fraction: float,
                           date_range=None) -> Dataset:
    """
    Group records by the value combination of combo_features.

    Combinations whose summed value is below min_weight_fraction of the grand
    total are dropped. Each kept combination gets a zero-filled daily series
    over date_range (inclusive day indices; inferred from the records if None).
    """
    records = list(records)
    combo_features = list(combo_features)
    if not records:
        raise DataError("no records to aggregate")
    if not 0.0 <= min_weight_fraction <= 1.0:
        raise DataError(f"min_weight_fraction must be in [0, 1], got {min_weight_fraction}")

    present = {a for r in records for a, _ in r.features}
    absent = [c for c in combo_features if c not in present]
    if absent or not combo_features:
        raise DataError(f"combo features not present in records: {absent or combo_features}")

    frame = pd.DataFrame({
        "day": [r.timestamp for r in records],
        "value": [r.value for r in records],
        **{c: [r.feature(c) for r in records] for c in combo_features},
    })
    if date_range is None:
        date_range = (int(frame["day"].min()), int(frame["day"].max()))
    start, end = int(date_range[0]), int(date_range[1])
    length = end - start + 1

    grand_total = float(frame["value"].sum())
    weights = frame.groupby(combo_features, sort=True)["value"].sum()
    threshold = min_weight_fraction * grand_total
    kept = weights[(weights >= threshold) & (weights > 0)]
    if kept.empty:
        raise DataError(f"no combination reaches {min_weight_fraction:.2%} of the total weight")

    # one-hot dictionary over the values seen in kept combinations
    kept_index = kept.index if isinstance(kept.index, pd.MultiIndex) else \
        pd.MultiIndex.from_arrays([kept.index], names=combo_features)
    feature_names = []
    for level, attr in enumerate(combo_features):
        for val in sorted(set(kept_index.get_level_values(level))):
            feature_names.append(f"{attr}={val}")
    col_of = {name: i for i, name in enumerate(feature_names)}

    daily = frame[(frame["day"] >= start) & (frame["day"] <= end)]
    daily = daily.groupby(combo_features + ["day"], sort=True)["value"].sum()
    series_of = {}
    for key, v in daily.items():
        *combo, day = key
        series_of.setdefault(tuple(combo), np.zeros(length))[int(day) - start] += v

    demographics = []
    for i, combo in enumerate(kept_index):
        combo = tuple(combo)
        series = series_of.get(combo, np.zeros(length))
        vector = np.zeros(len(feature_names), dtype=np.uint8)
        for attr, val in zip(combo_features, combo):
            vector[col_of[f"{attr}={val}"]] = 1
        label = LABEL_JOIN.join(f"{a}={v}" for a, v in zip(combo_features, combo))
        demographics.append(Demographic(i, label, vector, float(kept.iloc[i]), series))

    kept_weight = float(kept.sum())
    dropped = grand_total - kept_weight
    log("DATA", f"{len(demographics)} demographics kept, {len(weights) - len(kept)} dropped "
                f"({dropped / grand_total:.2%} of weight)" if grand_total else
                f"{len(demographics)} demographics kept")
    return Dataset(demographics, feature_names, kept_weight, (start, end), dropped)


# ─────────────────────────────────────────────
#  Series preparation
# ─────────────────────────────────────────────
def moving_average(series, window: int) -> np.ndarray:
    """Trailing mean; the first window-1 elements average over the shorter prefix."""
    if window < 1:
        raise DataError(f"moving-average window must be >= 1, got {window}")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise DataError("moving average of an empty series")
    csum = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)


def minmax_normalize(series) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    span = x.max() - x.min()
    if span == 0:
        return np.zeros_like(x)
    return (x - x.min()) / span


def smooth_dataset(dataset: Dataset, window: int = 1, normalize: bool = True) -> Dataset:
    """Apply the moving average and (optionally) per-demographic min-max scaling."""
    demographics = []
    for d in dataset.demographics:
        s = moving_average(d.series, window)
        if normalize:
            s = minmax_normalize(s)
        demographics.append(replace(d, series=s))
    return replace(dataset, demographics=demographics)


# ─────────────────────────────────────────────
#  Synthetic ground truth
# ─────────────────────────────────────────────
def _template(g: int, length: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, length)
    family, variant = g % 4, g // 4
    if family == 0:                                  # linear up
        base = t ** (1 + variant)
    elif family == 1:                                # linear down
        base = (1 - t) ** (1 + variant)
    elif family == 2:                                # U-shape
        base = (2 * t - 1) ** 2 if variant == 0 else np.abs(2 * t - 1) ** (0.5 + variant)
        base = base if variant % 2 == 0 else 1 - base
    else:                                            # cyclic
        base = 0.5 + 0.5 * np.sin(2 * np.pi * (2 + variant) * t + variant)
    return base


def gen_synthetic(n_groups: int, per_group: int, length: int, noise_sd: float = 0.05,
                  feature_alignment: float = 1.0, seed: int = 0):
    """
    Build a dataset with known groups.

    Each group follows its own trend template plus Gaussian noise. Every
    demographic carries one value for each of SYNTHETIC_TRAITS and a unique
    member id. A fraction feature_alignment of each group's trait cells
    carries the group as its value; the remaining cells carry the neutral
    value "other", spread so that no member loses a second trait before
    every member has lost one.

    Returns (dataset, ground-truth group labels).
    """
    if n_groups < 2 or per_group < 2 or length < 4:
        raise DataError("gen_synthetic needs n_groups >= 2, per_group >= 2, length >= 4")
    if not 0.0 <= feature_alignment <= 1.0:
        raise DataError(f"feature_alignment must be in [0, 1], got {feature_alignment}")
    if noise_sd < 0:
        raise DataError(f"noise_sd must be >= 0, got {noise_sd}")

    rng = np.random.default_rng(seed)
    n_traits = len(SYNTHETIC_TRAITS)
    n_values = n_groups + 1
    n_off = int(round((1.0 - feature_alignment) * per_group * n_traits))

    feature_names = [f"{t}={v}" for t in SYNTHETIC_TRAITS
                     for v in [*range(n_groups), NEUTRAL_VALUE]]
    n_trait_cols = len(feature_names)
    feature_names += [f"member={i}" for i in range(n_groups * per_group)]

    demographics, truth = [], []
    for g in range(n_groups):
        # value[m, t] is the group or n_groups for the neutral value
        value = np.full((per_group, n_traits), g, dtype=int)
        members = rng.permutation(per_group)
        trait_order = [rng.permutation(n_traits) for _ in range(per_group)]
        for j in range(n_off):
            m = members[j % per_group]
            value[m, trait_order[m][j // per_group]] = n_groups

        base = _template(g, length)
        for m in range(per_group):
            i = g * per_group + m
            series = base + rng.normal(0.0, noise_sd, length) if noise_sd > 0 else base.copy()
            vector = np.zeros(len(feature_names), dtype=np.uint8)
            parts = []
            for t, trait in enumerate(SYNTHETIC_TRAITS):
                vector[t * n_values + value[m, t]] = 1
                parts.append(f"{trait}={g if value[m, t] < n_groups else NEUTRAL_VALUE}")
            vector[n_trait_cols + i] = 1
            parts.append(f"member={i}")
            weight = float(rng.uniform(1.0, 10.0))
            demographics.append(Demographic(i, LABEL_JOIN.join(parts), vector, weight, series))
            truth.append(g)

    total = float(sum(d.weight for d in demographics))
    meta = {"synthetic": {"n_groups": n_groups, "per_group": per_group, "length": length,
                          "noise_sd": noise_sd, "feature_alignment": feature_alignment, "seed": seed}}
    dataset = Dataset(demographics, feature_names, total, (0, length - 1), 0.0, meta)
    return dataset, np.array(truth, dtype=int)


# ─────────────────────────────────────────────
#  JSON dump
# ─────────────────────────────────────────────
def dataset_to_dict(dataset: Dataset) -> dict:
    return {
        "feature_names": list(dataset.feature_names),
        "total_weight": dataset.total_weight,
        "dropped_weight": dataset.dropped_weight,
        "date_range": list(dataset.date_range),
        "meta": dataset.meta,
        "demographics": [
            {"id": d.id, "label": d.label, "weight": d.weight,
             "series": [float(x) for x in d.series],
             "features": [int(x) for x in d.feature_vector]}
            for d in dataset.demographics
        ],
    }


def dataset_from_dict(data: dict) -> Dataset:
    try:
        demographics = [
            Demographic(int(d["id"]), d["label"], np.array(d["features"], dtype=np.uint8),
                        float(d["weight"]), np.array(d["series"], dtype=float))
            for d in data["demographics"]
        ]
        ds = Dataset(demographics, list(data["feature_names"]), float(data["total_weight"]),
                     tuple(data["date_range"]), float(data.get("dropped_weight", 0.0)),
                     dict(data.get("meta") or {}))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed dataset dump: {e}") from e
    if [d.id for d in ds.demographics] != list(range(ds.n)):
        raise DataError("dataset dump ids must be 0..n-1 without gaps")
    return ds
