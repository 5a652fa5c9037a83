"""Tables, voxel volumes and cohort curation.

Voxel arrays are stored with shape ``(nz, ny, nx)`` in C order, so the
flattened payload is x-fastest and ``data[z]`` is an axial slice. ``dims``
and ``spacing`` are always reported in ``(x, y, z)`` order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "FeatureTable",
    "OutcomeTable",
    "Volume",
    "Mask",
    "TableSchema",
    "load_feature_table",
    "save_feature_table",
    "load_outcomes",
    "save_outcomes",
    "load_volume",
    "save_volume",
    "align_cohort",
    "spacing_reference",
    "spacing_filter",
    "SpacingFilterResult",
]


def _check_unique(ids, what):
    seen = set()
    for s in ids:
        if s in seen:
            raise ValueError(f"duplicate {what}: {s!r}")
        seen.add(s)


@dataclass(frozen=True)
class FeatureTable:
    """Per-subject numeric feature matrix.

    ``values`` holds NaN for missing cells. ``batch`` is optional until a
    harmonization step needs it.
    """

    subject_ids: tuple[str, ...]
    feature_names: tuple[str, ...]
    values: np.ndarray
    batch: tuple[str, ...] | None = None
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(str(s) for s in self.subject_ids)
        names = tuple(str(s) for s in self.feature_names)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1 and len(names) == 0 and values.size == 0:
            values = values.reshape(len(ids), 0)
        if values.ndim != 2:
            raise ValueError("values must be a 2-D matrix")
        if values.shape != (len(ids), len(names)):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{len(ids)} subjects x {len(names)} features"
            )
        _check_unique(ids, "subject ID")
        _check_unique(names, "feature name")
        batch = None
        if self.batch is not None:
            batch = tuple(str(b) for b in self.batch)
            if len(batch) != len(ids):
                raise ValueError("batch length does not match subject count")
        covs = {}
        for k, v in dict(self.covariates).items():
            v = np.asarray(v, dtype=float)
            if v.shape != (len(ids),):
                raise ValueError(f"covariate {k!r} has wrong length")
            v.setflags(write=False)
            covs[str(k)] = v
        values.setflags(write=False)
        object.__setattr__(self, "subject_ids", ids)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "batch", batch)
        object.__setattr__(self, "covariates", covs)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())

    def covariate_matrix(self, names: Sequence[str] = ()) -> np.ndarray:
        if not names:
            return np.zeros((self.n_subjects, 0))
        missing = [n for n in names if n not in self.covariates]
        if missing:
            raise KeyError(f"unknown covariates: {missing}")
        return np.column_stack([self.covariates[n] for n in names])

    def subset(self, ids: Sequence[str]) -> "FeatureTable":
        """Rows for ``ids`` in the given order."""
        index = {s: i for i, s in enumerate(self.subject_ids)}
        try:
            rows = np.array([index[str(s)] for s in ids], dtype=int)
        except KeyError as exc:
            raise KeyError(f"subject {exc.args[0]!r} not in table") from None
        return FeatureTable(
            subject_ids=tuple(self.subject_ids[i] for i in rows),
            feature_names=self.feature_names,
            values=self.values[rows] if rows.size else np.zeros((0, self.n_features)),
            batch=None if self.batch is None else tuple(self.batch[i] for i in rows),
            covariates={k: v[rows] for k, v in self.covariates.items()},
        )

    def select_features(self, names: Sequence[str]) -> "FeatureTable":
        index = {s: i for i, s in enumerate(self.feature_names)}
        cols = [index[n] for n in names]
        return self.with_values(self.values[:, cols], names)

    def with_values(self, values, feature_names=None) -> "FeatureTable":
        return FeatureTable(
            subject_ids=self.subject_ids,
            feature_names=self.feature_names if feature_names is None else tuple(feature_names),
            values=values,
            batch=self.batch,
            covariates=self.covariates,
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=list(self.feature_names))
        if self.batch is not None:
            df.insert(0, "batch", list(self.batch))
        for k, v in self.covariates.items():
            df[k] = v
        df.insert(0, "id", list(self.subject_ids))
        return df


@dataclass(frozen=True)
class OutcomeTable:
    """Survival time in months and event indicator (1 = death)."""

    subject_ids: tuple[str, ...]
    time_months: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        ids = tuple(str(s) for s in self.subject_ids)
        t = np.array(self.time_months, dtype=float)
        e_raw = np.asarray(self.event, dtype=float)
        if t.shape != (len(ids),) or e_raw.shape != (len(ids),):
            raise ValueError("time/event length does not match subject count")
        _check_unique(ids, "subject ID")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("time_months must be finite and > 0")
        if not np.all(np.isin(e_raw, (0.0, 1.0))):
            raise ValueError("event must be 0 or 1")
        e = e_raw.astype(np.int8)
        t.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "subject_ids", ids)
        object.__setattr__(self, "time_months", t)
        object.__setattr__(self, "event", e)

    def __len__(self):
        return len(self.subject_ids)

    def subset(self, ids: Sequence[str]) -> "OutcomeTable":
        index = {s: i for i, s in enumerate(self.subject_ids)}
        rows = np.array([index[str(s)] for s in ids], dtype=int)
        return OutcomeTable(
            subject_ids=tuple(self.subject_ids[i] for i in rows),
            time_months=self.time_months[rows],
            event=self.event[rows],
        )


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TableSchema:
    """Column roles for :func:`load_feature_table`.

    Columns not named here and not listed in ``drop`` are features.
    """

    id_column: str = "id"
    batch_column: str | None = None
    covariate_columns: tuple[str, ...] = ()
    drop: tuple[str, ...] = ()


def _read_csv(path) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if df.shape[0] == 0:
        raise ValueError(f"{path}: empty table")
    return df


def _numeric_column(df, col, path):
    raw = df[col].str.strip()
    missing = raw == ""
    out = np.full(len(raw), np.nan)
    try:
        out[~missing.to_numpy()] = raw[~missing].astype(float).to_numpy()
    except ValueError:
        bad = [v for v in raw[~missing] if not _is_float(v)]
        raise ValueError(f"{path}: non-numeric value {bad[0]!r} in column {col!r}") from None
    return out


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_feature_table(path, schema: TableSchema | None = None) -> FeatureTable:
    """Read a UTF-8 CSV into a :class:`FeatureTable`; blank cells become NaN."""
    schema = schema or TableSchema()
    df = _read_csv(path)
    if schema.id_column not in df.columns:
        raise ValueError(f"{path}: id column {schema.id_column!r} not found")
    roles = {schema.id_column, *schema.covariate_columns, *schema.drop}
    if schema.batch_column is not None:
        if schema.batch_column not in df.columns:
            raise ValueError(f"{path}: batch column {schema.batch_column!r} not found")
        roles.add(schema.batch_column)
    feature_cols = [c for c in df.columns if c not in roles]
    ids = df[schema.id_column].str.strip().tolist()
    values = (
        np.column_stack([_numeric_column(df, c, path) for c in feature_cols])
        if feature_cols
        else np.zeros((len(ids), 0))
    )
    batch = None
    if schema.batch_column is not None:
        batch = df[schema.batch_column].str.strip().tolist()
        if any(b == "" for b in batch):
            raise ValueError(f"{path}: missing batch label")
    covs = {c: _numeric_column(df, c, path) for c in schema.covariate_columns}
    return FeatureTable(tuple(ids), tuple(feature_cols), values, batch, covs)


def save_feature_table(table: FeatureTable, path, batch_column="batch") -> None:
    df = table.to_frame()
    if table.batch is not None and batch_column != "batch":
        df = df.rename(columns={"batch": batch_column})
    df.to_csv(path, index=False, float_format="%.17g", na_rep="")


def load_outcomes(path) -> OutcomeTable:
    df = _read_csv(path)
    for col in ("id", "time_months", "event"):
        if col not in df.columns:
            raise ValueError(f"{path}: missing column {col!r}")
    t = _numeric_column(df, "time_months", path)
    e = _numeric_column(df, "event", path)
    return OutcomeTable(tuple(df["id"].str.strip()), t, e)


def save_outcomes(outcomes: OutcomeTable, path) -> None:
    df = pd.DataFrame(
        {
            "id": list(outcomes.subject_ids),
            "time_months": outcomes.time_months,
            "event": outcomes.event.astype(int),
        }
    )
    df.to_csv(path, index=False, float_format="%.17g")


def align_cohort(features: FeatureTable, outcomes: OutcomeTable):
    """Restrict both tables to shared IDs, ordered as in ``features``.

    Returns ``(features, outcomes, dropped)`` where ``dropped`` maps
    ``"features"``/``"outcomes"`` to the IDs removed from each side.
    """
    out_ids = set(outcomes.subject_ids)
    feat_ids = set(features.subject_ids)
    common = [s for s in features.subject_ids if s in out_ids]
    if not common:
        raise ValueError("feature and outcome tables share no subject IDs")
    dropped = {
        "features": [s for s in features.subject_ids if s not in out_ids],
        "outcomes": [s for s in outcomes.subject_ids if s not in feat_ids],
    }
    return features.subset(common), outcomes.subset(common), dropped


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------

_DTYPES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4")}


@dataclass(frozen=True)
class Volume:
    """CT volume in HU. ``data`` has shape ``(nz, ny, nx)``."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("volume data must be 3-D (nz, ny, nx)")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError("spacing must be three positive reals")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def compatible(self, other: "Volume") -> bool:
        if self.dims != other.dims:
            return False
        return bool(np.allclose(self.spacing, other.spacing, rtol=1e-6, atol=0.0))


class Mask(Volume):
    """Binary region mask on a volume grid."""

    def __post_init__(self):
        super().__post_init__()
        data = self.data
        if data.dtype != bool:
            if not np.all(np.isin(data, (0, 1))):
                raise ValueError("mask voxels must be 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", data)


def check_grid(volume: Volume, mask: Volume) -> None:
    if not volume.compatible(mask):
        raise ValueError(
            f"grid mismatch: volume {volume.dims}/{volume.spacing} "
            f"vs mask {mask.dims}/{mask.spacing}"
        )


def save_volume(volume: Volume, path, dtype: str | None = None) -> None:
    """Write a JSON header at ``path`` and the raw payload next to it."""
    if dtype is None:
        dtype = "f32" if np.issubdtype(volume.data.dtype, np.floating) else "i16"
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported element type {dtype!r}")
    path = os.fspath(path)
    base = os.path.splitext(os.path.basename(path))[0]
    raw_name = base + ".raw"
    raw_path = os.path.join(os.path.dirname(path), raw_name)
    arr = np.ascontiguousarray(volume.data.astype(_DTYPES[dtype]))
    with open(raw_path, "wb") as fh:
        fh.write(arr.tobytes(order="C"))
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing),
        "dtype": dtype,
        "data": raw_name,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2)


def load_volume(path, mask: bool = False) -> Volume:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        header = json.load(fh)
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported element type {dtype!r}")
    nx, ny, nz = (int(d) for d in header["dims"])
    if min(nx, ny, nz) <= 0:
        raise ValueError("dims must be positive")
    raw_path = os.path.join(os.path.dirname(path), header["data"])
    payload = np.fromfile(raw_path, dtype=_DTYPES[dtype])
    if payload.size != nx * ny * nz:
        raise ValueError(
            f"size mismatch: header declares {nx * ny * nz} voxels, payload has {payload.size}"
        )
    data = payload.reshape(nz, ny, nx).astype(_DTYPES[dtype].newbyteorder("="))
    cls = Mask if mask else Volume
    return cls(data, tuple(header["spacing_mm"]))


# ---------------------------------------------------------------------------
# Cohort curation
# ---------------------------------------------------------------------------


def spacing_reference(train_spacings) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis mean and population SD of training voxel spacings."""
    s = np.asarray(train_spacings, dtype=float).reshape(-1, 3)
    if s.shape[0] == 0:
        return np.full(3, np.nan), np.full(3, np.nan)
    return s.mean(axis=0), s.std(axis=0, ddof=0)


@dataclass(frozen=True)
class SpacingFilterResult:
    kept: list
    excluded: list
    thresholds: np.ndarray


def spacing_filter(ids, spacings, reference_stats) -> SpacingFilterResult:
    """Exclude subjects whose spacing exceeds mean + 2 SD on any axis.

    ``reference_stats`` is ``(mean, sd)`` from :func:`spacing_reference`
    computed on the training subjects. The comparison is strict, so a
    spacing equal to the threshold is kept.
    """
    mean, sd = (np.asarray(a, dtype=float) for a in reference_stats)
    thresholds = mean + 2.0 * sd
    s = np.asarray(spacings, dtype=float).reshape(-1, 3)
    ids = list(ids)
    if len(ids) != s.shape[0]:
        raise ValueError("ids and spacings differ in length")
    # 1e-9 mm absorbs summation noise so "equal to threshold" stays kept
    over = (s > thresholds + 1e-9).any(axis=1)
    kept = [i for i, o in zip(ids, over) if not o]
    excluded = [i for i, o in zip(ids, over) if o]
    return SpacingFilterResult(kept, excluded, thresholds)
