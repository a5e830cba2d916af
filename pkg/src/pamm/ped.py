"""Piecewise-exponential data (PED) representation of right-censored survival data.

A survival dataset is expanded into one row per subject-interval.  Intervals are
the half-open cells (kappa_{j-1}, kappa_j] of a cut-point grid starting at 0.
Each row carries the exposure time spent in its interval, the log-exposure
offset and an event indicator that is 1 only in the subject's last interval and
only if the subject's time ended in an event.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "SurvivalRecord",
    "CutPoints",
    "PedRow",
    "PedSchema",
    "PedDataset",
    "make_cut_points",
    "as_ped",
    "write_ped_csv",
    "read_ped_csv",
]

_FIXED_COLUMNS = ("id", "interval", "t_start", "t_end", "t_rep", "exposure", "offset", "delta")


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: follow-up time, event status, covariates and a group label."""

    id: str
    time: float
    event: bool
    covariates: dict[str, float] = field(default_factory=dict)
    group: str = "all"

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time <= 0.0:
            raise ValueError(f"subject {self.id!r}: time must be positive and finite, got {self.time}")


@dataclass(frozen=True)
class CutPoints:
    """Strictly increasing interval boundaries kappa_0 = 0 < kappa_1 < ... < kappa_J."""

    kappas: tuple[float, ...]

    def __post_init__(self):
        k = np.asarray(self.kappas, dtype=float)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("need at least two cut points (one interval)")
        if k[0] != 0.0:
            raise ValueError(f"first cut point must be 0, got {k[0]}")
        if not np.all(np.diff(k) > 0.0):
            raise ValueError("cut points must be strictly increasing")
        object.__setattr__(self, "kappas", tuple(float(v) for v in k))

    @property
    def n_intervals(self) -> int:
        return len(self.kappas) - 1

    @property
    def last(self) -> float:
        return self.kappas[-1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.kappas, dtype=float)


@dataclass(frozen=True)
class PedRow:
    """A single subject-interval row of the expanded dataset."""

    id: str
    interval: int
    t_start: float
    t_end: float
    t_rep: float
    exposure: float
    offset: float
    delta: int
    covariates: dict[str, float]
    group: str


@dataclass(frozen=True)
class PedSchema:
    """Covariate names (ordered) and group levels (order of first appearance)."""

    covariates: tuple[str, ...]
    group_levels: tuple[str, ...]


class PedDataset:
    """Columnar container for PED rows plus the cut grid and schema.

    Stored column-wise (numpy arrays) so that model code can consume it
    directly; ``rows()`` materialises ``PedRow`` views on demand.
    """

    def __init__(
        self,
        ids: np.ndarray,
        interval: np.ndarray,
        t_start: np.ndarray,
        t_end: np.ndarray,
        t_rep: np.ndarray,
        exposure: np.ndarray,
        offset: np.ndarray,
        delta: np.ndarray,
        covariate_columns: dict[str, np.ndarray],
        groups: np.ndarray,
        cuts: CutPoints,
        schema: PedSchema,
    ):
        self.ids = np.asarray(ids)
        self.interval = np.asarray(interval, dtype=int)
        self.t_start = np.asarray(t_start, dtype=float)
        self.t_end = np.asarray(t_end, dtype=float)
        self.t_rep = np.asarray(t_rep, dtype=float)
        self.exposure = np.asarray(exposure, dtype=float)
        self.offset = np.asarray(offset, dtype=float)
        self.delta = np.asarray(delta, dtype=int)
        self.covariate_columns = {k: np.asarray(v, dtype=float) for k, v in covariate_columns.items()}
        self.groups = np.asarray(groups)
        self.cuts = cuts
        self.schema = schema
        n = self.ids.shape[0]
        for name, col in self.covariate_columns.items():
            if col.shape[0] != n:
                raise ValueError(f"covariate column {name!r} has wrong length")
        if self.groups.shape[0] != n:
            raise ValueError("group column has wrong length")
        if np.any(self.exposure <= 0.0):
            raise ValueError("zero or negative exposure row")

    @property
    def n_rows(self) -> int:
        return self.ids.shape[0]

    def rows(self) -> Iterator[PedRow]:
        for i in range(self.n_rows):
            yield PedRow(
                id=self.ids[i],
                interval=int(self.interval[i]),
                t_start=float(self.t_start[i]),
                t_end=float(self.t_end[i]),
                t_rep=float(self.t_rep[i]),
                exposure=float(self.exposure[i]),
                offset=float(self.offset[i]),
                delta=int(self.delta[i]),
                covariates={k: float(v[i]) for k, v in self.covariate_columns.items()},
                group=str(self.groups[i]),
            )

    def to_records(self) -> list[SurvivalRecord]:
        """Reconstruct the subject-level data.

        Works because the last row of each subject ends at its follow-up time
        (t_start + exposure) and carries its event status in delta.
        """
        records = []
        ids = self.ids
        # rows of one subject are stored contiguously, in interval order
        change = np.r_[0, np.nonzero(ids[1:] != ids[:-1])[0] + 1, len(ids)]
        for a, b in zip(change[:-1], change[1:]):
            last = b - 1
            records.append(
                SurvivalRecord(
                    id=str(ids[a]),
                    time=float(self.t_start[last] + self.exposure[last]),
                    event=bool(self.delta[last]),
                    covariates={k: float(v[a]) for k, v in self.covariate_columns.items()},
                    group=str(self.groups[a]),
                )
            )
        return records


def _as_record_list(records: Iterable[SurvivalRecord]) -> list[SurvivalRecord]:
    recs = list(records)
    if not recs:
        raise ValueError("empty dataset")
    return recs


def _schema_from_records(records: Sequence[SurvivalRecord]) -> PedSchema:
    names = tuple(records[0].covariates.keys())
    for r in records:
        if tuple(r.covariates.keys()) != names:
            raise ValueError(f"subject {r.id!r}: covariate names differ from schema {names}")
    levels: list[str] = []
    for r in records:
        if r.group not in levels:
            levels.append(r.group)
    return PedSchema(covariates=names, group_levels=tuple(levels))


def make_cut_points(
    records: Iterable[SurvivalRecord],
    strategy: str = "unique-event-times",
    *,
    n_intervals: int | None = None,
    explicit: Sequence[float] | None = None,
) -> CutPoints:
    """Build the interval grid for a dataset.

    strategy:
        "unique-event-times" -- {0} followed by the sorted unique observed times
        "equidistant"        -- n_intervals equal-width intervals on [0, max time]
        "explicit"           -- user-supplied boundaries (0 is prepended if absent)
    """
    recs = _as_record_list(records)
    times = np.array([r.time for r in recs], dtype=float)
    tmax = float(times.max())

    if strategy == "unique-event-times":
        ks = np.unique(times)
        return CutPoints(tuple(np.r_[0.0, ks]))
    if strategy == "equidistant":
        if n_intervals is None or n_intervals < 1:
            raise ValueError("equidistant strategy needs n_intervals >= 1")
        return CutPoints(tuple(np.linspace(0.0, tmax, n_intervals + 1)))
    if strategy == "explicit":
        if explicit is None:
            raise ValueError("explicit strategy needs the cut values")
        ks = np.asarray(explicit, dtype=float)
        if ks.size == 0:
            raise ValueError("explicit cut list is empty")
        if ks[0] != 0.0:
            ks = np.r_[0.0, ks]
        cuts = CutPoints(tuple(ks))
        if cuts.last < tmax:
            raise ValueError(
                f"last cut point {cuts.last} is below the largest observed time {tmax}"
            )
        return cuts
    raise ValueError(f"unknown cut-point strategy {strategy!r}")


def as_ped(
    records: Iterable[SurvivalRecord],
    cuts: CutPoints,
    t_convention: str = "end",
) -> PedDataset:
    """Expand subject-level survival data into subject-interval rows.

    A subject with time t occupies every interval with kappa_{j-1} < t; the
    exposure in interval j is min(t, kappa_j) - kappa_{j-1}.  delta is 1 only
    in the last interval and only for an event.  t_rep is the interval time
    point at which the hazard is evaluated: the interval end for
    t_convention="end", the midpoint for "mid".
    """
    if t_convention not in ("end", "mid"):
        raise ValueError(f"unknown t convention {t_convention!r}")
    recs = _as_record_list(records)
    schema = _schema_from_records(recs)

    times = np.array([r.time for r in recs], dtype=float)
    events = np.array([r.event for r in recs], dtype=bool)
    kappas = cuts.as_array()
    if times.max() > cuts.last:
        bad = recs[int(np.argmax(times))]
        raise ValueError(
            f"subject {bad.id!r} has time {bad.time} beyond the last cut point {cuts.last}; "
            "apply administrative censoring before the transform"
        )

    # interval index of the cell containing t under (kappa_{j-1}, kappa_j]:
    # the first kappa >= t.  times are > 0 so this is always >= 1.
    n_last = np.searchsorted(kappas, times, side="left")

    total = int(n_last.sum())
    subj = np.repeat(np.arange(len(recs)), n_last)
    starts = np.r_[0, np.cumsum(n_last)[:-1]]
    interval = np.arange(total) - np.repeat(starts, n_last) + 1

    t_start = kappas[interval - 1]
    t_end = kappas[interval]
    t_sub = times[subj]
    exposure = np.minimum(t_sub, t_end) - t_start
    offset = np.log(exposure)
    is_last = interval == n_last[subj]
    delta = (is_last & events[subj]).astype(int)
    if t_convention == "end":
        t_rep = t_end.copy()
    else:
        t_rep = 0.5 * (t_start + t_end)

    ids = np.array([r.id for r in recs], dtype=object)[subj]
    groups = np.array([r.group for r in recs], dtype=object)[subj]
    cov_cols = {
        name: np.array([r.covariates[name] for r in recs], dtype=float)[subj]
        for name in schema.covariates
    }
    return PedDataset(
        ids=ids,
        interval=interval,
        t_start=t_start,
        t_end=t_end,
        t_rep=t_rep,
        exposure=exposure,
        offset=offset,
        delta=delta,
        covariate_columns=cov_cols,
        groups=groups,
        cuts=cuts,
        schema=schema,
    )


def _ped_frame(ped: PedDataset) -> pd.DataFrame:
    data: dict[str, np.ndarray] = {
        "id": ped.ids,
        "interval": ped.interval,
        "t_start": ped.t_start,
        "t_end": ped.t_end,
        "t_rep": ped.t_rep,
        "exposure": ped.exposure,
        "offset": ped.offset,
        "delta": ped.delta,
    }
    for name in ped.schema.covariates:
        data[name] = ped.covariate_columns[name]
    data["group"] = ped.groups
    return pd.DataFrame(data)


def write_ped_csv(ped: PedDataset, path) -> None:
    """Write the row schema id,...,delta,<covariates...>,group with 17 significant digits."""
    _ped_frame(ped).to_csv(path, index=False, float_format="%.17g")


def read_ped_csv(path) -> PedDataset:
    """Read a PED CSV written by :func:`write_ped_csv`.

    The cut grid is reconstructed from the interval boundaries present in the
    rows; trailing intervals that no subject reached are not recoverable.
    """
    df = pd.read_csv(path, dtype={"id": str, "group": str}, float_precision="round_trip")
    missing = [c for c in _FIXED_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"PED CSV is missing required columns {missing}")
    if df.columns[-1] != "group":
        raise ValueError("last PED CSV column must be 'group'")
    cov_names = tuple(c for c in df.columns if c not in _FIXED_COLUMNS and c != "group")

    boundaries = np.unique(np.r_[df["t_start"].to_numpy(float), df["t_end"].to_numpy(float)])
    cuts = CutPoints(tuple(boundaries))

    levels: list[str] = []
    for g in df["group"]:
        if g not in levels:
            levels.append(g)
    schema = PedSchema(covariates=cov_names, group_levels=tuple(levels))
    return PedDataset(
        ids=df["id"].to_numpy(object),
        interval=df["interval"].to_numpy(int),
        t_start=df["t_start"].to_numpy(float),
        t_end=df["t_end"].to_numpy(float),
        t_rep=df["t_rep"].to_numpy(float),
        exposure=df["exposure"].to_numpy(float),
        offset=df["offset"].to_numpy(float),
        delta=df["delta"].to_numpy(int),
        covariate_columns={c: df[c].to_numpy(float) for c in cov_names},
        groups=df["group"].to_numpy(object),
        cuts=cuts,
        schema=schema,
    )
