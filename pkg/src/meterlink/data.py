"""Smart-meter records, re-pseudonymization and preprocessing.

A :class:`Dataset` holds the consumption grids of many properties over one
period as a single ``(N, T, F)`` float64 array, keyed by pseudonym. All
operations return new datasets; the arrays are marked read-only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

HOUR = 3600
DAY = 24 * HOUR
WEEK = 7 * DAY

UTILITY_COLUMNS = ("elec_kwh", "gas_kwh")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeterRecord:
    """Consumption of one property: ``values[t, f]`` kWh in slot ``t`` for utility ``f``."""

    pseudonym: str
    start: int
    values: np.ndarray
    delta_t: int = HOUR

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"record grid must be T x F, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError(f"record {self.pseudonym!r} has negative or non-finite values")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def F(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Records of several pseudonyms sharing ``(start, delta_t, T, F)``."""

    pseudonyms: tuple
    values: np.ndarray
    start: int = 0
    delta_t: int = HOUR

    def __post_init__(self):
        object.__setattr__(self, "pseudonyms", tuple(str(p) for p in self.pseudonyms))
        if self.values.dtype != np.float64 or self.values.flags.writeable:
            object.__setattr__(self, "values", _frozen(self.values))
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"dataset values must be N x T x F, got shape {v.shape}")
        if len(self.pseudonyms) != v.shape[0]:
            raise ValueError("one pseudonym per record required")
        if len(set(self.pseudonyms)) != len(self.pseudonyms):
            raise ValueError("pseudonyms must be unique")
        if v.size and (not np.all(np.isfinite(v)) or np.any(v < 0)):
            raise ValueError("consumption values must be finite and nonnegative")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")

    @classmethod
    def from_records(cls, records: Iterable[MeterRecord]) -> "Dataset":
        records = list(records)
        if not records:
            raise ValueError("no records")
        first = records[0]
        for r in records[1:]:
            if (r.start, r.delta_t, r.T, r.F) != (first.start, first.delta_t, first.T, first.F):
                raise ValueError(f"record {r.pseudonym!r} does not share the dataset grid")
        return cls(
            tuple(r.pseudonym for r in records),
            np.stack([r.values for r in records]),
            first.start,
            first.delta_t,
        )

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def F(self) -> int:
        return self.values.shape[2]

    @property
    def period(self) -> tuple[int, int]:
        return self.start, self.start + self.T * self.delta_t

    @property
    def records(self) -> dict[str, MeterRecord]:
        return {p: self[p] for p in self.pseudonyms}

    def __len__(self) -> int:
        return self.N

    def __getitem__(self, pseudonym: str) -> MeterRecord:
        i = self.index_of(pseudonym)
        return MeterRecord(pseudonym, self.start, self.values[i], self.delta_t)

    def index_of(self, pseudonym: str) -> int:
        try:
            return self._index[pseudonym]
        except KeyError:
            raise KeyError(f"unknown pseudonym {pseudonym!r}") from None

    @property
    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {p: i for i, p in enumerate(self.pseudonyms)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def subset(self, pseudonyms: Sequence[str]) -> "Dataset":
        rows = [self.index_of(p) for p in pseudonyms]
        return Dataset(tuple(pseudonyms), self.values[rows], self.start, self.delta_t)

    def with_values(self, values: np.ndarray) -> "Dataset":
        return Dataset(self.pseudonyms, values, self.start, self.delta_t)

    def renamed(self, pseudonyms: Sequence[str]) -> "Dataset":
        return Dataset(tuple(pseudonyms), self.values, self.start, self.delta_t)


# --------------------------------------------------------------------------
# Pseudonyms


@dataclass
class PseudonymScheme:
    """Per-period pseudonym assignments plus the hidden ground-truth linkage.

    ``assignments[i]`` maps user id to the pseudonym used in period ``i``.
    Only evaluation code should read the linkage.
    """

    seed: int
    assignments: list[dict[str, str]]
    _reverse: list[dict[str, str]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._reverse = [{p: u for u, p in a.items()} for a in self.assignments]

    @property
    def n_periods(self) -> int:
        return len(self.assignments)

    @property
    def users(self) -> list[str]:
        return sorted(self.assignments[0]) if self.assignments else []

    def pseudonym_of(self, user: str, period: int) -> str:
        return self.assignments[period][user]

    def user_of(self, pseudonym: str, period: int) -> str:
        return self._reverse[period][pseudonym]

    @property
    def linkage(self) -> list[tuple[str, int, str]]:
        return [
            (u, i, a[u]) for i, a in enumerate(self.assignments) for u in sorted(a)
        ]

    def check(self) -> None:
        """Raise if a period is not injective, a pseudonym repeats across periods
        or equals its user id."""
        seen: dict[str, tuple[str, int]] = {}
        for i, a in enumerate(self.assignments):
            if len(set(a.values())) != len(a):
                raise ValueError(f"period {i}: pseudonyms not injective")
            for u, p in a.items():
                if p == u:
                    raise ValueError(f"pseudonym equals user id {u!r}")
                if p in seen:
                    raise ValueError(f"pseudonym {p!r} reused (period {i} and {seen[p][1]})")
                seen[p] = (u, i)

    @classmethod
    def from_linkage(cls, rows: Iterable[tuple[str, int, str]], seed: int = -1) -> "PseudonymScheme":
        periods: dict[int, dict[str, str]] = {}
        for user, period, pseudonym in rows:
            periods.setdefault(int(period), {})[str(user)] = str(pseudonym)
        n = max(periods) + 1 if periods else 0
        return cls(seed, [periods.get(i, {}) for i in range(n)])


def _draw_tokens(rng: np.random.Generator, n: int, exclude: set[str]) -> list[str]:
    tokens: list[str] = []
    taken = set(exclude)
    while len(tokens) < n:
        for raw in rng.integers(0, 2**62, size=n - len(tokens), dtype=np.int64):
            tok = f"{int(raw):016x}"
            if tok not in taken:
                taken.add(tok)
                tokens.append(tok)
    return tokens


def repseudonymize(weekly: Sequence[Dataset], scheme_seed: int) -> tuple[list[Dataset], PseudonymScheme]:
    """Give every period fresh random pseudonyms.

    The input pseudonyms act as user ids. Output records are ordered by their
    new pseudonym so that row order carries no linkage information.
    """
    if not weekly:
        return [], PseudonymScheme(scheme_seed, [])
    users = set(weekly[0].pseudonyms)
    for i, w in enumerate(weekly):
        if set(w.pseudonyms) != users:
            raise ValueError(f"period {i} covers a different user set")
    rng = np.random.default_rng(scheme_seed)
    users_sorted = sorted(users)
    tokens = _draw_tokens(rng, len(users_sorted) * len(weekly), exclude=users)
    assignments = []
    out = []
    for i, w in enumerate(weekly):
        chunk = tokens[i * len(users_sorted):(i + 1) * len(users_sorted)]
        a = dict(zip(users_sorted, chunk))
        assignments.append(a)
        order = sorted(w.pseudonyms, key=lambda u: a[u])
        out.append(w.subset(order).renamed([a[u] for u in order]))
    scheme = PseudonymScheme(scheme_seed, assignments)
    scheme.check()
    return out, scheme


# --------------------------------------------------------------------------
# Ingestion and preprocessing


@dataclass(frozen=True)
class ColumnSchema:
    pseudonym: str = "pseudonym"
    timestamp: str = "timestamp_utc"
    utilities: tuple = UTILITY_COLUMNS


@dataclass
class RawReadings:
    """Ungridded readings grouped by pseudonym; duplicates are kept."""

    readings: dict[str, tuple[np.ndarray, np.ndarray]]
    period: tuple[int, int]
    delta_t: int = HOUR
    n_utilities: int = 1
    n_skipped: int = 0

    def window(self, start: int, end: int) -> "RawReadings":
        """Readings with ``start <= timestamp < end``; pseudonyms without any are dropped."""
        out = {}
        for p, (ts, vals) in self.readings.items():
            m = (ts >= start) & (ts < end)
            if m.any():
                out[p] = (ts[m], vals[m])
        return RawReadings(out, (start, end), self.delta_t, self.n_utilities, 0)


def _parse_timestamp(s: str) -> int:
    s = s.strip()
    try:
        return int(float(s))
    except ValueError:
        dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(dt.timestamp())


def ingest_readings(
    path,
    schema: ColumnSchema | None = None,
    period: tuple[int, int] | None = None,
    delta_t: int = HOUR,
) -> RawReadings:
    """Read a delimited readings file into per-pseudonym raw readings.

    Rows with unparseable, negative or non-finite fields are skipped and
    counted in ``n_skipped``. Utilities are taken from ``schema.utilities`` in
    order, stopping at the first column missing from the header.
    """
    schema = schema or ColumnSchema()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"readings file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        try:
            i_p = header.index(schema.pseudonym)
            i_t = header.index(schema.timestamp)
        except ValueError:
            raise ValueError(f"{path}: header lacks {schema.pseudonym!r}/{schema.timestamp!r}") from None
        util_idx = []
        for col in schema.utilities:
            if col not in header:
                break
            util_idx.append(header.index(col))
        if not util_idx:
            raise ValueError(f"{path}: no utility columns found")
        grouped: dict[str, tuple[list, list]] = {}
        skipped = 0
        for row in reader:
            if not row:
                continue
            try:
                p = row[i_p].strip()
                t = _parse_timestamp(row[i_t])
                vals = [float(row[i]) for i in util_idx]
            except (ValueError, IndexError):
                skipped += 1
                continue
            if not p or not all(math.isfinite(v) and v >= 0 for v in vals):
                skipped += 1
                continue
            ts, vs = grouped.setdefault(p, ([], []))
            ts.append(t)
            vs.append(vals)
    if not grouped:
        raise ValueError(f"{path}: no parseable rows ({skipped} skipped)")
    if skipped:
        log.warning("%s: skipped %d unparseable rows", path, skipped)
    readings = {
        p: (np.asarray(ts, dtype=np.int64), np.asarray(vs, dtype=np.float64))
        for p, (ts, vs) in grouped.items()
    }
    lo = min(int(ts.min()) for ts, _ in readings.values())
    hi = max(int(ts.max()) for ts, _ in readings.values())
    if period is None:
        period = (lo, hi + delta_t)
    elif lo < period[0] or hi >= period[1]:
        raise ValueError(f"{path}: timestamps outside declared period {period}")
    return RawReadings(readings, (int(period[0]), int(period[1])), delta_t, len(util_idx), skipped)


@dataclass(frozen=True)
class PreprocessConfig:
    duplicate_policy: str = "average"
    missing_policy: str = "zero"
    gas_clip_quantile: float = 0.999

    def __post_init__(self):
        if self.duplicate_policy != "average":
            raise ValueError(f"unsupported duplicate policy {self.duplicate_policy!r}")
        if self.missing_policy != "zero":
            raise ValueError(f"unsupported missing policy {self.missing_policy!r}")
        if not 0.9 < self.gas_clip_quantile <= 1.0:
            raise ValueError("gas_clip_quantile must lie in (0.9, 1]")


def gas_clip_threshold(raw: RawReadings, q: float) -> float | None:
    """Sample ``q``-quantile of the observed gas readings, or None without gas."""
    if raw.n_utilities < 2:
        return None
    gas = np.concatenate([v[:, 1] for _, v in raw.readings.values()])
    return float(np.quantile(gas, q))


def preprocess(raw: RawReadings, cfg: PreprocessConfig | None = None, gas_threshold: float | None = None) -> Dataset:
    """Grid raw readings onto ``raw.period``.

    Duplicate readings of a slot are averaged and empty slots are zero. Gas
    readings (utility 1) above ``gas_threshold`` are clipped to it; when no
    threshold is given it is the ``gas_clip_quantile`` quantile of ``raw``.
    """
    cfg = cfg or PreprocessConfig()
    start, end = raw.period
    if (end - start) % raw.delta_t:
        raise ValueError("period is not a whole number of slots")
    T = (end - start) // raw.delta_t
    F = raw.n_utilities
    pseudonyms = sorted(raw.readings)
    values = np.zeros((len(pseudonyms), T, F))
    for i, p in enumerate(pseudonyms):
        ts, vals = raw.readings[p]
        slots = (ts - start) // raw.delta_t
        sums = np.zeros((T, F))
        counts = np.zeros(T)
        np.add.at(sums, slots, vals)
        np.add.at(counts, slots, 1.0)
        seen = counts > 0
        values[i, seen] = sums[seen] / counts[seen, None]
    if F >= 2 and cfg.gas_clip_quantile < 1.0:
        thr = gas_threshold if gas_threshold is not None else gas_clip_threshold(raw, cfg.gas_clip_quantile)
        np.minimum(values[:, :, 1], thr, out=values[:, :, 1])
    elif F >= 2 and gas_threshold is not None:
        np.minimum(values[:, :, 1], gas_threshold, out=values[:, :, 1])
    return Dataset(tuple(pseudonyms), values, start, raw.delta_t)


# --------------------------------------------------------------------------
# Period handling


def slots_per_week(delta_t: int) -> int:
    if WEEK % delta_t:
        raise ValueError(f"delta_t={delta_t} does not divide a week")
    return WEEK // delta_t


def split_weeks(ds: Dataset) -> list[Dataset]:
    """Cut a dataset into consecutive weekly datasets; partial weeks are rejected."""
    k = slots_per_week(ds.delta_t)
    if ds.T % k:
        raise ValueError(f"dataset spans {ds.T / k:.3f} weeks, not an integer count")
    return [
        Dataset(ds.pseudonyms, ds.values[:, w * k:(w + 1) * k], ds.start + w * WEEK, ds.delta_t)
        for w in range(ds.T // k)
    ]


def concat_periods(parts: Sequence[Dataset]) -> Dataset:
    """Inverse of :func:`split_weeks` for datasets sharing pseudonyms."""
    first = parts[0]
    aligned = [p.subset(first.pseudonyms) for p in parts]
    return Dataset(
        first.pseudonyms, np.concatenate([p.values for p in aligned], axis=1), first.start, first.delta_t
    )


def aggregate_granularity(ds: Dataset, new_delta_t: int) -> Dataset:
    """Sum consecutive slots into coarser ones of length ``new_delta_t``."""
    if new_delta_t % ds.delta_t:
        raise ValueError(f"{new_delta_t} is not a multiple of delta_t={ds.delta_t}")
    k = new_delta_t // ds.delta_t
    if ds.T % k:
        raise ValueError(f"T={ds.T} slots do not group evenly by {k}")
    v = ds.values.reshape(ds.N, ds.T // k, k, ds.F).sum(axis=2)
    return Dataset(ds.pseudonyms, v, ds.start, new_delta_t)


# --------------------------------------------------------------------------
# Rounding


@dataclass(frozen=True)
class RoundingSpec:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("number of significant digits must be a positive integer")


def _round_decimal(x: float, n: int) -> float:
    d = Decimal(repr(float(x)))
    if d == 0:
        return 0.0
    e = d.adjusted()
    q = Decimal(1).scaleb(e - n + 1)
    return float(d.quantize(q, rounding=ROUND_HALF_UP))


def round_array(x: np.ndarray, n: int) -> np.ndarray:
    """Round to ``n`` significant digits, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    # powers of ten near the float range limits overflow, so those go through Decimal
    extreme = (x != 0) & ((np.abs(x) < 1e-280) | (np.abs(x) > 1e280))
    if extreme.any():
        out[extreme] = [_round_decimal(v, n) for v in x[extreme]]
    nz = (x != 0) & ~extreme
    a = np.abs(x[nz])
    e = np.floor(np.log10(a))
    # log10 can be off by one next to powers of ten
    e += a / 10.0**e >= 10
    e -= a / 10.0**e < 1
    shift = n - 1 - e
    scaled = np.where(shift >= 0, a * 10.0**np.maximum(shift, 0), a / 10.0**np.maximum(-shift, 0))
    r = np.floor(scaled + 0.5)
    mag = np.where(shift >= 0, r / 10.0**np.maximum(shift, 0), r * 10.0**np.maximum(-shift, 0))
    res = np.sign(x[nz]) * mag
    # resolve values whose scaled fraction sits at the rounding boundary in decimal
    frac = scaled - np.floor(scaled)
    near = np.abs(frac - 0.5) < 1e-9
    if near.any():
        idx = np.flatnonzero(near)
        vals = x[nz][idx]
        res[idx] = [_round_decimal(v, n) for v in vals]
    out[nz] = res
    return out


def round_significant(ds: Dataset, spec: RoundingSpec) -> Dataset:
    return ds.with_values(round_array(ds.values, spec.n))


# --------------------------------------------------------------------------
# Scaling


@dataclass(frozen=True)
class ScalingStats:
    """Per-utility min/max for unit scaling, per-feature mean/std for standardization."""

    util_min: np.ndarray
    util_max: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def __post_init__(self):
        if np.any(self.util_max < self.util_min):
            raise ValueError("max < min")
        if np.any(self.feat_std < 0):
            raise ValueError("negative std")

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {
            "util_min": self.util_min,
            "util_max": self.util_max,
            "feat_mean": self.feat_mean,
            "feat_std": self.feat_std,
        }


def fit_scaling(train: Dataset | Sequence[Dataset]) -> ScalingStats:
    """Fit scaling statistics on one or several datasets sharing ``(T, F)``."""
    parts = [train] if isinstance(train, Dataset) else list(train)
    parts = [p for p in parts if p.N]
    if not parts:
        raise ValueError("empty training set")
    v = np.concatenate([p.values for p in parts], axis=0)
    return ScalingStats(
        util_min=_frozen(v.min(axis=(0, 1))),
        util_max=_frozen(v.max(axis=(0, 1))),
        feat_mean=_frozen(v.mean(axis=0)),
        feat_std=_frozen(v.std(axis=0)),
    )


def _check_utilities(v: np.ndarray, stats: ScalingStats) -> None:
    if v.shape[-1] != stats.util_min.shape[0]:
        raise ValueError(f"scaling fitted on {stats.util_min.shape[0]} utilities, data has {v.shape[-1]}")


def unit_scale_array(v: np.ndarray, stats: ScalingStats) -> np.ndarray:
    _check_utilities(v, stats)
    span = stats.util_max - stats.util_min
    safe = np.where(span > 0, span, 1.0)
    out = (v - stats.util_min) / safe
    out = np.where(span > 0, out, 0.0)
    return np.clip(out, 0.0, 1.0)


def standardize_array(v: np.ndarray, stats: ScalingStats) -> np.ndarray:
    _check_utilities(v, stats)
    std = stats.feat_std
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (v - stats.feat_mean) / safe, 0.0)


def apply_unit_scaling(ds: Dataset, stats: ScalingStats) -> np.ndarray:
    """Unit-range scaled grid of ``ds`` as an ``(N, T, F)`` array.

    Scaled values are returned as arrays rather than datasets since
    standardization produces negative entries.
    """
    return unit_scale_array(ds.values, stats)


def apply_standardization(ds: Dataset, stats: ScalingStats) -> np.ndarray:
    return standardize_array(ds.values, stats)


# --------------------------------------------------------------------------
# Flat files


def write_dataset(path, parts: Dataset | Sequence[Dataset]) -> None:
    """Write one or several datasets as ``pseudonym,timestamp_utc,elec_kwh[,gas_kwh]`` rows."""
    parts = [parts] if isinstance(parts, Dataset) else list(parts)
    F = parts[0].F
    if F > len(UTILITY_COLUMNS):
        raise ValueError(f"file format supports at most {len(UTILITY_COLUMNS)} utilities")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pseudonym", "timestamp_utc", *UTILITY_COLUMNS[:F]])
        for ds in parts:
            ts = ds.start + np.arange(ds.T) * ds.delta_t
            for p, grid in zip(ds.pseudonyms, ds.values):
                for t, row in zip(ts.tolist(), grid.tolist()):
                    w.writerow([p, t, *(repr(x) for x in row)])


def write_linkage(path, scheme: PseudonymScheme, period_column: str = "period_index") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", period_column, "pseudonym"])
        w.writerows(scheme.linkage)


def read_linkage(path) -> PseudonymScheme:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"linkage file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != 3 or header[0] != "user_id" or header[2] != "pseudonym":
            raise ValueError(f"{path}: unexpected linkage header {header}")
        return PseudonymScheme.from_linkage((u, int(i), p) for u, i, p in reader)


def load_release(path, n_periods: int | None = None, cfg: PreprocessConfig | None = None,
                 period_length: int = WEEK) -> list[Dataset]:
    """Read a re-pseudonymized release file back into per-period datasets.

    Each pseudonym is assigned to the period containing its readings; periods
    are consecutive windows of ``period_length`` seconds from the first
    timestamp.
    """
    raw = ingest_readings(path)
    start = raw.period[0]
    if n_periods is None:
        n_periods = -(-(raw.period[1] - start) // period_length)
    cfg = cfg or PreprocessConfig()
    thr = gas_clip_threshold(raw, cfg.gas_clip_quantile) if cfg.gas_clip_quantile < 1 else None
    out = []
    for i in range(n_periods):
        lo = start + i * period_length
        part = raw.window(lo, lo + period_length)
        if not part.readings:
            raise ValueError(f"{path}: period {i} has no readings")
        out.append(preprocess(part, cfg, gas_threshold=thr))
    return out
