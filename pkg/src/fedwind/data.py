"""SCADA ingestion, normalization, client dataset splits and a synthetic fleet."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.signal import lfilter
from scipy.stats import norm

from .errors import ConfigError, DataError, DegenerateFeatureError

logger = logging.getLogger(__name__)

FIELDS = ("wind_speed", "power", "rotor_speed", "bearing_temp")
DEFAULT_SCHEMA = {"timestamp": "timestamp", **{f: f for f in FIELDS}}
CADENCE_S = 600
WEEK_S = 7 * 24 * 3600

TRAIN, VALIDATION, TEST, POOL, UNUSED = "train", "validation", "test", "pool", "unused"


@dataclass(frozen=True, eq=False)
class ScadaDataset:
    """Time-ordered 10-minute SCADA records of one turbine.

    ``timestamps`` are UTC epoch seconds. ``partition`` labels every record
    with one of train / validation / test / pool / unused.
    """

    turbine_id: str
    timestamps: np.ndarray
    wind_speed: np.ndarray
    power: np.ndarray
    rotor_speed: np.ndarray
    bearing_temp: np.ndarray
    partition: np.ndarray | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        object.__setattr__(self, "timestamps", ts)
        for name in FIELDS:
            col = np.asarray(getattr(self, name), dtype=np.float64)
            if col.shape != ts.shape:
                raise DataError(f"column {name} has {col.size} rows, timestamps have {ts.size}")
            if not np.isfinite(col).all():
                raise DataError(f"column {name} contains non-finite values")
            object.__setattr__(self, name, col)
        if ts.size > 1 and not (np.diff(ts) > 0).all():
            raise DataError("timestamps must be strictly increasing")
        part = self.partition
        if part is None:
            part = np.full(ts.size, UNUSED, dtype="<U10")
        part = np.asarray(part, dtype="<U10")
        if part.shape != ts.shape:
            raise DataError("partition labels do not match record count")
        object.__setattr__(self, "partition", part)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def column(self, name: str) -> np.ndarray:
        if name == "timestamp":
            return self.timestamps
        if name not in FIELDS:
            raise ConfigError(f"unknown field {name!r}")
        return getattr(self, name)

    def features(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.column(n) for n in names], axis=1)

    def subset(self, index) -> "ScadaDataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        elif index.size == 0:
            index = index.astype(np.int64)
        return ScadaDataset(
            self.turbine_id,
            self.timestamps[index],
            *(getattr(self, f)[index] for f in FIELDS),
            partition=self.partition[index],
        )

    def part(self, label: str) -> "ScadaDataset":
        return self.subset(self.partition == label)

    def labelled(self, label: str) -> "ScadaDataset":
        return replace(self, partition=np.full(len(self), label, dtype="<U10"))

    def partition_counts(self) -> dict[str, int]:
        labels, counts = np.unique(self.partition, return_counts=True)
        return dict(zip(labels.tolist(), counts.tolist()))

    def to_frame(self) -> pd.DataFrame:
        ts = pd.to_datetime(self.timestamps, unit="s", utc=True)
        df = pd.DataFrame({"timestamp": ts.strftime("%Y-%m-%dT%H:%M:%SZ")})
        for f in FIELDS:
            df[f] = getattr(self, f)
        return df

    def equals(self, other: "ScadaDataset") -> bool:
        return (
            self.turbine_id == other.turbine_id
            and np.array_equal(self.timestamps, other.timestamps)
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in FIELDS)
            and np.array_equal(self.partition, other.partition)
        )


def concat(parts: Sequence[ScadaDataset]) -> ScadaDataset:
    """Merge labelled pieces of one turbine back into time order."""
    if not parts:
        raise DataError("nothing to concatenate")
    ts = np.concatenate([p.timestamps for p in parts])
    order = np.argsort(ts, kind="stable")
    return ScadaDataset(
        parts[0].turbine_id,
        ts[order],
        *(np.concatenate([getattr(p, f) for p in parts])[order] for f in FIELDS),
        partition=np.concatenate([p.partition for p in parts])[order],
    )


# ---------------------------------------------------------------- CSV I/O


def _parse_timestamps(col: pd.Series) -> pd.Series:
    numeric = pd.to_numeric(col, errors="coerce")
    # a column that is mostly numbers holds epoch seconds; stray text is invalid
    if numeric.notna().sum() * 2 >= max(1, col.notna().sum()):
        return numeric.round().astype("Int64")
    parsed = pd.to_datetime(col, utc=True, errors="coerce", format="ISO8601")
    out = pd.Series(pd.NA, index=col.index, dtype="Int64")
    ok = parsed.notna()
    out[ok] = (parsed[ok].astype("int64") // 10**9).astype("int64")
    return out


def _to_float(col: pd.Series) -> pd.Series:
    # astype parses with correct rounding; to_numeric's fast path does not
    try:
        return col.astype("float64")
    except (TypeError, ValueError):
        return col.map(_parse_float).astype("float64")


def _parse_float(value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return math.nan


def ingest_csv(path, schema: Mapping[str, str] | None = None, turbine_id: str | None = None,
               scale: Mapping[str, float] | None = None) -> ScadaDataset:
    """Read one turbine's SCADA CSV.

    ``schema`` maps field names (timestamp, wind_speed, power, rotor_speed,
    bearing_temp) to CSV column names; ``scale`` multiplies fields after
    parsing (e.g. ``{"power": 0.001}`` for kW exports). Rows with a missing
    or non-finite value in any mapped field are dropped and counted.
    """
    path = Path(path)
    mapping = dict(DEFAULT_SCHEMA)
    mapping.update(schema or {})
    try:
        raw = pd.read_csv(path, dtype=str, comment=None)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    missing = [f"{k}->{v}" for k, v in mapping.items() if v not in raw.columns]
    if missing:
        raise ConfigError(f"{path.name}: columns not found: {', '.join(missing)}")

    ts = _parse_timestamps(raw[mapping["timestamp"]])
    cols = {f: _to_float(raw[mapping[f]]) for f in FIELDS}
    ok = ts.notna().to_numpy()
    for f in FIELDS:
        ok &= np.isfinite(cols[f].to_numpy())
    dropped = int((~ok).sum())
    if not ok.any():
        raise DataError(f"{path.name}: no valid rows")
    ts_ok = ts[ok].to_numpy(dtype=np.int64)
    order = np.argsort(ts_ok, kind="stable")
    ts_ok = ts_ok[order]
    if ts_ok.size > 1 and (np.diff(ts_ok) == 0).any():
        dup = ts_ok[1:][np.diff(ts_ok) == 0][0]
        raise DataError(f"{path.name}: duplicate timestamp {pd.Timestamp(dup, unit='s', tz='UTC')}")
    values = {}
    for f in FIELDS:
        v = cols[f].to_numpy()[ok][order]
        if scale and f in scale:
            v = v * float(scale[f])
        values[f] = v
    if dropped:
        logger.info("%s: dropped %d invalid rows", path.name, dropped)
    return ScadaDataset(turbine_id or path.stem, ts_ok, dropped_rows=dropped, **values)


def export_csv(dataset: ScadaDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(path, index=False, lineterminator="\n")
    return path


def export_fleet(fleet: Sequence[ScadaDataset], directory) -> list[Path]:
    directory = Path(directory)
    return [export_csv(ds, directory / f"{ds.turbine_id}.csv") for ds in fleet]


def load_fleet(directory, schema: Mapping[str, str] | None = None,
               scale: Mapping[str, float] | None = None) -> list[ScadaDataset]:
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise DataError(f"no CSV files in {directory}")
    return [ingest_csv(f, schema, scale=scale) for f in files]


# ---------------------------------------------------------- normalization


@dataclass(frozen=True, eq=False)
class NormStats:
    mins: np.ndarray
    maxs: np.ndarray
    features: tuple[str, ...] = ()

    def __post_init__(self):
        mins = np.asarray(self.mins, dtype=np.float64).reshape(-1)
        maxs = np.asarray(self.maxs, dtype=np.float64).reshape(-1)
        if mins.shape != maxs.shape:
            raise DataError("min/max length mismatch")
        bad = np.flatnonzero(~(maxs > mins))
        if bad.size:
            names = [self.features[i] if i < len(self.features) else str(i) for i in bad]
            raise DegenerateFeatureError(f"constant feature(s): {', '.join(names)}")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)

    @classmethod
    def merge(cls, stats: Sequence["NormStats"]) -> "NormStats":
        """Envelope of several clients' statistics (fleet-wide alternative)."""
        return cls(np.min([s.mins for s in stats], axis=0), np.max([s.maxs for s in stats], axis=0),
                   stats[0].features)

    def to_dict(self) -> dict:
        return {"features": list(self.features), "mins": self.mins.tolist(), "maxs": self.maxs.tolist()}


def fit_norm(values, features: Sequence[str] = ()) -> NormStats:
    """Per-column min/max of a (training) matrix."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise DataError("cannot fit normalization on an empty partition")
    return NormStats(x.min(axis=0), x.max(axis=0), tuple(features))


def apply_norm(stats: NormStats, values) -> np.ndarray:
    """(x - min) / (max - min); no clamping outside the fitted range."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 0 and stats.mins.size == 1:
        return (x - stats.mins[0]) / (stats.maxs[0] - stats.mins[0])
    return (x - stats.mins) / (stats.maxs - stats.mins)


# ----------------------------------------------------------------- splits


def _suffix_count(fraction: float, n: int) -> int:
    # decimal arithmetic so that 0.3 * 10 is 3, not 3.0000000000000004
    return int(math.ceil(Decimal(repr(float(fraction))) * n))


def split_test_suffix(dataset: ScadaDataset, fraction: float = 0.30) -> ScadaDataset:
    """Label the last ceil(fraction * n) records test, the rest pool."""
    if not 0 < fraction < 1:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    n_test = _suffix_count(fraction, n)
    labels = np.full(n, POOL, dtype="<U10")
    labels[n - n_test:] = TEST
    return replace(dataset, partition=labels)


def _span_end(pool: ScadaDataset) -> int:
    """Nominal end of the covered period: last timestamp plus one sampling interval."""
    ts = pool.timestamps
    step = int(np.median(np.diff(ts))) if ts.size > 1 else CADENCE_S
    return int(ts[-1]) + step


def weekly_windows(pool: ScadaDataset) -> list[tuple[int, np.ndarray]]:
    """Full 7-day windows anchored at the first record: (start, record indices)."""
    if len(pool) == 0:
        return []
    t0 = int(pool.timestamps[0])
    n_full = (_span_end(pool) - t0) // WEEK_S
    k = (pool.timestamps - t0) // WEEK_S
    return [(t0 + i * WEEK_S, np.flatnonzero(k == i)) for i in range(n_full)]


def _two_way(pool: ScadaDataset, train_mask: np.ndarray) -> tuple[ScadaDataset, ScadaDataset]:
    return pool.subset(train_mask).labelled(TRAIN), pool.subset(~train_mask).labelled(VALIDATION)


def select_scarce_lowest_wind(pool: ScadaDataset, n_weeks: int = 4) -> tuple[ScadaDataset, ScadaDataset]:
    """Training set = the ``n_weeks`` week windows with the lowest mean wind speed."""
    windows = [(start, idx) for start, idx in weekly_windows(pool) if idx.size]
    if len(windows) < n_weeks:
        raise DataError(f"pool covers {len(windows)} full weeks, need {n_weeks}")
    ranked = sorted(windows, key=lambda w: (float(np.mean(pool.wind_speed[w[1]])), w[0]))
    mask = np.zeros(len(pool), dtype=bool)
    for _, idx in ranked[:n_weeks]:
        mask[idx] = True
    return _two_way(pool, mask)


def select_scarce_consecutive(pool: ScadaDataset, seed, n_weeks: int = 4) -> tuple[ScadaDataset, ScadaDataset]:
    """Training set = one contiguous block of ``n_weeks`` weeks starting at a random record."""
    ts = pool.timestamps
    if len(pool) == 0:
        raise DataError("empty pool")
    block = n_weeks * WEEK_S
    starts = np.flatnonzero(ts + block <= _span_end(pool))
    if starts.size == 0:
        raise DataError(f"pool spans less than {n_weeks} weeks")
    rng = np.random.default_rng(seed)
    s = int(ts[starts[rng.integers(starts.size)]])
    return _two_way(pool, (ts >= s) & (ts < s + block))


def split_representative(pool: ScadaDataset, validation_fraction: float = 0.30) -> tuple[ScadaDataset, ScadaDataset]:
    """First 70% (time order) train, last 30% validation."""
    n = len(pool)
    n_val = _suffix_count(validation_fraction, n) if n else 0
    mask = np.zeros(n, dtype=bool)
    mask[: n - n_val] = True
    return _two_way(pool, mask)


SCHEMES = ("representative", "lowest_wind", "consecutive")


def partition_client(dataset: ScadaDataset, scheme: str, seed=None,
                     test_fraction: float = 0.30) -> ScadaDataset:
    """Full train/validation/test labelling of one turbine."""
    labelled = split_test_suffix(dataset, test_fraction)
    pool = labelled.part(POOL)
    if scheme == "representative":
        train, val = split_representative(pool)
    elif scheme == "lowest_wind":
        train, val = select_scarce_lowest_wind(pool)
    elif scheme == "consecutive":
        train, val = select_scarce_consecutive(pool, seed)
    else:
        raise ConfigError(f"unknown split scheme {scheme!r}")
    return concat([train, val, labelled.part(TEST)])


# ------------------------------------------------------------ synthetic fleet


@dataclass(frozen=True)
class SyntheticFleetConfig:
    """Fleet of turbines sharing one weather stream but differing in bearing temperature."""

    n_turbines: int = 10
    n_scarce: int = 5
    rows_per_turbine: int = 20_000
    rated_power: float = 2.05
    rated_wind: float = 12.0
    weibull_shape: float = 2.0
    weibull_scale: float = 8.0
    cut_in: float = 3.5
    cut_out: float = 25.0
    rotor_max: float = 16.0
    temp_base_range: tuple[float, float] = (35.0, 50.0)
    temp_power_coef: float = 12.0
    temp_rotor_coef: float = 6.0
    temp_seasonal_amp: float = 2.0
    noise_sd: dict = field(default_factory=lambda: {"power": 0.04, "rotor_speed": 0.3, "bearing_temp": 3.0})
    wind_persistence_hours: float = 72.0
    anemometer_bias_range: tuple[float, float] = (-0.015, 0.015)
    turbine_wind_corr: float = 0.97
    start: str = "2020-01-01T00:00:00Z"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "temp_base_range", tuple(float(v) for v in self.temp_base_range))
        object.__setattr__(self, "anemometer_bias_range", tuple(float(v) for v in self.anemometer_bias_range))
        if self.n_turbines < 1:
            raise ConfigError("n_turbines must be >= 1")
        if not 0 <= self.n_scarce <= self.n_turbines:
            raise ConfigError("n_scarce must be within [0, n_turbines]")
        if self.rows_per_turbine < 2:
            raise ConfigError("rows_per_turbine must be >= 2")
        if not 0 <= self.cut_in < self.rated_wind < self.cut_out:
            raise ConfigError("need 0 <= cut_in < rated_wind < cut_out")
        lo, hi = self.temp_base_range
        if not hi > lo:
            raise ConfigError("temp_base_range must have positive span")
        if min(self.rated_power, self.weibull_shape, self.weibull_scale, self.rotor_max,
               self.wind_persistence_hours) <= 0:
            raise ConfigError("rated_power, weibull parameters, rotor_max and persistence must be positive")
        a_lo, a_hi = self.anemometer_bias_range
        if not (a_hi >= a_lo > -1):
            raise ConfigError("anemometer_bias_range must be ordered and above -1")
        if not 0 <= self.turbine_wind_corr <= 1:
            raise ConfigError("turbine_wind_corr must be in [0, 1]")
        if any(v < 0 for v in self.noise_sd.values()):
            raise ConfigError("noise_sd values must be non-negative")


def power_fraction(wind, cfg: SyntheticFleetConfig) -> np.ndarray:
    """Logistic ramp: 0 below cut-in and at/above cut-out, ~1 on the plateau."""
    w = np.asarray(wind, dtype=np.float64)
    mid = 0.5 * (cfg.cut_in + cfg.rated_wind)
    k = 10.0 / (cfg.rated_wind - cfg.cut_in)
    sig = lambda v: 1.0 / (1.0 + np.exp(-k * (v - mid)))  # noqa: E731
    s = (sig(w) - sig(cfg.cut_in)) / (1.0 - sig(cfg.cut_in))
    return np.where((w < cfg.cut_in) | (w >= cfg.cut_out), 0.0, s)


def generate_synthetic_fleet(config: SyntheticFleetConfig) -> list[ScadaDataset]:
    cfg = config
    n = cfg.rows_per_turbine
    root = np.random.SeedSequence(cfg.seed)
    weather_ss, temp_ss, *turbine_ss = root.spawn(2 + cfg.n_turbines)

    # shared weather: stationary AR(1) latent, N(0, 1) marginal
    phi = math.exp(-CADENCE_S / (cfg.wind_persistence_hours * 3600.0))
    eps = np.random.default_rng(weather_ss).standard_normal(n)
    eps[0] /= math.sqrt(1.0 - phi * phi)
    latent = lfilter([math.sqrt(1.0 - phi * phi)], [1.0, -phi], eps)

    t0 = int(pd.Timestamp(cfg.start).value // 10**9)
    ts = t0 + CADENCE_S * np.arange(n, dtype=np.int64)
    season = np.sin(2 * np.pi * (ts - t0) / (365.25 * 86400.0))

    # per-turbine heterogeneity, stratified so the fleet spans each range
    trng = np.random.default_rng(temp_ss)

    def spread(lo: float, hi: float) -> np.ndarray:
        strata = (np.arange(cfg.n_turbines) + trng.uniform(size=cfg.n_turbines)) / cfg.n_turbines
        return lo + (hi - lo) * trng.permutation(strata)

    t_base = spread(*cfg.temp_base_range)
    anemometer = 1.0 + spread(*cfg.anemometer_bias_range)

    rho = cfg.turbine_wind_corr
    sd = {"power": 0.0, "rotor_speed": 0.0, "bearing_temp": 0.0, **cfg.noise_sd}
    fleet = []
    for j, ss in enumerate(turbine_ss):
        rng = np.random.default_rng(ss)
        u = rho * latent + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
        # Weibull quantile of the Gaussian latent
        wind = cfg.weibull_scale * (-norm.logsf(u)) ** (1.0 / cfg.weibull_shape)
        pfrac = power_fraction(wind, cfg)
        power = np.maximum(cfg.rated_power * pfrac + sd["power"] * rng.standard_normal(n), 0.0)
        rotor_clean = cfg.rotor_max * np.tanh(wind / (0.6 * cfg.rated_wind))
        rotor = np.maximum(rotor_clean + sd["rotor_speed"] * rng.standard_normal(n), 0.0)
        temp = (t_base[j] + cfg.temp_power_coef * power / cfg.rated_power
                + cfg.temp_rotor_coef * rotor / cfg.rotor_max
                + cfg.temp_seasonal_amp * season
                + sd["bearing_temp"] * rng.standard_normal(n))
        # nacelle anemometers read the true wind with a turbine-specific gain
        measured = wind * anemometer[j]
        fleet.append(ScadaDataset(f"wt{j:02d}", ts.copy(), measured, power, rotor, temp))
    return fleet


# monitored target and regressors per case study
CASES = {
    "power_curve": (("wind_speed",), "power"),
    "bearing_temp": (("rotor_speed", "power"), "bearing_temp"),
}
