"""Datasets: wide-CSV loading, synthetic generation, rolling-origin windows.

A dataset is one row per half-hourly settlement period.  Region-specific
covariates are stored one column per region, named ``<family>_<g>`` with
``g`` the 1-based region index; column roles come from a JSON schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import mcd


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


ROLES = ("continuous", "categorical", "per_region")


@dataclass
class Column:
    name: str
    role: str                     # "continuous" or "categorical"
    values: np.ndarray            # float, or int codes for categorical
    levels: tuple[str, ...] = ()

    def label_values(self) -> np.ndarray:
        if self.role != "categorical":
            raise SchemaError(f"column {self.name!r} is not categorical")
        return np.asarray(self.levels, dtype=object)[self.values]


@dataclass
class Dataset:
    timestamps: np.ndarray        # datetime64[s], strictly increasing
    responses: np.ndarray         # (n, d)
    response_names: list[str]
    columns: dict[str, Column]
    families: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        n = self.n
        if self.timestamps.shape[0] != n:
            raise SchemaError("timestamp column length mismatch")
        if n > 1 and not np.all(np.diff(self.timestamps).astype(np.int64) > 0):
            raise ParseError("timestamps are not strictly increasing")
        for col in self.columns.values():
            if col.values.shape[0] != n:
                raise SchemaError(f"column {col.name!r} length mismatch")

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def d(self) -> int:
        return self.responses.shape[1]

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"unknown covariate {name!r}") from None

    def region_column(self, family: str, region: int) -> str:
        """Resolve a per-region family to the column for 1-based ``region``."""
        names = self.families.get(family)
        if names is None:
            raise SchemaError(f"{family!r} is not a per-region covariate family")
        return names[region - 1]

    def region_view(self, region: int) -> "Dataset":
        """Single-region (d=1) view sharing every covariate column."""
        return Dataset(self.timestamps, self.responses[:, region - 1:region],
                       [self.response_names[region - 1]], self.columns, self.families)

    def subset(self, mask: np.ndarray) -> "Dataset":
        cols = {
            name: Column(c.name, c.role, c.values[mask], c.levels)
            for name, c in self.columns.items()
        }
        return Dataset(self.timestamps[mask], self.responses[mask],
                       list(self.response_names), cols, dict(self.families))

    def with_column(self, name: str, values: np.ndarray) -> "Dataset":
        """Copy of the dataset with one continuous column replaced."""
        col = self.column(name)
        if col.role != "continuous":
            raise SchemaError(f"cannot override non-continuous column {name!r}")
        cols = dict(self.columns)
        cols[name] = Column(name, "continuous", np.asarray(values, dtype=float))
        return Dataset(self.timestamps, self.responses,
                       list(self.response_names), cols, dict(self.families))

    def frame(self) -> pd.DataFrame:
        out = {"ts": np.datetime_as_string(self.timestamps, unit="s")}
        for j, name in enumerate(self.response_names):
            out[name] = self.responses[:, j]
        for name, col in self.columns.items():
            out[name] = col.label_values() if col.role == "categorical" else col.values
        return pd.DataFrame(out)


def load_schema(path) -> dict:
    with open(path) as fh:
        schema = json.load(fh)
    for key in ("timestamp", "responses", "covariates"):
        if key not in schema:
            raise SchemaError(f"schema is missing the {key!r} entry")
    for name, role in schema["covariates"].items():
        if role not in ROLES:
            raise SchemaError(f"covariate {name!r} has unknown role {role!r}")
    return schema


def _numeric(series: pd.Series, name: str) -> np.ndarray:
    raw = series.to_numpy(dtype=object)
    missing = pd.isna(series) | (series.astype(str).str.strip() == "")
    if missing.any():
        row = int(np.argmax(missing.to_numpy()))
        raise ParseError(f"missing value in column {name!r} at row {row}")
    try:
        # numpy strtod is correctly rounded, unlike pandas' fast parser
        return np.asarray(raw, dtype=float)
    except (ValueError, TypeError):
        for row, cell in enumerate(raw):
            try:
                float(cell)
            except (ValueError, TypeError):
                raise ParseError(
                    f"non-numeric value {cell!r} in column {name!r} at row {row}"
                ) from None
        raise


def _categorical(series: pd.Series, name: str) -> Column:
    if pd.isna(series).any():
        row = int(np.argmax(pd.isna(series).to_numpy()))
        raise ParseError(f"missing value in column {name!r} at row {row}")
    labels = series.astype(str).to_numpy()
    levels = list(dict.fromkeys(labels))          # first-appearance order
    lut = {lev: i for i, lev in enumerate(levels)}
    codes = np.array([lut[x] for x in labels], dtype=np.int64)
    return Column(name, "categorical", codes, tuple(levels))


def load_dataset(path, schema: dict | str) -> Dataset:
    """Load a wide-format CSV according to a column-role schema."""
    if not isinstance(schema, dict):
        schema = load_schema(schema)
    df = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[])
    d = len(schema["responses"])

    expected = [schema["timestamp"]] + list(schema["responses"])
    for name, role in schema["covariates"].items():
        if role == "per_region":
            expected += [f"{name}_{g}" for g in range(1, d + 1)]
        else:
            expected.append(name)
    for name in expected:
        if name not in df.columns:
            raise SchemaError(f"declared column {name!r} not present in file")

    try:
        ts = df[schema["timestamp"]].to_numpy(dtype="datetime64[s]")
    except ValueError as exc:
        raise ParseError(f"bad timestamp: {exc}") from exc
    responses = np.column_stack([_numeric(df[name], name) for name in schema["responses"]])

    columns: dict[str, Column] = {}
    families: dict[str, list[str]] = {}
    for name, role in schema["covariates"].items():
        if role == "per_region":
            members = [f"{name}_{g}" for g in range(1, d + 1)]
            families[name] = members
            for member in members:
                columns[member] = Column(member, "continuous", _numeric(df[member], member))
        elif role == "categorical":
            columns[name] = _categorical(df[name], name)
        else:
            columns[name] = Column(name, "continuous", _numeric(df[name], name))
    return Dataset(ts, responses, list(schema["responses"]), columns, families)


def write_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back to CSV at full float precision."""
    dataset.frame().to_csv(path, index=False, float_format="%.17g")


def schema_for(dataset: Dataset) -> dict:
    covs: dict[str, str] = {}
    members = {m for names in dataset.families.values() for m in names}
    for fam in dataset.families:
        covs[fam] = "per_region"
    for name, col in dataset.columns.items():
        if name not in members:
            covs[name] = col.role
    return {"timestamp": "ts", "responses": list(dataset.response_names),
            "covariates": covs}


# ---------------------------------------------------------------------------
# Synthetic data with planted covariance effects
# ---------------------------------------------------------------------------

EFFECT_TAGS = ("constant", "linear", "sinusoid-of-tod", "plateau-of-wind")
ETA_GUARD = 10.0


@dataclass(frozen=True)
class PlantedEffect:
    predictor: int                # 1-based position in eta
    covariate: str                # resolved column name ("" for constant)
    tag: str
    amplitude: float


@dataclass(frozen=True)
class SyntheticScenario:
    d: int
    n: int
    seed: int
    start: str = "2014-01-01T00:00:00"
    mean_effects: tuple[PlantedEffect, ...] = ()
    mcd_effects: tuple[PlantedEffect, ...] = ()

    @staticmethod
    def from_json(path) -> "SyntheticScenario":
        with open(path) as fh:
            cfg = json.load(fh)
        def parse(entries):
            return tuple(PlantedEffect(e["predictor"], e.get("covariate", ""),
                                       e["tag"], e["amplitude"]) for e in entries)
        return SyntheticScenario(
            d=cfg["d"], n=cfg["n"], seed=cfg["seed"],
            start=cfg.get("start", "2014-01-01T00:00:00"),
            mean_effects=parse(cfg.get("mean_effects", [])),
            mcd_effects=parse(cfg.get("mcd_effects", [])),
        )


@dataclass
class SyntheticData:
    dataset: Dataset
    truth_eta: np.ndarray         # (n, q) noise-free linear predictors
    scenario: SyntheticScenario


def _ar1(rng, n, phi=0.98, scale=1.0):
    eps = rng.standard_normal(n) * scale * np.sqrt(1.0 - phi * phi)
    x = np.empty(n)
    x[0] = eps[0] / np.sqrt(1.0 - phi * phi)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i]
    return x


def _synthetic_covariates(ts: np.ndarray, d: int, rng) -> tuple[dict, dict]:
    n = ts.shape[0]
    day = ts.astype("datetime64[D]")
    frac = (ts - day).astype("timedelta64[m]").astype(float) / 60.0
    tod = frac                                    # 0, 0.5, ..., 23.5
    doy = (day - day.astype("datetime64[Y]")).astype(float) + 1.0
    tdays = (ts - ts[0]).astype("timedelta64[m]").astype(float) / (60.0 * 24.0)
    # 1970-01-01 was a Thursday: offset 3 into a monday-first week
    weekday = ((day.astype("datetime64[D]").view(np.int64) + 3) % 7).astype(np.int64)
    dow_levels = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")

    columns = {
        "tod": Column("tod", "continuous", tod),
        "doy": Column("doy", "continuous", doy),
        "t": Column("t", "continuous", tdays),
        "dow": Column("dow", "categorical", weekday, dow_levels),
        "wcap": Column("wcap", "continuous",
                       1.0 + 0.5 * tdays / max(tdays[-1], 1.0) + 0.05 * _ar1(rng, n)),
        "n2ex": Column("n2ex", "continuous", 45.0 + 8.0 * _ar1(rng, n)),
    }
    families: dict[str, list[str]] = {}
    solar_shape = np.clip(np.sin(np.pi * (tod - 6.0) / 12.0), 0.0, None)
    season = np.sin(2.0 * np.pi * (doy - 80.0) / 365.25)
    for fam, maker in (
        ("wsp100", lambda g: 8.0 + 3.0 * _ar1(rng, n) + 0.5 * g),
        ("irr", lambda g: solar_shape * np.clip(0.6 + 0.4 * _ar1(rng, n, phi=0.9), 0.0, None) * 800.0),
        ("temp", lambda g: 282.0 + 6.0 * season + 2.0 * np.sin(2 * np.pi * (tod - 14.0) / 24.0)
                 + 1.5 * _ar1(rng, n)),
        ("rain", lambda g: np.abs(_ar1(rng, n, phi=0.9, scale=1.2)) ** 2 * 2e-3),
    ):
        names = [f"{fam}_{g}" for g in range(1, d + 1)]
        families[fam] = names
        for g, name in enumerate(names, start=1):
            columns[name] = Column(name, "continuous", maker(g))
    return columns, families


def _effect_values(effect: PlantedEffect, columns: dict[str, Column]) -> np.ndarray:
    if effect.tag not in EFFECT_TAGS:
        raise ScenarioError(f"unknown effect tag {effect.tag!r}")
    if effect.tag == "constant":
        first = next(iter(columns.values()))
        return np.full(first.values.shape[0], effect.amplitude)
    col = columns.get(effect.covariate)
    if col is None or col.role != "continuous":
        raise ScenarioError(f"effect needs continuous covariate {effect.covariate!r}")
    x = col.values
    if effect.tag == "linear":
        sd = x.std()
        return effect.amplitude * (x - x.mean()) / (sd if sd > 0 else 1.0)
    if effect.tag == "sinusoid-of-tod":
        return effect.amplitude * np.sin(2.0 * np.pi * x / 24.0)
    mid, spread = np.median(x), max(x.std(), 1e-12)    # plateau-of-wind
    return effect.amplitude / (1.0 + np.exp(-(x - mid) / (0.5 * spread)))


def generate_synthetic(scenario: SyntheticScenario) -> SyntheticData:
    """Generate a dataset with known planted mean/covariance effects."""
    tables = mcd.build_index_tables(scenario.d)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(scenario.seed)))
    start = np.datetime64(scenario.start, "s")
    ts = start + np.arange(scenario.n) * np.timedelta64(30, "m")
    columns, families = _synthetic_covariates(ts, scenario.d, rng)

    eta = np.zeros((scenario.n, tables.q))
    for effect in scenario.mean_effects + scenario.mcd_effects:
        j = effect.predictor
        if not 1 <= j <= tables.q:
            raise ScenarioError(f"predictor index {j} outside 1..{tables.q}")
        eta[:, j - 1] += _effect_values(effect, columns)
    tail_max = np.abs(eta[:, scenario.d:]).max() if tables.q > scenario.d else 0.0
    if tail_max > ETA_GUARD:
        raise ScenarioError(
            f"planted covariance predictors reach |eta|={tail_max:.2f} > {ETA_GUARD}")

    y = mcd.sample_responses(eta, tables, rng)
    names = [f"y_{g}" for g in range(1, scenario.d + 1)]
    dataset = Dataset(ts, y, names, columns, families)
    return SyntheticData(dataset, eta, scenario)


# ---------------------------------------------------------------------------
# Rolling-origin windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    train_end: np.datetime64      # first instant of the test month
    test_start: np.datetime64
    test_end: np.datetime64       # exclusive

    def train_mask(self, ts: np.ndarray) -> np.ndarray:
        return ts < self.train_end

    def test_mask(self, ts: np.ndarray) -> np.ndarray:
        return (ts >= self.test_start) & (ts < self.test_end)


@dataclass(frozen=True)
class RollingWindows:
    windows: tuple[Window, ...]


def rolling_windows(dataset: Dataset, first_test_month: str) -> RollingWindows:
    """One window per calendar month from ``first_test_month`` ('YYYY-MM') on."""
    ts = dataset.timestamps
    month0 = np.datetime64(first_test_month, "M")
    start = month0.astype("datetime64[s]")
    if start <= ts[0]:
        raise ValueError(
            f"first test month {first_test_month} leaves no training data")
    if start > ts[-1]:
        raise ValueError(f"first test month {first_test_month} is after the data end")
    windows = []
    month = month0
    while month.astype("datetime64[s]") <= ts[-1]:
        lo = month.astype("datetime64[s]")
        hi = (month + 1).astype("datetime64[s]")
        windows.append(Window(train_end=lo, test_start=lo, test_end=hi))
        month = month + 1
    return RollingWindows(tuple(windows))
