"""Desk-scale model formulas mirroring the net-demand application.

``mean_effects`` builds the additive mean model for one region from
whatever covariates the dataset provides; ``mcd_candidates`` builds the
candidate-effect list per covariance predictor used by boosting, with the
region-specific weather covariates routed to the row of D or T the
predictor occupies.  Restriction modes: ``full`` (all candidates),
``cal+ren`` (calendar plus wind and irradiance), ``cal`` (calendar only),
``diag`` (cal+ren candidates, diagonal predictors only).
"""

from __future__ import annotations

import numpy as np

from .basis import EffectSpec
from .data import Dataset
from .mcd import McdTables

RESTRICTION_MODES = ("full", "cal", "cal+ren", "diag")


def _has(dataset: Dataset, name: str) -> bool:
    return name in dataset.columns


def _region(dataset: Dataset, family: str, region: int) -> str | None:
    if family in dataset.families:
        return dataset.families[family][region - 1]
    return None


def mean_effects(dataset: Dataset, region: int = 1) -> list[EffectSpec]:
    """Mean-model effect list for one region, desk-scale basis dimensions."""
    eff = [EffectSpec("intercept")]
    if _has(dataset, "t"):
        eff.append(EffectSpec("linear", ("t",), degree=2))
    if _has(dataset, "dow"):
        eff.append(EffectSpec("factor", ("dow",), penalised=False))
    if _has(dataset, "shol"):
        eff.append(EffectSpec("factor", ("shol",), penalised=False))
    wsp10 = _region(dataset, "wsp10", region)
    if wsp10:
        eff.append(EffectSpec("linear", (wsp10,)))
    y24 = _region(dataset, "y24", region)
    if y24:
        eff.append(EffectSpec("linear", (y24,)))
    if _has(dataset, "doy"):
        eff.append(EffectSpec("smooth-bs", ("doy",), k=(10,)))
    if _has(dataset, "tod"):
        eff.append(EffectSpec("smooth-cr", ("tod",), k=(12,)))
    if _has(dataset, "n2ex"):
        eff.append(EffectSpec("smooth-cr", ("n2ex",), k=(6,)))
    temp = _region(dataset, "temp", region)
    if temp:
        eff.append(EffectSpec("smooth-cr", (temp,), k=(8,)))
    temps = _region(dataset, "temps", region)
    if temps:
        eff.append(EffectSpec("smooth-cr", (temps,), k=(8,)))
    rain = _region(dataset, "rain", region)
    if rain:
        eff.append(EffectSpec("smooth-cr", (rain,), k=(5,), transform="sqrt"))
    wsp100 = _region(dataset, "wsp100", region)
    if wsp100 and _has(dataset, "wcap"):
        eff.append(EffectSpec("varying-coefficient", (wsp100,), k=(6,), by="wcap"))
    irr = _region(dataset, "irr", region)
    if irr:
        eff.append(EffectSpec("smooth-cr", (irr,), k=(5,)))
    if _has(dataset, "tod") and _has(dataset, "dow"):
        eff.append(EffectSpec("factor-smooth", ("tod", "dow"), k=(5,)))
    if _has(dataset, "tod") and _has(dataset, "shol"):
        eff.append(EffectSpec("factor-smooth", ("tod", "shol"), k=(5,)))
    if _has(dataset, "n2ex") and _has(dataset, "tod"):
        eff.append(EffectSpec("tensor", ("n2ex", "tod"), k=(4, 4)))
    if temp and _has(dataset, "tod"):
        eff.append(EffectSpec("tensor", (temp, "tod"), k=(4, 4)))
    if rain and _has(dataset, "tod"):
        eff.append(EffectSpec("tensor", (rain, "tod"), k=(4, 4), transform="sqrt"))
    if _has(dataset, "doy") and _has(dataset, "tod"):
        eff.append(EffectSpec("tensor", ("doy", "tod"), k=(5, 5)))
    return eff


def predictor_region(j: int, tables: McdTables) -> int:
    """Row of D or T (1-based region) on which 1-based predictor j appears."""
    d = tables.d
    if not d < j <= tables.q:
        raise ValueError(f"predictor {j} is not a covariance predictor")
    if j <= 2 * d:
        return j - d
    return int(tables.w[j - 2 * d - 1])


def mcd_candidates(dataset: Dataset, tables: McdTables, j: int,
                   mode: str = "full") -> list[EffectSpec]:
    """Candidate effects for covariance predictor j under a restriction mode."""
    if mode not in RESTRICTION_MODES:
        raise ValueError(f"unknown restriction mode {mode!r}")
    region = predictor_region(j, tables)
    eff: list[EffectSpec] = []
    if _has(dataset, "t"):
        eff.append(EffectSpec("linear", ("t",), degree=2))       # trend pair
    if _has(dataset, "dow"):
        eff.append(EffectSpec("factor", ("dow",)))
    if _has(dataset, "doy"):
        eff.append(EffectSpec("smooth-cr", ("doy",), k=(10,)))
    if _has(dataset, "tod"):
        eff.append(EffectSpec("smooth-cr", ("tod",), k=(10,)))
    if mode == "cal":
        return eff
    wsp100 = _region(dataset, "wsp100", region)
    if wsp100 and _has(dataset, "wcap"):
        eff.append(EffectSpec("varying-coefficient", (wsp100,), k=(5,), by="wcap"))
    irr = _region(dataset, "irr", region)
    if irr:
        eff.append(EffectSpec("smooth-cr", (irr,), k=(5,)))
    if mode in ("cal+ren", "diag"):
        return eff
    temp = _region(dataset, "temp", region)
    if temp:
        eff.append(EffectSpec("smooth-cr", (temp,), k=(5,)))
    rain = _region(dataset, "rain", region)
    if rain:
        eff.append(EffectSpec("smooth-cr", (rain,), k=(5,), transform="sqrt"))
    if _has(dataset, "n2ex"):
        eff.append(EffectSpec("smooth-cr", ("n2ex",), k=(5,)))
    return eff


def candidate_predictors(tables: McdTables, mode: str) -> list[int]:
    """Covariance predictors open to boosting (1-based)."""
    d = tables.d
    if mode == "diag":
        return list(range(d + 1, 2 * d + 1))
    return list(range(d + 1, tables.q + 1))


def weather_families(dataset: Dataset) -> set[str]:
    """Column names belonging to weather-forecast families."""
    names: set[str] = set()
    for fam in ("wsp100", "wsp10", "irr", "temp", "temps", "rain"):
        names.update(dataset.families.get(fam, []))
    return names
