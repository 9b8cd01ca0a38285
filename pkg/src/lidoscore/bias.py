"""Diagnostics of proxy-induced bias: earnings-gap regressions, conflicting-sign
(Type S) rates, coefficient-ratio (Type M) tables, ratio densities, and the
persistence of occupational income across census years.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml
from scipy.integrate import trapezoid

from .errors import ConfigError, DataError
from .records import PersonRecord
from .regression import (INTERCEPT, Formula, RegressionFit, build_design, fmt, ols_fit,
                         parse_atom, spearman_rho, weighted_median)
from .scores import ScoreTable, _occ_medians

GAP_FORMULA = Formula(continuous=["age", "age^2"], factors=["sex", "race", "state", "nativity"],
                      reference={"sex": "male", "race": "white", "nativity": "1"})
IOWA_FORMULA = Formula(continuous=["age", "age^2"], indicators=["race[black]", "sex[female]"])
SIGN_FORMULA = Formula(factors=["state", "age", "race", "sex", "birthplace", "farm_status",
                                "family_size", "marital_status", "n_families_in_household",
                                "relation_to_head"])
CATEGORY_ORDER = ("age", "state", "birthplace", "race_sex", "family_household")
OVERALL = "mean"
MAX_GRID = 200_001


def load_category_map(path: str | Path | None = None) -> dict[str, str]:
    """Field -> category mapping (YAML); the shipped default when ``path`` is None."""
    if path is None:
        text = resources.files("lidoscore").joinpath("data/categories.yaml").read_text()
    else:
        text = Path(path).read_text()
    cfg = yaml.safe_load(text)
    if not isinstance(cfg, Mapping):
        raise ConfigError("category map must be a mapping of field -> category")
    return {str(k): str(v) for k, v in cfg.items()}


def term_category(term: str, category_map: Mapping[str, str]) -> str:
    field_name, _, _ = parse_atom(term.split(":")[0])
    return category_map.get(field_name, "other")


def dv_values(records: Sequence[PersonRecord], dv: str, log: bool) -> np.ndarray:
    """DV column with NaN where it is missing (or non-positive, when logged)."""
    out = np.full(len(records), np.nan)
    for i, r in enumerate(records):
        v = r.get(dv)
        if v is None:
            continue
        if log:
            if v > 0:
                out[i] = np.log(v)
        else:
            out[i] = v
    return out


@dataclass
class GapResult:
    dv: str
    fit: RegressionFit
    implied_ratios: dict[str, float]
    n_dropped: int


def run_gap_regression(records: Sequence[PersonRecord], dv: str = "earnings",
                       formula: Formula | None = None, log_dv: bool | None = None,
                       values: Sequence[float | None] | None = None,
                       cluster_field: str | None = None) -> GapResult:
    """Regress the (log) DV on group indicators and controls.

    Every dummy term's implied group ratio is ``exp(coefficient)``. ``lido``
    scores are already logs, so by default only other DVs are logged.
    """
    formula = formula or GAP_FORMULA
    if log_dv is None:
        log_dv = dv != "lido"
    if values is not None:
        y = np.array([np.nan if v is None else v for v in values], dtype=float)
        if log_dv:
            with np.errstate(divide="ignore", invalid="ignore"):
                y = np.where(y > 0, np.log(np.where(y > 0, y, 1.0)), np.nan)
    else:
        y = dv_values(records, dv, log_dv)
    ok = np.isfinite(y)
    if not ok.any():
        raise DataError(f"dependent variable {dv!r} is missing on every record")
    rows = [r for r, k in zip(records, ok) if k]
    design = build_design(rows, formula)
    cluster = [r.get(cluster_field) for r in rows] if cluster_field else None
    fit = ols_fit(design, y[ok], cluster_ids=cluster, cluster_var=cluster_field)
    fit.warnings = design.warnings + fit.warnings
    kinds = dict(zip(design.names, design.kinds))
    ratios = {t: float(np.exp(b)) for t, b in zip(fit.names, fit.coef)
              if kinds.get(t) in ("dummy", "interaction")}
    return GapResult(dv=dv, fit=fit, implied_ratios=ratios, n_dropped=int((~ok).sum()))


@dataclass
class ComparisonRun:
    spec_name: str
    true_fit: RegressionFit
    proxy_fits: dict[str, RegressionFit]
    term_categories: dict[str, str]
    n_obs: int = 0

    def __post_init__(self):
        for name, f in self.proxy_fits.items():
            if f.names != self.true_fit.names or f.n_obs != self.true_fit.n_obs:
                raise DataError(f"proxy fit {name!r} does not share the true fit's design")

    @property
    def terms(self) -> list[str]:
        return [t for t in self.true_fit.names if t != INTERCEPT]

    def categories(self) -> list[str]:
        present = set(self.term_categories.values())
        head = [c for c in CATEGORY_ORDER if c in present]
        return head + sorted(present - set(CATEGORY_ORDER))


def build_comparison(records: Sequence[PersonRecord], dvs: Mapping[str, Sequence[float | None]],
                     true_name: str, formula: Formula | None = None,
                     cluster_field: str | None = "state",
                     category_map: Mapping[str, str] | None = None,
                     spec_name: str = "comparison") -> ComparisonRun:
    """Fit every DV (already on the log scale) on one shared design and row set."""
    formula = formula or SIGN_FORMULA
    category_map = category_map if category_map is not None else load_category_map()
    if true_name not in dvs:
        raise ConfigError(f"true DV {true_name!r} not among {sorted(dvs)}")
    Y = {k: np.array([np.nan if v is None else v for v in vals], dtype=float)
         for k, vals in dvs.items()}
    ok = np.logical_and.reduce([np.isfinite(v) for v in Y.values()])
    if not ok.any():
        raise DataError("no record has every dependent variable")
    rows = [r for r, k in zip(records, ok) if k]
    design = build_design(rows, formula)
    cluster = [r.get(cluster_field) for r in rows] if cluster_field else None
    fits = {k: ols_fit(design, v[ok], cluster_ids=cluster, cluster_var=cluster_field)
            for k, v in Y.items()}
    names = fits[true_name].names
    for k, f in fits.items():
        if f.names != names:
            raise DataError(f"fit {k!r} dropped different columns from the true fit")
    cats = {t: term_category(t, category_map) for t in names if t != INTERCEPT}
    return ComparisonRun(spec_name=spec_name, true_fit=fits[true_name],
                         proxy_fits={k: f for k, f in fits.items() if k != true_name},
                         term_categories=cats, n_obs=int(ok.sum()))


@dataclass
class CategoryTable:
    """One statistic per category plus the pooled ``mean`` row."""

    values: dict[str, float]
    counts: dict[str, int]
    notes: list[str] = field(default_factory=list)

    def __getitem__(self, category: str) -> float:
        return self.values[category]


def type_s_table(run: ComparisonRun, proxy: str, alpha: float = 0.05,
                 definition: str = "proxy_significant") -> CategoryTable:
    """Share of terms whose proxy and true coefficients have opposite signs and
    that meet the significance definition.

    The denominator is every term of the category, so the ``both_significant``
    rate never exceeds the ``proxy_significant`` rate.
    """
    if definition not in ("proxy_significant", "both_significant"):
        raise ConfigError(f"unknown Type S definition {definition!r}")
    pf = run.proxy_fits[proxy]
    tf = run.true_fit
    idx = {t: i for i, t in enumerate(tf.names)}
    p_sig, t_sig = pf.significant(alpha), tf.significant(alpha)
    conflict = {}
    for t in run.terms:
        i = idx[t]
        opposite = np.sign(pf.coef[i]) * np.sign(tf.coef[i]) < 0
        sig = p_sig[i] and (t_sig[i] or definition == "proxy_significant")
        conflict[t] = bool(opposite and sig)
    values, counts = {}, {}
    for cat in run.categories():
        terms = [t for t in run.terms if run.term_categories[t] == cat]
        values[cat] = sum(conflict[t] for t in terms) / len(terms)
        counts[cat] = len(terms)
    values[OVERALL] = sum(conflict.values()) / len(conflict) if conflict else 0.0
    counts[OVERALL] = len(conflict)
    return CategoryTable(values, counts)


def coefficient_ratios(run: ComparisonRun, proxy: str, min_abs_t: float = 0.1) -> dict[str, float]:
    """proxy / true coefficient per term, skipping terms whose true |t| < ``min_abs_t``."""
    pf, tf = run.proxy_fits[proxy], run.true_fit
    tvals = tf.tvalues
    out = {}
    for i, t in enumerate(tf.names):
        if t == INTERCEPT or not (abs(tvals[i]) >= min_abs_t) or tf.coef[i] == 0:
            continue
        out[t] = float(pf.coef[i] / tf.coef[i])
    return out


def ratio_table(run: ComparisonRun, proxy: str, min_abs_t: float = 0.1) -> CategoryTable:
    ratios = coefficient_ratios(run, proxy, min_abs_t)
    values, counts, notes = {}, {}, []
    for cat in run.categories():
        r = [v for t, v in ratios.items() if run.term_categories[t] == cat]
        if not r:
            notes.append(f"category {cat!r} has no eligible terms")
            continue
        values[cat] = float(np.mean(r))
        counts[cat] = len(r)
    if ratios:
        values[OVERALL] = float(np.mean(list(ratios.values())))
        counts[OVERALL] = len(ratios)
    return CategoryTable(values, counts, notes)


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 * min(sd, IQR / 1.34) * n^(-1/5)."""
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return float(0.9 * spread * len(x) ** (-0.2))


def kde(x, points, bandwidth: float) -> np.ndarray:
    """Gaussian kernel density of sample ``x`` evaluated at ``points``."""
    x = np.asarray(x, dtype=float)
    pts = np.asarray(points, dtype=float)
    out = np.empty(len(pts))
    norm = 1.0 / (len(x) * bandwidth * np.sqrt(2 * np.pi))
    for s in range(0, len(pts), 256):
        u = (pts[s:s + 256, None] - x[None, :]) / bandwidth
        out[s:s + 256] = np.exp(-0.5 * u * u).sum(axis=1) * norm
    return out


def ratio_density(ratios, bandwidth: float | None = None, grid_size: int = 512
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE on a grid spanning the data +/- 4 bandwidths."""
    x = np.asarray(list(ratios.values()) if isinstance(ratios, Mapping) else ratios, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) < 2:
        raise DataError("ratio density needs at least two finite ratios")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(x)
    if not h > 0:
        warnings.warn("ratios have no spread; density is a degenerate spike", stacklevel=2)
        h = 1e-3 * max(1.0, float(np.abs(x).max()))
    floor = 1e-8 * max(1.0, float(np.abs(x).max()))
    if h < floor:
        warnings.warn(f"bandwidth {h:.3g} is below float resolution of the data; using {floor:.3g}",
                      stacklevel=2)
        h = floor
    lo, hi = float(x.min() - 4 * h), float(x.max() + 4 * h)
    # at least ~8 grid points per bandwidth keeps the trapezoid rule accurate
    m = int(max(grid_size, np.ceil((hi - lo) / (h / 8.0)) + 1))
    if m <= MAX_GRID:
        grid = np.linspace(lo, hi, m)
    else:
        # clusters far apart relative to h: dense windows around each point,
        # wide enough that the kernel is negligible across the coarse gaps
        coarse = np.linspace(lo, hi, grid_size)
        k = max(4.0, float(np.sqrt(2 * np.log(1e5 * (coarse[1] - coarse[0]) / h))))
        local = np.unique(x)[:, None] + h * np.linspace(-k, k, int(16 * k) + 1)[None, :]
        grid = np.unique(np.concatenate([coarse, np.clip(local.ravel(), lo, hi)]))
    dens = kde(x, grid, h)
    area = float(trapezoid(dens, grid))
    if abs(area - 1.0) > 1e-3:
        warnings.warn(f"density integrates to {area:.6f} on its grid", stacklevel=2)
    return grid, dens


@dataclass
class PersistenceRow:
    year: int
    r_squared: float
    spearman_rho: float
    n_occupations: int


def persistence_stats(base_table: ScoreTable, records_by_year: Mapping[int, Sequence[PersonRecord]],
                      min_common: int = 3) -> list[PersistenceRow]:
    """How well base-year occupation scores track each year's occupation medians.

    R^2 comes from a regression of the year's medians on the base scores
    weighted by the year's cell sizes; rho is Spearman's rank correlation.
    """
    if base_table.kind != "occscore":
        raise ConfigError("persistence statistics need an occscore table")
    weighting = base_table.config.get("weighting", "sex_weighted")
    use_weights = base_table.config.get("use_weights", False)
    rows = []
    for year in sorted(records_by_year):
        workers = [r for r in records_by_year[year] if r.earnings is not None and r.earnings > 0]
        medians, counts, _ = _occ_medians(workers, weighting, 1, use_weights)
        common = [o for o in medians if o in base_table.occ_medians]
        if len(common) < min_common:
            warnings.warn(f"year {year}: only {len(common)} occupations in common; skipped",
                          stacklevel=2)
            continue
        base = np.array([base_table.occ_medians[o] for o in common])
        cur = np.array([medians[o] for o in common])
        w = np.array([counts[o] for o in common], dtype=float)
        fit = ols_fit(np.column_stack([np.ones(len(common)), base]), cur, weights=w)
        rows.append(PersistenceRow(year=int(year), r_squared=fit.r_squared,
                                   spearman_rho=spearman_rho(base, cur), n_occupations=len(common)))
    return rows


def write_category_tables(path, tables: Mapping[str, CategoryTable]):
    """Rows = categories (+ mean), one column per table (e.g. per year or proxy)."""
    cats = []
    for t in tables.values():
        for c in t.values:
            if c not in cats and c != OVERALL:
                cats.append(c)
    order = [c for c in CATEGORY_ORDER if c in cats] + sorted(set(cats) - set(CATEGORY_ORDER))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["category"] + list(tables))
        for c in order + [OVERALL]:
            w.writerow([c] + [fmt(t.values.get(c)) for t in tables.values()])
