"""Dummy-variable designs, QR-based OLS, cluster-robust variance, and the
descriptive statistics (weighted median, Spearman rho) used throughout.

Design columns are named by *terms*. A term is one or more atoms joined by
``:`` and each atom is one of

    ``age``          the numeric field
    ``age^2``        a power of a numeric field
    ``sex[female]``  the indicator of one level of a categorical field

so a column can be rebuilt for new records from its name alone
(:func:`term_matrix`). ``(Intercept)`` is the constant column.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as scl
import scipy.stats as scs

from .errors import ConfigError, DataError, NumericalError

INTERCEPT = "(Intercept)"
_ATOM = re.compile(r"^(?P<field>[A-Za-z_][A-Za-z0-9_]*)(?:\[(?P<level>[^\]]*)\]|\^(?P<power>\d+))?$")


def level_of(value) -> str:
    """Canonical string level of a categorical value."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def code_order(levels: Iterable[str]) -> list[str]:
    """Numeric codes numerically, then everything else lexically."""
    def key(s):
        try:
            return (0, float(s), s)
        except ValueError:
            return (1, 0.0, s)
    return sorted(set(levels), key=key)


def field_values(records: Sequence, name: str) -> list:
    return [r.get(name) if hasattr(r, "get") else r[name] for r in records]


def _numeric(records, name) -> np.ndarray:
    vals = field_values(records, name)
    try:
        return np.asarray(vals, dtype=float)
    except (TypeError, ValueError):
        raise DataError(f"field {name!r} is not numeric on every record") from None


def _levels(records, name) -> np.ndarray:
    return np.array([level_of(v) for v in field_values(records, name)], dtype=object)


def parse_atom(atom: str) -> tuple[str, str | None, int]:
    m = _ATOM.match(atom)
    if m is None:
        raise ConfigError(f"cannot parse term atom {atom!r}")
    power = int(m.group("power")) if m.group("power") else 1
    return m.group("field"), m.group("level"), power


def term_matrix(records: Sequence, terms: Sequence[str]) -> np.ndarray:
    """Evaluate named terms on records, one column per term."""
    cache: dict = {}

    def atom_column(atom):
        if atom not in cache:
            name, level, power = parse_atom(atom)
            if level is not None:
                key = ("lv", name)
                if key not in cache:
                    cache[key] = _levels(records, name)
                cache[atom] = (cache[key] == level).astype(float)
            else:
                key = ("num", name)
                if key not in cache:
                    cache[key] = _numeric(records, name)
                cache[atom] = cache[key] ** power
        return cache[atom]

    out = np.empty((len(records), len(terms)))
    for j, term in enumerate(terms):
        if term == INTERCEPT:
            out[:, j] = 1.0
            continue
        col = np.ones(len(records))
        for atom in term.split(":"):
            col = col * atom_column(atom)
        out[:, j] = col
    return out


@dataclass
class Formula:
    """Regressor specification.

    ``continuous`` holds numeric atoms (``age``, ``age^2``); ``factors`` are
    categorical fields expanded to treatment dummies; ``indicators`` are single
    level atoms (``race[white]``); ``interactions`` pair factor or indicator
    names. ``reference`` pins a factor's dropped level; otherwise the most
    frequent observed level is dropped.
    """

    continuous: list[str] = field(default_factory=list)
    factors: list[str] = field(default_factory=list)
    indicators: list[str] = field(default_factory=list)
    interactions: list[tuple[str, str]] = field(default_factory=list)
    reference: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, cfg: Mapping | None) -> "Formula":
        cfg = dict(cfg or {})
        unknown = set(cfg) - {"continuous", "factors", "indicators", "interactions", "reference"}
        if unknown:
            raise ConfigError(f"unknown formula keys: {sorted(unknown)}")
        return cls(continuous=list(cfg.get("continuous", [])),
                   factors=list(cfg.get("factors", [])),
                   indicators=list(cfg.get("indicators", [])),
                   interactions=[tuple(p) for p in cfg.get("interactions", [])],
                   reference={str(k): str(v) for k, v in (cfg.get("reference") or {}).items()})

    def to_dict(self) -> dict:
        return {"continuous": list(self.continuous), "factors": list(self.factors),
                "indicators": list(self.indicators),
                "interactions": [list(p) for p in self.interactions],
                "reference": dict(self.reference)}


@dataclass
class DesignMatrix:
    names: list[str]
    kinds: list[str]
    values: np.ndarray
    dropped_levels: dict[str, str] = field(default_factory=dict)
    levels: dict[str, list[str]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def without_intercept(self) -> tuple[np.ndarray, list[str]]:
        keep = [j for j, k in enumerate(self.kinds) if k != "intercept"]
        return self.values[:, keep], [self.names[j] for j in keep]


def _reference(levels: np.ndarray, pinned: str | None) -> tuple[list[str], str]:
    uniq, counts = np.unique(levels.astype(str), return_counts=True)
    ordered = code_order(uniq.tolist())
    if pinned is not None and pinned in ordered:
        return ordered, pinned
    count = dict(zip(uniq.tolist(), counts.tolist()))
    # most frequent; ties go to the first level in code order
    ref = max(ordered, key=lambda lv: (count[lv], -ordered.index(lv)))
    return ordered, ref


def build_design(records: Sequence, formula: Formula) -> DesignMatrix:
    """Column order: intercept, continuous, factor dummies, indicators, interactions."""
    if len(records) == 0:
        raise DataError("cannot build a design from an empty record set")
    n = len(records)
    names, kinds, cols, warnings = [INTERCEPT], ["intercept"], [np.ones(n)], []
    dropped, all_levels = {}, {}
    blocks: dict[str, list[tuple[str, np.ndarray]]] = {}

    for term in formula.continuous:
        names.append(term)
        kinds.append("continuous")
        cols.append(term_matrix(records, [term])[:, 0])

    for fac in formula.factors:
        lv = _levels(records, fac)
        ordered, ref = _reference(lv, formula.reference.get(fac))
        all_levels[fac] = ordered
        if len(ordered) < 2:
            warnings.append(f"factor {fac!r} has a single observed level and was dropped")
            blocks[fac] = []
            continue
        dropped[fac] = ref
        block = []
        for level in ordered:
            if level == ref:
                continue
            block.append((f"{fac}[{level}]", (lv == level).astype(float)))
        blocks[fac] = block
        for name, col in block:
            names.append(name)
            kinds.append("dummy")
            cols.append(col)

    for ind in formula.indicators:
        col = term_matrix(records, [ind])[:, 0]
        blocks[ind] = [(ind, col)]
        names.append(ind)
        kinds.append("dummy")
        cols.append(col)

    for a, b in formula.interactions:
        for part in (a, b):
            if part in blocks:
                continue
            # parts without a main effect: a bare indicator atom or a factor
            _, level, _ = parse_atom(part)
            if level is not None:
                blocks[part] = [(part, term_matrix(records, [part])[:, 0])]
                continue
            lv = _levels(records, part)
            ordered, ref = _reference(lv, formula.reference.get(part))
            all_levels[part] = ordered
            dropped[part] = ref
            blocks[part] = [(f"{part}[{level}]", (lv == level).astype(float))
                            for level in ordered if level != ref]
        for na, ca in blocks[a]:
            for nb, cb in blocks[b]:
                col = ca * cb
                if not col.any():
                    continue
                names.append(f"{na}:{nb}")
                kinds.append("interaction")
                cols.append(col)

    values = np.column_stack(cols)
    keep, seen = [], {}
    for j in range(values.shape[1]):
        key = values[:, j].tobytes()
        if key in seen:
            warnings.append(f"column {names[j]!r} duplicates {names[seen[key]]!r} and was dropped")
            continue
        seen[key] = j
        keep.append(j)
    if len(set(names[j] for j in keep)) != len(keep):
        raise ConfigError("formula produces duplicate column names")
    return DesignMatrix(names=[names[j] for j in keep], kinds=[kinds[j] for j in keep],
                        values=values[:, keep], dropped_levels=dropped, levels=all_levels,
                        warnings=warnings)


@dataclass
class RegressionFit:
    names: list[str]
    coef: np.ndarray
    vcov: np.ndarray
    se_type: str
    r_squared: float
    n_obs: int
    df_resid: int
    residuals: np.ndarray
    fitted: np.ndarray
    xtx_inv: np.ndarray
    cluster_var: str | None = None
    n_clusters: int | None = None
    dropped: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef.tolist()))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def tvalues(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.coef / np.where(se > 0, se, 1.0), np.nan)

    @property
    def pvalues(self) -> np.ndarray:
        t = np.abs(self.tvalues)
        if self.se_type == "cluster":
            return 2 * scs.norm.sf(t)
        return 2 * scs.t.sf(t, max(self.df_resid, 1))

    def significant(self, alpha: float = 0.05) -> np.ndarray:
        p = self.pvalues
        return np.where(np.isnan(p), False, p < alpha)

    def __getitem__(self, term: str) -> float:
        return float(self.coef[self.names.index(term)])

    def se_of(self, term: str) -> float:
        return float(self.se[self.names.index(term)])

    def to_rows(self) -> list[dict]:
        return [{"term": n, "estimate": float(b), "se": float(s), "t": float(t), "p": float(p)}
                for n, b, s, t, p in zip(self.names, self.coef, self.se, self.tvalues, self.pvalues)]

    def to_dict(self) -> dict:
        return {"terms": self.to_rows(), "vcov": self.vcov.tolist(), "se_type": self.se_type,
                "cluster_var": self.cluster_var, "n_clusters": self.n_clusters,
                "r_squared": self.r_squared, "n_obs": self.n_obs, "df_resid": self.df_resid,
                "dropped": list(self.dropped), "warnings": list(self.warnings)}


def _as_matrix(X) -> tuple[np.ndarray, list[str], list[str]]:
    if isinstance(X, DesignMatrix):
        return X.values, list(X.names), list(X.kinds)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ConfigError("design must be two dimensional")
    names = [f"x{j}" for j in range(X.shape[1])]
    kinds = ["intercept" if np.all(X[:, j] == 1.0) else "continuous" for j in range(X.shape[1])]
    return X, names, kinds


def ols_fit(X, y, weights=None, cluster_ids=None, cluster_var: str | None = None,
            rank_tol: float = 1e-10) -> RegressionFit:
    """Weighted least squares through a QR factorization.

    Columns that are (numerically) in the span of earlier columns are dropped
    with a warning, so earlier columns, the intercept first, are preferred.
    """
    Xv, names, kinds = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, p = Xv.shape
    if y.shape != (n,):
        raise DataError(f"design has {n} rows but y has shape {y.shape}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(~(w > 0)):
        raise DataError("regression weights must be positive")
    sw = np.sqrt(w)
    Xw = Xv * sw[:, None]

    R = np.linalg.qr(Xw, mode="r")
    norms = np.linalg.norm(Xw, axis=0)
    diag = np.zeros(p)
    diag[:min(n, p)] = np.abs(np.diag(R))
    keep = [j for j in range(p) if norms[j] > 0 and diag[j] > rank_tol * norms[j]]
    dropped = [names[j] for j in range(p) if j not in keep]
    if any(kinds[j] == "intercept" for j in range(p) if j not in keep):
        raise NumericalError("the intercept column is collinear with the design")
    warnings = [f"column {d!r} is collinear and was dropped" for d in dropped]
    k = len(keep)
    if n <= k:
        raise DataError(f"{n} observations cannot identify {k} coefficients")

    Q, R = np.linalg.qr(Xw[:, keep], mode="reduced")
    coef = scl.solve_triangular(R, Q.T @ (y * sw))
    rinv = scl.solve_triangular(R, np.eye(k))
    xtx_inv = rinv @ rinv.T
    fitted = Xv[:, keep] @ coef
    resid = y - fitted
    ssr = float(np.sum(w * resid ** 2))
    ybar = float(np.sum(w * y) / np.sum(w))
    sst = float(np.sum(w * (y - ybar) ** 2))
    scale = max(float(np.max(np.abs(y))), 1.0) if n else 1.0
    if sst <= (n * np.finfo(float).eps * scale) ** 2:
        r2 = 0.0
    else:
        r2 = float(min(max(1.0 - ssr / sst, 0.0), 1.0))
    sigma2 = ssr / (n - k)
    fit = RegressionFit(names=[names[j] for j in keep], coef=coef, vcov=sigma2 * xtx_inv,
                        se_type="classical", r_squared=r2, n_obs=n, df_resid=n - k,
                        residuals=resid, fitted=fitted, xtx_inv=xtx_inv, dropped=dropped,
                        warnings=warnings)
    if cluster_ids is not None:
        fit.vcov = cluster_vcov(fit, Xv[:, keep], resid, cluster_ids, weights=w)
        fit.se_type = "cluster"
        fit.cluster_var = cluster_var
        fit.n_clusters = len(np.unique(np.asarray(cluster_ids, dtype=object).astype(str)))
    return fit


def cluster_vcov(fit: RegressionFit | None, X, residuals, cluster_ids, weights=None) -> np.ndarray:
    """Cluster-robust sandwich with the (G/(G-1))((N-1)/(N-K)) correction."""
    Xv = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if isinstance(X, DesignMatrix) and fit is not None:
        Xv = np.column_stack([X.column(nm) for nm in fit.names])
    u = np.asarray(residuals, dtype=float)
    ids = np.asarray(cluster_ids, dtype=object).astype(str)
    n, k = Xv.shape
    if len(ids) != n or len(u) != n:
        raise DataError("cluster ids, residuals and design must have the same length")
    groups, inv = np.unique(ids, return_inverse=True)
    G = len(groups)
    if G < 2:
        raise DataError("cluster-robust variance needs at least two clusters")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if fit is not None and fit.xtx_inv.shape == (k, k):
        bread = fit.xtx_inv
    else:
        bread = np.linalg.inv(Xv.T @ (Xv * w[:, None]))
    scores = Xv * (w * u)[:, None]
    sums = np.zeros((G, k))
    np.add.at(sums, inv, scores)
    meat = sums.T @ sums
    c = (G / (G - 1)) * ((n - 1) / (n - k))
    v = c * bread @ meat @ bread
    return (v + v.T) / 2


def weighted_median(values, weights=None) -> float:
    """Smallest value whose cumulative weight reaches half the total.

    When the cumulative weight lands exactly on one half, the midpoint of the
    two straddling values is returned, which reproduces the usual even-n median.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DataError("weighted median of an empty set")
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != v.shape or np.any(~(w > 0)):
        raise DataError("weights must be positive and match the values")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cum = np.cumsum(w)
    half = cum[-1] / 2.0
    i = int(np.searchsorted(cum, half * (1 - 1e-12), side="left"))
    if i < len(v) - 1 and np.isclose(cum[i], half, rtol=1e-12, atol=0.0):
        return float((v[i] + v[i + 1]) / 2.0)
    return float(v[i])


def spearman_rho(x, y) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DataError("spearman_rho needs two equal-length vectors of length >= 2")
    rx = scs.rankdata(x, method="average")
    ry = scs.rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    sx, sy = np.sqrt(rx @ rx), np.sqrt(ry @ ry)
    if sx == 0 or sy == 0:
        raise DataError("spearman_rho is undefined when either input has no rank variance")
    return float(np.clip((rx @ ry) / (sx * sy), -1.0, 1.0))


def write_fit_table(path, fits: Mapping[str, RegressionFit], extra: Mapping[str, Mapping[str, float]] | None = None):
    """Flat table: model, term, estimate, se, t, p (+ optional per-term extras)."""
    extra_cols = sorted({c for m in (extra or {}).values() for row in m.values() for c in row}) \
        if extra else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["model", "term", "estimate", "se", "t", "p"] + extra_cols)
        for model, fit in fits.items():
            for row in fit.to_rows():
                ex = ((extra or {}).get(model) or {}).get(row["term"], {})
                w.writerow([model, row["term"]] + [fmt(row[c]) for c in ("estimate", "se", "t", "p")]
                           + [fmt(ex.get(c)) for c in extra_cols])


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "nan" if np.isnan(x) else repr(x)
    return str(x)


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
