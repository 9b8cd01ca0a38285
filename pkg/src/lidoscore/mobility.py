"""Intergenerational transmission on linked father-son pairs, and a simulator
for the bias that correlated score errors induce in the elasticity.

Error model of the simulator (all shocks normal):

    I_son   = beta0 + beta1 * I_father + delta          true log income
    e_son   = tilde_beta0 + tilde_beta1 * e_father + nu score error
    y~      = I - e                                     observed log score

Regressing y~_son on y~_father then has probability limit

    beta1 + Cov(y~_father, (beta1 - tilde_beta1) e_father) / Var(y~_father)
  = beta1 - (beta1 - tilde_beta1) s_e^2 / (s_y^2 + s_e^2)

when the father's error is independent of his true income, so the bias
vanishes when errors are transmitted at the same rate as income.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .records import IngestReport, PersonRecord, RowParser, Schema, parse_rows, read_table
from .regression import RegressionFit, fmt, ols_fit
from .scores import ScoreTable, score_records

CHILD_RELATIONS = frozenset({"child", "son", "3", "03", "301"})
MIN_PAIRS = 10


@dataclass
class LinkedPair:
    father: PersonRecord
    son: PersonRecord
    son_age_first: int
    son_relation_first: str = ""
    father_scores: dict[str, float | None] = field(default_factory=dict)
    son_scores: dict[str, float | None] = field(default_factory=dict)

    def complete(self, kinds: Sequence[str]) -> bool:
        return all(self.father_scores.get(k) is not None and self.son_scores.get(k) is not None
                   for k in kinds)


def load_linked_pairs(path: str | Path, schema: Schema, threads: int = 1,
                      father_prefix: str = "father_", son_prefix: str = "son_"
                      ) -> tuple[list[LinkedPair], IngestReport]:
    """One pair per row: ``father_*`` and ``son_*`` column groups share ``schema``.

    The son's age in the first census comes from ``son_age_first`` when that
    column exists, otherwise from his age less the years between censuses.
    His relationship to the first-census household head is ``son_relation_first``.
    """
    header, rows = read_table(path, schema.delimiter)
    fparse = RowParser(schema.prefixed(father_prefix), header)
    sparse = RowParser(schema.prefixed(son_prefix), header)
    idx = {h: i for i, h in enumerate(header)}
    age_col, rel_col = idx.get(son_prefix + "age_first"), idx.get(son_prefix + "relation_first")
    pairs, reasons = [], Counter()
    report = IngestReport(n_rows=len(rows))
    for (line, f, fr), (_, s, sr) in zip(parse_rows(fparse, rows, threads),
                                         parse_rows(sparse, rows, threads)):
        if f is None or s is None:
            reason = f"father: {fr}" if f is None else f"son: {sr}"
            reasons[reason] += 1
            report.rejected_lines.append((line, reason))
            continue
        row = rows[line - 2]
        age_first = s.age - (s.year - f.year)
        if age_col is not None and age_col < len(row) and row[age_col].strip():
            try:
                age_first = int(float(row[age_col]))
            except ValueError:
                reasons["son: unparseable value"] += 1
                report.rejected_lines.append((line, "son: unparseable value"))
                continue
        rel = row[rel_col].strip() if rel_col is not None and rel_col < len(row) else ""
        pairs.append(LinkedPair(father=f, son=s, son_age_first=age_first, son_relation_first=rel))
    report.n_parsed = len(pairs)
    report.n_rejected = len(rows) - len(pairs)
    report.reasons = dict(sorted(reasons.items()))
    return pairs, report


def eligible_pairs(pairs: Sequence[LinkedPair], max_age: int = 15,
                   child_relations: frozenset[str] = CHILD_RELATIONS
                   ) -> tuple[list[LinkedPair], dict[str, int]]:
    """Male sons who were children of the head and at most ``max_age`` in the first census."""
    kept, counts = [], {"sex": 0, "age": 0, "relation": 0}
    for p in pairs:
        if p.son.sex != "male":
            counts["sex"] += 1
        elif p.son_age_first > max_age or p.son_age_first < 0:
            counts["age"] += 1
        elif p.son_relation_first.lower() not in child_relations:
            counts["relation"] += 1
        else:
            kept.append(p)
    return kept, counts


def score_pairs(pairs: Sequence[LinkedPair], tables: Mapping[str, ScoreTable]) -> dict[str, dict]:
    """Attach log scores of every table to both generations; returns coverage per kind."""
    coverage = {}
    for kind, table in tables.items():
        fs, frep = score_records(table, [p.father for p in pairs])
        ss, srep = score_records(table, [p.son for p in pairs])
        for p, a, b in zip(pairs, table.log_scores(fs), table.log_scores(ss)):
            p.father_scores[kind] = a
            p.son_scores[kind] = b
        coverage[kind] = {"father": frep.to_dict(), "son": srep.to_dict()}
    return coverage


def estimate_elasticity(pairs: Sequence[LinkedPair], score_kind: str,
                        require_kinds: Sequence[str] | None = None) -> RegressionFit:
    """OLS of the son's log score on the father's.

    The sample is restricted to pairs complete on every kind in
    ``require_kinds`` (default: every kind attached to the pairs) so that
    elasticities under different scores are computed on the same pairs.
    """
    if require_kinds is None:
        kinds = set()
        for p in pairs:
            kinds |= set(p.father_scores) | set(p.son_scores)
        require_kinds = sorted(kinds)
    kinds = list(require_kinds) + ([score_kind] if score_kind not in require_kinds else [])
    rows = [p for p in pairs if p.complete(kinds)]
    if len(rows) < MIN_PAIRS:
        raise DataError(f"only {len(rows)} complete pairs (need {MIN_PAIRS})")
    x = np.array([p.father_scores[score_kind] for p in rows], dtype=float)
    y = np.array([p.son_scores[score_kind] for p in rows], dtype=float)
    fit = ols_fit(np.column_stack([np.ones(len(x)), x]), y)
    fit.names = ["(Intercept)", f"father_{score_kind}"]
    return fit


def elasticity_grid(pair_sets: Mapping[str, Sequence[LinkedPair]], kinds: Sequence[str]
                    ) -> dict[str, dict[str, RegressionFit]]:
    """kind -> census-pair label -> fit, each column on its own complete-case sample."""
    return {k: {label: estimate_elasticity(pairs, k, require_kinds=kinds)
                for label, pairs in pair_sets.items()} for k in kinds}


def write_elasticity_grid(path, grid: Mapping[str, Mapping[str, RegressionFit]]):
    """Rows = score kinds; per census pair an estimate, se and n column."""
    labels = []
    for cols in grid.values():
        labels += [c for c in cols if c not in labels]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["score"] + [f"{c}_{s}" for c in labels for s in ("estimate", "se", "n")])
        for kind, cols in grid.items():
            row = [kind]
            for c in labels:
                f = cols.get(c)
                row += ["", "", ""] if f is None else [fmt(f.coef[1]), fmt(f.se[1]), f.n_obs]
            w.writerow(row)


@dataclass(frozen=True)
class MobilityErrorParams:
    beta0: float = 0.0
    beta1: float = 0.5
    tilde_beta0: float = 0.0
    tilde_beta1: float = 0.5
    sigma_father_y: float = 1.0
    sigma_e_father: float = 1.0
    sigma_nu: float = 0.5
    sigma_delta: float = 0.5
    check_beta1: bool = True

    def __post_init__(self):
        for f in ("sigma_father_y", "sigma_e_father", "sigma_nu", "sigma_delta"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be nonnegative")
        if self.check_beta1 and not 0.0 <= self.beta1 <= 1.0:
            raise ConfigError("beta1 must lie in [0, 1] (set check_beta1=False to explore)")

    @classmethod
    def from_dict(cls, cfg: Mapping) -> "MobilityErrorParams":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown mobility parameters: {sorted(unknown)}")
        return cls(**{k: (bool(v) if k == "check_beta1" else float(v)) for k, v in cfg.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MobilityBiasResult:
    beta_hat: float
    se: float
    plim: float
    covariance_term: float   # Cov(y~_father, (beta1 - tilde_beta1) e_father)
    n: int

    @property
    def note(self) -> str:
        c = self.covariance_term
        sign = "zero" if c == 0 else ("negative" if c < 0 else "positive")
        return f"covariance term {sign} ({c:.6g}); analytic plim {self.plim:.6g}"


def mobility_plim(params: MobilityErrorParams) -> tuple[float, float]:
    """(analytic plim of the proxy elasticity, covariance term)."""
    gap = params.beta1 - params.tilde_beta1
    var_e = params.sigma_e_father ** 2
    cov = -gap * var_e
    var_proxy = params.sigma_father_y ** 2 + var_e
    if var_proxy == 0:
        return float("nan"), cov
    return params.beta1 + cov / var_proxy, cov


def simulate_mobility_bias(params: MobilityErrorParams, n: int, seed: int) -> MobilityBiasResult:
    if n < 100:
        raise ConfigError("n must be at least 100")
    if params.sigma_father_y == 0 and params.sigma_e_father == 0:
        raise ConfigError("father proxy has no variance")
    rng = np.random.default_rng(seed)
    income_f = rng.normal(0.0, params.sigma_father_y, n)
    e_f = rng.normal(0.0, params.sigma_e_father, n)
    delta = rng.normal(0.0, params.sigma_delta, n)
    nu = rng.normal(0.0, params.sigma_nu, n)
    income_s = params.beta0 + params.beta1 * income_f + delta
    e_s = params.tilde_beta0 + params.tilde_beta1 * e_f + nu
    proxy_f, proxy_s = income_f - e_f, income_s - e_s
    fit = ols_fit(np.column_stack([np.ones(n), proxy_f]), proxy_s)
    plim, cov = mobility_plim(params)
    return MobilityBiasResult(beta_hat=float(fit.coef[1]), se=float(fit.se[1]), plim=plim,
                              covariance_term=cov, n=n)


def mobility_sweep(params: MobilityErrorParams, n: int, seed: int,
                   overrides: list[dict] | None = None, threads: int = 1) -> list[dict]:
    """One row per parameter cell; cell ``i`` uses a seed derived from (seed, i)."""
    cells = [params] if not overrides else \
        [MobilityErrorParams(**{**params.to_dict(), **ov}) for ov in overrides]
    seeds = np.random.SeedSequence(seed).spawn(len(cells))

    def run(i):
        p = cells[i]
        r = simulate_mobility_bias(p, n, int(seeds[i].generate_state(1)[0]))
        row = {k: v for k, v in p.to_dict().items() if k != "check_beta1"}
        row.update(cell=i, n=n, beta_hat=r.beta_hat, se=r.se, plim=r.plim,
                   covariance_term=r.covariance_term)
        return row

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, range(len(cells))))
    return [run(i) for i in range(len(cells))]
