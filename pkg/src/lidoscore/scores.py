"""Occupational income score tables.

Two kinds are built from a base-year sample:

* ``occscore``: the median earnings of each occupation (currency units),
  by default the count-weighted average of the male and female medians.
* ``lido``: per-industry lasso regressions of log earnings on occupation
  dummies, an age polynomial, sex, race and state indicators and six
  interaction groups, with the penalty chosen by k-fold CV. Scores are
  predicted log earnings.
"""
from __future__ import annotations

import csv
import json
import re
import warnings
import zlib
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .lasso import DEFAULT_MAX_ITER, DEFAULT_TOL, cv_select, default_grid, lambda_max
from .records import PersonRecord
from .regression import (Formula, build_design, code_order, dump_json, fmt, term_matrix,
                         weighted_median)

POOLED_KEY = "*"


@dataclass
class LidoConfig:
    age_poly_degree: int = 4
    min_industry_n: int = 30
    cv_folds: int = 10
    seed: int = 0
    by_industry: bool = True
    n_lambda: int = 100
    lambda_ratio: float = 1e-3
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    selection: str = "min"
    allow_unseen: bool = True

    def __post_init__(self):
        if not 1 <= self.age_poly_degree <= 6:
            raise ConfigError("age_poly_degree must be between 1 and 6")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        if self.min_industry_n < self.cv_folds:
            raise ConfigError("min_industry_n must be at least cv_folds")
        if self.selection not in ("min", "1se"):
            raise ConfigError("selection must be 'min' or '1se'")

    @classmethod
    def from_dict(cls, cfg: Mapping | None) -> "LidoConfig":
        cfg = dict(cfg or {})
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown lido config keys: {sorted(unknown)}")
        return cls(**cfg)


def lido_formula(age_poly_degree: int = 4) -> Formula:
    """Predictor list of one industry model."""
    return Formula(
        continuous=["age"] + [f"age^{k}" for k in range(2, age_poly_degree + 1)],
        factors=["occupation", "sex", "race", "state"],
        interactions=[("sex", "race"), ("sex", "region"), ("occupation", "sex"),
                      ("occupation", "race[white]"), ("region", "race[white]"),
                      ("region", "race[black]")],
    )


def lido_covariate_count(n_occupations: int, n_states: int, n_sexes: int = 2, n_races: int = 3,
                         n_regions: int = 4, age_poly_degree: int = 4) -> int:
    """Number of candidate regressors when every level combination is observed."""
    o, s, x, r, g = n_occupations - 1, n_states - 1, n_sexes - 1, n_races - 1, n_regions - 1
    return (o + age_poly_degree + x + r + s     # main effects
            + x * r + x * g + o * x             # sex x race, sex x region, occupation x sex
            + o + g + g)                        # occupation x white, region x white, region x black


@dataclass
class IndustryModel:
    industry: str
    n: int
    fallback: bool
    terms: list[str] = field(default_factory=list)
    coef: list[float] = field(default_factory=list)
    intercept: float = 0.0
    lambda_min: float | None = None
    n_nonzero: int = 0
    n_candidates: int = 0
    occupations: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def predict(self, records: Sequence[PersonRecord]) -> np.ndarray:
        if not self.terms:
            return np.full(len(records), self.intercept)
        return self.intercept + term_matrix(records, self.terms) @ np.asarray(self.coef)


@dataclass
class CoverageReport:
    n_records: int = 0
    n_model: int = 0
    n_fallback: int = 0
    n_null: int = 0
    reasons: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reasons"] = dict(sorted(self.reasons.items()))
        return d


@dataclass
class ScoreTable:
    kind: str
    base_year: int | None
    units: str
    occ_medians: dict[str, float] = field(default_factory=dict)
    occ_counts: dict[str, int] = field(default_factory=dict)
    industry_models: dict[str, IndustryModel] = field(default_factory=dict)
    coverage_report: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def log_scores(self, scores: Sequence[float | None]) -> list[float | None]:
        """Scores on the log scale regardless of table kind."""
        if self.units == "log":
            return list(scores)
        return [None if s is None or s <= 0 else float(np.log(s)) for s in scores]


def _base_year(records) -> int | None:
    years = Counter(r.year for r in records)
    return max(years, key=lambda y: (years[y], -y)) if years else None


def _occ_medians(records, weighting: str, min_cell: int, use_weights: bool):
    by_occ = defaultdict(list)
    for r in records:
        by_occ[r.occupation].append(r)
    medians, counts, omitted = {}, {}, []
    for occ in code_order(by_occ):
        rows = by_occ[occ]
        if len(rows) < min_cell:
            omitted.append(occ)
            continue
        w = (lambda rs: [r.weight for r in rs]) if use_weights else (lambda rs: None)
        if weighting == "pooled":
            med = weighted_median([r.earnings for r in rows], w(rows))
        else:
            parts = []
            for sex in ("male", "female"):
                cell = [r for r in rows if r.sex == sex]
                if cell:
                    size = sum(r.weight for r in cell) if use_weights else len(cell)
                    parts.append((weighted_median([r.earnings for r in cell], w(cell)), size))
            total = sum(s for _, s in parts)
            med = sum(m * s for m, s in parts) / total
        medians[occ] = float(med)
        counts[occ] = len(rows)
    return medians, counts, omitted


def build_occscore(base_records: Sequence[PersonRecord], weighting: str = "sex_weighted",
                   min_cell: int = 1, use_weights: bool = False) -> ScoreTable:
    """Median earnings per occupation from workers with positive earnings."""
    if weighting not in ("pooled", "sex_weighted"):
        raise ConfigError(f"unknown weighting {weighting!r}")
    workers = [r for r in base_records if r.earnings is not None and r.earnings > 0]
    medians, counts, omitted = _occ_medians(workers, weighting, min_cell, use_weights)
    if not medians:
        raise DataError("no occupation has enough workers with positive earnings")
    coverage = {"n_records": len(base_records), "n_workers": len(workers),
                "n_excluded_nonpositive": len(base_records) - len(workers),
                "n_occupations": len(medians), "omitted_occupations": omitted}
    return ScoreTable(kind="occscore", base_year=_base_year(workers), units="currency",
                      occ_medians=medians, occ_counts=counts, coverage_report=coverage,
                      config={"weighting": weighting, "min_cell": min_cell,
                              "use_weights": use_weights})


def industry_seed(seed: int, industry: str) -> int:
    """CV fold seed for one industry, derived only from the master seed and the code."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(industry.encode())])
    return int(ss.generate_state(1)[0])


def _fit_industry(key: str, rows: Sequence[PersonRecord], cfg: LidoConfig) -> IndustryModel:
    occupations = code_order(r.occupation for r in rows)
    if len(rows) < cfg.min_industry_n:
        return IndustryModel(industry=key, n=len(rows), fallback=True, occupations=occupations,
                             notes=[f"n={len(rows)} below min_industry_n={cfg.min_industry_n}"])
    design = build_design(rows, lido_formula(cfg.age_poly_degree))
    X, names = design.without_intercept()
    y = np.log([r.earnings for r in rows])
    keep = X.std(axis=0) > 0
    if not keep.any():
        return IndustryModel(industry=key, n=len(rows), fallback=True, occupations=occupations,
                             notes=["design is constant"])
    X, names = X[:, keep], [nm for nm, k in zip(names, keep) if k]
    grid = default_grid(lambda_max(X, y), cfg.n_lambda, cfg.lambda_ratio)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cv = cv_select(X, y, k=cfg.cv_folds, grid=grid, seed=industry_seed(cfg.seed, key),
                       tol=cfg.tol, max_iter=cfg.max_iter, names=names)
    fit = cv.fit_at(cfg.selection)
    nz = np.flatnonzero(fit.coef)
    notes = list(design.warnings)
    if not all(f.converged for f in cv.path):
        notes.append("some path points did not converge")
    return IndustryModel(industry=key, n=len(rows), fallback=False,
                         terms=[names[j] for j in nz], coef=[float(fit.coef[j]) for j in nz],
                         intercept=float(fit.intercept), lambda_min=float(fit.lambda_),
                         n_nonzero=int(len(nz)), n_candidates=len(names),
                         occupations=occupations, notes=notes)


def build_lido(base_records: Sequence[PersonRecord], config: LidoConfig | Mapping | None = None,
               threads: int = 1) -> ScoreTable:
    cfg = config if isinstance(config, LidoConfig) else LidoConfig.from_dict(config)
    workers = [r for r in base_records if r.earnings is not None and r.earnings > 0]
    groups: dict[str, list[PersonRecord]] = defaultdict(list)
    n_no_industry = 0
    for r in workers:
        if not cfg.by_industry:
            groups[POOLED_KEY].append(r)
        elif r.industry is None:
            n_no_industry += 1
        else:
            groups[r.industry].append(r)
    keys = code_order(groups)
    if not any(len(groups[k]) >= cfg.min_industry_n for k in keys):
        raise DataError(f"no industry has at least {cfg.min_industry_n} workers")
    medians, counts, _ = _occ_medians(workers, "pooled", 1, False)
    log_medians = {k: float(np.log(v)) for k, v in medians.items()}

    def fit(key):
        return _fit_industry(key, groups[key], cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            models = list(ex.map(fit, keys))
    else:
        models = [fit(k) for k in keys]
    coverage = {"n_records": len(base_records), "n_workers": len(workers),
                "n_missing_industry": n_no_industry, "n_industries": len(keys),
                "n_fallback_industries": sum(m.fallback for m in models)}
    return ScoreTable(kind="lido", base_year=_base_year(workers), units="log",
                      occ_medians=log_medians, occ_counts=counts,
                      industry_models={m.industry: m for m in models},
                      coverage_report=coverage, config=asdict(cfg))


def score_records(table: ScoreTable, records: Sequence[PersonRecord],
                  allow_unseen: bool | None = None
                  ) -> tuple[list[float | None], CoverageReport]:
    """Score each record; records that cannot be scored get ``None``, never 0."""
    report = CoverageReport(n_records=len(records))
    reasons: Counter = Counter()
    scores: list[float | None] = [None] * len(records)
    if table.kind == "occscore":
        for i, r in enumerate(records):
            v = table.occ_medians.get(r.occupation)
            if v is None:
                reasons["unseen occupation"] += 1
            else:
                scores[i] = v
                report.n_model += 1
        report.n_null = len(records) - report.n_model
        report.reasons = dict(reasons)
        return scores, report
    if table.kind != "lido":
        raise ConfigError(f"unknown score table kind {table.kind!r}")

    if allow_unseen is None:
        allow_unseen = table.config.get("allow_unseen", True)
    by_industry = table.config.get("by_industry", True)
    batches: dict[str, list[int]] = defaultdict(list)
    fallback_idx = []
    for i, r in enumerate(records):
        key = r.industry if by_industry else POOLED_KEY
        model = table.industry_models.get(key) if key is not None else None
        if model is None:
            reasons["missing industry" if key is None else "unseen industry"] += 1
            fallback_idx.append(i)
        elif model.fallback:
            fallback_idx.append(i)
        elif r.occupation in model.occupations:
            batches[key].append(i)
        elif allow_unseen:
            reasons["unseen occupation scored at reference"] += 1
            batches[key].append(i)
        else:
            reasons["unseen occupation"] += 1
    for key in code_order(batches):
        idx = batches[key]
        pred = table.industry_models[key].predict([records[i] for i in idx])
        for i, v in zip(idx, pred.tolist()):
            scores[i] = v
        report.n_model += len(idx)
    for i in fallback_idx:
        v = table.occ_medians.get(records[i].occupation)
        if v is None:
            reasons["no fallback median"] += 1
        else:
            scores[i] = v
            report.n_fallback += 1
    report.n_null = sum(s is None for s in scores)
    report.reasons = dict(reasons)
    return scores, report


def _safe_name(code: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", code) or "_"


def write_score_table(table: ScoreTable, outdir) -> list[Path]:
    """Write a table as delimited files plus ``scoretable.json``; returns the paths written."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    meta = {"kind": table.kind, "base_year": table.base_year, "units": table.units,
            "config": table.config, "coverage_report": table.coverage_report}
    if table.kind == "occscore":
        p = out / "occscore.tsv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["occupation", "median", "n"])
            for occ, med in table.occ_medians.items():
                w.writerow([occ, fmt(med), table.occ_counts.get(occ, "")])
        written.append(p)
    else:
        (out / "models").mkdir(exist_ok=True)
        files, used = {}, set()
        for key, m in table.industry_models.items():
            name = _safe_name(key)
            while name in used:
                name += "_"
            used.add(name)
            files[key] = f"models/{name}.tsv"
            p = out / files[key]
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, delimiter="\t", lineterminator="\n")
                w.writerow(["term", "coefficient"])
                w.writerow(["(Intercept)", fmt(m.intercept)])
                for t, c in zip(m.terms, m.coef):
                    w.writerow([t, fmt(c)])
            written.append(p)
        p = out / "manifest.tsv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["industry", "n", "lambda_min", "n_nonzero", "n_candidates", "fallback"])
            for key, m in table.industry_models.items():
                w.writerow([key, m.n, fmt(m.lambda_min), m.n_nonzero, m.n_candidates,
                            int(m.fallback)])
        written.append(p)
        p = out / "occ_log_medians.tsv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["occupation", "log_median", "n"])
            for occ, med in table.occ_medians.items():
                w.writerow([occ, fmt(med), table.occ_counts.get(occ, "")])
        written.append(p)
        meta["models"] = {key: {"file": files[key], "n": m.n, "fallback": m.fallback,
                                "occupations": m.occupations, "notes": m.notes,
                                "n_candidates": m.n_candidates}
                          for key, m in table.industry_models.items()}
    p = out / "scoretable.json"
    dump_json(meta, p)
    written.append(p)
    return written


def _read_tsv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def load_score_table(indir) -> ScoreTable:
    d = Path(indir)
    if not (d / "scoretable.json").exists():
        raise DataError(f"{d}: not a score table directory (no scoretable.json)")
    meta = json.loads((d / "scoretable.json").read_text())
    table = ScoreTable(kind=meta["kind"], base_year=meta["base_year"], units=meta["units"],
                       coverage_report=meta.get("coverage_report", {}),
                       config=meta.get("config", {}))
    med_file = "occscore.tsv" if table.kind == "occscore" else "occ_log_medians.tsv"
    col = "median" if table.kind == "occscore" else "log_median"
    for row in _read_tsv(d / med_file):
        table.occ_medians[row["occupation"]] = float(row[col])
        if row.get("n"):
            table.occ_counts[row["occupation"]] = int(row["n"])
    if table.kind == "lido":
        manifest = {row["industry"]: row for row in _read_tsv(d / "manifest.tsv")}
        for key, info in meta["models"].items():
            rows = _read_tsv(d / info["file"])
            intercept = float(rows[0]["coefficient"])
            lam = manifest[key]["lambda_min"]
            table.industry_models[key] = IndustryModel(
                industry=key, n=int(info["n"]), fallback=bool(info["fallback"]),
                terms=[r["term"] for r in rows[1:]],
                coef=[float(r["coefficient"]) for r in rows[1:]], intercept=intercept,
                lambda_min=float(lam) if lam else None, n_nonzero=len(rows) - 1,
                n_candidates=int(info.get("n_candidates", 0)),
                occupations=list(info["occupations"]), notes=list(info.get("notes", [])))
    return table
