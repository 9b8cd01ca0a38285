"""Command-line front end: ``lidoscore VERB [options]``.

Parameters come from defaults, then an optional YAML ``--config`` (top-level
keys, overlaid by a section named after the verb), then ``--set KEY=VALUE``
pairs, then verb flags. Each run writes its tables and a ``manifest.json``
into ``--out``; outputs are staged in a temporary directory and moved in
only when the verb succeeds.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure. Failures print one JSON line to stderr.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import os
import platform
import shutil
import sys
import tempfile
import warnings
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from scipy.integrate import trapezoid

from . import __version__
from .bias import (GAP_FORMULA, IOWA_FORMULA, OVERALL, SIGN_FORMULA, build_comparison,
                   coefficient_ratios, load_category_map, persistence_stats, ratio_density,
                   ratio_table, run_gap_regression, type_s_table, write_category_tables)
from .errors import ConfigError, DataError, LidoError, NumericalError
from .mobility import (MobilityErrorParams, eligible_pairs, elasticity_grid, load_linked_pairs,
                       mobility_sweep, score_pairs, write_elasticity_grid)
from .ope import OpeParams, sweep
from .records import (FilterSpec, Schema, apply_crosswalk, default_schema, filter_sample,
                      load_crosswalk, load_microdata, write_records)
from .regression import Formula, dump_json, fmt, write_fit_table
from .scores import (LidoConfig, build_lido, build_occscore, industry_seed, load_score_table,
                     score_records, write_score_table)

DEFAULTS = {
    "ingest": {"input": None, "schema": None, "filter": {}},
    "crosswalk": {"input": None, "schema": None, "crosswalk": None, "scheme": None},
    "build-scores": {"input": None, "schema": None, "kind": "occscore",
                     "occscore": {"weighting": "sex_weighted", "min_cell": 1, "use_weights": False},
                     "lido": {}},
    "score": {"input": None, "schema": None, "scores": None},
    "simulate-ope": {"params": {}, "sweep": [], "n": 200_000, "n_bins": 50},
    "gaps": {"input": None, "schema": None, "scores": {}, "formula": "gap", "cluster": None},
    "type-s": {"input": {}, "schema": None, "scores": {}, "formula": "sign", "alpha": 0.05,
               "definition": "proxy_significant", "cluster": "state", "categories": None},
    "ratios": {"input": {}, "schema": None, "scores": {}, "formula": "sign", "min_abs_t": 0.1,
               "cluster": "state", "categories": None},
    "density": {"input": {}, "schema": None, "scores": {}, "formula": "sign", "min_abs_t": 0.1,
                "cluster": "state", "categories": None, "bandwidth": None, "grid_size": 512},
    "persistence": {"base_scores": None, "input": {}, "schema": None, "min_common": 3},
    "mobility": {"pairs": {}, "schema": None, "scores": {}, "max_son_age": 15},
    "mobility-sim": {"params": {}, "sweep": [], "n": 100_000},
}
NAMED_FORMULAS = {"gap": GAP_FORMULA, "iowa": IOWA_FORMULA, "sign": SIGN_FORMULA}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _pairs(values):
    """['a=x', 'b=y'] -> {'a': 'x', 'b': 'y'}"""
    out = {}
    for v in values or []:
        if "=" not in v:
            raise ConfigError(f"expected LABEL=VALUE, got {v!r}")
        k, val = v.split("=", 1)
        out[k] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lidoscore", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"lidoscore {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in DEFAULTS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="YAML parameter file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path; YAML value)")
        if verb in ("ingest", "crosswalk", "build-scores", "score", "gaps"):
            p.add_argument("--input")
        if verb in ("type-s", "ratios", "density", "persistence"):
            p.add_argument("--input", action="append", metavar="LABEL=PATH")
        if verb not in ("simulate-ope", "mobility-sim"):
            p.add_argument("--schema")
        if verb in ("gaps", "type-s", "ratios", "density", "mobility"):
            p.add_argument("--scores", action="append", metavar="KIND=DIR")
        if verb in ("simulate-ope", "mobility-sim"):
            p.add_argument("--params", help="YAML with 'params' and optional 'sweep'")
            p.add_argument("--n", type=int)
        if verb == "ingest":
            p.add_argument("--age-min", type=int)
            p.add_argument("--age-max", type=int)
            p.add_argument("--require-positive-earnings", action="store_true", default=None)
            p.add_argument("--require-labor-force", action="store_true", default=None)
            p.add_argument("--exclude-race", action="append")
        elif verb == "crosswalk":
            p.add_argument("--crosswalk")
            p.add_argument("--scheme")
        elif verb == "build-scores":
            p.add_argument("--kind", choices=["occscore", "lido"])
        elif verb == "score":
            p.add_argument("--scores")
        elif verb == "simulate-ope":
            p.add_argument("--n-bins", type=int)
        elif verb == "gaps":
            p.add_argument("--formula")
        elif verb == "type-s":
            p.add_argument("--alpha", type=float)
            p.add_argument("--definition", choices=["proxy_significant", "both_significant"])
        elif verb in ("ratios", "density"):
            p.add_argument("--min-abs-t", type=float)
            if verb == "density":
                p.add_argument("--bandwidth", type=float)
        elif verb == "persistence":
            p.add_argument("--base-scores")
        elif verb == "mobility":
            p.add_argument("--pairs", action="append", metavar="LABEL=PATH")
    return ap


def _set_dotted(cfg, key, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p!r} is not a mapping")
    node[parts[-1]] = value


def _merge(base, over):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _read_yaml(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({str(e).splitlines()[0]})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return data


def resolve_config(args) -> dict:
    verb = args.verb
    cfg = copy.deepcopy(DEFAULTS[verb])
    cfg["seed"] = 0
    if args.config:
        raw = _read_yaml(args.config)
        section = raw.pop(verb, None) or {}
        for other in DEFAULTS:
            raw.pop(other, None)
        # a shared file may carry top-level keys meant for other verbs
        known_elsewhere = set().union(*DEFAULTS.values())
        stray = set(raw) - known_elsewhere - {"seed"}
        if stray:
            raise ConfigError(f"unknown config keys: {sorted(stray)}")
        _merge(cfg, {k: v for k, v in raw.items() if k in DEFAULTS[verb] or k == "seed"})
        _merge(cfg, section)
    if verb in ("simulate-ope", "mobility-sim") and args.params:
        raw = _read_yaml(args.params)
        _merge(cfg, {k: raw[k] for k in ("params", "sweep", "n", "n_bins") if k in raw})
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _set_dotted(cfg, k, yaml.safe_load(v))
    flags = {k: v for k, v in vars(args).items()
             if k not in ("verb", "config", "out", "threads", "set", "params") and v is not None}
    for k in ("input", "scores", "pairs"):
        if k in flags and isinstance(flags[k], list):
            flags[k] = _pairs(flags[k])
    filt = {k: flags.pop(k) for k in ("age_min", "age_max", "require_positive_earnings",
                                       "require_labor_force", "exclude_race") if k in flags}
    if filt:
        if "exclude_race" in filt:
            filt["exclude_races"] = filt.pop("exclude_race")
        cfg.setdefault("filter", {}).update(filt)
    if "kind" in flags and verb == "build-scores":
        cfg["kind"] = flags.pop("kind")
    cfg.update(flags)
    unknown = set(cfg) - set(DEFAULTS[verb]) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown keys for {verb}: {sorted(unknown)}")
    return cfg


class Context:
    def __init__(self, threads: int):
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        self.threads = threads
        self.seeds: dict = {}
        self.inputs: dict = {}
        self.notes: list[str] = []

    def input(self, path, role: str) -> Path:
        if path is None:
            raise ConfigError(f"missing required input: {role}")
        p = Path(path)
        if not p.exists():
            raise DataError(f"{p}: no such file or directory")
        # a directory's own run manifest carries a timestamp, so it is not hashed
        files = sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json") \
            if p.is_dir() else [p]
        h = hashlib.sha256()
        for q in files:
            h.update(q.relative_to(p).as_posix().encode() if p.is_dir() else b"")
            h.update(q.read_bytes())
        self.inputs[role] = {"path": str(path), "sha256": h.hexdigest()}
        return p


def data_path(name: str) -> Path:
    """Path of a file shipped in the package's data directory."""
    return Path(str(resources.files("lidoscore").joinpath("data", name)))


def _schema(cfg, ctx) -> Schema:
    if cfg.get("schema"):
        return Schema.from_file(ctx.input(cfg["schema"], "schema"))
    return default_schema()


def _records(cfg, ctx, path, role):
    recs, report = load_microdata(ctx.input(path, role), _schema(cfg, ctx), ctx.threads)
    if report.n_rejected:
        ctx.notes.append(f"{role}: {report.n_rejected} rows rejected {report.reasons}")
    return recs


def _tables(cfg, ctx) -> dict:
    scores = cfg.get("scores") or {}
    if not isinstance(scores, dict):
        raise ConfigError("scores must map KIND to a score table directory")
    return {k: load_score_table(ctx.input(d, f"scores:{k}")) for k, d in scores.items()}


def _formula(spec) -> Formula:
    if isinstance(spec, str):
        if spec not in NAMED_FORMULAS:
            raise ConfigError(f"unknown formula {spec!r}; use one of {sorted(NAMED_FORMULAS)} "
                              "or a mapping")
        return NAMED_FORMULAS[spec]
    return Formula.from_dict(spec)


def _write_rows(path, rows: list[dict]):
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([fmt(r[c]) for c in cols])


# verbs ---------------------------------------------------------------------

def cmd_ingest(cfg, out, ctx):
    schema = _schema(cfg, ctx)
    recs, report = load_microdata(ctx.input(cfg["input"], "input"), schema, ctx.threads)
    kept, counts = filter_sample(recs, FilterSpec.from_dict(cfg.get("filter") or {}))
    write_records(out / "records.csv", kept)
    rep = report.to_dict()
    rep["filter_excluded"] = counts
    rep["n_kept"] = len(kept)
    dump_json(rep, out / "ingest_report.json")
    return {"n_rows": report.n_rows, "n_kept": len(kept)}


def cmd_crosswalk(cfg, out, ctx):
    cw = load_crosswalk(ctx.input(cfg["crosswalk"], "crosswalk"))
    recs = _records(cfg, ctx, cfg["input"], "input")
    scheme = cfg.get("scheme") or cw.source_scheme
    mapped, report = apply_crosswalk(recs, cw, scheme)
    write_records(out / "records.csv", mapped)
    dump_json(report, out / "crosswalk_report.json")
    return report


def cmd_build_scores(cfg, out, ctx):
    recs = _records(cfg, ctx, cfg["input"], "input")
    kind = cfg["kind"]
    if kind == "occscore":
        table = build_occscore(recs, **cfg.get("occscore", {}))
    elif kind == "lido":
        lcfg = LidoConfig.from_dict({"seed": cfg["seed"], **(cfg.get("lido") or {})})
        table = build_lido(recs, lcfg, threads=ctx.threads)
        ctx.seeds["cv_folds"] = {"master": lcfg.seed, "per_industry": {
            k: industry_seed(lcfg.seed, k) for k, m in table.industry_models.items()
            if not m.fallback}}
    else:
        raise ConfigError(f"unknown score kind {kind!r}")
    write_score_table(table, out)
    summary = {"kind": kind, **{k: v for k, v in table.coverage_report.items()
                                if not isinstance(v, list)}}
    if kind == "lido":
        summary["models"] = {k: {"n": m.n, "fallback": m.fallback, "lambda_min": m.lambda_min,
                                 "n_nonzero": m.n_nonzero, "n_candidates": m.n_candidates}
                             for k, m in table.industry_models.items()}
    return summary


def cmd_score(cfg, out, ctx):
    table = load_score_table(ctx.input(cfg["scores"], "scores"))
    recs = _records(cfg, ctx, cfg["input"], "input")
    scores, report = score_records(table, recs)
    logs = table.log_scores(scores)
    with open(out / "scores.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["record_id", "score", "log_score"])
        for r, s, ls in zip(recs, scores, logs):
            w.writerow([r.record_id, fmt(s), fmt(ls)])
    dump_json(report.to_dict(), out / "coverage.json")
    return report.to_dict()


def cmd_simulate_ope(cfg, out, ctx):
    params = OpeParams.from_dict(cfg.get("params") or {})
    n, seed = int(cfg["n"]), int(cfg["seed"])
    rows = sweep(params, n, seed, overrides=cfg.get("sweep") or None,
                 n_bins=int(cfg["n_bins"]), threads=ctx.threads)
    cells = np.random.SeedSequence(seed).spawn(len(rows))
    ctx.seeds["cells"] = {"master": seed,
                          "per_cell": [int(c.generate_state(1)[0]) for c in cells]}
    _write_rows(out / "ope_sweep.tsv", rows)
    return {"n_cells": len(rows)}


def _score_dvs(recs, tables):
    dvs = {"earnings": [None if r.earnings is None or r.earnings <= 0 else float(np.log(r.earnings))
                        for r in recs]}
    for kind, table in tables.items():
        s, _ = score_records(table, recs)
        dvs[kind] = table.log_scores(s)
    return dvs


def cmd_gaps(cfg, out, ctx):
    recs = _records(cfg, ctx, cfg["input"], "input")
    tables = _tables(cfg, ctx)
    formula = _formula(cfg["formula"])
    fits, extra, summary = {}, {}, {}
    for dv, values in _score_dvs(recs, tables).items():
        res = run_gap_regression(recs, dv, formula, log_dv=False, values=values,
                                 cluster_field=cfg.get("cluster"))
        fits[dv] = res.fit
        extra[dv] = {t: {"implied_ratio": v} for t, v in res.implied_ratios.items()}
        summary[dv] = {"n_obs": res.fit.n_obs, "n_dropped": res.n_dropped,
                       "warnings": res.fit.warnings}
    write_fit_table(out / "gap_fits.tsv", fits, extra)
    dump_json(summary, out / "gap_summary.json")
    return {"models": list(fits)}


def _runs(cfg, ctx):
    inputs = cfg.get("input") or {}
    if not isinstance(inputs, dict) or not inputs:
        raise ConfigError("input must map LABEL to a records file")
    tables = _tables(cfg, ctx)
    if not tables:
        raise ConfigError("at least one --scores KIND=DIR is required")
    cats = load_category_map(ctx.input(cfg["categories"], "categories")
                             if cfg.get("categories") else None)
    formula = _formula(cfg["formula"])
    runs = {}
    for label, path in inputs.items():
        recs = _records(cfg, ctx, path, f"input:{label}")
        runs[label] = build_comparison(recs, _score_dvs(recs, tables), "earnings", formula,
                                       cluster_field=cfg.get("cluster"), category_map=cats,
                                       spec_name=label)
    return runs, list(tables)


def cmd_type_s(cfg, out, ctx):
    runs, proxies = _runs(cfg, ctx)
    tabs = {f"{label}:{p}": type_s_table(run, p, float(cfg["alpha"]), cfg["definition"])
            for label, run in runs.items() for p in proxies}
    write_category_tables(out / "type_s.tsv", tabs)
    return {k: t.values[OVERALL] for k, t in tabs.items()}


def cmd_ratios(cfg, out, ctx):
    runs, proxies = _runs(cfg, ctx)
    tabs = {f"{label}:{p}": ratio_table(run, p, float(cfg["min_abs_t"]))
            for label, run in runs.items() for p in proxies}
    write_category_tables(out / "ratios.tsv", tabs)
    notes = {k: t.notes for k, t in tabs.items() if t.notes}
    if notes:
        dump_json(notes, out / "ratios_notes.json")
    return {k: t.values.get(OVERALL) for k, t in tabs.items()}


def cmd_density(cfg, out, ctx):
    runs, proxies = _runs(cfg, ctx)
    summary = {}
    with open(out / "term_ratios.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["input", "proxy", "term", "category", "ratio"])
        for label, run in runs.items():
            for p in proxies:
                ratios = coefficient_ratios(run, p, float(cfg["min_abs_t"]))
                for t, v in ratios.items():
                    w.writerow([label, p, t, run.term_categories[t], fmt(v)])
                x, d = ratio_density(ratios, cfg.get("bandwidth"), int(cfg["grid_size"]))
                _write_rows(out / f"density_{label}_{p}.tsv",
                            [{"x": float(a), "density": float(b)} for a, b in zip(x, d)])
                summary[f"{label}:{p}"] = {"n_ratios": len(ratios),
                                           "integral": float(trapezoid(d, x))}
    dump_json(summary, out / "density_summary.json")
    return summary


def cmd_persistence(cfg, out, ctx):
    base = load_score_table(ctx.input(cfg["base_scores"], "base_scores"))
    inputs = cfg.get("input") or {}
    if not inputs:
        raise ConfigError("input must map YEAR to a records file")
    by_year = {}
    for label, path in inputs.items():
        try:
            year = int(label)
        except ValueError:
            raise ConfigError(f"persistence input labels must be years, got {label!r}") from None
        by_year[year] = _records(cfg, ctx, path, f"input:{label}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = persistence_stats(base, by_year, int(cfg["min_common"]))
    ctx.notes += [str(w.message) for w in caught]
    _write_rows(out / "persistence.tsv", [r.__dict__ for r in rows])
    return {"years": [r.year for r in rows]}


def cmd_mobility(cfg, out, ctx):
    if cfg.get("schema"):
        schema = _schema(cfg, ctx)
    else:
        schema = Schema.from_file(data_path("schema_linked.yaml"))
    tables = _tables(cfg, ctx)
    if not tables:
        raise ConfigError("at least one --scores KIND=DIR is required")
    pair_sets, coverage = {}, {}
    for label, path in (cfg.get("pairs") or {}).items():
        pairs, report = load_linked_pairs(ctx.input(path, f"pairs:{label}"), schema, ctx.threads)
        pairs, excluded = eligible_pairs(pairs, int(cfg["max_son_age"]))
        coverage[label] = {"ingest": report.to_dict(), "excluded": excluded,
                           "scores": score_pairs(pairs, tables)}
        pair_sets[label] = pairs
    if not pair_sets:
        raise ConfigError("pairs must map LABEL to a linked-pair file")
    grid = elasticity_grid(pair_sets, list(tables))
    write_elasticity_grid(out / "mobility.tsv", grid)
    dump_json(coverage, out / "mobility_coverage.json")
    return {k: {c: float(f.coef[1]) for c, f in cols.items()} for k, cols in grid.items()}


def cmd_mobility_sim(cfg, out, ctx):
    params = MobilityErrorParams.from_dict(cfg.get("params") or {})
    n, seed = int(cfg["n"]), int(cfg["seed"])
    rows = mobility_sweep(params, n, seed, overrides=cfg.get("sweep") or None,
                          threads=ctx.threads)
    cells = np.random.SeedSequence(seed).spawn(len(rows))
    ctx.seeds["cells"] = {"master": seed,
                          "per_cell": [int(c.generate_state(1)[0]) for c in cells]}
    _write_rows(out / "mobility_sim.tsv", rows)
    return {"n_cells": len(rows)}


COMMANDS = {
    "ingest": cmd_ingest, "crosswalk": cmd_crosswalk, "build-scores": cmd_build_scores,
    "score": cmd_score, "simulate-ope": cmd_simulate_ope, "gaps": cmd_gaps,
    "type-s": cmd_type_s, "ratios": cmd_ratios, "density": cmd_density,
    "persistence": cmd_persistence, "mobility": cmd_mobility, "mobility-sim": cmd_mobility_sim,
}


def _versions():
    import numba
    import scipy
    return {"lidoscore": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
            "pyyaml": yaml.__version__}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    ctx = Context(args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            summary = COMMANDS[args.verb](cfg, stage, ctx)
        outputs = sorted(p.relative_to(stage).as_posix() for p in stage.rglob("*") if p.is_file())
        manifest = {
            "verb": args.verb, "config": cfg, "seeds": {"seed": cfg["seed"], **ctx.seeds},
            "inputs": ctx.inputs, "outputs": outputs, "summary": summary,
            "warnings": sorted(set(str(w.message) for w in caught) | set(ctx.notes)),
            "versions": _versions(),
            # the only fields allowed to differ between repeated runs
            "runtime": {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                        "threads": ctx.threads},
        }
        dump_json(manifest, stage / "manifest.json")
        out.mkdir(exist_ok=True)
        for p in sorted(stage.rglob("*")):
            target = out / p.relative_to(stage)
            if p.is_dir():
                target.mkdir(exist_ok=True)
            else:
                os.replace(p, target)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return 0


def main(argv=None) -> int:
    try:
        code = run(argv)
    except LidoError as e:
        print(json.dumps({"error": e.kind, "exit_code": e.exit_code, "message": str(e)}),
              file=sys.stderr)
        code = e.exit_code
    except np.linalg.LinAlgError as e:
        err = NumericalError(str(e))
        print(json.dumps({"error": err.kind, "exit_code": err.exit_code, "message": str(e)}),
              file=sys.stderr)
        code = err.exit_code
    except (OSError, ValueError, KeyError, TypeError) as e:
        print(json.dumps({"error": "config", "exit_code": 1,
                          "message": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        code = 1
    return code


if __name__ == "__main__":
    sys.exit(main())
