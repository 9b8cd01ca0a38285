"""Synthetic census-like populations with a known earnings structure.

Each person has demographics Z. Occupational earnings potential and log
earnings follow the optimal-prediction-error layout

    O     = delta' Z + eta
    log y = c + O + gamma' Z + nu

and the occupation code is the equal-frequency bin of O (cut points are a
property of the world, so every sample drawn from it shares one code list).
Industry is the occupation code modulo ``n_industries``.

Race and sex effects are fixed; state, birthplace and household dummies get
effects of random sign in both delta and gamma, which is what lets an
occupation-only proxy flip coefficient signs.

``python -m lidoscore.synth OUTDIR`` regenerates the shipped fixtures.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .records import PersonRecord, default_regions, write_records

RACES = ("white", "black", "other")
BIRTHPLACES = ("native", "england", "germany", "ireland", "italy", "canada", "mexico", "other")
MARITAL = ("1", "2", "3", "4")          # married, single, widowed, divorced
RELATIONS = ("1", "2", "3", "4", "5")   # head, spouse, child, other relative, non-relative
RANDOM_EFFECT_FIELDS = ("state", "birthplace", "farm_status", "family_size", "marital_status",
                        "n_families_in_household", "relation_to_head")


@dataclass(frozen=True)
class SynthConfig:
    n_states: int = 20
    n_occupations: int = 60
    n_industries: int = 6
    year: int = 1950
    log_level: float = 8.0
    female_share: float = 0.3
    race_shares: tuple = (0.87, 0.10, 0.03)
    # (delta, gamma): occupational and within-occupation parts of each gap
    female: tuple = (-0.2, -0.3)
    black: tuple = (-0.2, -0.1)
    other_race: tuple = (-0.1, -0.05)
    age_min: int = 18
    age_max: int = 64
    delta_scale: float = 0.15
    gamma_scale: float = 0.25
    sigma_eta: float = 0.6
    sigma_nu: float = 0.5


def age_profile(age):
    a = np.asarray(age, dtype=float) - 18.0
    return 0.06 * a - 0.0012 * a * a


@dataclass
class World:
    config: SynthConfig
    states: list[str]
    levels: dict[str, list[str]]
    probs: dict[str, np.ndarray]
    delta: dict[str, np.ndarray]
    gamma: dict[str, np.ndarray]
    occ_cuts: np.ndarray = field(default_factory=lambda: np.empty(0))


def _spread(n, rng):
    p = rng.uniform(0.5, 1.5, n)
    return p / p.sum()


def make_world(seed: int, config: SynthConfig | None = None) -> World:
    """Effects and occupation cut points, fixed by ``seed``."""
    cfg = config or SynthConfig()
    rng = np.random.default_rng([seed, 0])
    regions = default_regions()
    all_states = sorted(regions.region_of)
    pick = rng.choice(len(all_states), size=min(cfg.n_states, len(all_states)), replace=False)
    states = [all_states[i] for i in sorted(pick)]
    levels = {
        "state": states,
        "birthplace": list(BIRTHPLACES),
        "farm_status": ["0", "1"],
        "family_size": [str(k) for k in range(1, 9)],
        "marital_status": list(MARITAL),
        "n_families_in_household": ["1", "2", "3"],
        "relation_to_head": list(RELATIONS),
    }
    probs = {k: _spread(len(v), rng) for k, v in levels.items()}
    probs["birthplace"] = np.r_[0.8, 0.2 * _spread(len(BIRTHPLACES) - 1, rng)]
    probs["farm_status"] = np.array([0.8, 0.2])
    delta, gamma = {}, {}
    for k in RANDOM_EFFECT_FIELDS:
        m = len(levels[k])
        delta[k] = rng.choice([-1.0, 1.0], m) * rng.uniform(0.2, 1.0, m) * cfg.delta_scale
        gamma[k] = rng.choice([-1.0, 1.0], m) * rng.uniform(0.2, 1.0, m) * cfg.gamma_scale
    world = World(cfg, states, levels, probs, delta, gamma)
    pilot = _draw(world, 50_000, np.random.default_rng([seed, 1]))
    world.occ_cuts = np.quantile(pilot["o"], np.arange(1, cfg.n_occupations) / cfg.n_occupations)
    return world


def _draw(world: World, n: int, rng) -> dict:
    cfg = world.config
    d = {"age": rng.integers(cfg.age_min, cfg.age_max + 1, n),
         "female": rng.random(n) < cfg.female_share,
         "race": rng.choice(len(RACES), n, p=np.asarray(cfg.race_shares))}
    for k in RANDOM_EFFECT_FIELDS:
        d[k] = rng.choice(len(world.levels[k]), n, p=world.probs[k])
    prof = age_profile(d["age"])
    o = 0.5 * prof + cfg.female[0] * d["female"]
    g = 0.5 * prof + cfg.female[1] * d["female"]
    for r, (dl, gm) in ((1, cfg.black), (2, cfg.other_race)):
        o = o + dl * (d["race"] == r)
        g = g + gm * (d["race"] == r)
    for k in RANDOM_EFFECT_FIELDS:
        o = o + world.delta[k][d[k]]
        g = g + world.gamma[k][d[k]]
    d["o"] = o + rng.normal(0.0, cfg.sigma_eta, n)
    d["log_earnings"] = cfg.log_level + d["o"] + g + rng.normal(0.0, cfg.sigma_nu, n)
    return d


def draw_population(world: World, n: int, seed: int, year: int | None = None,
                    prefix: str = "") -> list[PersonRecord]:
    cfg = world.config
    d = _draw(world, n, np.random.default_rng([seed, 2]))
    occ = np.searchsorted(world.occ_cuts, d["o"])
    regions = default_regions()
    lv = world.levels
    out = []
    for i in range(n):
        bp = lv["birthplace"][d["birthplace"][i]]
        state = lv["state"][d["state"][i]]
        out.append(PersonRecord(
            record_id=f"{prefix}{i + 1}", year=year or cfg.year, age=int(d["age"][i]),
            sex="female" if d["female"][i] else "male", race=RACES[d["race"][i]],
            state=state, region=regions.region(state), occupation=str(100 + occ[i]),
            birthplace=bp, nativity=bp == "native",
            industry=str(occ[i] % cfg.n_industries),
            earnings=round(float(np.exp(d["log_earnings"][i])), 2),
            farm_status=bool(d["farm_status"][i] == 1),
            family_size=int(lv["family_size"][d["family_size"][i]]),
            marital_status=lv["marital_status"][d["marital_status"][i]],
            n_families_in_household=int(lv["n_families_in_household"][d["n_families_in_household"][i]]),
            relation_to_head=lv["relation_to_head"][d["relation_to_head"][i]],
        ))
    return out


def linked_pair_rows(world: World, n: int, seed: int, beta1: float = 0.4,
                     years: tuple[int, int] = (1920, 1940)) -> tuple[list[str], list[list]]:
    """Father-son rows (``father_*``/``son_*`` columns) with occupational
    potential transmitted at rate ``beta1``."""
    rng = np.random.default_rng([seed, 3])
    fathers = draw_population(world, 4 * n, seed, year=years[0], prefix="f")
    fathers = [f for f in fathers if f.sex == "male" and 30 <= f.age <= 55][:n]
    sons = draw_population(world, 8 * n, seed + 1, year=years[1], prefix="s")
    sons = [s for s in sons if s.sex == "male" and 20 <= s.age <= 35]
    # son's occupation rank follows the father's with slope beta1
    f_rank = np.array([int(f.occupation) for f in fathers], dtype=float)
    s_occ = np.array(sorted({int(s.occupation) for s in sons}))
    center = s_occ.mean()
    target = center + beta1 * (f_rank - f_rank.mean()) \
        + rng.normal(0.0, np.sqrt(max(1 - beta1 ** 2, 0.0)) * f_rank.std(), len(fathers))
    by_occ: dict[int, list[PersonRecord]] = {}
    for s in sons:
        by_occ.setdefault(int(s.occupation), []).append(s)
    fields = ["record_id", "year", "age", "sex", "race", "state", "occupation", "birthplace",
              "nativity", "industry", "earnings", "relation_to_head"]
    header = [f"{p}_{f}" for p in ("father", "son") for f in fields] + \
        ["son_age_first", "son_relation_first"]
    rows = []
    for i, f in enumerate(fathers):
        code = int(s_occ[np.argmin(np.abs(s_occ - target[i]))])
        pool = by_occ[code]
        s = pool[int(rng.integers(len(pool)))]
        s = PersonRecord(**{**s.__dict__, "race": f.race, "record_id": f"s{i + 1}"})
        age_first = s.age - (years[1] - years[0])
        rel = "3" if rng.random() < 0.95 else "5"
        row = []
        for rec in (f, s):
            for name in fields:
                v = getattr(rec, name)
                row.append(int(v) if isinstance(v, bool) else v)
        rows.append(row + [age_first, rel])
    return header, rows


def write_fixtures(outdir: str | Path, seed: int = 2024):
    import csv
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    world = make_world(seed)
    write_records(out / "synthetic_base_1950.csv", draw_population(world, 3000, seed, 1950))
    write_records(out / "synthetic_1960.csv", draw_population(world, 2000, seed + 10, 1960))
    write_records(out / "synthetic_1970.csv", draw_population(world, 2000, seed + 20, 1970))
    # state-census style sample: one state, no industry, occupations in the older scheme
    iowa = [replace(r, state="IA", region="midwest", industry=None,
                    occupation=str(10 * int(r.occupation)), birthplace="", nativity=True)
            for r in draw_population(world, 1500, seed + 40, 1915)]
    write_records(out / "iowa_1915.csv", iowa)
    codes = sorted({r.occupation for r in iowa}, key=int)
    with open(out / "crosswalk_occ1940_occ1950.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["occ1940", "occ1950"])
        for k, c in enumerate(codes):
            w.writerow([c, "AMBIGUOUS" if k % 25 == 7 else str(int(c) // 10)])
    header, rows = linked_pair_rows(world, 400, seed + 30)
    with open(out / "synthetic_linked_pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def main(argv=None):
    ap = argparse.ArgumentParser(description="regenerate synthetic fixtures")
    ap.add_argument("outdir", nargs="?", default=str(Path(__file__).parent / "data"))
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args(argv)
    write_fixtures(args.outdir, args.seed)


if __name__ == "__main__":
    main()
