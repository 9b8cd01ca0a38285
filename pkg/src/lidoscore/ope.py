"""Optimal-prediction-error model of occupational income scores.

Generative model (all shocks normal, mutually independent and independent of X):

    O = delta0 + delta1 * X + eta          occupational earnings potential
    y = O + gamma0 + gamma1 * X + nu       earnings
    Z = lambda0 + lambda1 * X + psi        a demographic correlated with X

so ``alpha = delta0 + gamma0`` and ``beta = delta1 + gamma1``. Regressing a
proxy for y on X gives

    E(y | occ)      ->  delta1 + gamma1 * phi1                    (ope1)
    E(y | occ, X)   ->  beta                                      (ope2)
    E(y | occ, Z)   ->  delta1 + gamma1 * (theta1 + theta2)       (ope3)

where phi and theta are precision weights of the noisy signals of X carried
by O and by Z. Occupations are a continuum in the model; simulations bin O
into equal-frequency cells to stand in for occupation codes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Mapping, NamedTuple

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class OpeParams:
    mu_X: float = 0.0
    sigma_X: float = 1.0
    delta0: float = 0.0
    delta1: float = 0.5
    gamma0: float = 0.0
    gamma1: float = 0.5
    sigma_eta: float = 1.0
    sigma_nu: float = 1.0
    lambda0: float = 0.0
    lambda1: float = 0.0
    sigma_psi: float = 1.0
    enforce_same_sign: bool = True

    def __post_init__(self):
        if not self.sigma_X > 0:
            raise ConfigError("sigma_X must be positive")
        for name in ("sigma_eta", "sigma_nu", "sigma_psi"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.enforce_same_sign and self.delta1 * self.gamma1 < 0:
            raise ConfigError("delta1 and gamma1 must have the same sign "
                              "(set enforce_same_sign=False to explore)")

    @property
    def alpha(self) -> float:
        return self.delta0 + self.gamma0

    @property
    def beta(self) -> float:
        return self.delta1 + self.gamma1

    @classmethod
    def from_dict(cls, cfg: Mapping) -> "OpeParams":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown OPE parameters: {sorted(unknown)}")
        return cls(**{k: (bool(v) if k == "enforce_same_sign" else float(v)) for k, v in cfg.items()})

    def to_dict(self) -> dict:
        return asdict(self)


class PhiWeights(NamedTuple):
    phi0: float
    phi1: float
    limit: bool  # True when a zero variance forced a limiting value


class ThetaWeights(NamedTuple):
    theta0: float
    theta1: float
    theta2: float
    limit: bool


def _precision(slope: float, sigma: float) -> float:
    """slope^2 / sigma^2, with 0/0 -> 0 and c/0 -> inf."""
    if slope == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    try:
        return (slope / sigma) ** 2
    except OverflowError:
        return math.inf


def phi_weights(params: OpeParams) -> PhiWeights:
    prior = 1.0 / params.sigma_X ** 2
    signal = _precision(params.delta1, params.sigma_eta)
    if math.isinf(signal):
        return PhiWeights(0.0, 1.0, True)
    phi1 = signal / (prior + signal)
    return PhiWeights(1.0 - phi1, phi1, False)


def theta_weights(params: OpeParams) -> ThetaWeights:
    prior = 1.0 / params.sigma_X ** 2
    occ = _precision(params.delta1, params.sigma_eta)
    demo = _precision(params.lambda1, params.sigma_psi)
    if math.isinf(occ) or math.isinf(demo):
        if math.isinf(occ) and math.isinf(demo):
            return ThetaWeights(0.0, 0.5, 0.5, True)
        return ThetaWeights(0.0, float(math.isinf(occ)), float(math.isinf(demo)), True)
    total = prior + occ + demo
    return ThetaWeights(prior / total, occ / total, demo / total, False)


def plim_ope1(params: OpeParams) -> float:
    return params.delta1 + params.gamma1 * phi_weights(params).phi1


def plim_ope2(params: OpeParams) -> float:
    return params.beta


def plim_ope3(params: OpeParams) -> float:
    th = theta_weights(params)
    return params.delta1 + params.gamma1 * (th.theta1 + th.theta2)


@dataclass
class OpeSample:
    x: np.ndarray
    z: np.ndarray
    o: np.ndarray
    y: np.ndarray
    occ_bin: np.ndarray
    n_bins: int

    def __post_init__(self):
        n = len(self.x)
        if any(len(a) != n for a in (self.z, self.o, self.y, self.occ_bin)):
            raise ValueError("sample vectors must have equal length")


def equal_frequency_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin index in [0, n_bins) by rank; ties are broken by position."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.arange(len(values))
    return (ranks * n_bins) // max(len(values), 1)


def simulate(params: OpeParams, n: int, seed: int, n_bins: int = 50) -> OpeSample:
    if n < 1:
        raise ConfigError("n must be at least 1")
    if n_bins < 1:
        raise ConfigError("n_bins must be at least 1")
    rng = np.random.default_rng(seed)
    x = rng.normal(params.mu_X, params.sigma_X, n)
    eta = rng.normal(0.0, params.sigma_eta, n)
    nu = rng.normal(0.0, params.sigma_nu, n)
    psi = rng.normal(0.0, params.sigma_psi, n)
    o = params.delta0 + params.delta1 * x + eta
    y = o + params.gamma0 + params.gamma1 * x + nu
    z = params.lambda0 + params.lambda1 * x + psi
    return OpeSample(x=x, z=z, o=o, y=y, occ_bin=equal_frequency_bins(o, n_bins), n_bins=n_bins)


def _group_means(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    sums = np.bincount(groups, weights=values, minlength=n_groups)
    counts = np.bincount(groups, minlength=n_groups)
    return (sums / np.where(counts > 0, counts, 1))[groups]


def _slope(dv: np.ndarray, x: np.ndarray) -> float:
    xc = x - x.mean()
    return float(xc @ (dv - dv.mean()) / (xc @ xc))


def proxy_values(sample: OpeSample, proxy: str) -> np.ndarray:
    """Empirical stand-in for the proxy dependent variable.

    ope1 is the bin mean of y. ope2 and ope3 are fitted values of y on bin
    dummies plus X (resp. Z), computed by the within-bin transformation.
    """
    groups = sample.occ_bin
    _, groups = np.unique(groups, return_inverse=True)
    n_groups = int(groups.max()) + 1 if len(groups) else 0
    if n_groups < sample.n_bins:
        warnings.warn(f"{sample.n_bins - n_groups} empty occupation bins merged away", stacklevel=3)
    ybar = _group_means(sample.y, groups, n_groups)
    if proxy == "ope1":
        return ybar
    if proxy not in ("ope2", "ope3"):
        raise ConfigError(f"unknown proxy {proxy!r}")
    c = sample.x if proxy == "ope2" else sample.z
    cw = c - _group_means(c, groups, n_groups)
    denom = cw @ cw
    b = 0.0 if denom == 0 else float(cw @ (sample.y - ybar) / denom)
    return ybar + b * cw


def estimate_proxy_beta(sample: OpeSample, proxy: str) -> float:
    """Slope of the proxy regressed on X."""
    return _slope(proxy_values(sample, proxy), sample.x)


def sweep(params: OpeParams, n: int, seed: int, overrides: list[dict] | None = None,
          n_bins: int = 50, threads: int = 1) -> list[dict]:
    """Closed forms and simulated estimates for each parameter cell.

    Cell ``i`` draws from a seed derived from (seed, i) only, so the table does
    not depend on scheduling.
    """
    cells = [params] if not overrides else \
        [OpeParams(**{**params.to_dict(), **ov}) for ov in overrides]
    seeds = np.random.SeedSequence(seed).spawn(len(cells))

    def run(i):
        p = cells[i]
        s = simulate(p, n, int(seeds[i].generate_state(1)[0]), n_bins)
        row = {k: v for k, v in p.to_dict().items() if k != "enforce_same_sign"}
        row.update(cell=i, n=n, beta=p.beta, plim_ope1=plim_ope1(p), plim_ope3=plim_ope3(p),
                   beta_hat_ope1=estimate_proxy_beta(s, "ope1"),
                   beta_hat_ope2=estimate_proxy_beta(s, "ope2"),
                   beta_hat_ope3=estimate_proxy_beta(s, "ope3"))
        return row

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, range(len(cells))))
    return [run(i) for i in range(len(cells))]
