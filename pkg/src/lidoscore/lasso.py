"""Lasso by cyclic coordinate descent, with warm-started regularization paths
and k-fold cross-validation for choosing the penalty.

The problem solved at each penalty ``lam`` is

    minimize  (1 / 2n) * ||y - b0 - Xs @ b||^2 + lam * ||b||_1

on internally standardized columns ``Xs`` (centered, unit population
variance). The intercept is never penalized. Coefficients are reported on the
original column scale.
"""
from __future__ import annotations

import csv
import warnings as _warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, DataError
from .regression import INTERCEPT, DesignMatrix, fmt

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10_000
DEFAULT_N_LAMBDA = 100
DEFAULT_LAMBDA_RATIO = 1e-3
GRAM_MAX_P = 2000  # above this the n x p residual updates are used


def soft_threshold(z: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return float(np.sign(z) * max(abs(z) - gamma, 0.0))


@njit(cache=True, nogil=True)
def _objective(r, beta, lam, n):
    rss = 0.0
    for i in range(r.shape[0]):
        rss += r[i] * r[i]
    l1 = 0.0
    for j in range(beta.shape[0]):
        l1 += abs(beta[j])
    return rss / (2.0 * n) + lam * l1


@njit(cache=True, nogil=True)
def _coordinate_descent(Xs, col_sq, r, beta, lam, tol, max_iter, trace):
    """Update ``beta`` and the residual ``r`` in place.

    Sweeps alternate between the full coordinate set and the currently
    nonzero coordinates; convergence is declared only after a full sweep whose
    largest coefficient change is below ``tol``.
    """
    n, p = Xs.shape
    obj = np.empty(max_iter + 1 if trace else 1)
    n_obj = 0
    if trace:
        obj[0] = _objective(r, beta, lam, n)
        n_obj = 1
    lam_hi = lam * (1.0 + 1e-12)
    it = 0
    converged = False
    active_only = False
    while it < max_iter:
        max_change = 0.0
        for j in range(p):
            bj = beta[j]
            if active_only and bj == 0.0:
                continue
            dot = 0.0
            for i in range(n):
                dot += Xs[i, j] * r[i]
            z = dot / n + col_sq[j] * bj
            # a relative slack keeps the all-zero solution exact at lam_max
            if z > lam_hi:
                bnew = (z - lam) / col_sq[j]
            elif z < -lam_hi:
                bnew = (z + lam) / col_sq[j]
            else:
                bnew = 0.0
            if bnew != bj:
                d = bnew - bj
                for i in range(n):
                    r[i] -= d * Xs[i, j]
                beta[j] = bnew
                if abs(d) > max_change:
                    max_change = abs(d)
        it += 1
        if trace:
            obj[n_obj] = _objective(r, beta, lam, n)
            n_obj += 1
        if max_change < tol:
            if active_only:
                active_only = False
            else:
                converged = True
                break
        else:
            active_only = True
    return it, converged, obj[:n_obj]


@njit(cache=True, nogil=True)
def _coordinate_descent_gram(G, c, g, beta, lam, tol, max_iter, trace, yy):
    """Covariance-update variant: ``G = Xs'Xs/n``, ``c = Xs'y/n`` and the
    gradient ``g = c - G beta`` is kept current, so a sweep costs O(p^2)
    whatever n is. Same sweep schedule and stopping rule as above.
    """
    p = G.shape[0]
    obj = np.empty(max_iter + 1 if trace else 1)
    n_obj = 0
    if trace:
        s = 0.0
        for j in range(p):
            s += beta[j] * (c[j] + g[j]) - 2.0 * lam * abs(beta[j])
        obj[0] = yy / 2.0 - s / 2.0
        n_obj = 1
    lam_hi = lam * (1.0 + 1e-12)
    it = 0
    converged = False
    active_only = False
    while it < max_iter:
        max_change = 0.0
        for j in range(p):
            bj = beta[j]
            if active_only and bj == 0.0:
                continue
            z = g[j] + G[j, j] * bj
            if z > lam_hi:
                bnew = (z - lam) / G[j, j]
            elif z < -lam_hi:
                bnew = (z + lam) / G[j, j]
            else:
                bnew = 0.0
            if bnew != bj:
                d = bnew - bj
                for k in range(p):
                    g[k] -= d * G[k, j]
                beta[j] = bnew
                if abs(d) > max_change:
                    max_change = abs(d)
        it += 1
        if trace:
            s = 0.0
            for j in range(p):
                s += beta[j] * (c[j] + g[j]) - 2.0 * lam * abs(beta[j])
            obj[n_obj] = yy / 2.0 - s / 2.0
            n_obj += 1
        if max_change < tol:
            if active_only:
                active_only = False
            else:
                converged = True
                break
        else:
            active_only = True
    return it, converged, obj[:n_obj]


@dataclass
class Standardization:
    means: np.ndarray
    scales: np.ndarray
    keep: np.ndarray  # boolean mask of non-constant columns

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardization":
        means = X.mean(axis=0)
        scales = X.std(axis=0)
        keep = scales > 1e-12 * np.maximum(1.0, np.abs(means))
        return cls(means, np.where(keep, scales, 1.0), keep)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return np.asfortranarray((X[:, self.keep] - self.means[self.keep]) / self.scales[self.keep])


@dataclass
class LassoFit:
    lambda_: float
    names: list[str]
    coef: np.ndarray          # original scale, one entry per input column
    intercept: float
    beta_std: np.ndarray      # standardized scale, one entry per retained column
    standardization: Standardization
    converged: bool
    n_iterations: int
    objective_trace: np.ndarray | None = None
    dropped: list[str] = field(default_factory=list)

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.coef))

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef.tolist()))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef

    def to_rows(self) -> list[tuple[str, float]]:
        return [(INTERCEPT, float(self.intercept))] + list(zip(self.names, self.coef.tolist()))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["term", "coefficient"])
            for term, c in self.to_rows():
                w.writerow([term, fmt(c)])


def _prepare(X, y, names=None):
    if isinstance(X, DesignMatrix):
        Xv, names = X.without_intercept()
    else:
        Xv = np.asarray(X, dtype=float)
        if Xv.ndim != 2:
            raise ConfigError("X must be two dimensional")
        names = list(names) if names is not None else [f"x{j}" for j in range(Xv.shape[1])]
    y = np.asarray(y, dtype=float)
    if y.shape != (Xv.shape[0],):
        raise DataError(f"X has {Xv.shape[0]} rows but y has shape {y.shape}")
    if Xv.shape[0] < 2:
        raise DataError("lasso needs at least two observations")
    return Xv, y, names


def lambda_max(X, y, names=None) -> float:
    """Smallest penalty at which all coefficients are zero: max_j |<xs_j, y - ybar>| / n."""
    Xv, y, _ = _prepare(X, y, names)
    st = Standardization.fit(Xv)
    if not st.keep.any():
        return 0.0
    yc = y - y.mean()
    if not np.any(yc):
        return 0.0
    return float(np.max(np.abs(st.apply(Xv).T @ yc)) / len(y))


def default_grid(lmax: float, n_lambda: int = DEFAULT_N_LAMBDA,
                 ratio: float = DEFAULT_LAMBDA_RATIO) -> np.ndarray:
    if lmax <= 0:
        return np.array([0.0])
    return np.geomspace(lmax, lmax * ratio, n_lambda)


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ConfigError("lambda grid must be a nonempty list")
    if np.any(g < 0) or np.any(g[:-1] <= 0):
        raise ConfigError("lambda grid must be positive (only the last value may be 0)")
    if np.any(np.diff(g) >= 0):
        raise ConfigError("lambda grid must be strictly descending")
    return g


def lasso_path(X, y, grid=None, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
               names=None, trace: bool = False) -> list[LassoFit]:
    """Fits along a descending penalty grid, each warm-started from the previous one."""
    if not tol > 0:
        raise ConfigError("tol must be positive")
    Xv, y, names = _prepare(X, y, names)
    st = Standardization.fit(Xv)
    dropped = [nm for nm, k in zip(names, st.keep) if not k]
    if dropped:
        _warnings.warn(f"constant columns dropped from the lasso: {dropped}", stacklevel=2)
    Xs = st.apply(Xv)
    n = len(y)
    ybar = y.mean()
    grid = _check_grid(grid if grid is not None else default_grid(lambda_max(Xv, y)))
    beta = np.zeros(Xs.shape[1])
    r = y - ybar
    gram = Xs.shape[1] <= GRAM_MAX_P
    if gram:
        G = Xs.T @ Xs / n
        c = Xs.T @ r / n
        g = c.copy()
        yy = float(r @ r) / n
    else:
        col_sq = (Xs ** 2).sum(axis=0) / n
    fits = []
    for lam in grid:
        if gram:
            it, ok, obj = _coordinate_descent_gram(G, c, g, beta, float(lam), float(tol),
                                                   int(max_iter), trace, yy)
        else:
            it, ok, obj = _coordinate_descent(Xs, col_sq, r, beta, float(lam), float(tol),
                                              int(max_iter), trace)
        coef = np.zeros(Xv.shape[1])
        coef[st.keep] = beta / st.scales[st.keep]
        intercept = float(ybar - coef @ st.means)
        fits.append(LassoFit(lambda_=float(lam), names=list(names), coef=coef, intercept=intercept,
                             beta_std=beta.copy(), standardization=st, converged=bool(ok),
                             n_iterations=int(it), objective_trace=obj.copy() if trace else None,
                             dropped=dropped))
    return fits


def kkt_violation(fit: LassoFit, X, y, names=None) -> float:
    """Largest breach of the lasso optimality conditions on the standardized scale.

    Active coordinates need ``<xs_j, r>/n == lam * sign(b_j)``; inactive ones
    need ``|<xs_j, r>/n| <= lam``.
    """
    Xv, y, _ = _prepare(X, y, names)
    st = fit.standardization
    Xs = st.apply(Xv)
    r = (y - y.mean()) - Xs @ fit.beta_std
    g = Xs.T @ r / len(y)
    b = fit.beta_std
    active = b != 0
    viol = np.zeros_like(g)
    viol[active] = np.abs(g[active] - fit.lambda_ * np.sign(b[active]))
    viol[~active] = np.maximum(np.abs(g[~active]) - fit.lambda_, 0.0)
    return float(viol.max()) if viol.size else 0.0


@dataclass
class CvResult:
    lambda_grid: np.ndarray
    fold_mse: np.ndarray      # grid x k
    lambda_min: float
    lambda_1se: float
    fold_assignment_seed: int
    folds: np.ndarray
    path: list[LassoFit]      # full-data fits along the grid

    @property
    def mean_mse(self) -> np.ndarray:
        return self.fold_mse.mean(axis=1)

    @property
    def se_mse(self) -> np.ndarray:
        k = self.fold_mse.shape[1]
        return self.fold_mse.std(axis=1, ddof=1) / np.sqrt(k) if k > 1 else np.zeros(len(self.lambda_grid))

    @property
    def index_min(self) -> int:
        return int(np.flatnonzero(self.lambda_grid == self.lambda_min)[0])

    def fit_at(self, rule: str = "min") -> LassoFit:
        if rule not in ("min", "1se"):
            raise ConfigError(f"unknown selection rule {rule!r}")
        lam = self.lambda_min if rule == "min" else self.lambda_1se
        return self.path[int(np.flatnonzero(self.lambda_grid == lam)[0])]

    def summary_rows(self) -> list[tuple[float, int, float]]:
        return [(float(l), f.n_nonzero, float(m))
                for l, f, m in zip(self.lambda_grid, self.path, self.mean_mse)]

    def write_summary(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["lambda", "n_nonzero", "mean_cv_mse"])
            for lam, nz, m in self.summary_rows():
                w.writerow([fmt(lam), nz, fmt(m)])


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Random balanced folds: sizes differ by at most one, fixed by ``seed``."""
    if k < 2:
        raise ConfigError("cross-validation needs k >= 2")
    if n < k:
        raise ConfigError(f"{n} rows cannot fill {k} folds (a fold would be empty)")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


def cv_select(X, y, k: int = 10, grid=None, seed: int = 0, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER, names=None, threads: int = 1) -> CvResult:
    """k-fold CV over a shared grid; ``lambda_min`` is the largest penalty
    attaining the smallest mean held-out MSE."""
    Xv, y, names = _prepare(X, y, names)
    n = len(y)
    folds = fold_assignment(n, k, seed)
    grid = _check_grid(grid if grid is not None else default_grid(lambda_max(Xv, y)))

    def run_fold(f):
        test = folds == f
        with _warnings.catch_warnings():
            _warnings.simplefilter("ignore")
            path = lasso_path(Xv[~test], y[~test], grid, tol=tol, max_iter=max_iter, names=names)
        Xt, yt = Xv[test], y[test]
        return np.array([np.mean((yt - fit.predict(Xt)) ** 2) for fit in path])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            cols = list(ex.map(run_fold, range(k)))
    else:
        cols = [run_fold(f) for f in range(k)]
    fold_mse = np.column_stack(cols)
    mean = fold_mse.mean(axis=1)
    i_min = int(np.flatnonzero(mean == mean.min())[0])
    se = fold_mse.std(axis=1, ddof=1) / np.sqrt(k)
    i_1se = int(np.flatnonzero(mean <= mean[i_min] + se[i_min])[0])
    path = lasso_path(Xv, y, grid, tol=tol, max_iter=max_iter, names=names)
    return CvResult(lambda_grid=grid, fold_mse=fold_mse, lambda_min=float(grid[i_min]),
                    lambda_1se=float(grid[i_1se]), fold_assignment_seed=int(seed), folds=folds,
                    path=path)
