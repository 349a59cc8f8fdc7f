"""Brownian ensembles, Euler-Maruyama stepping and Monte Carlo estimators."""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError
from .model import TimeGrid

WORKERS_ENV = "STACKBSDE_WORKERS"


def worker_count() -> int:
    """Number of threads used for ensemble generation (env var, default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _path_normals(seed: int, j: int, N: int) -> np.ndarray:
    # one Philox substream per path: key = master seed, counter word 1 = path index
    bg = np.random.Philox(key=int(seed), counter=[0, int(j), 0, 0])
    return np.random.Generator(bg).standard_normal(2 * N)


@dataclass
class BrownianEnsemble:
    """M sampled paths of (W, W~) on a uniform grid.

    ``dW`` and ``dWt`` have shape (M, N). Path j depends only on (seed, j), so
    any single path can be regenerated in isolation.
    """

    seed: int
    grid: TimeGrid
    dW: np.ndarray
    dWt: np.ndarray
    antithetic: bool = False

    @property
    def M(self) -> int:
        return self.dW.shape[0]

    @staticmethod
    def _cum(d):
        out = np.zeros((d.shape[0], d.shape[1] + 1))
        np.cumsum(d, axis=1, out=out[:, 1:])
        return out

    @property
    def W(self) -> np.ndarray:
        return self._cum(self.dW)

    @property
    def Wt(self) -> np.ndarray:
        return self._cum(self.dWt)

    def coarsen(self, factor: int = 2) -> "BrownianEnsemble":
        """Same Brownian paths on a grid with ``factor`` times fewer steps."""
        N = self.grid.N
        if N % factor:
            raise ValueError(f"N={N} not divisible by {factor}")
        g = TimeGrid(self.grid.T, N // factor)
        dW = self.dW.reshape(self.M, g.N, factor).sum(axis=2)
        dWt = self.dWt.reshape(self.M, g.N, factor).sum(axis=2)
        return BrownianEnsemble(self.seed, g, dW, dWt, self.antithetic)

    def with_tilde(self, dWt: np.ndarray) -> "BrownianEnsemble":
        if dWt.shape != self.dWt.shape:
            raise ValueError("replacement increments have the wrong shape")
        return BrownianEnsemble(self.seed, self.grid, self.dW, np.array(dWt), self.antithetic)

    def permute_tilde(self, seed: int = 0) -> "BrownianEnsemble":
        """Shuffle the W~ increments across paths and steps. W is untouched."""
        rng = np.random.default_rng(seed)
        flat = self.dWt.ravel().copy()
        rng.shuffle(flat)
        return self.with_tilde(flat.reshape(self.dWt.shape))

    def subset(self, idx) -> "BrownianEnsemble":
        return BrownianEnsemble(self.seed, self.grid, self.dW[idx], self.dWt[idx], self.antithetic)


def generate_ensemble(seed: int, M: int, grid: TimeGrid, antithetic: bool = False) -> BrownianEnsemble:
    """Seeded ensemble; with ``antithetic`` the second half mirrors the first."""
    if M < 1:
        raise ValueError("M must be >= 1")
    N = grid.N
    base = (M + 1) // 2 if antithetic else M
    z = np.empty((base, 2 * N))
    nw = min(worker_count(), base)

    def fill(lo, hi):
        for j in range(lo, hi):
            z[j] = _path_normals(seed, j, N)

    if nw > 1:
        edges = np.linspace(0, base, nw + 1).astype(int)
        with ThreadPoolExecutor(nw) as ex:
            list(ex.map(lambda k: fill(edges[k], edges[k + 1]), range(nw)))
    else:
        fill(0, base)
    if antithetic:
        z = np.concatenate([z, -z[: M - base]], axis=0)
    sq = np.sqrt(grid.dt)
    return BrownianEnsemble(int(seed), grid, z[:, :N] * sq, z[:, N:] * sq, antithetic)


@dataclass
class MCEstimate:
    mean: np.ndarray
    se: np.ndarray
    M: int

    @classmethod
    def from_samples(cls, x) -> "MCEstimate":
        x = np.asarray(x, dtype=float)
        M = x.shape[0]
        sd = x.std(axis=0, ddof=1) if M > 1 else np.zeros(x.shape[1:])
        return cls(x.mean(axis=0), sd / np.sqrt(M), M)

    def within(self, target, k: float = 3.0, floor: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.mean - target) <= k * self.se + floor))


@dataclass
class PathProcess:
    """Per-path samples on the grid: ``values`` has shape (M, N + 1, d)."""

    values: np.ndarray
    grid: TimeGrid
    seed: Optional[int] = None
    name: str = ""

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def at(self, i: int) -> np.ndarray:
        return self.values[:, i, :]

    def mean(self, i: int) -> MCEstimate:
        return MCEstimate.from_samples(self.values[:, i, :])


def euler_integrate(drift: Callable, diffW: Callable, diffWt: Optional[Callable], x0, ensemble: BrownianEnsemble,
                    grid: Optional[TimeGrid] = None, aux=None, name: str = "euler") -> PathProcess:
    """Euler-Maruyama for all paths at once.

    Callbacks have signature ``f(i, t_i, x, aux) -> (M, d)`` with x of shape (M, d).
    ``diffWt`` may be None for a W-driven equation.
    """
    grid = grid or ensemble.grid
    if grid.N != ensemble.grid.N:
        raise ValueError("ensemble and grid step counts differ")
    M, N, dt = ensemble.M, grid.N, grid.dt
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.shape[-1]
    out = np.empty((M, N + 1, d))
    out[:, 0, :] = np.broadcast_to(x0, (M, d))
    t = grid.t
    for i in range(N):
        x = out[:, i, :]
        step = drift(i, t[i], x, aux) * dt + diffW(i, t[i], x, aux) * ensemble.dW[:, i, None]
        if diffWt is not None:
            step = step + diffWt(i, t[i], x, aux) * ensemble.dWt[:, i, None]
        nxt = x + step
        if not np.all(np.isfinite(nxt)):
            bad = int(np.argmax(~np.all(np.isfinite(nxt), axis=1)))
            raise NumericalError(f"non-finite state on path {bad}", stage=name, t=float(t[i + 1]),
                                 module="simulate", operation="euler_integrate")
        out[:, i + 1, :] = nxt
    return PathProcess(out, grid, ensemble.seed, name)


@dataclass
class RegressionFit:
    fitted: np.ndarray
    coef: np.ndarray
    coef_se: np.ndarray
    r2: np.ndarray
    kept: np.ndarray


def regress(values, features) -> RegressionFit:
    """Least squares of values (M,) or (M, d) on features (M, k).

    Columns that make the design rank deficient are dropped (with a warning)
    and get coefficient 0 and standard error 0.
    """
    y = np.asarray(values, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    X = np.asarray(features, dtype=float)
    M, k = X.shape
    kept = []
    for j in range(k):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) == len(trial):
            kept.append(j)
    if len(kept) < k:
        warnings.warn(f"rank-deficient regression design, kept columns {kept} of {k}", RuntimeWarning)
    Xk = X[:, kept]
    beta, *_ = np.linalg.lstsq(Xk, y, rcond=None)
    fitted = Xk @ beta
    resid = y - fitted
    dof = max(M - len(kept), 1)
    s2 = (resid ** 2).sum(axis=0) / dof
    XtXi = np.linalg.inv(Xk.T @ Xk)
    se_k = np.sqrt(np.outer(np.diag(XtXi), s2))
    coef = np.zeros((k, y.shape[1]))
    se = np.zeros((k, y.shape[1]))
    coef[kept] = beta
    se[kept] = se_k
    tss = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    rss = (resid ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(tss > 0, 1.0 - rss / np.where(tss > 0, tss, 1.0), 1.0)
    if squeeze:
        return RegressionFit(fitted[:, 0], coef[:, 0], se[:, 0], r2[0], np.array(kept))
    return RegressionFit(fitted, coef, se, r2, np.array(kept))


def w_features(ensemble: BrownianEnsemble, i: int) -> np.ndarray:
    """Regression basis {1, W(t_i)}."""
    W = np.cumsum(ensemble.dW[:, :i], axis=1)[:, -1] if i > 0 else np.zeros(ensemble.M)
    return np.column_stack([np.ones(ensemble.M), W])


def estimate_conditional_mean(values, ensemble: BrownianEnsemble, i: int, features=None) -> RegressionFit:
    """Projection of per-path values at grid index i onto W-measurable features."""
    if isinstance(values, PathProcess):
        values = values.at(i)
    F = w_features(ensemble, i) if features is None else features
    return regress(values, F)


__all__ = [
    "BrownianEnsemble", "generate_ensemble", "MCEstimate", "PathProcess", "euler_integrate",
    "RegressionFit", "regress", "w_features", "estimate_conditional_mean", "worker_count",
]
