"""Defined-benefit pension fund with a retail member (follower) and a company (leader)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .equilibrium import EquilibriumResult, follower_feedback, reconstruct_primitives, simulate_equilibrium
from .errors import StructuralError
from .evaluation import evaluate_J1, evaluate_J2
from .model import ExpDiscount, LQGameSpec, TerminalCondition, TimeGrid, validate_spec, zero_spec
from .riccati import _T
from .simulate import BrownianEnsemble, MCEstimate, generate_ensemble, regress


@dataclass(frozen=True)
class PensionParams:
    r: float = 0.05
    mu1: float = 0.1
    mu2: float = 0.08
    sigma: float = 0.2
    sigma_tilde: float = 0.3
    beta: float = 0.1
    T: float = 1.0
    N: int = 512
    c0: float = 1.0
    c1: float = 0.5
    c2: float = 0.0
    DB: float = 0.0
    NC: float = 0.0

    def __post_init__(self):
        if not (self.mu1 > self.r and self.mu2 > self.r):
            raise StructuralError("expected returns must exceed the risk-free rate")
        if not (self.sigma > 0 and self.sigma_tilde > 0):
            raise StructuralError("volatilities must be positive")
        if self.DB != 0 or self.NC != 0:
            raise StructuralError("DB and NC enter as affine terms outside the LQ form; only DB = NC = 0 is supported")
        if self.T <= 0 or self.N < 1:
            raise StructuralError("need T > 0 and N >= 1")

    @property
    def theta(self) -> float:
        """Market price of risk of the first stock."""
        return (self.mu1 - self.r) / self.sigma

    @property
    def theta_tilde(self) -> float:
        return (self.mu2 - self.r) / self.sigma_tilde

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N)


def make_pension_spec(params: PensionParams) -> LQGameSpec:
    """A = -r, B1 = B2 = -1, C1 = -theta, C2 = -theta~, R1 = R2 = e^{-beta t}, G1 = G2 = 2, the rest 0."""
    spec = zero_spec(1, 1, 1, params.T, A=-params.r, B1=-1.0, B2=-1.0, C1=-params.theta, C2=-params.theta_tilde,
                     R1=ExpDiscount(params.beta), R2=ExpDiscount(params.beta), G1=[[2.0]], G2=[[2.0]],
                     terminal=TerminalCondition([params.c0], [params.c1], [params.c2]), N=params.N)
    report = validate_spec(spec, params.grid())
    if not report.ok:
        raise StructuralError("; ".join(report.messages()))
    return spec


# ---------------------------------------------------------------------------
# scalar displays, integrated independently of the generic solver


def pension_P1(params: PensionParams, t: np.ndarray) -> np.ndarray:
    """P1' + k P1 + e^{beta t} = 0, P1(T) = 0, k = theta^2 + theta~^2 - 2r, by variation of constants."""
    k = params.theta ** 2 + params.theta_tilde ** 2 - 2 * params.r
    a = k + params.beta
    t = np.asarray(t, dtype=float)
    if abs(a) < 1e-14:
        return np.exp(-k * t) * (params.T - t)
    return np.exp(-k * t) * (np.exp(a * params.T) - np.exp(a * t)) / a


def pension_P2(params: PensionParams, t: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """P2' + (theta^2 + theta~^2) P1 P2^2 + e^{beta t} P2^2 + 2r P2 = 0, P2(0) = 2, by an adaptive solver."""
    s2 = params.theta ** 2 + params.theta_tilde ** 2

    def f(s, p):
        P1 = pension_P1(params, s)
        return -(s2 * P1 * p ** 2 + np.exp(params.beta * s) * p ** 2 + 2 * params.r * p)

    sol = solve_ivp(f, (0.0, params.T), [2.0], method="DOP853", t_eval=np.asarray(t, dtype=float), rtol=rtol,
                    atol=1e-14)
    return sol.y[0]


# ---------------------------------------------------------------------------
# dual propagator


def _gamma_coefficients(res: EquilibriumResult):
    """-dY = [AY Y + f + K Z + Kt Zt] dt - Z dW - Zt dW~ on grid points, from the stacked Y equation."""
    sol = res.sol
    sig = sol.sigma_on_grid()
    b = {k: v[::2] for k, v in sol.aug.blocks.items()}
    L = sol.leader
    AY = sig["S9"] @ L.Pi3.values + _T(b["A1"])
    FY = sig["S9"] @ L.Pi4.values + _T(sig["S5"])
    Fv = sig["S9"]
    return AY, FY, Fv, _T(b["At1"]), _T(b["At2"])


def propagator_gamma(res: EquilibriumResult, ensemble: BrownianEnsemble, start: int,
                     keep_path: bool = False):
    """Euler-Maruyama for d Gamma(s) = Gamma(s) [AY ds + K dW + Kt dW~], Gamma(t) = I, s >= t.

    Returns (Gamma(T), int_t^T Gamma f ds) per path, plus the full path when ``keep_path``.
    Coefficients multiply from the right so that Gamma Y + int Gamma f is a martingale.
    """
    tr = res.traj
    AY, FY, Fv, K, Kt = _gamma_coefficients(res)
    M, N, dt = ensemble.M, tr.grid.N, tr.grid.dt
    d = AY.shape[1]
    G = np.broadcast_to(np.eye(d), (M, d, d)).copy()
    acc = np.zeros((M, d))
    path = np.empty((M, N + 1 - start, d, d)) if keep_path else None
    if keep_path:
        path[:, 0] = G
    for i in range(start, N):
        f = tr.Yh[:, i] @ FY[i].T + tr.varphi[:, i] @ Fv[i].T
        acc += np.einsum("mij,mj->mi", G, f) * dt
        G = G + G @ AY[i] * dt + (G @ K[i]) * ensemble.dW[:, i, None, None] + (G @ Kt[i]) * ensemble.dWt[:, i, None, None]
        if keep_path:
            path[:, i + 1 - start] = G
    return G, acc, path


@dataclass
class DualCheck:
    t: float
    index: int
    coef: np.ndarray       # regression of (dual sample - Y(t)) on {1, W(t), W~(t)}, per component
    se: np.ndarray
    estimate: Optional[MCEstimate] = None

    @property
    def max_z(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.se > 0, np.abs(self.coef) / self.se, np.where(self.coef != 0, np.inf, 0.0))
        return float(np.max(z))

    def ok(self, k: float = 3.0) -> bool:
        return self.max_z <= k


def dual_samples(res: EquilibriumResult, ensemble: BrownianEnsemble, start: int, xi_bar: np.ndarray) -> np.ndarray:
    """Gamma_t(T) xi_bar + int_t^T Gamma_t(s) f(s) ds per path; its F_t-conditional mean is Y(t)."""
    G, acc, _ = propagator_gamma(res, ensemble, start)
    return np.einsum("mij,mj->mi", G, xi_bar) + acc


def dual_route_check(res: EquilibriumResult, spec: LQGameSpec, ensemble: BrownianEnsemble,
                     indices: Sequence[int]) -> Dict[int, DualCheck]:
    """At each grid index, E[D - Y(t) | F_t] = 0; test it by regressing D - Y(t) on {1, W(t), W~(t)}."""
    tr = res.traj
    n = spec.n
    xi = spec.terminal.sample(ensemble.W[:, -1], ensemble.Wt[:, -1])
    xi_bar = np.concatenate([np.zeros_like(xi), xi], axis=1)
    W, Wt = ensemble.W, ensemble.Wt
    out = {}
    for i in indices:
        D = dual_samples(res, ensemble, i, xi_bar)
        diff = D - tr.Y[:, i]
        if i == 0:
            F = np.ones((ensemble.M, 1))
        else:
            F = np.column_stack([np.ones(ensemble.M), W[:, i], Wt[:, i]])
        fit = regress(diff, F)
        est = MCEstimate.from_samples(D[:, n:]) if i == 0 else None
        out[i] = DualCheck(float(tr.grid.t[i]), i, fit.coef, fit.coef_se, est)
    return out


# ---------------------------------------------------------------------------
# portfolio weights


@dataclass
class PortfolioWeights:
    pi1: np.ndarray        # masked entries are NaN
    pi2: np.ndarray
    masked: int
    floor: float


def portfolio_weights(y: np.ndarray, z: np.ndarray, zt: np.ndarray, params: PensionParams,
                      floor: Optional[float] = None) -> PortfolioWeights:
    """pi1 = z / (sigma F), pi2 = zt / (sigma~ F) where |F| > floor."""
    if floor is None:
        floor = 1e-6 * max(abs(params.c0), abs(params.c1), abs(params.c2), 1e-300)
    F = np.asarray(y, dtype=float)
    ok = np.abs(F) > floor
    safe = np.where(ok, F, 1.0)
    pi1 = np.where(ok, z / (params.sigma * safe), np.nan)
    pi2 = np.where(ok, zt / (params.sigma_tilde * safe), np.nan)
    return PortfolioWeights(pi1, pi2, int(np.count_nonzero(~ok)), float(floor))


def resimulate_fund(F0: np.ndarray, w: PortfolioWeights, z, zt, v1, v2, params: PensionParams,
                    ensemble: BrownianEnsemble) -> np.ndarray:
    """Forward fund dynamics with the reconstructed weights; masked points fall back to the integrands."""
    N, dt = ensemble.grid.N, ensemble.grid.dt
    M = ensemble.M
    F = np.empty((M, N + 1))
    F[:, 0] = F0
    for i in range(N):
        p1F = np.where(np.isnan(w.pi1[:, i]), z[:, i] / params.sigma, w.pi1[:, i] * F[:, i])
        p2F = np.where(np.isnan(w.pi2[:, i]), zt[:, i] / params.sigma_tilde, w.pi2[:, i] * F[:, i])
        drift = (params.r * F[:, i] + (params.mu1 - params.r) * p1F + (params.mu2 - params.r) * p2F
                 + v1[:, i] + v2[:, i] - params.DB)
        with np.errstate(over="ignore", invalid="ignore"):
            F[:, i + 1] = (F[:, i] + drift * dt + params.sigma * p1F * ensemble.dW[:, i]
                           + params.sigma_tilde * p2F * ensemble.dWt[:, i])
    return F


# ---------------------------------------------------------------------------
# benchmark


def closed_form_benchmark(params: PensionParams) -> Dict[str, float]:
    """Direct solution of the game through the state-price deflator.

    The follower's first-order condition, with its control adapted to W, gives the
    coefficient 1 / (1 + 2K) with K = int e^{(beta + theta^2 - 2r)s} ds; the leader's
    then gives the reserve h / ((1 + 2K) + 2L / (1 + 2K)) with
    L = int e^{(beta + theta^2 + theta~^2 - 2r)s} ds and h = E[H_T xi].
    """
    th, tt, r, b, T = params.theta, params.theta_tilde, params.r, params.beta, params.T

    def integ(k):
        return T if abs(k) < 1e-14 else (np.exp(k * T) - 1.0) / k

    K = integ(b + th ** 2 - 2 * r)
    Kp = integ(b + th ** 2 + tt ** 2 - 2 * r)
    L = integ(b + th ** 2 + tt ** 2 - 2 * r)
    h = np.exp(-r * T) * (params.c0 - params.c1 * th * T - params.c2 * tt * T)
    y0 = h / ((1 + 2 * K) + 2 * L / (1 + 2 * K))
    y0p = h / ((1 + 2 * Kp) + 2 * L / (1 + 2 * Kp))
    return {"reserve": float(y0), "K": float(K), "L": float(L), "deflated_terminal": float(h),
            "reserve_with_tilde_in_follower": float(y0p)}


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class PensionSolution:
    params: PensionParams
    spec: LQGameSpec
    result: EquilibriumResult
    ensemble: BrownianEnsemble
    v1: np.ndarray
    v2: np.ndarray
    reserve: float
    reserve_mc: MCEstimate
    weights: PortfolioWeights
    checks: Dict[str, float] = field(default_factory=dict)
    costs: Dict[str, float] = field(default_factory=dict)
    benchmark: Dict[str, float] = field(default_factory=dict)

    @property
    def traj(self):
        return self.result.traj


def initial_reserve(solution: PensionSolution) -> MCEstimate:
    """Monte Carlo estimate of y(0) through the dual route at t = 0 (SE attached)."""
    return solution.reserve_mc


def run_pension(params: PensionParams, seed: int = 0, M: int = 10_000, ensemble: Optional[BrownianEnsemble] = None,
                floor: Optional[float] = None, **eq_options) -> PensionSolution:
    spec = make_pension_spec(params)
    grid = params.grid()
    ens = ensemble if ensemble is not None else generate_ensemble(seed, M, grid)
    res = simulate_equilibrium(spec, grid, ens, **eq_options)
    tr = res.traj
    pr = reconstruct_primitives(tr)
    checks = {}
    t = grid.t
    checks["P1_display_gap"] = float(np.max(np.abs(res.sol.P1.values[:, 0, 0] - pension_P1(params, t))))
    checks["P2_display_gap"] = float(np.max(np.abs(res.sol.P2.values[:, 0, 0] - pension_P2(params, t))))
    # v1 = e^{beta t} [P2 y_hat + varphi_hat] against the generic feedback
    P2 = res.sol.P2.values[:, 0, 0]
    v1_display = np.exp(params.beta * t)[None] * (P2[None] * pr.yhat[..., 0] + pr.varphi[..., 0])
    checks["v1_display_gap"] = float(np.max(np.abs(v1_display - tr.v1[..., 0])))
    k = [0, grid.N // 3, grid.N // 2]
    gen = np.array([follower_feedback(spec, res.sol.P2.values[i], tr.Xh[0, i, :1], tr.Yh[0, i, 1:], t[i])
                    for i in k])
    checks["v1_generic_gap"] = float(np.max(np.abs(gen[:, 0] - tr.v1[0, k, 0])))
    xi = spec.terminal.sample(ens.W[:, -1], ens.Wt[:, -1])
    xi_bar = np.concatenate([np.zeros_like(xi), xi], axis=1)
    D0 = dual_samples(res, ens, 0, xi_bar)
    reserve_mc = MCEstimate.from_samples(D0[:, 1])
    w = portfolio_weights(pr.y[..., 0], pr.z[..., 0], pr.zt[..., 0], params, floor)
    F = resimulate_fund(pr.y[:, 0, 0], w, pr.z[..., 0], pr.zt[..., 0], tr.v1[..., 0], tr.v2[..., 0], params, ens)
    # paths where F crosses zero make pi unbounded and the forward recursion unstable,
    # so the round trip is summarised by quantiles of the per-path sup error
    with np.errstate(over="ignore", invalid="ignore"):
        err = np.nan_to_num(np.max(np.abs(F - pr.y[..., 0]), axis=1), nan=np.inf)
    checks["fund_roundtrip_median_sup"] = float(np.median(err))
    checks["fund_roundtrip_q90_sup"] = float(np.quantile(err, 0.9))
    checks["weights_masked"] = float(w.masked)
    costs = {"J1": evaluate_J1(tr, spec, grid).value, "J2": evaluate_J2(tr, spec, grid).value}
    return PensionSolution(params=params, spec=spec, result=res, ensemble=ens, v1=tr.v1[..., 0], v2=tr.v2[..., 0],
                           reserve=float(tr.Y[0, 0, 1]), reserve_mc=reserve_mc, weights=w, checks=checks,
                           costs=costs, benchmark=closed_form_benchmark(params))


__all__ = [
    "PensionParams", "make_pension_spec", "pension_P1", "pension_P2", "propagator_gamma", "dual_samples",
    "dual_route_check", "DualCheck", "portfolio_weights", "PortfolioWeights", "resimulate_fund",
    "closed_form_benchmark", "PensionSolution", "initial_reserve", "run_pension",
]
