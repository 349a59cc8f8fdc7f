"""Closed-loop equilibrium: feedback laws, the simulation pipeline and primitive recovery.

Stacking of the leader system (each block has n rows):
    X = (varphi; Q)   Y = (p; y)   Z = (q1; z)   Zt = (0; zt)
where varphi is the follower's forward filter (a state for the leader), Q and
p the leader's adjoints and (y, z, zt) the controlled BSDE.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import NumericalError, StructuralError
from .filters import (MONTE_CARLO, SEMI_ANALYTIC, AffineProcess, affine_from_lsmc, hat_tilde_phi_bsde,
                      lsmc_linear_bsde, LeaderTables, TildePhi, _v2_on_paths, leader_tables,
                      recover_tilde_phi, simulate_hat_tilde_varphi, simulate_hat_varphi_follower, solve_hat_phi,
                      solve_hat_tilde_phi)
from .model import LQGameSpec, TerminalMode, TimeGrid, sample_coefficients
from .riccati import InverseGuard, RiccatiSolution, _T, solve_all
from .simulate import BrownianEnsemble, regress

# W~ loading of the full leader filter
NOISE_DERIVED = "derived"     # includes the W~ term required by X = Pi3 Y + Pi4 Y_hat + varphi
NOISE_DISPLAY = "display"     # dW only, as displayed
SIGN_DERIVED = "derived"
SIGN_DISPLAY = "display"


def _apply(Mt: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Time-indexed matrices (T, r, d) on per-path vectors (M, T, d) -> (M, T, r)."""
    return np.einsum("tij,mtj->mti", Mt, x)


# ---------------------------------------------------------------------------
# feedback laws


@dataclass
class FollowerPolicy:
    gain: np.ndarray        # (N + 1, k1, n): -R1^{-1} B1^T P2
    offset: np.ndarray      # (N + 1, k1, n): -R1^{-1} B1^T

    @classmethod
    def build(cls, sol: RiccatiSolution) -> "FollowerPolicy":
        tab = sol.tab
        RB = -tab.on_grid("R1inv") @ _T(tab.on_grid("B1"))
        return cls(RB @ sol.P2.values, RB)

    def __call__(self, i, yhat, varphi_hat):
        return yhat @ self.gain[i].T + varphi_hat @ self.offset[i].T


def follower_feedback(spec: LQGameSpec, P2: np.ndarray, varphi_hat, yhat, t: float) -> np.ndarray:
    """v1 = -R1^{-1} B1^T [P2 y_hat + varphi_hat] at time t."""
    R1 = np.atleast_2d(spec.coeffs["R1"](t))
    B1 = np.atleast_2d(spec.coeffs["B1"](t))
    x = np.asarray(P2) @ np.asarray(yhat, dtype=float) + np.asarray(varphi_hat, dtype=float)
    return -np.linalg.solve(R1, B1.T @ x)


@dataclass
class LeaderPolicy:
    gain_Y: np.ndarray      # -R2^{-1} Bt2^T Pi3
    gain_Yh: np.ndarray     # -R2^{-1} [Bt2^T Pi4 + D^T]
    gain_v: np.ndarray      # -R2^{-1} Bt2^T

    @classmethod
    def build(cls, sol: RiccatiSolution) -> "LeaderPolicy":
        aug, L = sol.aug, sol.leader
        R2i = aug.R2inv[::2]
        BtT = _T(aug.blocks["Bt2"][::2])
        DT = _T(aug.blocks["D"][::2])
        return cls(-R2i @ BtT @ L.Pi3.values, -R2i @ (BtT @ L.Pi4.values + DT), -R2i @ BtT)


def leader_feedback(policy: LeaderPolicy, Y, Yhat, varphi, i: int) -> np.ndarray:
    """v2 = -R2^{-1} Bt2^T Pi3 Y - R2^{-1} [Bt2^T Pi4 + D^T] Y_hat - R2^{-1} Bt2^T varphi at grid index i."""
    Y, Yhat, varphi = (np.asarray(v, dtype=float) for v in (Y, Yhat, varphi))
    return Y @ policy.gain_Y[i].T + Yhat @ policy.gain_Yh[i].T + varphi @ policy.gain_v[i].T


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class EquilibriumTrajectories:
    grid: TimeGrid
    n: int
    seed: Optional[int]
    Y: np.ndarray
    Yh: np.ndarray
    X: np.ndarray
    Xh: np.ndarray
    Z: np.ndarray
    Zh: np.ndarray
    Zt: np.ndarray
    Zth: np.ndarray
    varphi: np.ndarray          # full leader filter (F-adapted)
    varphi_hat: np.ndarray      # its W-filter
    phi: np.ndarray             # phi~ per path
    eta: np.ndarray             # eta~ per path
    v1: np.ndarray              # follower control from the filtered state (G1-adapted)
    v1_nonanticipating: np.ndarray
    v2: np.ndarray
    v2_hat: np.ndarray
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.Y.shape[0]


@dataclass
class Primitives:
    y: np.ndarray
    z: np.ndarray
    zt: np.ndarray
    p: np.ndarray
    q1: np.ndarray
    Q: np.ndarray
    varphi: np.ndarray
    yhat: np.ndarray
    zhat: np.ndarray
    zthat: np.ndarray
    phat: np.ndarray


def reconstruct_primitives(tr: EquilibriumTrajectories) -> Primitives:
    """Unstack: no arithmetic beyond slicing."""
    n = tr.n
    lo, hi = slice(0, n), slice(n, 2 * n)
    return Primitives(y=tr.Y[..., hi], z=tr.Z[..., hi], zt=tr.Zt[..., hi], p=tr.Y[..., lo], q1=tr.Z[..., lo],
                      Q=tr.X[..., hi], varphi=tr.X[..., lo], yhat=tr.Yh[..., hi], zhat=tr.Zh[..., hi],
                      zthat=tr.Zth[..., hi], phat=tr.Yh[..., lo])


def stack_primitives(pr: Primitives):
    """Inverse of :func:`reconstruct_primitives` for (Y, Z, Zt, X)."""
    cat = lambda a, b: np.concatenate([a, b], axis=-1)
    return cat(pr.p, pr.y), cat(pr.q1, pr.z), cat(np.zeros_like(pr.zt), pr.zt), cat(pr.varphi, pr.Q)


def recover_Z(g: LeaderTables, sig: Dict[str, np.ndarray], sol: RiccatiSolution, X, Xh, Yh, varphi_hat,
              phi_hat, eta_hat, eta):
    """(Z, Z_hat, Zt, Zt_hat) on all grid times.

    Z_hat = S1 S At1 X_hat + S1 S C^T Y_hat + S1 eta_hat
    Z     = S4 Pi1 At1 X + Lam X_hat + Theta phi_hat + S4 S3 S1 eta_hat + S4 eta
    Zt    = S10 Pi1 At2 X
    Zt_hat= S10 Pi1 At2 [(Pi3 + Pi4) Y_hat + varphi_hat]
    """
    b = {k: v[::2] for k, v in sol.aug.blocks.items()}
    Pi1 = sol.leader.Pi1.values
    S = g["S"]
    S1, S4 = sig["S1"], sig["S4"]
    Zh = _apply(S1 @ S @ b["At1"], Xh) + _apply(S1 @ S @ _T(b["C"]), Yh) + _apply(S1, eta_hat)
    Z = (_apply(S4 @ Pi1 @ b["At1"], X) + _apply(g["Lam"], Xh) + _apply(g["Theta"], phi_hat)
         + _apply(g["S431"], eta_hat) + _apply(S4, eta))
    Zt = _apply(g["Ztil"], X)
    Zth = _apply(g["Ztil"], _apply(g["P34"], Yh) + varphi_hat)
    return Z, Zh, Zt, Zth


# ---------------------------------------------------------------------------
# main pipeline


@dataclass
class EquilibriumResult:
    sol: RiccatiSolution
    tables: LeaderTables
    phi_hat: AffineProcess
    tilde: TildePhi
    traj: EquilibriumTrajectories
    options: Dict[str, object]


def simulate_equilibrium(spec: LQGameSpec, grid: TimeGrid, ensemble: BrownianEnsemble,
                         sol: Optional[RiccatiSolution] = None, tilde_noise: str = NOISE_DERIVED,
                         beta_sign: str = SIGN_DERIVED, allow_experimental: bool = False,
                         backend: str = SEMI_ANALYTIC) -> EquilibriumResult:
    """Riccati solves, filters, then per-path forward stepping and algebraic recovery.

    ``backend`` selects how the backward filter is obtained: coefficient ODEs
    (SEMI_ANALYTIC) or regression on the ensemble itself (MONTE_CARLO).
    """
    if ensemble.grid.N != grid.N or ensemble.grid.T != grid.T:
        raise StructuralError("ensemble grid does not match the time grid")
    mode = spec.terminal.mode
    if mode == TerminalMode.EXPERIMENTAL and not allow_experimental:
        raise StructuralError("terminal loads on W~ (EXPERIMENTAL); pass allow_experimental=True")
    if tilde_noise not in (NOISE_DERIVED, NOISE_DISPLAY) or beta_sign not in (SIGN_DERIVED, SIGN_DISPLAY):
        raise ValueError("unknown option")
    sol = sol or solve_all(spec, grid)
    g = leader_tables(sol)
    sig = sol.sigma_on_grid()
    L = sol.leader
    Pi1, Pi2, Pi3, Pi4 = L.Pi1.values, L.Pi2.values, L.Pi3.values, L.Pi4.values
    n, n2 = spec.n, 2 * spec.n
    M, N, dt = ensemble.M, grid.N, grid.dt

    # (2)-(3) backward filter and the full pair
    if backend == SEMI_ANALYTIC:
        phi_hat_aff = solve_hat_tilde_phi(sol)
    elif backend == MONTE_CARLO:
        phi_hat_aff = affine_from_lsmc(lsmc_linear_bsde(hat_tilde_phi_bsde(sol), ensemble), grid, "tilde_phi_hat")
    else:
        raise ValueError(f"unknown backend {backend!r}")
    tilde = recover_tilde_phi(phi_hat_aff, mode, sol, ensemble)
    phi, eta = tilde.on_paths(ensemble)
    phi_h = phi_hat_aff.evaluate(ensemble.W)
    eta_h = np.broadcast_to(phi_hat_aff.b_grid, (M, N + 1, n2))

    # (4)-(5) forward filter and Y_hat
    vh = simulate_hat_tilde_varphi(sol, phi_hat_aff, ensemble, g).values
    S11 = sig["S11"]
    Yh = _apply(S11 @ g["S"], vh) + _apply(S11, phi_h)

    # (6) full filter, Y recomputed before each step
    guard = InverseGuard("equilibrium", grid.t)
    IPi13 = guard.inv_batch(np.eye(n2) - Pi1 @ Pi3, "I - Pi1 Pi3")
    KY = Pi1 @ Pi4 + Pi2 @ g["P34"]
    beta_vh = g["beta_vh"] if beta_sign == SIGN_DERIVED else g["beta_vh_display"]
    use_tilde = tilde_noise == NOISE_DERIVED
    v = np.zeros((M, N + 1, n2))
    Y = np.empty((M, N + 1, n2))
    for i in range(N + 1):
        base = Yh[:, i] @ KY[i].T + vh[:, i] @ Pi2[i].T + phi[:, i] + v[:, i] @ Pi1[i].T
        Y[:, i] = base @ IPi13[i].T
        if i == N:
            break
        X_i = Y[:, i] @ Pi3[i].T + Yh[:, i] @ Pi4[i].T + v[:, i]
        drift = (v[:, i] @ g["beta_v"][i].T + vh[:, i] @ beta_vh[i].T + phi_h[:, i] @ g["beta_phi"][i].T
                 + eta_h[:, i] @ g["beta_etah"][i].T + eta[:, i] @ g["beta_eta"][i].T)
        gam = (Y[:, i] @ g["gam_Y"][i].T + Yh[:, i] @ g["gam_Yh"][i].T + vh[:, i] @ g["gam_vh"][i].T
               + v[:, i] @ g["gam_v"][i].T + phi_h[:, i] @ g["gam_phi"][i].T + eta_h[:, i] @ g["gam_etah"][i].T
               + eta[:, i] @ g["gam_eta"][i].T)
        step = drift * dt + gam * ensemble.dW[:, i, None]
        if use_tilde:
            step = step + (X_i @ g["gam_tilde"][i].T) * ensemble.dWt[:, i, None]
        v[:, i + 1] = v[:, i] + step
    if not np.all(np.isfinite(Y)):
        raise NumericalError("non-finite equilibrium state", stage="varphi", module="equilibrium",
                             operation="simulate_equilibrium")

    # (7)-(8) X and the Z family
    X = _apply(Pi3, Y) + _apply(Pi4, Yh) + v
    Xh = _apply(g["P34"], Yh) + vh
    Z, Zh, Zt, Zth = recover_Z(g, sig, sol, X, Xh, Yh, vh, phi_h, eta_h, eta)
    # the p-block W~ integrand is structurally absent from the displayed adjoint but nonzero in the
    # decoupling; it is kept so the stacked Y equation closes, and its size is reported
    upper = float(np.sqrt(np.mean(np.sum(Zt[..., :n] ** 2, axis=2))))

    # (9) controls
    pol = LeaderPolicy.build(sol)
    v2 = _apply(pol.gain_Y, Y) + _apply(pol.gain_Yh, Yh) + _apply(pol.gain_v, v)
    v2h = _apply(pol.gain_Y + pol.gain_Yh, Yh) + _apply(pol.gain_v, vh)
    fp = FollowerPolicy.build(sol)
    v1 = _apply(fp.gain, Yh[..., n:]) + _apply(fp.offset, Xh[..., :n])
    P2 = sol.P2.values
    sel = np.zeros((N + 1, n, n2))
    sel[:, :, :n] = np.eye(n)
    inner = (np.concatenate([np.zeros((N + 1, n, n)), P2], axis=2) + sel @ Pi4)
    v1_na = _apply(fp.offset, _apply(inner, Yh) + _apply(sel @ Pi3, Y) + _apply(sel, v))

    tr = EquilibriumTrajectories(grid=grid, n=n, seed=ensemble.seed, Y=Y, Yh=Yh, X=X, Xh=Xh, Z=Z, Zh=Zh, Zt=Zt,
                                 Zth=Zth, varphi=v, varphi_hat=vh, phi=np.asarray(phi), eta=np.asarray(eta),
                                 v1=v1, v1_nonanticipating=v1_na, v2=v2, v2_hat=v2h)
    tr.diagnostics["zt_upper_block_rms"] = upper
    if mode == TerminalMode.EXPERIMENTAL:
        tr.diagnostics["tilde_phi_representation_residual"] = tilde.residual
        tr.diagnostics["tilde_phi_terminal_error"] = tilde.terminal_error
    tr.diagnostics.update(relation_residuals(tr, sol, g, phi_h))
    tr.diagnostics.update(terminal_mismatch(tr, spec, sol, ensemble))
    tr.diagnostics["v1_form_gap"] = float(np.max(np.abs(v1 - v1_na)))
    tr.diagnostics["max_cond"] = sol.max_cond()
    opts = {"tilde_noise": tilde_noise, "beta_sign": beta_sign, "backend": backend}
    return EquilibriumResult(sol=sol, tables=g, phi_hat=phi_hat_aff, tilde=tilde, traj=tr, options=opts)


# ---------------------------------------------------------------------------
# diagnostics


def relation_residuals(tr: EquilibriumTrajectories, sol: RiccatiSolution, g: LeaderTables, phi_h) -> Dict[str, float]:
    """Pathwise sup of the three decoupling identities."""
    L = sol.leader
    r1 = tr.Y - _apply(L.Pi1.values, tr.X) - _apply(L.Pi2.values, tr.Xh) - tr.phi
    r2 = tr.X - _apply(L.Pi3.values, tr.Y) - _apply(L.Pi4.values, tr.Yh) - tr.varphi
    r3 = tr.Yh - _apply(g["S"], tr.Xh) - phi_h
    return {"relation_Y": float(np.max(np.abs(r1))), "relation_X": float(np.max(np.abs(r2))),
            "relation_Yhat": float(np.max(np.abs(r3)))}


def resimulate_primitive_y(tr: EquilibriumTrajectories, spec: LQGameSpec, ensemble: BrownianEnsemble,
                           v1: Optional[np.ndarray] = None) -> np.ndarray:
    """Forward Euler of the controlled BSDE from y(0) with the recovered integrands and controls."""
    tab = sample_coefficients(spec, tr.grid)
    g = lambda k: tab[k][::2]
    pr = reconstruct_primitives(tr)
    v1 = tr.v1 if v1 is None else v1
    N, dt = tr.grid.N, tr.grid.dt
    A, B1, B2, C1, C2 = g("A"), g("B1"), g("B2"), g("C1"), g("C2")
    y = np.empty_like(pr.y)
    y[:, 0] = pr.y[:, 0]
    for i in range(N):
        f = (y[:, i] @ A[i].T + v1[:, i] @ B1[i].T + tr.v2[:, i] @ B2[i].T + pr.z[:, i] @ C1[i].T
             + pr.zt[:, i] @ C2[i].T)
        y[:, i + 1] = y[:, i] - f * dt + pr.z[:, i] * ensemble.dW[:, i, None] + pr.zt[:, i] * ensemble.dWt[:, i, None]
    return y


def resimulate_stacked_Y(tr: EquilibriumTrajectories, sol: RiccatiSolution, ensemble: BrownianEnsemble,
                         keep_upper_zt: bool = True) -> np.ndarray:
    """Forward Euler of -dY = [S9 X + A1^T Y + S5^T Y_hat + At1^T Z + At2^T Zt] dt - Z dW - Zt dW~."""
    b = {k: v[::2] for k, v in sol.aug.blocks.items()}
    sig = sol.sigma_on_grid()
    S9, S5 = sig["S9"], sig["S5"]
    N, dt = tr.grid.N, tr.grid.dt
    Zt = tr.Zt
    if not keep_upper_zt:
        Zt = Zt.copy()
        Zt[..., :tr.n] = 0.0
    out = np.empty_like(tr.Y)
    out[:, 0] = tr.Y[:, 0]
    for i in range(N):
        f = (tr.X[:, i] @ S9[i].T + out[:, i] @ b["A1"][i] + tr.Yh[:, i] @ S5[i] + tr.Z[:, i] @ b["At1"][i]
             + Zt[:, i] @ b["At2"][i])
        out[:, i + 1] = out[:, i] - f * dt + tr.Z[:, i] * ensemble.dW[:, i, None] + Zt[:, i] * ensemble.dWt[:, i, None]
    return out


def terminal_mismatch(tr: EquilibriumTrajectories, spec: LQGameSpec, sol: RiccatiSolution,
                      ensemble: BrownianEnsemble) -> Dict[str, float]:
    xi = spec.terminal.sample(ensemble.W[:, -1], ensemble.Wt[:, -1])
    n = tr.n
    out = {"terminal_algebraic": float(np.mean(np.sum((tr.Y[:, -1, n:] - xi) ** 2, axis=1)))}
    y = resimulate_primitive_y(tr, spec, ensemble)
    out["terminal_resimulated"] = float(np.mean(np.sum((y[:, -1] - xi) ** 2, axis=1)))
    out["terminal_resimulated_nonanticipating"] = float(np.mean(np.sum(
        (resimulate_primitive_y(tr, spec, ensemble, tr.v1_nonanticipating)[:, -1] - xi) ** 2, axis=1)))
    Ys = resimulate_stacked_Y(tr, sol, ensemble)
    out["stacked_Y_rms_gap"] = float(np.sqrt(np.mean(np.sum((Ys - tr.Y) ** 2, axis=2))))
    Ys = resimulate_stacked_Y(tr, sol, ensemble, keep_upper_zt=False)
    out["stacked_Y_rms_gap_upper_zt_dropped"] = float(np.sqrt(np.mean(np.sum((Ys - tr.Y) ** 2, axis=2))))
    out["xi_second_moment"] = spec.terminal.second_moment(tr.grid.T)
    return out


def regression_check(values: np.ndarray, hat: np.ndarray, ensemble: BrownianEnsemble, i: int):
    """Regress per-path values at grid index i on {1, W(t_i)} and compare with the filter.

    Returns (max z-score over coefficients, fitted coefficients, their SEs, filter coefficients).
    The filter is itself regressed on the same basis, which is exact when it is affine in W.
    """
    W = ensemble.W[:, i]
    F = np.column_stack([np.ones(len(W)), W])
    fv = regress(values[:, i], F)
    fh = regress(hat[:, i], F)
    diff = np.abs(fv.coef - fh.coef)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(fv.coef_se > 0, diff / fv.coef_se, np.where(diff > 0, np.inf, 0.0))
    return float(np.max(z)), fv.coef, fv.coef_se, fh.coef


# ---------------------------------------------------------------------------
# follower problem with an exogenous leader control


@dataclass
class FollowerClosedLoop:
    yhat: np.ndarray
    zhat: np.ndarray
    zthat: np.ndarray
    xhat: np.ndarray
    xhat_sim: np.ndarray
    varphi_hat: np.ndarray
    phi_hat: AffineProcess
    y: np.ndarray
    z: np.ndarray
    zt: np.ndarray
    x: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    diagnostics: Dict[str, float] = field(default_factory=dict)


def simulate_follower_closed_loop(spec: LQGameSpec, grid: TimeGrid, ensemble: BrownianEnsemble,
                                  v2: Optional[AffineProcess] = None, sol=None) -> FollowerClosedLoop:
    """Follower's optimal response to a W-adapted affine leader control."""
    if v2 is not None and v2.c is not None and np.any(v2.c):
        raise StructuralError("exogenous v2 must be adapted to W alone")
    if spec.terminal.mode != TerminalMode.STANDARD:
        raise StructuralError("follower closed loop needs a W-measurable terminal")
    tab = sample_coefficients(spec, grid)
    if sol is None:
        from .riccati import solve_P1, solve_P2
        P1 = solve_P1(spec, grid, tab)
        P2 = solve_P2(spec, grid, P1, tab)
    else:
        P1, P2 = sol.P1, sol.P2
    n, M, N, dt = spec.n, ensemble.M, grid.N, grid.dt
    phi_aff = solve_hat_phi(spec, P1, grid, v2, tab)
    vh = simulate_hat_varphi_follower(spec, P1, P2, phi_aff, grid, v2, ensemble, tab).values
    g = lambda k: tab[k][::2]
    P1g, P2g = P1.values, P2.values
    I = np.eye(n)
    guard = InverseGuard("follower", grid.t)
    IPPi = guard.inv_batch(I + P2g @ P1g, "I + P2 P1")
    E1 = guard.inv_batch(P1g @ g("S1") + I, "P1 S1 + I")
    E2 = guard.inv_batch(P1g @ g("S2") + I, "P1 S2 + I")
    phi = phi_aff.evaluate(ensemble.W)
    eta = np.broadcast_to(phi_aff.b_grid, (M, N + 1, n))
    xhat = _apply(IPPi, vh - _apply(P2g, phi))
    yhat = -_apply(P1g, xhat) - phi
    zhat = -_apply(E1 @ P1g @ _T(g("C1")), xhat) - _apply(E1, eta)
    zthat = -_apply(E2 @ P1g @ _T(g("C2")), xhat)
    RB = -g("R1inv") @ _T(g("B1"))
    v1 = _apply(RB, xhat)
    v2p = _v2_on_paths(v2, ensemble, spec.k2)

    # adjoint filter by its own forward equation
    A, Q1, C1, S1 = g("A"), g("Q1"), g("C1"), g("S1")
    xs = np.empty_like(xhat)
    xs[:, 0] = yhat[:, 0] @ np.asarray(spec.G1).T
    for i in range(N):
        xs[:, i + 1] = (xs[:, i] + (xs[:, i] @ A[i] + yhat[:, i] @ Q1[i].T) * dt
                        + (xs[:, i] @ C1[i] + zhat[:, i] @ S1[i].T) * ensemble.dW[:, i, None])

    # full adjoint under both noises; y, z, zt from the decoupling
    C2, S2 = g("C2"), g("S2")
    x = np.empty_like(xhat)
    y = np.empty_like(xhat)
    z = np.empty_like(xhat)
    zt = np.empty_like(xhat)
    x[:, 0] = xhat[:, 0]
    for i in range(N + 1):
        y[:, i] = -x[:, i] @ P1g[i].T - phi[:, i]
        z[:, i] = -x[:, i] @ (E1[i] @ P1g[i] @ C1[i].T).T - eta[:, i] @ E1[i].T
        zt[:, i] = -x[:, i] @ (E2[i] @ P1g[i] @ C2[i].T).T
        if i == N:
            break
        x[:, i + 1] = (x[:, i] + (x[:, i] @ A[i] + y[:, i] @ Q1[i].T) * dt
                       + (x[:, i] @ C1[i] + z[:, i] @ S1[i].T) * ensemble.dW[:, i, None]
                       + (x[:, i] @ C2[i] + zt[:, i] @ S2[i].T) * ensemble.dWt[:, i, None])

    xi = spec.terminal.sample(ensemble.W[:, -1], ensemble.Wt[:, -1])
    xi_hat = spec.terminal.sample(ensemble.W[:, -1], np.zeros(M))
    # forward re-simulation of y_hat from y_hat(0) with the recovered integrands
    B1, B2 = g("B1"), g("B2")
    yr = np.empty_like(yhat)
    yr[:, 0] = yhat[:, 0]
    for i in range(N):
        f = (yr[:, i] @ A[i].T + v1[:, i] @ B1[i].T + v2p[:, i] @ B2[i].T + zhat[:, i] @ C1[i].T
             + zthat[:, i] @ C2[i].T)
        yr[:, i + 1] = yr[:, i] - f * dt + zhat[:, i] * ensemble.dW[:, i, None]
    ys = np.empty_like(y)
    ys[:, 0] = y[:, 0]
    for i in range(N):
        f = (ys[:, i] @ A[i].T + v1[:, i] @ B1[i].T + v2p[:, i] @ B2[i].T + z[:, i] @ C1[i].T + zt[:, i] @ C2[i].T)
        ys[:, i + 1] = ys[:, i] - f * dt + z[:, i] * ensemble.dW[:, i, None] + zt[:, i] * ensemble.dWt[:, i, None]
    diag = {
        "terminal_hat_algebraic": float(np.mean(np.sum((yhat[:, -1] - xi_hat) ** 2, axis=1))),
        "terminal_hat_resimulated": float(np.mean(np.sum((yr[:, -1] - xi_hat) ** 2, axis=1))),
        "terminal_resimulated": float(np.mean(np.sum((ys[:, -1] - xi) ** 2, axis=1))),
        "relation_yhat": float(np.max(np.abs(yhat + _apply(P1g, xhat) + phi))),
        "xhat_route_gap": float(np.sqrt(np.mean(np.sum((xs - xhat) ** 2, axis=2)))),
    }
    return FollowerClosedLoop(yhat=yhat, zhat=zhat, zthat=zthat, xhat=xhat, xhat_sim=xs, varphi_hat=vh,
                              phi_hat=phi_aff, y=y, z=z, zt=zt, x=x, v1=v1, v2=v2p, diagnostics=diag)


__all__ = [
    "FollowerPolicy", "LeaderPolicy", "follower_feedback", "leader_feedback", "EquilibriumTrajectories",
    "Primitives", "reconstruct_primitives", "stack_primitives", "recover_Z", "simulate_equilibrium",
    "EquilibriumResult", "relation_residuals", "resimulate_primitive_y", "resimulate_stacked_Y",
    "terminal_mismatch", "regression_check", "simulate_follower_closed_loop", "FollowerClosedLoop",
    "NOISE_DERIVED", "NOISE_DISPLAY", "SIGN_DERIVED", "SIGN_DISPLAY",
]
