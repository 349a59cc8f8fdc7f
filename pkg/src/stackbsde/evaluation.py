"""Cost functionals, stationarity residuals and perturbation tests of optimality."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .equilibrium import EquilibriumResult, EquilibriumTrajectories, FollowerClosedLoop, _apply, reconstruct_primitives
from .errors import StructuralError
from .filters import AffineProcess, LinearBSDESpec, solve_affine_linear_bsde
from .model import LQGameSpec, TimeGrid, sample_coefficients
from .riccati import BACKWARD, InverseGuard, RiccatiPath, RiccatiSolution, _T, integrate_matrix_ode
from .simulate import BrownianEnsemble, MCEstimate

FOLLOWER = "follower"
LEADER = "leader"
DEFAULT_EPSILONS = (-0.2, -0.1, -0.05, -0.025, 0.025, 0.05, 0.1, 0.2)
TRAPEZOID = "trapezoid"
SIMPSON = "simpson"


# ---------------------------------------------------------------------------
# costs


def time_integral(f: np.ndarray, dt: float, rule: str = TRAPEZOID) -> np.ndarray:
    """Integrate (M, N + 1) samples along axis 1."""
    if rule == TRAPEZOID:
        return dt * (0.5 * f[:, 0] + f[:, 1:-1].sum(axis=1) + 0.5 * f[:, -1])
    if rule == SIMPSON:
        N = f.shape[1] - 1
        if N % 2:
            raise ValueError("Simpson's rule needs an even number of steps")
        return dt / 3.0 * (f[:, 0] + 4.0 * f[:, 1:-1:2].sum(axis=1) + 2.0 * f[:, 2:-1:2].sum(axis=1) + f[:, -1])
    raise ValueError(f"unknown quadrature rule {rule!r}")


def _qform(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """<W(t) x, x> per path and time: W (N + 1, d, d), x (M, N + 1, d)."""
    return np.einsum("mti,tij,mtj->mt", x, W, x)


@dataclass
class CostReport:
    value: float
    se: float
    breakdown: Dict[str, float]
    per_path: np.ndarray = field(repr=False, default=None)

    def breakdown_total(self) -> float:
        return float(sum(self.breakdown.values()))


def _cost(terms: Dict[str, tuple], y0: np.ndarray, G: np.ndarray, dt: float, rule: str) -> CostReport:
    per_term = {}
    total = np.zeros(y0.shape[0])
    for name, (W, x) in terms.items():
        v = 0.5 * time_integral(_qform(W, x), dt, rule)
        per_term[name] = v
        total = total + v
    init = 0.5 * np.einsum("mi,ij,mj->m", y0, np.asarray(G, dtype=float), y0)
    per_term["initial"] = init
    total = total + init
    est = MCEstimate.from_samples(total)
    return CostReport(float(est.mean), float(est.se), {k: float(v.mean()) for k, v in per_term.items()}, total)


def _components(trajs, player: str):
    """(y, z, zt, v) arrays from equilibrium trajectories, a follower closed loop or a mapping."""
    if isinstance(trajs, EquilibriumTrajectories):
        pr = reconstruct_primitives(trajs)
        v = trajs.v1 if player == FOLLOWER else trajs.v2
        return pr.y, pr.z, pr.zt, v
    if isinstance(trajs, FollowerClosedLoop):
        return trajs.y, trajs.z, trajs.zt, (trajs.v1 if player == FOLLOWER else trajs.v2)
    key = "v1" if player == FOLLOWER else "v2"
    try:
        return trajs["y"], trajs["z"], trajs["zt"], trajs[key]
    except (KeyError, TypeError) as exc:
        raise StructuralError(f"trajectories lack component {exc}") from None


def _cost_from_parts(spec: LQGameSpec, grid: TimeGrid, y, z, zt, v, player: str, rule: str, tab=None) -> CostReport:
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    g = lambda k: tab[k][::2]
    if player == FOLLOWER:
        terms = {"state": (g("Q1"), y), "control": (g("R1"), v), "z": (g("S1"), z), "zt": (g("S2"), zt)}
        G = spec.G1
    else:
        terms = {"state": (g("Q2"), y), "control": (g("R2"), v), "z": (g("N1"), z), "zt": (g("N2"), zt)}
        G = spec.G2
    return _cost(terms, y[:, 0], G, grid.dt, rule)


def evaluate_J1(trajs, spec: LQGameSpec, grid: TimeGrid, rule: str = TRAPEZOID) -> CostReport:
    """1/2 E{ int [<Q1 y,y> + <R1 v1,v1> + <S1 z,z> + <S2 zt,zt>] dt + <G1 y(0), y(0)> }."""
    y, z, zt, v = _components(trajs, FOLLOWER)
    return _cost_from_parts(spec, grid, y, z, zt, v, FOLLOWER, rule)


def evaluate_J2(trajs, spec: LQGameSpec, grid: TimeGrid, rule: str = TRAPEZOID) -> CostReport:
    """Leader cost with weights Q2, R2, N1, N2, G2."""
    y, z, zt, v = _components(trajs, LEADER)
    return _cost_from_parts(spec, grid, y, z, zt, v, LEADER, rule)


# ---------------------------------------------------------------------------
# stationarity residuals


@dataclass
class ResidualPath:
    t: np.ndarray
    mean: np.ndarray         # (N + 1, k)
    se: np.ndarray
    rms: np.ndarray          # (N + 1,)

    def zscores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.se > 0, np.abs(self.mean) / np.where(self.se > 0, self.se, 1.0),
                         np.where(self.mean != 0, np.inf, 0.0))
        return z

    def within(self, k: float = 3.0, indices: Optional[Sequence[int]] = None) -> bool:
        z = self.zscores()
        if indices is not None:
            z = z[list(indices)]
        return bool(np.all(z <= k))


def _residual_path(r: np.ndarray, t: np.ndarray) -> ResidualPath:
    est = MCEstimate.from_samples(r)
    return ResidualPath(t, est.mean, est.se, np.sqrt(np.mean(np.sum(r ** 2, axis=2), axis=0)))


def simulate_follower_adjoint(spec: LQGameSpec, grid: TimeGrid, yhat, zhat, ensemble: BrownianEnsemble, tab=None):
    """Filtered follower adjoint from its own forward equation, started at G1 y_hat(0)."""
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    g = lambda k: tab[k][::2]
    A, Q1, C1, S1 = g("A"), g("Q1"), g("C1"), g("S1")
    dt = grid.dt
    x = np.empty_like(yhat)
    x[:, 0] = yhat[:, 0] @ np.asarray(spec.G1).T
    for i in range(grid.N):
        x[:, i + 1] = (x[:, i] + (x[:, i] @ A[i] + yhat[:, i] @ Q1[i].T) * dt
                       + (x[:, i] @ C1[i] + zhat[:, i] @ S1[i].T) * ensemble.dW[:, i, None])
    return x


def follower_stationarity_residual(trajs: EquilibriumTrajectories, spec: LQGameSpec, ensemble: BrownianEnsemble,
                                   gain_scale: float = 1.0, v1: Optional[np.ndarray] = None) -> ResidualPath:
    """r = -R1 v1 - B1^T x_hat, with x_hat simulated from the equilibrium (y_hat, z_hat).

    ``gain_scale`` multiplies the follower feedback (1.1 is a 10% mis-specified gain).
    """
    grid = trajs.grid
    tab = sample_coefficients(spec, grid)
    pr = reconstruct_primitives(trajs)
    x = simulate_follower_adjoint(spec, grid, pr.yhat, pr.zhat, ensemble, tab)
    v = (trajs.v1 if v1 is None else v1) * gain_scale
    r = -_apply(tab.on_grid("R1"), v) - _apply(_T(tab.on_grid("B1")), x)
    return _residual_path(r, grid.t)


def simulate_leader_adjoint(trajs: EquilibriumTrajectories, sol: RiccatiSolution, ensemble: BrownianEnsemble):
    """(X, X_hat) from the forward stacked equations, started at Gbar Y(0).

    dX_hat = [(A1 + S5) X_hat + (B1 + S6) Y_hat + C Z_hat] dt + [At1 X_hat + C^T Y_hat + (Ct1 + Ct2) Z_hat] dW
    dX     = [A1 X + S5 X_hat + B1 Y + S6 Y_hat + C Z_hat] dt + [At1 X + C^T Y_hat + Ct1 Z + Ct2 Z_hat] dW
             + [At2 X + Ct3 Zt] dW~
    """
    b = {k: v[::2] for k, v in sol.aug.blocks.items()}
    sig = sol.sigma_on_grid()
    S5, S6 = sig["S5"], sig["S6"]
    dt = trajs.grid.dt
    X = np.empty_like(trajs.X)
    Xh = np.empty_like(trajs.X)
    X[:, 0] = trajs.Y[:, 0] @ np.asarray(sol.aug.Gbar).T
    Xh[:, 0] = X[:, 0]
    Y, Yh, Z, Zh, Zt = trajs.Y, trajs.Yh, trajs.Z, trajs.Zh, trajs.Zt
    mv = lambda Mt, x: x @ Mt.T
    for i in range(trajs.grid.N):
        dW = ensemble.dW[:, i, None]
        CZh = mv(b["C"][i], Zh[:, i])
        CtY = mv(_T(b["C"][i]), Yh[:, i])
        Xh[:, i + 1] = (Xh[:, i] + (mv(b["A1"][i] + S5[i], Xh[:, i]) + mv(b["B1"][i] + S6[i], Yh[:, i]) + CZh) * dt
                        + (mv(b["At1"][i], Xh[:, i]) + CtY + mv(b["Ct1"][i] + b["Ct2"][i], Zh[:, i])) * dW)
        X[:, i + 1] = (X[:, i] + (mv(b["A1"][i], X[:, i]) + mv(S5[i], Xh[:, i]) + mv(b["B1"][i], Y[:, i])
                                  + mv(S6[i], Yh[:, i]) + CZh) * dt
                       + (mv(b["At1"][i], X[:, i]) + CtY + mv(b["Ct1"][i], Z[:, i]) + mv(b["Ct2"][i], Zh[:, i])) * dW
                       + (mv(b["At2"][i], X[:, i]) + mv(b["Ct3"][i], Zt[:, i])) * ensemble.dWt[:, i, None])
    return X, Xh


def leader_stationarity_residual(trajs: EquilibriumTrajectories, sol: RiccatiSolution, ensemble: BrownianEnsemble,
                                 gain_scale: float = 1.0, v2: Optional[np.ndarray] = None) -> ResidualPath:
    """r = Bt2^T X + R2 v2 + D^T Y_hat, i.e. B2^T Q + R2 v2 + B2^T P2 p_hat, with X simulated forward."""
    X, _ = simulate_leader_adjoint(trajs, sol, ensemble)
    aug = sol.aug
    R2 = np.linalg.inv(aug.R2inv[::2])
    v = (trajs.v2 if v2 is None else v2) * gain_scale
    r = _apply(_T(aug.blocks["Bt2"][::2]), X) + _apply(R2, v) + _apply(_T(aug.blocks["D"][::2]), trajs.Yh)
    return _residual_path(r, trajs.grid.t)


# ---------------------------------------------------------------------------
# perturbation directions


_BASIS = (lambda s: np.ones_like(s), lambda s: s, lambda s: np.sin(np.pi * s), lambda s: np.cos(np.pi * s))


def random_direction(rng: np.random.Generator, grid: TimeGrid, dim: int, player: str = FOLLOWER,
                     scale: float = 1.0) -> AffineProcess:
    """u(t) = a(t) + b(t) W(t) [+ c(t) W~(t) for the leader] with smooth random coefficients."""
    s = grid.t_half / grid.T
    F = np.stack([f(s) for f in _BASIS], axis=1)           # (2N + 1, 4)

    def coef():
        return scale * F @ rng.standard_normal((len(_BASIS), dim)) / np.sqrt(len(_BASIS))

    a, b = coef(), coef()
    c = coef() if player == LEADER else None
    return AffineProcess(grid, a, b, c, name=f"{player}-direction")


def _check_direction(u: AffineProcess, player: str):
    if player == FOLLOWER and u.c is not None and np.any(u.c):
        raise StructuralError("follower directions must be adapted to W alone")


# ---------------------------------------------------------------------------
# responses to a perturbation


def follower_response(spec: LQGameSpec, grid: TimeGrid, u: AffineProcess, tab=None) -> AffineProcess:
    """Linear response of y to v1 -> v1 + u with v2 fixed:
    -d dy = [A dy + B1 u + C1 dz + C2 dzt] dt - dz dW - dzt dW~,  dy(T) = 0.
    With u W-adapted and affine, dzt = 0 and dy is affine in W."""
    _check_direction(u, FOLLOWER)
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    n = spec.n
    bsde = LinearBSDESpec(MY=tab["A"], MZ=tab["C1"], c0=np.zeros(n), c1=np.zeros(n),
                          forcing=u.transform(tab["B1"]))
    return solve_affine_linear_bsde(bsde, grid, name="follower-response")


@dataclass
class LeaderResponse:
    """Response of the leader state to v2 -> v2 + u under the fixed follower reaction map.

    d y = Pi phi + a + b W + c W~, phi the perturbation of the follower's forward filter.
    """

    Pi: RiccatiPath
    ab: AffineProcess
    c: np.ndarray            # (2N + 1, n)
    phi: np.ndarray          # (M, N + 1, n)
    yhat: np.ndarray
    zhat: np.ndarray
    y: np.ndarray
    zt: np.ndarray
    v1: np.ndarray


def _reaction_coefficients(sol: RiccatiSolution, spec: LQGameSpec, grid: TimeGrid):
    """Coefficients of the follower filter under the reaction map, on the interleaved grid."""
    tab = sol.tab
    P1h, P2h = sol.P1.half(), sol.P2.half()
    guard = InverseGuard("leader-response", grid.t_half)
    from .riccati import follower_coupling
    cpl = follower_coupling(tab, P1h, guard)
    return dict(
        Abar=_T(tab["A"]) - P2h @ tab["BRB1"] - P2h @ cpl["M2"],
        K=P2h @ cpl["M1"] @ P2h,
        L=P2h @ tab["C1"],
        G=_T(tab["C1"]) @ P2h,
        H=tab["S1"] - P2h,
        Dy=tab["BRB1"] @ P2h,
        BRB1=tab["BRB1"],
        P2B2=P2h @ tab["B2"],
        A=tab["A"], B2=tab["B2"], C1=tab["C1"], C2=tab["C2"], C1T=_T(tab["C1"]),
        P2=P2h,
    )


def solve_reaction_riccati(sol: RiccatiSolution, spec: LQGameSpec, grid: TimeGrid, co=None) -> RiccatiPath:
    """Pi' + Pi Abar + A Pi + Pi K Pi - Dy Pi - BRB1 + (Pi L + C1) E Pi (G Pi + C1^T) = 0, Pi(T) = 0,
    E = (I - Pi H)^{-1}."""
    co = co or _reaction_coefficients(sol, spec, grid)
    n = spec.n
    I = np.eye(n)
    guard = InverseGuard("reaction", grid.t_half)

    def rhs(h, P):
        E = guard.inv(I - P @ co["H"][h], h, "I - Pi H")
        return -(P @ co["Abar"][h] + co["A"][h] @ P + P @ co["K"][h] @ P - co["Dy"][h] @ P - co["BRB1"][h]
                 + (P @ co["L"][h] + co["C1"][h]) @ E @ P @ (co["G"][h] @ P + co["C1T"][h]))

    return integrate_matrix_ode(rhs, np.zeros((n, n)), grid, BACKWARD, name="reaction", guard=guard)


def leader_response(sol: RiccatiSolution, spec: LQGameSpec, u: AffineProcess, ensemble: BrownianEnsemble,
                    Pi: Optional[RiccatiPath] = None, co=None) -> LeaderResponse:
    grid = sol.grid
    co = co or _reaction_coefficients(sol, spec, grid)
    Pi = Pi or solve_reaction_riccati(sol, spec, grid, co)
    n = spec.n
    Ph = Pi.half()
    I = np.eye(n)
    E = InverseGuard("reaction", grid.t_half).inv_batch(I - Ph @ co["H"], "I - Pi H")
    zero = np.zeros(n)
    H = 2 * grid.N + 1
    # W~ coefficient: c' = -A c - B2 u2
    if u.c is not None:
        u2 = np.einsum("hij,hj->hi", co["B2"], u.c)
        cres = solve_affine_linear_bsde(LinearBSDESpec(MY=co["A"], MZ=np.zeros_like(co["A"]), c0=zero, c1=zero,
                                                       forcing=AffineProcess(grid, u2, np.zeros((H, n)))), grid)
        c = cres.a
    else:
        c = np.zeros((H, n))
    gain_u = Ph @ co["P2B2"] + co["B2"]
    MY = Ph @ co["K"] + (Ph @ co["L"] + co["C1"]) @ E @ Ph @ co["G"] + co["A"] - co["Dy"]
    MZ = (Ph @ co["L"] + co["C1"]) @ E
    fa = np.einsum("hij,hj->hi", gain_u, u.a) + np.einsum("hij,hj->hi", co["C2"], c)
    fb = np.einsum("hij,hj->hi", gain_u, u.b)
    ab = solve_affine_linear_bsde(LinearBSDESpec(MY=MY, MZ=MZ, c0=zero, c1=zero,
                                                 forcing=AffineProcess(grid, fa, fb)), grid, name="leader-response")
    # perturbation of the follower filter, forward from 0
    g = lambda k: co[k][::2]
    Pg, Eg = Pi.values, E[::2]
    Abar, K, L, G, Hs, C1T, P2B2 = g("Abar"), g("K"), g("L"), g("G"), g("H"), g("C1T"), g("P2B2")
    W = ensemble.W
    uh = u.a_grid[None] + W[:, :, None] * u.b_grid[None]
    a_g, b_g = ab.a_grid, ab.b_grid
    M, N, dt = ensemble.M, grid.N, grid.dt
    phi = np.zeros((M, N + 1, n))
    yh = np.empty_like(phi)
    zh = np.empty_like(phi)
    for i in range(N + 1):
        yh[:, i] = phi[:, i] @ Pg[i].T + a_g[i] + W[:, i, None] * b_g[i]
        inner = (yh[:, i] @ G[i].T + phi[:, i] @ C1T[i].T) @ Pg[i].T + b_g[i]
        zh[:, i] = inner @ Eg[i].T
        if i == N:
            break
        drift = phi[:, i] @ Abar[i].T + yh[:, i] @ K[i].T + zh[:, i] @ L[i].T + uh[:, i] @ P2B2[i].T
        diff = yh[:, i] @ G[i].T + phi[:, i] @ C1T[i].T + zh[:, i] @ Hs[i].T
        phi[:, i + 1] = phi[:, i] + drift * dt + diff * ensemble.dW[:, i, None]
    c_g = c[::2]
    y = yh + ensemble.Wt[:, :, None] * c_g[None]
    RB = -sol.tab.on_grid("R1inv") @ _T(sol.tab.on_grid("B1"))
    v1 = _apply(RB, _apply(sol.P2.values, yh) + phi)
    zt = np.broadcast_to(c_g, (M, N + 1, n))
    return LeaderResponse(Pi=Pi, ab=ab, c=c, phi=phi, yhat=yh, zhat=zh, y=y, zt=zt, v1=v1)


# ---------------------------------------------------------------------------
# perturbation curves


@dataclass
class OptimalityReport:
    player: str
    epsilons: np.ndarray
    delta: np.ndarray           # mean Delta J per epsilon
    delta_se: np.ndarray
    curvature: float
    slope: float
    r2: float
    central_difference: float
    central_difference_se: float
    residual: Optional[ResidualPath] = None

    @property
    def central_z(self) -> float:
        if self.central_difference_se == 0:
            return 0.0 if self.central_difference == 0 else np.inf
        return abs(self.central_difference) / self.central_difference_se

    def passes(self, k: float = 3.0, r2_min: float = 0.99) -> bool:
        return self.curvature > 0 and self.r2 >= r2_min and self.central_z <= k

    def to_dict(self):
        return {"player": self.player, "epsilons": self.epsilons.tolist(), "delta": self.delta.tolist(),
                "delta_se": self.delta_se.tolist(), "curvature": self.curvature, "slope": self.slope, "r2": self.r2,
                "central_difference": self.central_difference, "central_difference_se": self.central_difference_se,
                "central_z": self.central_z}


def fit_quadratic(eps: np.ndarray, delta: np.ndarray):
    """Least squares delta ~ s eps + h eps^2 through the origin; returns (s, h, R^2)."""
    F = np.column_stack([eps, eps ** 2])
    coef, *_ = np.linalg.lstsq(F, delta, rcond=None)
    resid = delta - F @ coef
    tss = np.sum((delta - delta.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / tss if tss > 0 else 1.0
    return float(coef[0]), float(coef[1]), float(r2)


def _curve(player, eps, base_cost, cost_at) -> OptimalityReport:
    eps = np.asarray(sorted(eps), dtype=float)
    per = {}
    for e in eps:
        per[e] = cost_at(e) - base_cost
    delta = np.array([per[e].mean() for e in eps])
    se = np.array([per[e].std(ddof=1) / np.sqrt(len(per[e])) for e in eps])
    s, h, r2 = fit_quadratic(eps, delta)
    small = float(np.min(np.abs(eps)))
    if small not in per or -small not in per:
        raise ValueError("epsilon grid must be symmetric around 0")
    cd = (per[small] - per[-small]) / (2 * small)
    return OptimalityReport(player, eps, delta, se, h, s, r2, float(cd.mean()), float(cd.std(ddof=1) / np.sqrt(len(cd))))


def perturbation_curve(result: EquilibriumResult, spec: LQGameSpec, ensemble: BrownianEnsemble, player: str,
                       direction: AffineProcess, epsilons: Sequence[float] = DEFAULT_EPSILONS,
                       reaction: Optional[tuple] = None) -> OptimalityReport:
    """Delta J(eps) with common random numbers.

    FOLLOWER: v2 fixed, v1 -> v1 + eps u, the state re-solved by linearity.
    LEADER:   the follower reaction map fixed, v2 -> v2 + eps u; the leader state equation
              is re-solved through the reaction decoupling.
    """
    tr = result.traj
    grid = tr.grid
    tab = result.sol.tab
    pr = reconstruct_primitives(tr)
    W, Wt = ensemble.W, ensemble.Wt
    if player == FOLLOWER:
        _check_direction(direction, player)
        resp = follower_response(spec, grid, direction, tab)
        dy = resp.evaluate(W)
        dz = np.broadcast_to(resp.b_grid, dy.shape)
        u = direction.evaluate(W)
        base = _cost_from_parts(spec, grid, pr.y, pr.z, pr.zt, tr.v1, FOLLOWER, TRAPEZOID, tab).per_path

        def cost_at(e):
            return _cost_from_parts(spec, grid, pr.y + e * dy, pr.z + e * dz, pr.zt, tr.v1 + e * u, FOLLOWER,
                                    TRAPEZOID, tab).per_path
    elif player == LEADER:
        Pi, co = reaction if reaction is not None else (None, None)
        resp = leader_response(result.sol, spec, direction, ensemble, Pi, co)
        u = direction.evaluate(W, Wt if direction.c is not None else None)
        base = _cost_from_parts(spec, grid, pr.y, pr.z, pr.zt, tr.v2, LEADER, TRAPEZOID, tab).per_path

        def cost_at(e):
            return _cost_from_parts(spec, grid, pr.y + e * resp.y, pr.z + e * resp.zhat, pr.zt + e * resp.zt,
                                    tr.v2 + e * u, LEADER, TRAPEZOID, tab).per_path
    else:
        raise ValueError(f"unknown player {player!r}")
    return _curve(player, epsilons, base, cost_at)


def perturbation_suite(result: EquilibriumResult, spec: LQGameSpec, ensemble: BrownianEnsemble, player: str,
                       n_directions: int = 20, seed: int = 0,
                       epsilons: Sequence[float] = DEFAULT_EPSILONS) -> List[OptimalityReport]:
    rng = np.random.default_rng(seed)
    dim = spec.k1 if player == FOLLOWER else spec.k2
    reaction = None
    if player == LEADER:
        co = _reaction_coefficients(result.sol, spec, result.sol.grid)
        reaction = (solve_reaction_riccati(result.sol, spec, result.sol.grid, co), co)
    out = []
    for _ in range(n_directions):
        u = random_direction(rng, result.traj.grid, dim, player)
        out.append(perturbation_curve(result, spec, ensemble, player, u, epsilons, reaction))
    return out


__all__ = [
    "CostReport", "evaluate_J1", "evaluate_J2", "time_integral", "ResidualPath", "follower_stationarity_residual",
    "leader_stationarity_residual", "simulate_follower_adjoint", "simulate_leader_adjoint", "random_direction",
    "follower_response", "leader_response", "solve_reaction_riccati", "LeaderResponse", "OptimalityReport",
    "fit_quadratic", "perturbation_curve", "perturbation_suite", "FOLLOWER", "LEADER", "DEFAULT_EPSILONS",
    "TRAPEZOID", "SIMPSON",
]
