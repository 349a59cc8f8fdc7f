"""Filters adapted to the W-filtration.

Backward filters solve linear BSDEs with deterministic coefficients. Their
solutions are affine in W(t), so the SEMI_ANALYTIC backend reduces them to
coefficient ODEs (RK4, backward). The MONTE_CARLO backend runs a
least-squares backward induction on the basis {1, W(t_i)} and serves as a
cross-check. Forward filters are stepped with Euler-Maruyama per path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .errors import NumericalError, StructuralError
from .model import LQGameSpec, TerminalMode, TimeGrid, sample_coefficients
from .riccati import (BACKWARD, InverseGuard, RiccatiPath, RiccatiSolution, _T, follower_coupling,
                      integrate_matrix_ode)
from .simulate import BrownianEnsemble, PathProcess, regress

SEMI_ANALYTIC = "affine"
MONTE_CARLO = "mc"


# ---------------------------------------------------------------------------
# affine processes


@dataclass
class AffineProcess:
    """V(t) = a(t) + b(t) W(t) [+ c(t) W~(t)].

    Coefficients are stored on the interleaved grid (2N + 1 rows) so they can
    feed RK4 stages directly. The dW integrand of V is b(t).
    """

    grid: TimeGrid
    a: np.ndarray
    b: np.ndarray
    c: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        H = 2 * self.grid.N + 1
        for k in ("a", "b", "c"):
            v = getattr(self, k)
            if v is None:
                continue
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            if v.shape[0] != H:
                raise StructuralError(f"affine coefficient {k} needs {H} rows, got {v.shape[0]}")
            setattr(self, k, v)

    @property
    def d(self) -> int:
        return self.a.shape[1]

    @property
    def a_grid(self):
        return self.a[::2]

    @property
    def b_grid(self):
        return self.b[::2]

    @property
    def c_grid(self):
        return None if self.c is None else self.c[::2]

    @property
    def z(self):
        """dW integrand on grid points."""
        return self.b_grid

    @classmethod
    def zero(cls, grid: TimeGrid, d: int, name: str = "") -> "AffineProcess":
        H = 2 * grid.N + 1
        return cls(grid, np.zeros((H, d)), np.zeros((H, d)), name=name)

    @classmethod
    def constant(cls, grid: TimeGrid, value, name: str = "") -> "AffineProcess":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        H = 2 * grid.N + 1
        return cls(grid, np.tile(v, (H, 1)), np.zeros((H, len(v))), name=name)

    @classmethod
    def from_functions(cls, grid: TimeGrid, fa: Callable, fb: Optional[Callable] = None,
                       name: str = "") -> "AffineProcess":
        th = grid.t_half
        a = np.array([np.atleast_1d(fa(t)) for t in th], dtype=float)
        b = np.array([np.atleast_1d(fb(t)) for t in th], dtype=float) if fb else np.zeros_like(a)
        return cls(grid, a, b, name=name)

    def evaluate(self, W: np.ndarray, Wt: Optional[np.ndarray] = None) -> np.ndarray:
        """Per-path values on grid points; W, Wt have shape (M, N + 1)."""
        out = self.a_grid[None] + W[:, :, None] * self.b_grid[None]
        if self.c is not None:
            if Wt is None:
                raise ValueError("process loads on W~; pass Wt")
            out = out + Wt[:, :, None] * self.c_grid[None]
        return out

    def transform(self, Mh: np.ndarray, name: str = "") -> "AffineProcess":
        """Apply a deterministic matrix path Mh (2N + 1, r, d) to every coefficient."""
        f = lambda v: None if v is None else np.einsum("hij,hj->hi", Mh, v)
        return AffineProcess(self.grid, f(self.a), f(self.b), f(self.c), name=name)


@dataclass
class LinearBSDESpec:
    """-dY = [MY Y + MZ Z + MZt Zt + f(t)] dt - Z dW - Zt dW~,  Y(T) = c0 + c1 W(T) + c2 W~(T).

    Matrices live on the interleaved grid, shape (2N + 1, d, d). ``forcing`` is
    an AffineProcess (or None). ``MZt`` and ``c2`` are only used when the
    W~ loading is explicitly allowed.
    """

    MY: np.ndarray
    MZ: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    forcing: Optional[AffineProcess] = None
    c2: Optional[np.ndarray] = None
    MZt: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c0 = np.asarray(self.c0, dtype=float)
        self.c1 = np.asarray(self.c1, dtype=float)
        if self.c2 is not None:
            self.c2 = np.asarray(self.c2, dtype=float)

    @property
    def d(self) -> int:
        return self.MY.shape[1]


def solve_affine_linear_bsde(bsde: LinearBSDESpec, grid: TimeGrid, allow_tilde: bool = False,
                             name: str = "affine-bsde") -> AffineProcess:
    """Affine-ansatz solve: Y = a + b W (+ c W~), Z = b, Zt = c.

    Matching coefficients gives, backward from (a, b, c)(T) = (c0, c1, c2),
        b' = -MY b - f_b
        c' = -MY c - f_c
        a' = -MY a - MZ b - MZt c - f_a
    which is integrated with RK4.
    """
    d = bsde.d
    c0 = np.asarray(bsde.c0, dtype=float).reshape(d)
    c1 = np.asarray(bsde.c1, dtype=float).reshape(d)
    c2 = np.zeros(d) if bsde.c2 is None else np.asarray(bsde.c2, dtype=float).reshape(d)
    tilde = bool(np.any(c2)) or (bsde.forcing is not None and bsde.forcing.c is not None
                                 and bool(np.any(bsde.forcing.c)))
    if tilde and not allow_tilde:
        raise StructuralError("terminal or forcing loads on W~; the affine W-backend needs a W-measurable terminal")
    MY, MZ = bsde.MY, bsde.MZ
    H = MY.shape[0]
    MZt = bsde.MZt if bsde.MZt is not None else np.zeros_like(MY)
    fr = bsde.forcing
    fa = fr.a if fr is not None else np.zeros((H, d))
    fb = fr.b if fr is not None else np.zeros((H, d))
    fc = fr.c if (fr is not None and fr.c is not None) else np.zeros((H, d))
    k = 3 if tilde else 2

    def rhs(h, V):
        a, b = V[:d, 0], V[d:2 * d, 0]
        db = -MY[h] @ b - fb[h]
        da = -MY[h] @ a - MZ[h] @ b - fa[h]
        out = [da, db]
        if tilde:
            c = V[2 * d:, 0]
            out[0] = da - MZt[h] @ c
            out.append(-MY[h] @ c - fc[h])
        return np.concatenate(out)[:, None]

    boundary = np.concatenate([c0, c1, c2][:k])[:, None]
    path = integrate_matrix_ode(rhs, boundary, grid, BACKWARD, name=name)
    V = path.half()[:, :, 0]
    return AffineProcess(grid, V[:, :d], V[:, d:2 * d], V[:, 2 * d:] if tilde else None, name=name)


# ---------------------------------------------------------------------------
# Monte Carlo backend: least-squares backward induction


@dataclass
class LSMCResult:
    Y: np.ndarray            # (M, N + 1, d)
    Z: np.ndarray            # (M, N + 1, d), last row copies N - 1
    Zt: Optional[np.ndarray]
    coef: np.ndarray         # (N + 1, k, d) regression coefficients of Y on the basis


def lsmc_linear_bsde(bsde: LinearBSDESpec, ensemble: BrownianEnsemble, use_tilde: bool = False) -> LSMCResult:
    """Backward induction with regression on {1, W(t_i)} (plus W~(t_i) if ``use_tilde``).

    Trapezoidal weighting in Y (the Y-linear part is implicit), explicit Z:
        Z_i  = E_i[Y_{i+1} dW_i] / dt
        (I - dt/2 MY_i) Y_i = E_i[Y_{i+1} + dt/2 f_{i+1}] + dt/2 (MZ_i Z_i + F_i)
    """
    grid = ensemble.grid
    M, N, dt = ensemble.M, grid.N, grid.dt
    d = bsde.d
    W, Wt = ensemble.W, ensemble.Wt
    MY, MZ = bsde.MY[::2], bsde.MZ[::2]
    MZt = bsde.MZt[::2] if bsde.MZt is not None else np.zeros_like(MY)
    fr = bsde.forcing
    F = fr.evaluate(W, Wt) if fr is not None else np.zeros((M, N + 1, d))
    c2 = np.zeros(d) if bsde.c2 is None else np.asarray(bsde.c2, dtype=float)
    Y = np.empty((M, N + 1, d))
    Z = np.zeros((M, N + 1, d))
    Zt = np.zeros((M, N + 1, d)) if use_tilde else None
    Y[:, N] = bsde.c0[None] + W[:, N, None] * bsde.c1[None] + Wt[:, N, None] * c2[None]
    k = 3 if use_tilde else 2
    coef = np.zeros((N + 1, k, d))
    coef[N, 0], coef[N, 1] = bsde.c0, bsde.c1
    if use_tilde:
        coef[N, 2] = c2
    I = np.eye(d)

    def basis(i):
        cols = [np.ones(M)]
        if i > 0:
            cols.append(W[:, i])
            if use_tilde:
                cols.append(Wt[:, i])
        return np.column_stack(cols)

    for i in range(N - 1, -1, -1):
        X = basis(i)
        Yn = Y[:, i + 1]
        f_next = Yn @ MY[i + 1].T + Z[:, i + 1] @ MZ[i + 1].T + F[:, i + 1]
        if use_tilde:
            f_next = f_next + Zt[:, i + 1] @ MZt[i + 1].T
        fit_z = regress(Yn * ensemble.dW[:, i, None] / dt, X)
        Z[:, i] = fit_z.fitted
        rhs_target = Yn + 0.5 * dt * f_next
        fit_y = regress(rhs_target, X)
        extra = Z[:, i] @ MZ[i].T + F[:, i]
        if use_tilde:
            Zt[:, i] = regress(Yn * ensemble.dWt[:, i, None] / dt, X).fitted
            extra = extra + Zt[:, i] @ MZt[i].T
        L = np.linalg.inv(I - 0.5 * dt * MY[i])
        Y[:, i] = (fit_y.fitted + 0.5 * dt * extra) @ L.T
        coef[i, : X.shape[1]] = regress(Y[:, i], X).coef.reshape(X.shape[1], d)
    Z[:, N] = Z[:, N - 1]
    if use_tilde:
        Zt[:, N] = Zt[:, N - 1]
    return LSMCResult(Y, Z, Zt, coef)


def affine_from_lsmc(res: LSMCResult, grid: TimeGrid, name: str = "lsmc") -> AffineProcess:
    """Affine process from regression coefficients; midpoints by linear interpolation."""
    def interleave(v):
        out = np.empty((2 * grid.N + 1,) + v.shape[1:])
        out[::2] = v
        out[1::2] = 0.5 * (v[:-1] + v[1:])
        return out

    c = interleave(res.coef[:, 2]) if res.coef.shape[1] > 2 else None
    return AffineProcess(grid, interleave(res.coef[:, 0]), interleave(res.coef[:, 1]), c, name=name)


@dataclass
class CrossValidationRow:
    t: float
    component: int
    coefficient: str
    affine: float
    mc: float
    se: float

    @property
    def zscore(self) -> float:
        return abs(self.mc - self.affine) / self.se if self.se > 0 else (0.0 if self.mc == self.affine else np.inf)

    def ok(self, k: float = 3.0) -> bool:
        return self.zscore <= k


def cross_validate(affine: AffineProcess, bsde: LinearBSDESpec, ensemble: BrownianEnsemble,
                   indices: Sequence[int], batches: int = 50) -> list:
    """Compare affine coefficients (a, b) with LSMC estimates at grid indices.

    The ensemble is split into ``batches`` equal groups; each runs its own
    backward induction and the standard error is the spread of the batch
    estimates divided by sqrt(batches).
    """
    M = ensemble.M
    size = M // batches
    if size < 20:
        raise ValueError("too few paths per batch")
    est = []
    for b in range(batches):
        sub = ensemble.subset(slice(b * size, (b + 1) * size))
        est.append(lsmc_linear_bsde(bsde, sub).coef)
    est = np.stack(est)               # (B, N + 1, 2, d)
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / np.sqrt(batches)
    rows = []
    t = ensemble.grid.t
    for i in indices:
        for j in range(affine.d):
            rows.append(CrossValidationRow(float(t[i]), j, "a", float(affine.a_grid[i, j]), float(mean[i, 0, j]),
                                           float(se[i, 0, j])))
            if i > 0:
                rows.append(CrossValidationRow(float(t[i]), j, "b", float(affine.b_grid[i, j]),
                                               float(mean[i, 1, j]), float(se[i, 1, j])))
    return rows


# ---------------------------------------------------------------------------
# follower filters


def _v2_on_paths(v2hat, ensemble: BrownianEnsemble, k2: int) -> np.ndarray:
    M, N = ensemble.M, ensemble.grid.N
    if v2hat is None:
        return np.zeros((M, N + 1, k2))
    if isinstance(v2hat, AffineProcess):
        return v2hat.evaluate(ensemble.W)
    if isinstance(v2hat, PathProcess):
        return v2hat.values
    return np.asarray(v2hat, dtype=float)


def hat_phi_bsde(spec: LQGameSpec, P1: RiccatiPath, grid: TimeGrid, v2hat: Optional[AffineProcess] = None,
                 tab=None) -> LinearBSDESpec:
    """-d phi = {(A - P1 Q1) phi + C1 (P1 S1 + I)^{-1} eta - B2 v2hat} dt - eta dW,  phi(T) = -xi_hat."""
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    P1h = P1.half()
    cpl = follower_coupling(tab, P1h, InverseGuard("phi-hat", grid.t_half))
    MY = tab["A"] - P1h @ tab["Q1"]
    MZ = tab["C1"] @ cpl["E1"]
    forcing = None
    if v2hat is not None:
        if v2hat.c is not None and np.any(v2hat.c):
            raise StructuralError("v2hat must be W-adapted")
        forcing = v2hat.transform(-tab["B2"], name="-B2 v2hat")
    term = spec.terminal
    return LinearBSDESpec(MY=MY, MZ=MZ, c0=-term.c0, c1=-term.c1, forcing=forcing)


def solve_hat_phi(spec: LQGameSpec, P1: RiccatiPath, grid: TimeGrid, v2hat: Optional[AffineProcess] = None,
                  tab=None) -> AffineProcess:
    """Filter pair (phi_hat, eta_hat); eta_hat is the ``b`` coefficient.

    The terminal uses xi_hat = c0 + c1 W(T): the W~ loading of xi has zero
    conditional mean given W.
    """
    return solve_affine_linear_bsde(hat_phi_bsde(spec, P1, grid, v2hat, tab), grid, name="phi_hat")


@dataclass
class FollowerFilterGains:
    """Coefficients of the forward follower filter on grid points."""

    drift_v: np.ndarray
    drift_eta: np.ndarray
    drift_v2: np.ndarray
    diff_v: np.ndarray
    diff_phi: np.ndarray
    diff_eta: np.ndarray


def follower_filter_gains(spec: LQGameSpec, P1: RiccatiPath, P2: RiccatiPath, grid: TimeGrid,
                          tab=None) -> FollowerFilterGains:
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    n = spec.n
    I = np.eye(n)
    P1g, P2g = P1.values, P2.values
    g = lambda k: tab[k][::2]
    guard = InverseGuard("varphi-hat", grid.t)
    E1 = guard.inv_batch(P1g @ g("S1") + I, "P1 S1 + I")
    E2 = guard.inv_batch(P1g @ g("S2") + I, "P1 S2 + I")
    M1 = g("C1") @ E1 @ P1g @ _T(g("C1"))
    M2 = g("C2") @ E2 @ P1g @ _T(g("C2"))
    IPP = I + P2g @ P1g
    IPPi = guard.inv_batch(IPP, "I + P2 P1")
    SPi = guard.inv_batch(g("S1") @ P1g + I, "S1 P1 + I")
    Gv = IPP @ SPi @ _T(g("C1")) @ IPPi
    return FollowerFilterGains(
        drift_v=_T(g("A")) - P2g @ g("BRB1") - P2g @ M1 - P2g @ M2,
        drift_eta=-P2g @ g("C1") @ E1,
        drift_v2=P2g @ g("B2"),
        diff_v=Gv,
        diff_phi=-Gv @ P2g,
        diff_eta=-(g("S1") - P2g) @ E1,
    )


def _mv(Mt: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply one matrix to a batch of row vectors: (r, d) and (M, d) -> (M, r)."""
    return x @ Mt.T


def simulate_hat_varphi_follower(spec: LQGameSpec, P1: RiccatiPath, P2: RiccatiPath, phi_hat: AffineProcess,
                                 grid: TimeGrid, v2hat, ensemble: BrownianEnsemble, tab=None) -> PathProcess:
    """Euler-Maruyama for the follower's forward filter, started at 0, driven by W only.

    drift = [A^T - P2 BRB1 - P2 M1 - P2 M2] v - P2 C1 E1 eta + P2 B2 v2
    dW    = G v - G P2 phi - (S1 - P2) E1 eta,  G = (I + P2 P1)(S1 P1 + I)^{-1} C1^T (I + P2 P1)^{-1}
    """
    gains = follower_filter_gains(spec, P1, P2, grid, tab)
    M, N, dt = ensemble.M, grid.N, grid.dt
    n = spec.n
    W = ensemble.W
    phi = phi_hat.evaluate(W)
    eta = phi_hat.b_grid
    v2 = _v2_on_paths(v2hat, ensemble, spec.k2)
    out = np.zeros((M, N + 1, n))
    for i in range(N):
        v = out[:, i]
        drift = _mv(gains.drift_v[i], v) + gains.drift_eta[i] @ eta[i] + _mv(gains.drift_v2[i], v2[:, i])
        diff = _mv(gains.diff_v[i], v) + _mv(gains.diff_phi[i], phi[:, i]) + gains.diff_eta[i] @ eta[i]
        out[:, i + 1] = v + drift * dt + diff * ensemble.dW[:, i, None]
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite follower filter", stage="varphi-hat", module="filters",
                             operation="simulate_hat_varphi_follower")
    return PathProcess(out, grid, ensemble.seed, "varphi_hat")


# ---------------------------------------------------------------------------
# leader filters


@dataclass
class LeaderTables:
    """Products of Riccati paths and Sigma matrices used by the leader filters.

    Arrays are on grid points (N + 1 rows) unless the key ends with ``_h``
    (interleaved grid). Keys:
      Lam   the X-hat loading of Z,   Theta the phi-hat loading of Z
      S     Pi1 + Pi2
    """

    g: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, k):
        return self.g[k]


def _lam_theta(b, s, Pi1, Pi2):
    S = Pi1 + Pi2
    S4 = s["S4"]
    S431 = S4 @ s["S3"] @ s["S1"]
    At1, Ct = b["At1"], _T(b["C"])
    lam = S4 @ s["S2"] + S431 @ S @ At1 + S4 @ Pi2 @ At1 + S431 @ s["S2"]
    theta = S431 @ S @ Ct + S4 @ S @ Ct
    return S, S431, lam, theta


def leader_tables(sol: RiccatiSolution) -> LeaderTables:
    """All matrix products the leader filter and equilibrium steps need."""
    aug = sol.aug
    L = sol.leader
    s = sol.sigma_on_grid()
    b = {k: v[::2] for k, v in aug.blocks.items()}
    Pi1, Pi2, Pi3, Pi4 = L.Pi1.values, L.Pi2.values, L.Pi3.values, L.Pi4.values
    S, S431, lam, theta = _lam_theta(b, s, Pi1, Pi2)
    At1, At2, A1, C = b["At1"], b["At2"], b["A1"], b["C"]
    At1T, At2T = _T(At1), _T(At2)
    S1, S4, S9, S10, S11, S5 = s["S1"], s["S4"], s["S9"], s["S10"], s["S11"], s["S5"]
    Ztil = S10 @ Pi1 @ At2                      # W~ integrand of Y per unit X
    P34 = Pi3 + Pi4
    C1m, C2m = b["Ct1"] - Pi3, b["Ct2"] - Pi4
    S1SA = S1 @ S @ At1
    g = dict(S=S, S431=S431, Lam=lam, Theta=theta, Ztil=Ztil, P34=P34, C1m=C1m, C2m=C2m)
    # drift of the hat leader filter
    beta_v = Pi3 @ S9 + Pi3 @ At1T @ S4 @ Pi1 @ At1 + Pi3 @ At2T @ Ztil + A1
    beta_vh = Pi3 @ At1T @ lam + Pi4 @ S9 + Pi4 @ At1T @ S1SA + Pi4 @ At2T @ Ztil + S5 + C @ S1SA
    g["beta_v"] = beta_v
    g["beta_vh"] = beta_vh
    g["beta_vh_display"] = beta_vh - 2.0 * Pi4 @ At1T @ S1SA   # unhatted display sign
    g["beta_phi"] = Pi3 @ At1T @ theta
    g["beta_etah"] = Pi3 @ At1T @ S431 + Pi4 @ At1T @ S1 + C @ S1
    g["beta_eta"] = Pi3 @ At1T @ S4
    g["hat_drift_v"] = beta_v + beta_vh
    g["hat_drift_eta"] = g["beta_etah"] + g["beta_eta"]
    # diffusion of the hat leader filter, Y-hat eliminated through Sigma11
    Hy = (At1 @ P34 + C1m @ S4 @ Pi1 @ At1 @ P34 + _T(C) + C1m @ lam @ P34 + C2m @ S1SA @ P34
          + C2m @ S1 @ S @ _T(C))
    Hv = C1m @ lam + C2m @ S1SA + At1 + C1m @ S4 @ Pi1 @ At1
    g["hat_diff_v"] = Hy @ S11 @ S + Hv
    g["hat_diff_phi"] = Hy @ S11 + C1m @ theta
    g["hat_diff_eta"] = C1m @ S431 + C2m @ S1 + C1m @ S4
    # gamma-tilde of the full filter, by state variable
    g["gam_Y"] = At1 @ Pi3 + C1m @ S4 @ Pi1 @ At1 @ Pi3
    g["gam_Yh"] = (At1 @ Pi4 + _T(C) + C1m @ S4 @ Pi1 @ At1 @ Pi4 + C1m @ lam @ P34 + C2m @ S1SA @ P34
                   + C2m @ S1 @ S @ _T(C))
    g["gam_vh"] = C1m @ lam + C2m @ S1SA
    g["gam_v"] = At1 + C1m @ S4 @ Pi1 @ At1
    g["gam_phi"] = C1m @ theta
    g["gam_etah"] = C1m @ S431 + C2m @ S1
    g["gam_eta"] = C1m @ S4
    # W~ loading of the full filter that makes X = Pi3 Y + Pi4 Y_hat + varphi hold
    g["gam_tilde"] = At2 + (b["Ct3"] - Pi3) @ Ztil
    return LeaderTables(g)


def hat_tilde_phi_bsde(sol: RiccatiSolution) -> LinearBSDESpec:
    """2n-dimensional filter BSDE of the leader, terminal (0; c0 + c1 W(T))."""
    aug = sol.aug
    b = aug.blocks
    ph = sol.pis_half()
    s = sol.sigma_half()
    Pi1, Pi2 = ph["Pi1"], ph["Pi2"]
    S, S431, _, _ = _lam_theta(b, s, Pi1, Pi2)
    C, CT, At1T = b["C"], _T(b["C"]), _T(b["At1"])
    MY = (Pi1 @ s["S6"] + S @ C @ s["S1"] @ S @ CT + Pi2 @ s["S8"] + _T(s["S5"])
          + At1T @ S431 @ S @ CT + At1T @ s["S4"] @ S @ CT + Pi1 @ b["B1"] + _T(b["A1"]))
    MZ = S @ C @ s["S1"] + At1T @ S431 + At1T @ s["S4"]
    return LinearBSDESpec(MY=MY, MZ=MZ, c0=aug.xi_c0, c1=aug.xi_c1)


def solve_hat_tilde_phi(sol: RiccatiSolution) -> AffineProcess:
    return solve_affine_linear_bsde(hat_tilde_phi_bsde(sol), sol.grid, name="tilde_phi_hat")


@dataclass
class TildePhi:
    """The pair (phi~, eta~) per path, plus diagnostics in EXPERIMENTAL mode."""

    values: np.ndarray           # (M, N + 1, 2n) or None when affine
    eta: np.ndarray
    affine: Optional[AffineProcess]
    mode: TerminalMode
    residual: float = 0.0        # E int |W~ integrand|^2 dt, absent from the dW-only form
    terminal_error: float = 0.0

    def on_paths(self, ensemble: BrownianEnsemble):
        if self.affine is not None:
            return self.affine.evaluate(ensemble.W), np.broadcast_to(self.affine.b_grid,
                                                                     (ensemble.M,) + self.affine.b_grid.shape)
        return self.values, self.eta


def recover_tilde_phi(phi_hat: AffineProcess, mode: TerminalMode, sol: Optional[RiccatiSolution] = None,
                      ensemble: Optional[BrownianEnsemble] = None) -> TildePhi:
    """Full pair (phi~, eta~) from the filter.

    STANDARD: the terminal and the generator inputs are W-adapted, so the full
    BSDE solution is its own filter; the filter is returned unchanged.
    EXPERIMENTAL: backward induction on {1, W, W~}; ``residual`` reports the
    size of the W~ integrand that a dW-only representation cannot carry.
    """
    if mode == TerminalMode.STANDARD:
        return TildePhi(None, None, phi_hat, mode)
    if ensemble is None or sol is None:
        raise StructuralError("EXPERIMENTAL terminal needs an ensemble and a Riccati solution")
    base = hat_tilde_phi_bsde(sol)
    # full generator: hat-coefficients on (phi_hat, eta_hat) plus (Pi1 B1 + A1^T) phi~ + At1^T S4 eta~
    # with phi~ = phi_hat + W~ part; only the phi~ loading acts on the W~ part
    b = sol.aug.blocks
    own = sol.pis_half()["Pi1"] @ b["B1"] + _T(b["A1"])
    bsde = LinearBSDESpec(MY=base.MY, MZ=base.MZ, c0=sol.aug.xi_c0, c1=sol.aug.xi_c1, c2=sol.aug.xi_c2,
                          MZt=np.zeros_like(base.MY))
    res = lsmc_tilde(bsde, own, phi_hat, ensemble)
    return res


def lsmc_tilde(bsde: LinearBSDESpec, own: np.ndarray, phi_hat: AffineProcess,
               ensemble: BrownianEnsemble) -> TildePhi:
    """W~ part of phi~ by regression, on top of the affine filter.

    phi~ - phi_hat =: D solves -dD = own D dt - eta_D dW - zeta dW~, D(T) = c2 W~(T),
    since the remaining generator terms only see the filtered pair.
    """
    grid = ensemble.grid
    d = bsde.d
    zero = np.zeros(d)
    dbsde = LinearBSDESpec(MY=own, MZ=np.zeros_like(own), c0=zero, c1=zero, c2=bsde.c2, MZt=np.zeros_like(own))
    r = lsmc_linear_bsde(dbsde, ensemble, use_tilde=True)
    base = phi_hat.evaluate(ensemble.W)
    vals = base + r.Y
    eta = phi_hat.b_grid[None] + r.Z
    dt = grid.dt
    residual = float(np.mean(np.sum(r.Zt[:, :-1] ** 2, axis=2).sum(axis=1) * dt))
    # forward re-simulation of D with its own integrands, compared at T
    D = r.Y[:, 0].copy()
    ownd = own[::2]
    for i in range(grid.N):
        D = D - (D @ ownd[i].T) * dt + r.Z[:, i] * ensemble.dW[:, i, None] + r.Zt[:, i] * ensemble.dWt[:, i, None]
    xiD = ensemble.Wt[:, -1, None] * bsde.c2[None]
    term_err = float(np.mean(np.sum((D - xiD) ** 2, axis=1)))
    return TildePhi(vals, eta, None, TerminalMode.EXPERIMENTAL, residual, term_err)


def simulate_hat_tilde_varphi(sol: RiccatiSolution, phi_hat: AffineProcess, ensemble: BrownianEnsemble,
                              tables: Optional[LeaderTables] = None) -> PathProcess:
    """Euler-Maruyama for the leader's forward filter from 0, driven by W only.

    Drift and diffusion are affine in (varphi_hat, phi_hat, eta_hat) with the
    coefficient matrices of :func:`leader_tables`.
    """
    g = tables or leader_tables(sol)
    grid = sol.grid
    M, N, dt = ensemble.M, grid.N, grid.dt
    phi = phi_hat.evaluate(ensemble.W)
    eta = phi_hat.b_grid
    d = phi_hat.d
    out = np.zeros((M, N + 1, d))
    for i in range(N):
        v = out[:, i]
        drift = _mv(g["hat_drift_v"][i], v) + _mv(g["beta_phi"][i], phi[:, i]) + g["hat_drift_eta"][i] @ eta[i]
        diff = _mv(g["hat_diff_v"][i], v) + _mv(g["hat_diff_phi"][i], phi[:, i]) + g["hat_diff_eta"][i] @ eta[i]
        out[:, i + 1] = v + drift * dt + diff * ensemble.dW[:, i, None]
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite leader filter", stage="tilde-varphi-hat", module="filters",
                             operation="simulate_hat_tilde_varphi")
    return PathProcess(out, grid, ensemble.seed, "tilde_varphi_hat")


__all__ = [
    "AffineProcess", "LinearBSDESpec", "affine_from_lsmc", "LSMCResult", "solve_affine_linear_bsde", "lsmc_linear_bsde", "cross_validate",
    "hat_phi_bsde", "solve_hat_phi", "follower_filter_gains", "simulate_hat_varphi_follower",
    "leader_tables", "hat_tilde_phi_bsde", "solve_hat_tilde_phi", "recover_tilde_phi", "TildePhi",
    "simulate_hat_tilde_varphi", "SEMI_ANALYTIC", "MONTE_CARLO",
]
