"""Follower and leader Riccati equations, the augmented block system and the Sigma bundle.

All coefficient tables live on the interleaved grid of 2N + 1 points (grid
points and midpoints) so the RK4 stages see exact coefficient values. Paths of
already-solved Riccati equations are needed at midpoints by the equations that
depend on them; those values come from cubic Hermite interpolation with the
exact derivative (the right-hand side evaluated on the path), which keeps the
scheme fourth order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .errors import DecouplingDegeneracy, NumericalError, RiccatiEscape, SingularMatrixError
from .model import CoefficientTables, LQGameSpec, TimeGrid, sample_coefficients

COND_LIMIT = 1e10
ESCAPE_LIMIT = 1e8

BACKWARD = "backward"
FORWARD = "forward"


def _T(M):
    return np.swapaxes(M, -1, -2)


def _norm1(M):
    return np.abs(M).sum(axis=-2).max(axis=-1)


class InverseGuard:
    """Explicit inverses with a 1-norm condition-number check; keeps the worst value seen."""

    def __init__(self, stage: str, times: np.ndarray, limit: float = COND_LIMIT):
        self.stage = stage
        self.times = times
        self.limit = limit
        self.max_cond = 1.0

    def inv(self, M: np.ndarray, h: int, what: str) -> np.ndarray:
        t = float(self.times[h])
        try:
            Mi = np.linalg.inv(M)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(f"{what} is singular", self.stage, t, "riccati", self.stage) from None
        c = float(_norm1(M) * _norm1(Mi))
        if not np.isfinite(c) or c > self.limit:
            raise SingularMatrixError(f"{what} ill-conditioned (cond {c:.3g})", self.stage, t, "riccati", self.stage)
        if c > self.max_cond:
            self.max_cond = c
        return Mi

    def inv_batch(self, M: np.ndarray, what: str, err=SingularMatrixError) -> np.ndarray:
        """Inverse of a stack of matrices indexed like ``times``."""
        try:
            Mi = np.linalg.inv(M)
        except np.linalg.LinAlgError:
            Mi = None
        if Mi is None or not np.all(np.isfinite(Mi)):
            dets = np.abs(np.linalg.det(M))
            h = int(np.argmin(dets))
            raise err(f"{what} is singular", self.stage, float(self.times[h]), "riccati", self.stage)
        c = _norm1(M) * _norm1(Mi)
        bad = ~np.isfinite(c) | (c > self.limit)
        if bad.any():
            h = int(np.argmax(bad))
            raise err(f"{what} ill-conditioned (cond {c[h]:.3g})", self.stage, float(self.times[h]), "riccati", self.stage)
        self.max_cond = max(self.max_cond, float(c.max()))
        return Mi


@dataclass
class RiccatiPath:
    name: str
    t: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    direction: str
    boundary_time: float
    boundary_value: np.ndarray
    max_cond: float = 1.0

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def at_boundary(self) -> np.ndarray:
        return self.values[0] if self.direction == FORWARD else self.values[-1]

    def half(self) -> np.ndarray:
        """Values on the interleaved grid; midpoints by cubic Hermite interpolation."""
        V, F = self.values, self.derivs
        out = np.empty((2 * len(V) - 1,) + V.shape[1:])
        out[::2] = V
        out[1::2] = 0.5 * (V[:-1] + V[1:]) + (self.dt / 8.0) * (F[:-1] - F[1:])
        return out


def integrate_matrix_ode(rhs: Callable[[int, np.ndarray], np.ndarray], boundary, grid: TimeGrid,
                         direction: str, name: str = "ode", symmetrize: bool = False,
                         guard: Optional[InverseGuard] = None,
                         escape: float = ESCAPE_LIMIT) -> RiccatiPath:
    """Classical RK4 for dP/dt = rhs(h, P) where h indexes the interleaved grid.

    ``boundary`` is a matrix (initial value for FORWARD, terminal value for
    BACKWARD). Backward problems run in reversed time. The boundary value is
    stored bit-for-bit; symmetrization only touches integrated steps.
    """
    N, dt = grid.N, grid.dt
    P0 = np.array(boundary, dtype=float, copy=True)
    if P0.ndim < 2:
        P0 = np.atleast_2d(P0)
    vals = np.empty((N + 1,) + P0.shape)
    ders = np.empty_like(vals)
    times = grid.t

    def check(P, i):
        m = np.abs(P).max() if P.size else 0.0
        if not np.isfinite(m) or m > escape:
            raise RiccatiEscape(f"Riccati escape in {name} (|P| = {m:.3g})", name, float(times[i]), "riccati",
                                "integrate_matrix_ode")

    if direction == FORWARD:
        vals[0] = P0
        P = P0
        for i in range(N):
            h = 2 * i
            k1 = rhs(h, P)
            ders[i] = k1
            k2 = rhs(h + 1, P + (0.5 * dt) * k1)
            k3 = rhs(h + 1, P + (0.5 * dt) * k2)
            k4 = rhs(h + 2, P + dt * k3)
            P = P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if symmetrize:
                P = 0.5 * (P + _T(P))
            check(P, i + 1)
            vals[i + 1] = P
        ders[N] = rhs(2 * N, P)
        bt = 0.0
    elif direction == BACKWARD:
        vals[N] = P0
        P = P0
        for i in range(N - 1, -1, -1):
            h = 2 * i + 2
            k1 = rhs(h, P)
            ders[i + 1] = k1
            k2 = rhs(h - 1, P - (0.5 * dt) * k1)
            k3 = rhs(h - 1, P - (0.5 * dt) * k2)
            k4 = rhs(h - 2, P - dt * k3)
            P = P - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if symmetrize:
                P = 0.5 * (P + _T(P))
            check(P, i)
            vals[i] = P
        ders[0] = rhs(0, P)
        bt = grid.T
    else:
        raise ValueError(f"direction must be '{FORWARD}' or '{BACKWARD}'")
    return RiccatiPath(name=name, t=times, values=vals, derivs=ders, direction=direction,
                       boundary_time=bt, boundary_value=P0, max_cond=guard.max_cond if guard else 1.0)


# ---------------------------------------------------------------------------
# follower equations


def _eye(n):
    return np.eye(n)


def p1_rhs(tab: CoefficientTables, guard: InverseGuard):
    A, Q1, S1, S2 = tab["A"], tab["Q1"], tab["S1"], tab["S2"]
    C1, C2, BRB1 = tab["C1"], tab["C2"], tab["BRB1"]
    I = _eye(tab.spec.n)
    # with S1 (S2) identically zero the factor is the identity; skip the inverse
    s1_on, s2_on = bool(np.any(S1)), bool(np.any(S2))

    def rhs(h, P):
        E1 = guard.inv(P @ S1[h] + I, h, "P1 S1 + I") if s1_on else I
        E2 = guard.inv(P @ S2[h] + I, h, "P1 S2 + I") if s2_on else I
        return -(A[h] @ P + P @ A[h].T - P @ Q1[h] @ P + BRB1[h]
                 + C1[h] @ E1 @ P @ C1[h].T + C2[h] @ E2 @ P @ C2[h].T)

    return rhs


def solve_P1(spec: LQGameSpec, grid: TimeGrid, tab: Optional[CoefficientTables] = None) -> RiccatiPath:
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    guard = InverseGuard("P1", grid.t_half)
    return integrate_matrix_ode(p1_rhs(tab, guard), np.zeros((spec.n, spec.n)), grid, BACKWARD,
                                name="P1", symmetrize=True, guard=guard)


def follower_coupling(tab: CoefficientTables, P1h: np.ndarray, guard: InverseGuard) -> Dict[str, np.ndarray]:
    """Batched P1-dependent factors on the interleaved grid.

    E1 = (P1 S1 + I)^{-1}, E2 = (P1 S2 + I)^{-1},
    M1 = C1 E1 P1 C1^T, M2 = C2 E2 P1 C2^T.
    """
    I = _eye(tab.spec.n)
    E1 = guard.inv_batch(P1h @ tab["S1"] + I, "P1 S1 + I")
    E2 = guard.inv_batch(P1h @ tab["S2"] + I, "P1 S2 + I")
    M1 = tab["C1"] @ E1 @ P1h @ _T(tab["C1"])
    M2 = tab["C2"] @ E2 @ P1h @ _T(tab["C2"])
    return {"E1": E1, "E2": E2, "M1": M1, "M2": M2}


def p2_rhs(tab: CoefficientTables, cpl: Dict[str, np.ndarray]):
    A, Q1, BRB1 = tab["A"], tab["Q1"], tab["BRB1"]
    M1, M2 = cpl["M1"], cpl["M2"]

    def rhs(h, P):
        return (A[h].T @ P + P @ A[h] - P @ BRB1[h] @ P - P @ M1[h] @ P - P @ M2[h] @ P + Q1[h])

    return rhs


def solve_P2(spec: LQGameSpec, grid: TimeGrid, P1: RiccatiPath,
             tab: Optional[CoefficientTables] = None) -> RiccatiPath:
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    guard = InverseGuard("P2", grid.t_half)
    cpl = follower_coupling(tab, P1.half(), guard)
    return integrate_matrix_ode(p2_rhs(tab, cpl), spec.G1, grid, FORWARD, name="P2", symmetrize=True, guard=guard)


# ---------------------------------------------------------------------------
# augmented leader system

AUG_SQUARE = ("A1", "At1", "A2", "At2", "B1", "B2", "C", "Ct1", "Ct2", "Ct3", "F1")


@dataclass
class AugmentedCoefficients:
    """Block coefficients of the stacked leader system on the interleaved grid.

    Square blocks have shape (2N + 1, 2n, 2n); ``Bt2`` and ``D`` are (2N + 1, 2n, k2).
    Naming: A1, A2 drift blocks; At1, At2 the dW and dW~ loadings; B1, B2 the
    Y and Y-hat drift blocks of X; C the Z-hat coupling; Ct1..Ct3 the Z-type
    loadings; F1 the X loading in the Y driver; Bt2, D the control loadings;
    Gbar the initial coupling X(0) = Gbar Y(0).
    """

    n: int
    k2: int
    blocks: Dict[str, np.ndarray]
    R2inv: np.ndarray
    Gbar: np.ndarray
    xi_c0: np.ndarray
    xi_c1: np.ndarray
    xi_c2: np.ndarray
    P1h: np.ndarray
    P2h: np.ndarray
    follower: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, k):
        return self.blocks[k]

    def at(self, h: int) -> Dict[str, np.ndarray]:
        return {k: v[h] for k, v in self.blocks.items()}


def build_augmented(spec: LQGameSpec, P1: RiccatiPath, P2: RiccatiPath, grid: TimeGrid,
                    tab: Optional[CoefficientTables] = None) -> AugmentedCoefficients:
    tab = tab if tab is not None else sample_coefficients(spec, grid)
    n, k2 = spec.n, spec.k2
    H = 2 * grid.N + 1
    guard = InverseGuard("augmented", grid.t_half)
    P1h, P2h = P1.half(), P2.half()
    cpl = follower_coupling(tab, P1h, guard)
    A, B2, C1, C2 = tab["A"], tab["B2"], tab["C1"], tab["C2"]
    BRB1, S1 = tab["BRB1"], tab["S1"]
    At = _T(A)
    Z = np.zeros((H, n, n))

    def blk(a, b, c, d):
        top = np.concatenate([a, b], axis=2)
        bot = np.concatenate([c, d], axis=2)
        return np.concatenate([top, bot], axis=1)

    K = P2h @ cpl["M1"] @ P2h
    P2C1 = P2h @ C1
    blocks = {
        "A1": blk(At - P2h @ BRB1 - P2h @ cpl["M2"], Z, Z, At),
        "At1": blk(_T(C1), Z, Z, _T(C1)),
        "A2": blk(Z, Z, Z, -P2h @ BRB1),
        "At2": blk(Z, Z, Z, _T(C2)),
        "B1": blk(Z, Z, Z, tab["Q2"]),
        "B2": blk(Z, K, _T(K), Z),
        "C": blk(Z, P2C1, P2C1, Z),
        "Ct1": blk(Z, Z, Z, tab["N1"]),
        "Ct2": blk(Z, S1 - P2h, _T(S1 - P2h), Z),
        "Ct3": blk(Z, Z, Z, tab["N2"]),
        "F1": blk(Z, -BRB1, -BRB1, Z),
        "Bt2": np.concatenate([np.zeros((H, n, k2)), B2], axis=1),
        "D": np.concatenate([P2h @ B2, np.zeros((H, n, k2))], axis=1),
    }
    Gbar = np.zeros((2 * n, 2 * n))
    Gbar[n:, :n] = spec.G1
    Gbar[n:, n:] = spec.G2
    term = spec.terminal
    xi0 = np.concatenate([np.zeros(n), term.c0])
    xi1 = np.concatenate([np.zeros(n), term.c1])
    xi2 = np.concatenate([np.zeros(n), term.c2])
    return AugmentedCoefficients(n=n, k2=k2, blocks=blocks, R2inv=tab["R2inv"], Gbar=Gbar,
                                 xi_c0=xi0, xi_c1=xi1, xi_c2=xi2, P1h=P1h, P2h=P2h, follower=cpl)


def static_sigmas(aug: AugmentedCoefficients) -> Dict[str, np.ndarray]:
    """Sigma5..Sigma9, which involve no leader Riccati path."""
    b = aug.blocks
    R2i = aug.R2inv
    DR = b["D"] @ R2i
    BR = b["Bt2"] @ R2i
    s5 = b["A2"] - DR @ _T(b["Bt2"])
    s6 = b["B2"] - DR @ _T(b["D"])
    return {
        "S5": s5,
        "S6": s6,
        "S7": b["A1"] + b["A2"] - DR @ _T(b["Bt2"]),
        "S8": b["B1"] + b["B2"] - DR @ _T(b["D"]),
        "S9": b["F1"] - BR @ _T(b["Bt2"]),
    }


# ---------------------------------------------------------------------------
# leader Riccati equations


def pi1_rhs(aug: AugmentedCoefficients, st, guard: InverseGuard):
    b = aug.blocks
    A1, At1, At2, B1, Ct1, Ct3 = b["A1"], b["At1"], b["At2"], b["B1"], b["Ct1"], b["Ct3"]
    S9 = st["S9"]
    I = _eye(2 * aug.n)

    c1_on, c3_on = bool(np.any(Ct1)), bool(np.any(Ct3))

    def rhs(h, P):
        S4 = guard.inv(I - P @ Ct1[h], h, "I - Pi1 Ct1") if c1_on else I
        S10 = guard.inv(I - P @ Ct3[h], h, "I - Pi1 Ct3") if c3_on else I
        return -(P @ A1[h] + A1[h].T @ P + P @ B1[h] @ P + At1[h].T @ S4 @ P @ At1[h]
                 + At2[h].T @ S10 @ P @ At2[h] + S9[h])

    return rhs


def pi2_rhs(aug: AugmentedCoefficients, st, Pi1h: np.ndarray, S4h: np.ndarray, guard: InverseGuard):
    """Pi2 right-hand side with the Pi1-only factors precomputed; same terms as the display."""
    b = aug.blocks
    A1, At1, B1, C = b["A1"], b["At1"], b["B1"], b["C"]
    Ct12 = b["Ct1"] + b["Ct2"]
    Ct1, Ct2 = b["Ct1"], b["Ct2"]
    S5, S6 = st["S5"], st["S6"]
    I = _eye(2 * aug.n)
    G = _T(At1) @ S4h                      # At1^T S4
    P1B1 = Pi1h @ B1
    B1P1 = B1 @ Pi1h
    CT = _T(C)
    ct_on = bool(np.any(Ct12))

    def rhs(h, P2):
        S = Pi1h[h] + P2
        S1 = guard.inv(I - S @ Ct12[h], h, "I - (Pi1 + Pi2)(Ct1 + Ct2)") if ct_on else I
        SCt = S @ CT[h]
        S2 = SCt @ S
        S3 = S @ Ct2[h] + P2 @ Ct1[h]
        at1 = At1[h]
        V = S1 @ (S @ at1 + S2)            # S1 S At1 + S1 S2
        g = G[h]
        return -(S @ S5[h] + S5[h].T @ S + P2 @ A1[h] + A1[h].T @ P2 + P1B1[h] @ P2 + P2 @ B1P1[h]
                 + S @ S6[h] @ S + P2 @ B1[h] @ P2
                 + S @ C[h] @ V + g @ S2 + g @ S3 @ V + g @ P2 @ at1)

    return rhs


def pi2_rhs_display(aug: AugmentedCoefficients, st, Pi1h: np.ndarray, S4h: np.ndarray, guard: InverseGuard):
    b = aug.blocks
    A1, At1, B1, C = b["A1"], b["At1"], b["B1"], b["C"]
    Ct12 = b["Ct1"] + b["Ct2"]
    Ct1, Ct2 = b["Ct1"], b["Ct2"]
    S5, S6 = st["S5"], st["S6"]
    I = _eye(2 * aug.n)

    def rhs(h, P2):
        P1 = Pi1h[h]
        S = P1 + P2
        S1 = guard.inv(I - S @ Ct12[h], h, "I - (Pi1 + Pi2)(Ct1 + Ct2)")
        S2 = S @ C[h].T @ S
        S3 = S @ Ct2[h] + P2 @ Ct1[h]
        S4 = S4h[h]
        a1, at1 = A1[h], At1[h]
        SC = S @ C[h]
        return -(S @ S5[h] + S5[h].T @ S + P2 @ a1 + a1.T @ P2 + P1 @ B1[h] @ P2 + P2 @ B1[h] @ P1
                 + S @ S6[h] @ S + P2 @ B1[h] @ P2
                 + SC @ S1 @ S @ at1 + SC @ S1 @ S2
                 + at1.T @ S4 @ S2 + at1.T @ S4 @ S3 @ S1 @ S @ at1
                 + at1.T @ S4 @ P2 @ at1 + at1.T @ S4 @ S3 @ S1 @ S2)

    return rhs


def pi3_rhs(aug: AugmentedCoefficients, st, U: np.ndarray):
    b = aug.blocks
    A1, B1 = b["A1"], b["B1"]
    S9 = st["S9"]

    # U = At1^T S4 Pi1 At1 + At2^T S10 Pi1 At2, fixed once Pi1 is known
    def rhs(h, P):
        return A1[h] @ P + P @ A1[h].T + P @ S9[h] @ P + P @ U[h] @ P + B1[h]

    return rhs


def pi4_rhs(aug: AugmentedCoefficients, st, lead: Dict[str, np.ndarray], typo_sigma2: bool = False):
    """Pi4 right-hand side regrouped as K0 + L Pi4 + Pi4 R + Pi4 W Pi4 with batched coefficients.

    Term-for-term equal to :func:`pi4_rhs_display`; the residual check evaluates
    the display form, which tests the regrouping as a side effect.
    """
    b = aug.blocks
    A1, At1, At2, C = b["A1"], b["At1"], b["At2"], b["C"]
    S5, S6, S9 = st["S5"], st["S6"], st["S9"]
    Pi1, Pi2, Pi3 = lead["Pi1"], lead["Pi2"], lead["Pi3"]
    S, S1, S2, S3, S4, S10 = lead["S"], lead["S1"], lead["S2"], lead["S3"], lead["S4"], lead["S10"]
    mid = S2 if typo_sigma2 else Pi2
    At1T, At2T, CT = _T(At1), _T(At2), _T(C)
    p3a = Pi3 @ At1T @ S4
    S1SAt1 = S1 @ S @ At1
    Kx = p3a @ (S2 + S3 @ S1SAt1 + mid @ At1 + S3 @ S1 @ S2)
    J1 = At1T @ S1SAt1
    J2 = At2T @ S10 @ Pi1 @ At2
    CS1SAt1 = C @ S1SAt1
    L = A1 + S5 + Pi3 @ S9 + p3a @ Pi1 @ At1 + Kx + Pi3 @ J2 + CS1SAt1
    R = _T(A1) + _T(S5) + S9 @ Pi3 + J1 @ Pi3 + At1T @ S1 @ S @ CT + J2 @ Pi3
    W = S9 + J1 + J2
    K0 = Pi3 @ _T(S5) + S5 @ Pi3 + Kx @ Pi3 + C @ S1 @ S @ CT + CS1SAt1 @ Pi3 + S6

    def rhs(h, P4):
        return K0[h] + L[h] @ P4 + P4 @ R[h] + P4 @ W[h] @ P4

    return rhs


def pi4_rhs_display(aug: AugmentedCoefficients, st, lead: Dict[str, np.ndarray], typo_sigma2: bool = False):
    """Right-hand side of the Pi4 equation.

    The published display carries one term written as Pi3 At1^T S4 S2 At1 (Pi3 + Pi4),
    while the drift identity it is read off from, and the matching term of the
    forward-filter drift, have Pi3 At1^T S4 Pi2 At1 (Pi3 + Pi4). The second form is
    used; ``typo_sigma2=True`` reproduces the display literally.
    """
    b = aug.blocks
    A1, At1, At2, C = b["A1"], b["At1"], b["At2"], b["C"]
    S5, S6, S9 = st["S5"], st["S6"], st["S9"]
    Pi1, Pi2, Pi3 = lead["Pi1"], lead["Pi2"], lead["Pi3"]
    S, S1, S2, S3, S4, S10 = lead["S"], lead["S1"], lead["S2"], lead["S3"], lead["S4"], lead["S10"]
    mid = S2 if typo_sigma2 else Pi2

    def rhs(h, P4):
        p3 = Pi3[h]
        P = p3 + P4
        a1, at1, at2, c = A1[h], At1[h], At2[h], C[h]
        s1, s4, s10, s = S1[h], S4[h], S10[h], S[h]
        p3a = p3 @ at1.T @ s4
        return (p3 @ S5[h].T + S5[h] @ p3 + P4 @ a1.T + a1 @ P4 + P4 @ S5[h].T + S5[h] @ P4
                + p3 @ S9[h] @ P4 + P4 @ S9[h] @ p3 + P4 @ S9[h] @ P4
                + p3a @ Pi1[h] @ at1 @ P4 + p3a @ S2[h] @ P + p3a @ S3[h] @ s1 @ s @ at1 @ P
                + p3a @ mid[h] @ at1 @ P + p3a @ S3[h] @ s1 @ S2[h] @ P
                + p3 @ at2.T @ s10 @ Pi1[h] @ at2 @ P4
                + P4 @ at1.T @ s1 @ s @ at1 @ P + P4 @ at1.T @ s1 @ s @ c.T
                + P4 @ at2.T @ s10 @ Pi1[h] @ at2 @ P
                + c @ s1 @ s @ c.T + c @ s1 @ s @ at1 @ P + S6[h])

    return rhs


@dataclass
class SigmaBundle:
    S1: np.ndarray
    S2: np.ndarray
    S3: np.ndarray
    S4: np.ndarray
    S5: np.ndarray
    S6: np.ndarray
    S7: np.ndarray
    S8: np.ndarray
    S9: np.ndarray
    S10: np.ndarray
    S11: np.ndarray

    def as_dict(self):
        return dict(self.__dict__)


def sigma_arrays(aug: AugmentedCoefficients, st, Pi1, Pi2, Pi3, Pi4, idx, stage="sigma",
                 times=None) -> Dict[str, np.ndarray]:
    """Sigma1..Sigma11 (stacked over the interleaved indices ``idx``) from Riccati values at those indices."""
    b = {k: v[idx] for k, v in aug.blocks.items()}
    n2 = 2 * aug.n
    I = _eye(n2)
    guard = InverseGuard(stage, np.arange(len(Pi1), dtype=float) if times is None else times)
    S = Pi1 + Pi2
    out = {
        "S1": guard.inv_batch(I - S @ (b["Ct1"] + b["Ct2"]), "I - (Pi1 + Pi2)(Ct1 + Ct2)"),
        "S2": S @ _T(b["C"]) @ S,
        "S3": S @ b["Ct2"] + Pi2 @ b["Ct1"],
        "S4": guard.inv_batch(I - Pi1 @ b["Ct1"], "I - Pi1 Ct1"),
        "S10": guard.inv_batch(I - Pi1 @ b["Ct3"], "I - Pi1 Ct3"),
        "S11": guard.inv_batch(I - S @ (Pi3 + Pi4), "I - (Pi1 + Pi2)(Pi3 + Pi4)", err=DecouplingDegeneracy),
    }
    for k in ("S5", "S6", "S7", "S8", "S9"):
        out[k] = st[k][idx]
    out["max_cond"] = guard.max_cond
    return out


def assemble_sigma(Pi1, Pi2, Pi3, Pi4, aug: AugmentedCoefficients, h: int) -> SigmaBundle:
    """Sigma bundle at a single interleaved index h."""
    st = static_sigmas(aug)
    arr = sigma_arrays(aug, st, Pi1[None], Pi2[None], Pi3[None], Pi4[None], [h])
    arr.pop("max_cond")
    return SigmaBundle(**{k: v[0] for k, v in arr.items()})


@dataclass
class LeaderRiccati:
    Pi1: RiccatiPath
    Pi2: RiccatiPath
    Pi3: RiccatiPath
    Pi4: RiccatiPath
    static: Dict[str, np.ndarray]

    def paths(self):
        return {"Pi1": self.Pi1, "Pi2": self.Pi2, "Pi3": self.Pi3, "Pi4": self.Pi4}


def solve_leader_riccatis(aug: AugmentedCoefficients, spec: LQGameSpec, grid: TimeGrid,
                          typo_sigma2: bool = False) -> LeaderRiccati:
    n2 = 2 * aug.n
    th = grid.t_half
    I = _eye(n2)
    st = static_sigmas(aug)
    b = aug.blocks

    g1 = InverseGuard("Pi1", th)
    Pi1 = integrate_matrix_ode(pi1_rhs(aug, st, g1), np.zeros((n2, n2)), grid, BACKWARD, name="Pi1", guard=g1)
    Pi1h = Pi1.half()
    gh = InverseGuard("Pi1-derived", th)
    S4h = gh.inv_batch(I - Pi1h @ b["Ct1"], "I - Pi1 Ct1")
    S10h = gh.inv_batch(I - Pi1h @ b["Ct3"], "I - Pi1 Ct3")

    g2 = InverseGuard("Pi2", th)
    Pi2 = integrate_matrix_ode(pi2_rhs(aug, st, Pi1h, S4h, g2), np.zeros((n2, n2)), grid, BACKWARD,
                               name="Pi2", guard=g2)
    Pi2.max_cond = max(Pi2.max_cond, gh.max_cond)
    Pi2h = Pi2.half()

    U = _T(b["At1"]) @ S4h @ Pi1h @ b["At1"] + _T(b["At2"]) @ S10h @ Pi1h @ b["At2"]
    Pi3 = integrate_matrix_ode(pi3_rhs(aug, st, U), aug.Gbar, grid, FORWARD, name="Pi3")
    Pi3.max_cond = gh.max_cond
    Pi3h = Pi3.half()

    g4 = InverseGuard("Pi4", th)
    S = Pi1h + Pi2h
    lead = {
        "Pi1": Pi1h, "Pi2": Pi2h, "Pi3": Pi3h, "S": S,
        "S1": g4.inv_batch(I - S @ (b["Ct1"] + b["Ct2"]), "I - (Pi1 + Pi2)(Ct1 + Ct2)"),
        "S2": S @ _T(b["C"]) @ S,
        "S3": S @ b["Ct2"] + Pi2h @ b["Ct1"],
        "S4": S4h, "S10": S10h,
    }
    Pi4 = integrate_matrix_ode(pi4_rhs(aug, st, lead, typo_sigma2), np.zeros((n2, n2)), grid, FORWARD,
                               name="Pi4", guard=g4)
    Pi4.max_cond = g4.max_cond
    return LeaderRiccati(Pi1=Pi1, Pi2=Pi2, Pi3=Pi3, Pi4=Pi4, static=st)


# ---------------------------------------------------------------------------
# full solve and residual checks


@dataclass
class RiccatiSolution:
    spec: LQGameSpec
    grid: TimeGrid
    tab: CoefficientTables
    P1: RiccatiPath
    P2: RiccatiPath
    aug: AugmentedCoefficients
    leader: LeaderRiccati
    typo_sigma2: bool = False
    _sigma: Optional[Dict[str, np.ndarray]] = None
    _sigma_half: Optional[Dict[str, np.ndarray]] = None
    _pis_half: Optional[Dict[str, np.ndarray]] = None

    @property
    def paths(self) -> Dict[str, RiccatiPath]:
        d = {"P1": self.P1, "P2": self.P2}
        d.update(self.leader.paths())
        return d

    def sigma_on_grid(self) -> Dict[str, np.ndarray]:
        """Sigma1..Sigma11 at the N + 1 grid points (cached)."""
        if self._sigma is None:
            L = self.leader
            idx = np.arange(0, 2 * self.grid.N + 1, 2)
            try:
                self._sigma = sigma_arrays(self.aug, L.static, L.Pi1.values, L.Pi2.values, L.Pi3.values,
                                           L.Pi4.values, idx, times=self.grid.t)
            except NumericalError as exc:
                exc.module, exc.operation = "riccati", "assemble_sigma"
                raise
        return self._sigma

    def pis_half(self) -> Dict[str, np.ndarray]:
        """Pi1..Pi4 on the interleaved grid (exact at points, Hermite at midpoints)."""
        if self._pis_half is None:
            self._pis_half = {k: p.half() for k, p in self.leader.paths().items()}
        return self._pis_half

    def sigma_half(self) -> Dict[str, np.ndarray]:
        """Sigma1..Sigma11 on the interleaved grid (cached)."""
        if self._sigma_half is None:
            ph = self.pis_half()
            idx = np.arange(2 * self.grid.N + 1)
            self._sigma_half = sigma_arrays(self.aug, self.leader.static, ph["Pi1"], ph["Pi2"], ph["Pi3"],
                                            ph["Pi4"], idx, stage="sigma-half",
                                            times=self.grid.t_half)
        return self._sigma_half

    def max_cond(self) -> float:
        return max(p.max_cond for p in self.paths.values())


def solve_all(spec: LQGameSpec, grid: TimeGrid, typo_sigma2: bool = False) -> RiccatiSolution:
    tab = sample_coefficients(spec, grid)
    P1 = solve_P1(spec, grid, tab)
    P2 = solve_P2(spec, grid, P1, tab)
    aug = build_augmented(spec, P1, P2, grid, tab)
    leader = solve_leader_riccatis(aug, spec, grid, typo_sigma2=typo_sigma2)
    return RiccatiSolution(spec=spec, grid=grid, tab=tab, P1=P1, P2=P2, aug=aug, leader=leader,
                           typo_sigma2=typo_sigma2)


def _fd(values: np.ndarray, dt: float, order: int = 2) -> np.ndarray:
    """Finite-difference time derivative along axis 0.

    order=2: three-point central differences, second-order one-sided ends.
    order=4: five-point central differences, fourth-order one-sided stencils
    on the two outermost points at each end.
    """
    if order == 2:
        return np.gradient(values, dt, axis=0, edge_order=2)
    if order != 4:
        raise ValueError("order must be 2 or 4")
    f = values
    if len(f) < 5:
        raise ValueError("fourth-order differences need at least 5 points")
    d = np.empty_like(f)
    d[2:-2] = f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]
    d[0] = -25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]
    d[1] = -3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]
    d[-1] = 25.0 * f[-1] - 48.0 * f[-2] + 36.0 * f[-3] - 16.0 * f[-4] + 3.0 * f[-5]
    d[-2] = 3.0 * f[-1] + 10.0 * f[-2] - 18.0 * f[-3] + 6.0 * f[-4] - f[-5]
    return d / (12.0 * dt)


def riccati_residuals(sol: RiccatiSolution, order: int = 2) -> Dict[str, float]:
    """Sup-norm residual of each Riccati equation with the derivative replaced by finite differences.

    Only grid points (even interleaved indices) are read, where every table is
    exact, so midpoint interpolation plays no role here. ``order`` selects the
    finite-difference stencil (see :func:`_fd`). The Pi2 and Pi4 residuals use
    the literal display forms, not the regrouped integrator right-hand sides.
    """
    g, tab = sol.grid, sol.tab
    dt = g.dt
    ev = range(0, 2 * g.N + 1, 2)
    gd = InverseGuard("residual", g.t_half)

    def sup_res(path, rhs):
        F = np.stack([rhs(h, path.values[h // 2]) for h in ev])
        return float(np.max(np.abs(_fd(path.values, dt, order) - F)))

    out = {"P1": sup_res(sol.P1, p1_rhs(tab, gd))}
    out["P2"] = sup_res(sol.P2, p2_rhs(tab, follower_coupling(tab, sol.P1.half(), gd)))

    L, aug = sol.leader, sol.aug
    st, b = L.static, aug.blocks
    I = _eye(2 * aug.n)
    out["Pi1"] = sup_res(L.Pi1, pi1_rhs(aug, st, gd))
    Pi1h, Pi2h = L.Pi1.half(), L.Pi2.half()
    S4h = np.linalg.inv(I - Pi1h @ b["Ct1"])
    S10h = np.linalg.inv(I - Pi1h @ b["Ct3"])
    out["Pi2"] = sup_res(L.Pi2, pi2_rhs_display(aug, st, Pi1h, S4h, gd))
    U = _T(b["At1"]) @ S4h @ Pi1h @ b["At1"] + _T(b["At2"]) @ S10h @ Pi1h @ b["At2"]
    out["Pi3"] = sup_res(L.Pi3, pi3_rhs(aug, st, U))
    S = Pi1h + Pi2h
    lead = {"Pi1": Pi1h, "Pi2": Pi2h, "Pi3": L.Pi3.half(), "S": S,
            "S1": np.linalg.inv(I - S @ (b["Ct1"] + b["Ct2"])), "S2": S @ _T(b["C"]) @ S,
            "S3": S @ b["Ct2"] + Pi2h @ b["Ct1"], "S4": S4h, "S10": S10h}
    out["Pi4"] = sup_res(L.Pi4, pi4_rhs_display(aug, st, lead, sol.typo_sigma2))
    return out
