"""Game specification, time grid, terminal condition and assumption checks."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import SchemaError, StructuralError

PSD_TOL = -1e-10
PD_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with N steps."""

    T: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise StructuralError(f"horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 2:
            raise StructuralError(f"steps must be an integer >= 2, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def t(self) -> np.ndarray:
        # i*dt rather than cumulative sums so that t_N == T exactly
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    @property
    def t_half(self) -> np.ndarray:
        """Grid points and midpoints interleaved, length 2N + 1."""
        t = np.arange(2 * self.N + 1) * (0.5 * self.dt)
        t[-1] = self.T
        return t

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.N * factor)


class CoefficientFn:
    """Deterministic matrix-valued function of time with a fixed shape."""

    shape: tuple

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def sample(self, times: np.ndarray) -> np.ndarray:
        return np.stack([np.asarray(self(float(s)), dtype=float) for s in times])


class Constant(CoefficientFn):
    def __init__(self, value):
        v = np.atleast_2d(np.asarray(value, dtype=float))
        self.value = v
        self.shape = v.shape

    def __call__(self, t):
        return self.value.copy()

    def sample(self, times):
        return np.broadcast_to(self.value, (len(times),) + self.shape).copy()

    def __repr__(self):
        return f"Constant({self.value.tolist()})"


class PiecewiseTable(CoefficientFn):
    """Piecewise-constant table, left-continuous at the breakpoints.

    ``values[k]`` holds on ``(t_k, t_{k+1}]``; the first value also covers
    every time at or before ``t_0`` and the last one every time after the
    final breakpoint.
    """

    def __init__(self, knots: Sequence[float], values):
        knots = np.asarray(knots, dtype=float)
        vals = [np.atleast_2d(np.asarray(v, dtype=float)) for v in values]
        if knots.ndim != 1 or len(knots) != len(vals) or len(knots) == 0:
            raise StructuralError("table needs matching non-empty 't' and 'v' lists")
        if np.any(np.diff(knots) <= 0):
            raise StructuralError("table breakpoints must be strictly increasing")
        shapes = {v.shape for v in vals}
        if len(shapes) != 1:
            raise StructuralError("table entries must share one shape")
        self.knots = knots
        self.values = np.stack(vals)
        self.shape = vals[0].shape

    def _index(self, t):
        k = np.searchsorted(self.knots, t, side="left") - 1
        return np.clip(k, 0, len(self.knots) - 1)

    def __call__(self, t):
        return self.values[self._index(t)].copy()

    def sample(self, times):
        return self.values[self._index(np.asarray(times, dtype=float))].copy()


class ExpDiscount(CoefficientFn):
    """t -> scale * exp(-beta t)."""

    def __init__(self, beta: float, scale=1.0):
        self.beta = float(beta)
        self.scale = np.atleast_2d(np.asarray(scale, dtype=float))
        self.shape = self.scale.shape

    def __call__(self, t):
        return self.scale * np.exp(-self.beta * t)

    def sample(self, times):
        w = np.exp(-self.beta * np.asarray(times, dtype=float))
        return w[:, None, None] * self.scale[None]


class FunctionCoefficient(CoefficientFn):
    """Wraps a python callable; used by tests and the pension mapping."""

    def __init__(self, fn: Callable[[float], np.ndarray], shape):
        self.fn = fn
        self.shape = tuple(shape)

    def __call__(self, t):
        v = np.atleast_2d(np.asarray(self.fn(t), dtype=float))
        if v.shape != self.shape:
            raise StructuralError(f"callable returned shape {v.shape}, expected {self.shape}")
        return v


def as_coefficient(value) -> CoefficientFn:
    if isinstance(value, CoefficientFn):
        return value
    return Constant(value)


class TerminalMode(enum.Enum):
    STANDARD = "standard"
    EXPERIMENTAL = "experimental"


@dataclass(frozen=True)
class TerminalCondition:
    """xi = c0 + c1 W(T) + c2 W~(T)."""

    c0: np.ndarray
    c1: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        for name in ("c0", "c1", "c2"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if v.ndim != 1:
                raise StructuralError(f"terminal.{name} must be a vector")
            object.__setattr__(self, name, v)
        if not (len(self.c0) == len(self.c1) == len(self.c2)):
            raise StructuralError("terminal c0, c1, c2 must have equal length")

    @classmethod
    def zero(cls, n: int) -> "TerminalCondition":
        z = np.zeros(n)
        return cls(z, z, z)

    @property
    def mode(self) -> TerminalMode:
        return TerminalMode.STANDARD if not np.any(self.c2) else TerminalMode.EXPERIMENTAL

    def sample(self, WT: np.ndarray, WtT: np.ndarray) -> np.ndarray:
        """Realizations of xi, shape (M, n)."""
        WT = np.asarray(WT, dtype=float)
        WtT = np.asarray(WtT, dtype=float)
        return self.c0[None, :] + WT[:, None] * self.c1[None, :] + WtT[:, None] * self.c2[None, :]

    def second_moment(self, T: float) -> float:
        """E|xi|^2."""
        return float(self.c0 @ self.c0 + T * (self.c1 @ self.c1 + self.c2 @ self.c2))


COEFF_NAMES = ("A", "B1", "B2", "C1", "C2", "Q1", "Q2", "S1", "S2", "N1", "N2", "R1", "R2")
SYMMETRIC_PSD = ("Q1", "Q2", "S1", "S2", "N1", "N2")


@dataclass
class LQGameSpec:
    n: int
    k1: int
    k2: int
    T: float
    coeffs: Dict[str, CoefficientFn]
    G1: np.ndarray
    G2: np.ndarray
    terminal: TerminalCondition
    N: Optional[int] = None
    label: str = ""

    def __post_init__(self):
        self.coeffs = {k: as_coefficient(v) for k, v in self.coeffs.items()}
        self.G1 = np.atleast_2d(np.asarray(self.G1, dtype=float))
        self.G2 = np.atleast_2d(np.asarray(self.G2, dtype=float))
        check_shapes(self)

    def __getattr__(self, name):
        coeffs = self.__dict__.get("coeffs")
        if coeffs is not None and name in coeffs:
            return coeffs[name]
        raise AttributeError(name)

    def expected_shape(self, name: str) -> tuple:
        n, k1, k2 = self.n, self.k1, self.k2
        return {"B1": (n, k1), "B2": (n, k2), "R1": (k1, k1), "R2": (k2, k2)}.get(name, (n, n))

    def grid(self, N: Optional[int] = None) -> TimeGrid:
        N = N if N is not None else self.N
        if N is None:
            raise StructuralError("no step count given and the game defines none")
        return TimeGrid(self.T, N)


def check_shapes(spec: LQGameSpec):
    for name in COEFF_NAMES:
        if name not in spec.coeffs:
            raise StructuralError(f"missing coefficient {name}")
        want = spec.expected_shape(name)
        if tuple(spec.coeffs[name].shape) != want:
            raise StructuralError(f"coefficient {name} has shape {tuple(spec.coeffs[name].shape)}, expected {want}")
    extra = set(spec.coeffs) - set(COEFF_NAMES)
    if extra:
        raise StructuralError(f"unknown coefficients {sorted(extra)}")
    for name in ("G1", "G2"):
        if getattr(spec, name).shape != (spec.n, spec.n):
            raise StructuralError(f"{name} has shape {getattr(spec, name).shape}, expected {(spec.n, spec.n)}")
    if len(spec.terminal.c0) != spec.n:
        raise StructuralError(f"terminal has dimension {len(spec.terminal.c0)}, expected {spec.n}")


@dataclass
class Violation:
    assumption: str
    field: str
    t: Optional[float]
    eigenvalue: Optional[float]
    message: str


@dataclass
class AssumptionReport:
    violations: List[Violation] = field(default_factory=list)
    checked: Dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def messages(self) -> List[str]:
        return [v.message for v in self.violations]

    def to_dict(self):
        return {
            "ok": self.ok,
            "checked": dict(self.checked),
            "violations": [v.__dict__ for v in self.violations],
        }


def _min_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def validate_spec(spec: LQGameSpec, grid: TimeGrid) -> AssumptionReport:
    """Check symmetry, semidefiniteness of the weights and definiteness of R1, R2 on every grid point."""
    check_shapes(spec)
    rep = AssumptionReport()
    t = grid.t
    for name in COEFF_NAMES:
        vals = spec.coeffs[name].sample(t)
        bad = ~np.all(np.isfinite(vals), axis=(1, 2))
        if bad.any():
            i = int(np.argmax(bad))
            rep.violations.append(Violation("L1", name, float(t[i]), None, f"{name} not finite at t={t[i]:.6g}"))
    for name in SYMMETRIC_PSD:
        vals = spec.coeffs[name].sample(t)
        ok = True
        for i, M in enumerate(vals):
            if not np.allclose(M, M.T, rtol=0, atol=1e-12):
                rep.violations.append(Violation("L2", name, float(t[i]), None, f"{name} not symmetric at t={t[i]:.6g}"))
                ok = False
                break
            lam = _min_eig(M)
            if lam < PSD_TOL:
                rep.violations.append(Violation("L2", name, float(t[i]), lam,
                                                f"{name} not positive semidefinite at t={t[i]:.6g} (min eig {lam:.3g})"))
                ok = False
                break
        rep.checked[name] = ok
    for name in ("R1", "R2"):
        vals = spec.coeffs[name].sample(t)
        ok = True
        for i, M in enumerate(vals):
            lam = _min_eig(M)
            if not np.allclose(M, M.T, rtol=0, atol=1e-12) or lam <= PD_TOL:
                rep.violations.append(Violation("L2", name, float(t[i]), lam,
                                                f"{name} not positive definite at t={t[i]:.6g} (min eig {lam:.3g})"))
                ok = False
                break
        rep.checked[name] = ok
    for name in ("G1", "G2"):
        M = getattr(spec, name)
        ok = bool(np.allclose(M, M.T, rtol=0, atol=1e-12)) and _min_eig(M) >= PSD_TOL
        if not ok:
            rep.violations.append(Violation("L2", name, None, _min_eig(M), f"{name} not symmetric positive semidefinite"))
        rep.checked[name] = ok
    return rep


class CoefficientTables:
    """All coefficients sampled on the interleaved grid (points and midpoints).

    Index ``h`` runs over 0..2N; even h are grid points, odd h midpoints.
    """

    def __init__(self, spec: LQGameSpec, grid: TimeGrid):
        self.spec = spec
        self.grid = grid
        th = grid.t_half
        self.t_half = th
        self.tab: Dict[str, np.ndarray] = {}
        for name in COEFF_NAMES:
            try:
                vals = np.asarray(spec.coeffs[name].sample(th), dtype=float)
            except Exception as exc:  # noqa: BLE001 - report which coefficient broke
                raise StructuralError(f"evaluation of {name} failed: {exc}") from exc
            bad = ~np.all(np.isfinite(vals), axis=(1, 2))
            if bad.any():
                raise StructuralError(f"coefficient {name} not finite at t={th[int(np.argmax(bad))]:.6g}")
            self.tab[name] = vals
        self.tab["R1inv"] = np.linalg.inv(self.tab["R1"])
        self.tab["R2inv"] = np.linalg.inv(self.tab["R2"])
        B1, B2 = self.tab["B1"], self.tab["B2"]
        # B R^{-1} B^T, used everywhere
        self.tab["BRB1"] = B1 @ self.tab["R1inv"] @ np.swapaxes(B1, 1, 2)
        self.tab["BRB2"] = B2 @ self.tab["R2inv"] @ np.swapaxes(B2, 1, 2)

    def __getitem__(self, name) -> np.ndarray:
        return self.tab[name]

    def at(self, name: str, h: int) -> np.ndarray:
        return self.tab[name][h]

    def on_grid(self, name: str) -> np.ndarray:
        return self.tab[name][::2]


def sample_coefficients(spec: LQGameSpec, grid: TimeGrid) -> CoefficientTables:
    return CoefficientTables(spec, grid)


def zero_spec(n: int = 1, k1: int = 1, k2: int = 1, T: float = 1.0, **overrides) -> LQGameSpec:
    """Spec with every coefficient zero except R1 = R2 = I; keywords override entries."""
    coeffs = {}
    for name in COEFF_NAMES:
        shape = {"B1": (n, k1), "B2": (n, k2), "R1": (k1, k1), "R2": (k2, k2)}.get(name, (n, n))
        coeffs[name] = Constant(np.eye(shape[0]) if name in ("R1", "R2") else np.zeros(shape))
    G1 = overrides.pop("G1", np.zeros((n, n)))
    G2 = overrides.pop("G2", np.zeros((n, n)))
    terminal = overrides.pop("terminal", TerminalCondition.zero(n))
    N = overrides.pop("N", None)
    for k, v in overrides.items():
        if k not in COEFF_NAMES:
            raise StructuralError(f"unknown coefficient {k}")
        coeffs[k] = as_coefficient(v)
    return LQGameSpec(n=n, k1=k1, k2=k2, T=T, coeffs=coeffs, G1=G1, G2=G2, terminal=terminal, N=N)


__all__ = [
    "TimeGrid", "CoefficientFn", "Constant", "PiecewiseTable", "ExpDiscount", "FunctionCoefficient",
    "TerminalCondition", "TerminalMode", "LQGameSpec", "AssumptionReport", "validate_spec",
    "sample_coefficients", "CoefficientTables", "zero_spec", "SchemaError",
]
