"""Run configuration: schema validation and conversion to model objects."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import SchemaError
from .model import COEFF_NAMES, Constant, ExpDiscount, LQGameSpec, PiecewiseTable, TerminalCondition, zero_spec
from .pension import PensionParams

Matrix = Union[float, List[float], List[List[float]]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class TableCoefficient(_Strict):
    t: List[float]
    v: List[Matrix]


class CoefficientConfig(_Strict):
    """One of {"const": m}, {"table": {"t", "v"}} or {"form": "exp_discount", "beta": b, "scale": m}."""

    const: Optional[Matrix] = None
    table: Optional[TableCoefficient] = None
    form: Optional[Literal["exp_discount"]] = None
    beta: Optional[float] = None
    scale: Optional[Matrix] = None

    @model_validator(mode="after")
    def _one(self):
        given = [k for k in ("const", "table", "form") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"coefficient needs exactly one of const/table/form, got {given or 'none'}")
        if self.form is not None and self.beta is None:
            raise ValueError("exp_discount needs 'beta'")
        if self.form is None and (self.beta is not None or self.scale is not None):
            raise ValueError("'beta'/'scale' only apply to form=exp_discount")
        return self


class TerminalConfig(_Strict):
    c0: List[float]
    c1: List[float]
    c2: Optional[List[float]] = None


class LQScenario(_Strict):
    n: int = Field(ge=1)
    k1: int = Field(ge=1)
    k2: int = Field(ge=1)
    T: float = Field(gt=0)
    N: Optional[int] = Field(default=None, ge=2)
    coefficients: Dict[str, Union[Matrix, CoefficientConfig]]
    G1: Matrix
    G2: Matrix
    terminal: TerminalConfig

    @model_validator(mode="after")
    def _names(self):
        unknown = set(self.coefficients) - set(COEFF_NAMES)
        if unknown:
            raise ValueError(f"unknown coefficients {sorted(unknown)}")
        return self


class PensionScenario(_Strict):
    r: float = 0.05
    mu1: float = 0.1
    mu2: float = 0.08
    sigma: float = 0.2
    sigmaTilde: float = 0.3
    beta: float = 0.1
    T: float = 1.0
    N: Optional[int] = None
    c0: float = 1.0
    c1: float = 0.5
    c2: float = 0.0
    DB: float = 0.0
    NC: float = 0.0


class Scenario(_Strict):
    lq: Optional[LQScenario] = None
    pension: Optional[PensionScenario] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.lq is None) == (self.pension is None):
            raise ValueError("scenario needs exactly one of 'lq' or 'pension'")
        return self


class GridConfig(_Strict):
    N: int = Field(default=256, ge=2)


class Tolerances(_Strict):
    riccati: float = 1e-6
    relation: float = 1e-6
    se_multiplier: float = 3.0
    r2: float = 0.99


class Options(_Strict):
    tilde_noise: Literal["derived", "display"] = "derived"
    beta_sign: Literal["derived", "display"] = "derived"
    typo_sigma2: bool = False
    allow_experimental: bool = False


class FollowerInput(_Strict):
    """Exogenous leader control for follower-only runs: v2(t) = a + b W(t), constant coefficients."""

    a: Optional[List[float]] = None
    b: Optional[List[float]] = None


class VerifyConfig(_Strict):
    directions: int = Field(default=20, ge=1)
    epsilons: List[float] = Field(default_factory=lambda: [-0.2, -0.1, -0.05, -0.025, 0.025, 0.05, 0.1, 0.2])
    cross_validation_times: int = Field(default=5, ge=1)
    batches: int = Field(default=50, ge=2)


class RunConfig(_Strict):
    scenario: Scenario
    grid: GridConfig = Field(default_factory=GridConfig)
    seed: int = 0
    M: int = Field(default=1000, ge=2)
    backend: Literal["affine", "mc", "both"] = "affine"
    tolerances: Tolerances = Field(default_factory=Tolerances)
    options: Options = Field(default_factory=Options)
    follower: FollowerInput = Field(default_factory=FollowerInput)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    export_paths: int = Field(default=10, ge=0)
    output: str = "out"


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise SchemaError(f"config schema violation: {msgs}") from None


def _coefficient(value):
    if isinstance(value, CoefficientConfig):
        if value.const is not None:
            return Constant(value.const)
        if value.table is not None:
            return PiecewiseTable(value.table.t, value.table.v)
        return ExpDiscount(value.beta, 1.0 if value.scale is None else value.scale)
    return Constant(value)


def build_lq_spec(sc: LQScenario) -> LQGameSpec:
    c2 = sc.terminal.c2 if sc.terminal.c2 is not None else [0.0] * len(sc.terminal.c0)
    over = {k: _coefficient(v) for k, v in sc.coefficients.items()}
    return zero_spec(sc.n, sc.k1, sc.k2, sc.T, G1=np.atleast_2d(np.asarray(sc.G1, dtype=float)),
                     G2=np.atleast_2d(np.asarray(sc.G2, dtype=float)),
                     terminal=TerminalCondition(sc.terminal.c0, sc.terminal.c1, c2), N=sc.N, **over)


def build_pension_params(sc: PensionScenario, N: int) -> PensionParams:
    return PensionParams(r=sc.r, mu1=sc.mu1, mu2=sc.mu2, sigma=sc.sigma, sigma_tilde=sc.sigmaTilde, beta=sc.beta,
                         T=sc.T, N=sc.N if sc.N is not None else N, c0=sc.c0, c1=sc.c1, c2=sc.c2, DB=sc.DB, NC=sc.NC)


__all__ = ["RunConfig", "load_config", "parse_config", "build_lq_spec", "build_pension_params"]
