"""Pipeline stages behind the CLI subcommands.

Each stage takes a validated RunConfig and an output directory, writes its
artifacts and returns a summary dict (also written as summary.json).
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional

import numpy as np

from . import export
from .config import RunConfig, build_lq_spec, build_pension_params
from .equilibrium import reconstruct_primitives, simulate_equilibrium, simulate_follower_closed_loop
from .errors import SchemaError
from .evaluation import (FOLLOWER, LEADER, evaluate_J1, evaluate_J2, follower_stationarity_residual,
                         leader_stationarity_residual, perturbation_suite)
from .filters import (MONTE_CARLO, SEMI_ANALYTIC, AffineProcess, cross_validate, hat_tilde_phi_bsde)
from .model import TimeGrid, validate_spec
from .pension import dual_route_check, make_pension_spec, run_pension
from .riccati import riccati_residuals, solve_all
from .simulate import generate_ensemble


class Context:
    """Resolved scenario: spec, grid and, for the pension block, its parameters."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        sc = cfg.scenario
        if sc.pension is not None:
            self.params = build_pension_params(sc.pension, cfg.grid.N)
            self.spec = make_pension_spec(self.params)
            self.grid = self.params.grid()
        else:
            self.params = None
            self.spec = build_lq_spec(sc.lq)
            N = sc.lq.N if sc.lq.N is not None else cfg.grid.N
            self.grid = TimeGrid(self.spec.T, N)
        self._sol = None
        self._ens = None

    @property
    def sol(self):
        if self._sol is None:
            self._sol = solve_all(self.spec, self.grid, typo_sigma2=self.cfg.options.typo_sigma2)
        return self._sol

    @property
    def ensemble(self):
        if self._ens is None:
            self._ens = generate_ensemble(self.cfg.seed, self.cfg.M, self.grid)
        return self._ens

    def eq_options(self, backend=SEMI_ANALYTIC):
        o = self.cfg.options
        return {"tilde_noise": o.tilde_noise, "beta_sign": o.beta_sign, "allow_experimental": o.allow_experimental,
                "backend": backend}


def _run_info(ctx: Context) -> dict:
    return {"N": ctx.grid.N, "T": ctx.grid.T, "M": ctx.cfg.M, "seed": ctx.cfg.seed, "backend": ctx.cfg.backend,
            "scenario": "pension" if ctx.params is not None else "lq"}


def stage_validate(ctx: Context, out: Path) -> dict:
    rep = validate_spec(ctx.spec, ctx.grid)
    summary = {"run": _run_info(ctx), "assumptions": rep.to_dict()}
    export.write_json(summary, out / "summary.json")
    if not rep.ok:
        raise SchemaError("assumption check failed: " + "; ".join(rep.messages()))
    return summary


def stage_riccati(ctx: Context, out: Path) -> dict:
    sol = ctx.sol
    export.export_riccati(sol.paths, ctx.grid.t, out / "riccati.csv")
    summary = {"run": _run_info(ctx), "residuals": riccati_residuals(sol, order=4), "max_cond": sol.max_cond()}
    export.write_json(summary, out / "summary.json")
    return summary


def _leader_input(ctx: Context) -> Optional[AffineProcess]:
    f = ctx.cfg.follower
    if f.a is None and f.b is None:
        return None
    k2 = ctx.spec.k2
    a = np.asarray(f.a if f.a is not None else [0.0] * k2, dtype=float)
    b = np.asarray(f.b if f.b is not None else [0.0] * k2, dtype=float)
    if a.shape != (k2,) or b.shape != (k2,):
        raise SchemaError(f"follower.a / follower.b must have length k2 = {k2}")
    H = 2 * ctx.grid.N + 1
    return AffineProcess(ctx.grid, np.tile(a, (H, 1)), np.tile(b, (H, 1)), name="v2")


def stage_follower(ctx: Context, out: Path) -> dict:
    cl = simulate_follower_closed_loop(ctx.spec, ctx.grid, ctx.ensemble, _leader_input(ctx), sol=ctx.sol)
    P = ctx.cfg.export_paths
    t = ctx.grid.t
    export.export_affine({"phi_hat": cl.phi_hat}, out / "filters.csv")
    export.export_path_processes({"y": cl.y, "z": cl.z, "zt": cl.zt, "x": cl.x, "yhat": cl.yhat,
                                  "xhat": cl.xhat, "varphi_hat": cl.varphi_hat}, t, out / "trajectories.csv", P)
    export.export_path_processes({"v1": cl.v1, "v2": cl.v2}, t, out / "controls.csv", P)
    summary = {"run": _run_info(ctx), "diagnostics": cl.diagnostics,
               "J1": evaluate_J1(cl, ctx.spec, ctx.grid).value, "y0": cl.y[0, 0].tolist()}
    export.write_json(summary, out / "summary.json")
    return summary


def _equilibrium(ctx: Context, backend: str):
    return simulate_equilibrium(ctx.spec, ctx.grid, ctx.ensemble, sol=ctx.sol, **ctx.eq_options(backend))


def _export_equilibrium(ctx: Context, res, out: Path):
    tr = res.traj
    P = ctx.cfg.export_paths
    t = ctx.grid.t
    filt = {"tilde_phi_hat": res.phi_hat}
    export.export_affine(filt, out / "filters.csv")
    export.export_path_processes({"Y": tr.Y, "X": tr.X, "Yhat": tr.Yh, "Xhat": tr.Xh, "Z": tr.Z, "Zt": tr.Zt,
                                  "varphi": tr.varphi, "varphi_hat": tr.varphi_hat}, t,
                                 out / "trajectories.csv", P)
    export.export_path_processes({"v1": tr.v1, "v2": tr.v2}, t, out / "controls.csv", P)


def stage_equilibrium(ctx: Context, out: Path) -> dict:
    backend = ctx.cfg.backend
    primary = MONTE_CARLO if backend == "mc" else SEMI_ANALYTIC
    res = _equilibrium(ctx, primary)
    _export_equilibrium(ctx, res, out)
    tr = res.traj
    summary = {"run": _run_info(ctx), "diagnostics": tr.diagnostics, "Y0": tr.Y[0, 0].tolist(),
               "J1": evaluate_J1(tr, ctx.spec, ctx.grid).value, "J2": evaluate_J2(tr, ctx.spec, ctx.grid).value}
    if backend == "both":
        mc = _equilibrium(ctx, MONTE_CARLO)
        summary["mc_Y0"] = mc.traj.Y[0, 0].tolist()
        summary["backend_Y0_gap"] = float(np.max(np.abs(mc.traj.Y[0, 0] - tr.Y[0, 0])))
        summary["mc_diagnostics"] = mc.traj.diagnostics
    export.write_json(summary, out / "summary.json")
    return summary


def stage_pension(ctx: Context, out: Path) -> dict:
    if ctx.params is None:
        raise SchemaError("the pension subcommand needs a 'pension' scenario block")
    sol = run_pension(ctx.params, ensemble=ctx.ensemble, sol=ctx.sol, **ctx.eq_options())
    pr = reconstruct_primitives(sol.traj)
    P = ctx.cfg.export_paths
    export.export_path_processes({"v1": sol.v1, "v2": sol.v2, "F": pr.y[..., 0], "pi1": sol.weights.pi1,
                                  "pi2": sol.weights.pi2}, ctx.grid.t, out / "pension.csv", P)
    _export_equilibrium(ctx, sol.result, out)
    summary = {"run": _run_info(ctx), "reserve": sol.reserve,
               "reserve_mc": {"mean": float(np.ravel(sol.reserve_mc.mean)[0]), "se": float(np.ravel(sol.reserve_mc.se)[0])},
               "costs": sol.costs, "checks": sol.checks, "benchmark": sol.benchmark,
               "diagnostics": sol.traj.diagnostics}
    export.write_json(summary, out / "summary.json")
    return summary


def _row(criterion, quantity, value, threshold, ok):
    return {"criterion": criterion, "quantity": quantity, "value": float(value), "threshold": float(threshold),
            "pass": bool(ok)}


def verification_rows(ctx: Context) -> List[dict]:
    """Residual, cross-validation, stationarity and perturbation checks against configured tolerances."""
    cfg, tol = ctx.cfg, ctx.cfg.tolerances
    k = tol.se_multiplier
    grid, ens, spec, sol = ctx.grid, ctx.ensemble, ctx.spec, ctx.sol
    rows = []
    for name, r in riccati_residuals(sol, order=4).items():
        rows.append(_row("riccati", f"{name}_residual", r, tol.riccati, r <= tol.riccati))
    b = {"P1(T)": np.max(np.abs(sol.P1.values[-1])), "P2(0)-G1": np.max(np.abs(sol.P2.values[0] - spec.G1))}
    for name, v in b.items():
        rows.append(_row("boundary", name, v, 0.0, v == 0.0))

    res = _equilibrium(ctx, SEMI_ANALYTIC)
    d = res.traj.diagnostics
    rel_tol = tol.relation + 5 * grid.dt
    for name in ("relation_Y", "relation_X", "relation_Yhat"):
        rows.append(_row("decoupling", name, d[name], rel_tol, d[name] <= rel_tol))
    term_tol = 0.05 * d["xi_second_moment"]
    rows.append(_row("terminal", "terminal_resimulated", d["terminal_resimulated"], term_tol,
                     d["terminal_resimulated"] <= term_tol))

    idx = sorted({int(round(f * grid.N)) for f in np.linspace(0.1, 0.9, cfg.verify.cross_validation_times)})
    cv = cross_validate(res.phi_hat, hat_tilde_phi_bsde(sol), ens, idx, batches=cfg.verify.batches)
    zmax = max(r.zscore for r in cv)
    rows.append(_row("cross_validation", "max_z", zmax, k, zmax <= k))

    fr = follower_stationarity_residual(res.traj, spec, ens)
    lr = leader_stationarity_residual(res.traj, sol, ens)
    for name, rp in (("follower", fr), ("leader", lr)):
        z = float(np.max(rp.zscores()))
        rows.append(_row("stationarity", f"{name}_max_z", z, k, z <= k))
        base = float(np.mean(rp.rms))
        pert = (follower_stationarity_residual(res.traj, spec, ens, gain_scale=1.1) if name == "follower"
                else leader_stationarity_residual(res.traj, sol, ens, gain_scale=1.1))
        ratio = float(np.mean(pert.rms)) / base if base > 0 else float("inf")
        rows.append(_row("stationarity", f"{name}_gain_sensitivity", ratio, 10.0, ratio >= 10.0))

    for player in (FOLLOWER, LEADER):
        reps = perturbation_suite(res, spec, ens, player, n_directions=cfg.verify.directions, seed=cfg.seed,
                                  epsilons=cfg.verify.epsilons)
        passed = sum(r.passes(k, tol.r2) for r in reps)
        rows.append(_row("optimality", f"{player}_directions_passed", passed, len(reps), passed == len(reps)))
        rows.append(_row("optimality", f"{player}_max_central_z", max(r.central_z for r in reps), k,
                         max(r.central_z for r in reps) <= k))

    if ctx.params is not None:
        checks = dual_route_check(res, spec, ens, [grid.N // 4, grid.N // 2, 3 * grid.N // 4])
        zmax = max(c.max_z for c in checks.values())
        rows.append(_row("dual_route", "max_z", zmax, k, zmax <= k))
    return rows


def stage_verify(ctx: Context, out: Path) -> dict:
    rows = verification_rows(ctx)
    export.export_verification(rows, out / "verification.csv")
    summary = {"run": _run_info(ctx), "checks": rows, "passed": sum(r["pass"] for r in rows), "total": len(rows)}
    export.write_json(summary, out / "summary.json")
    return summary


STAGES = {
    "validate": stage_validate,
    "riccati": stage_riccati,
    "follower": stage_follower,
    "equilibrium": stage_equilibrium,
    "pension": stage_pension,
    "verify": stage_verify,
}

__all__ = ["Context", "STAGES", "verification_rows"]
