import numpy as np
import pytest

from stackbsde.filters import (AffineProcess, LinearBSDESpec, affine_from_lsmc, cross_validate, hat_phi_bsde,
                               hat_tilde_phi_bsde, leader_tables, lsmc_linear_bsde, recover_tilde_phi,
                               simulate_hat_tilde_varphi, simulate_hat_varphi_follower, solve_affine_linear_bsde,
                               solve_hat_phi, solve_hat_tilde_phi)
from stackbsde.errors import StructuralError
from stackbsde.model import TerminalCondition, TerminalMode, TimeGrid, zero_spec
from stackbsde.pension import PensionParams, make_pension_spec
from stackbsde.riccati import solve_all, solve_P1, solve_P2
from stackbsde.simulate import euler_integrate, generate_ensemble

from conftest import PENSION, generic_spec


def _const(grid, d, v):
    return np.broadcast_to(np.asarray(v, dtype=float), (2 * grid.N + 1, d, d)).copy()


# ---------------------------------------------------------------- generic linear BSDE

def test_affine_bsde_constant_terminal():
    g = TimeGrid(1.0, 16)
    bsde = LinearBSDESpec(MY=_const(g, 1, 0.0), MZ=_const(g, 1, 0.0), c0=[2.5], c1=[0.0])
    sol = solve_affine_linear_bsde(bsde, g)
    assert np.all(sol.a == 2.5) and np.all(sol.b == 0)


def test_affine_bsde_exponential():
    g = TimeGrid(1.0, 200)
    m = -0.7
    bsde = LinearBSDESpec(MY=_const(g, 1, m), MZ=_const(g, 1, 0.0), c0=[1.3], c1=[0.0])
    sol = solve_affine_linear_bsde(bsde, g)
    assert np.max(np.abs(sol.a_grid[:, 0] - 1.3 * np.exp(m * (1.0 - g.t)))) < 1e-10


def test_affine_bsde_martingale_representation():
    g = TimeGrid(1.0, 16)
    bsde = LinearBSDESpec(MY=_const(g, 1, 0.0), MZ=_const(g, 1, 0.0), c0=[0.0], c1=[1.0])
    sol = solve_affine_linear_bsde(bsde, g)
    ens = generate_ensemble(0, 3, g)
    assert np.array_equal(sol.evaluate(ens.W)[..., 0], ens.W)
    assert np.all(sol.z == 1.0)


def test_affine_bsde_rejects_tilde_terminal():
    g = TimeGrid(1.0, 4)
    bsde = LinearBSDESpec(MY=_const(g, 1, 0.0), MZ=_const(g, 1, 0.0), c0=[0.0], c1=[0.0], c2=[1.0])
    with pytest.raises(StructuralError):
        solve_affine_linear_bsde(bsde, g)


def test_lsmc_matches_affine_on_exponential():
    g = TimeGrid(1.0, 50)
    bsde = LinearBSDESpec(MY=_const(g, 1, -0.4), MZ=_const(g, 1, 0.3), c0=[1.0], c1=[0.5])
    aff = solve_affine_linear_bsde(bsde, g)
    ens = generate_ensemble(7, 4000, g)
    rows = cross_validate(aff, bsde, ens, [10, 25, 40], batches=40)
    assert max(r.zscore for r in rows) <= 3.0
    back = affine_from_lsmc(lsmc_linear_bsde(bsde, ens), g)
    # Y(0) is deterministic: only the intercept survives
    assert back.b_grid[0, 0] == 0.0
    assert abs(back.a_grid[0, 0] - aff.a_grid[0, 0]) < 0.02


# ---------------------------------------------------------------- follower filters

def test_hat_phi_zero():
    spec = zero_spec(1, 1, 1, 1.0, B1=1.0, A=0.3, C1=0.2)
    g = TimeGrid(1.0, 16)
    phi = solve_hat_phi(spec, solve_P1(spec, g), g)
    assert np.all(phi.a == 0) and np.all(phi.b == 0)


def test_hat_phi_exponential():
    a, c0 = 0.4, 1.5
    spec = zero_spec(1, 1, 1, 1.0, A=a, B1=1.0, terminal=TerminalCondition([c0], [0.0], [0.0]))
    g = TimeGrid(1.0, 200)
    phi = solve_hat_phi(spec, solve_P1(spec, g), g)
    assert np.max(np.abs(phi.a_grid[:, 0] + c0 * np.exp(a * (1.0 - g.t)))) < 1e-10
    assert np.all(phi.b == 0)


def test_hat_phi_terminal_exact():
    spec = generic_spec()
    g = TimeGrid(1.0, 32)
    phi = solve_hat_phi(spec, solve_P1(spec, g), g)
    assert np.array_equal(phi.a_grid[-1], -spec.terminal.c0)
    assert np.array_equal(phi.b_grid[-1], -spec.terminal.c1)


def test_hat_phi_cross_validation():
    spec = zero_spec(1, 1, 1, 1.0, A=-0.2, B1=1.0, C1=0.3, Q1=0.5, S1=0.2, G1=[[1.0]],
                     terminal=TerminalCondition([1.0], [0.4], [0.0]))
    g = TimeGrid(1.0, 64)
    P1 = solve_P1(spec, g)
    phi = solve_hat_phi(spec, P1, g)
    ens = generate_ensemble(1, 10_000, g)
    rows = cross_validate(phi, hat_phi_bsde(spec, P1, g), ens, [6, 19, 32, 45, 58])
    assert max(r.zscore for r in rows) <= 3.0


def test_follower_filter_zero_inputs():
    spec = zero_spec(1, 1, 1, 1.0, B1=1.0, C1=0.3, G1=[[1.0]])
    g = TimeGrid(1.0, 16)
    P1 = solve_P1(spec, g)
    P2 = solve_P2(spec, g, P1)
    ens = generate_ensemble(0, 5, g)
    vh = simulate_hat_varphi_follower(spec, P1, P2, solve_hat_phi(spec, P1, g), g, None, ens)
    assert np.all(vh.values == 0)


def test_follower_filter_deterministic_case():
    # B1 = R1 = 1, G1 = 2, no noise couplings: P2 = 2 / (1 + 2t), varphi' = -P2 varphi + P2 B2 v2 with
    # v2 = 1 gives varphi = B2 * 2t / (1 + 2t)
    B2 = 0.7
    spec = zero_spec(1, 1, 1, 1.0, B1=1.0, B2=B2, G1=[[2.0]])
    g = TimeGrid(1.0, 512)
    P1 = solve_P1(spec, g)
    P2 = solve_P2(spec, g, P1)
    v2 = AffineProcess.constant(g, [1.0])
    ens = generate_ensemble(0, 3, g)
    vh = simulate_hat_varphi_follower(spec, P1, P2, solve_hat_phi(spec, P1, g, v2), g, v2, ens).values[..., 0]
    assert np.ptp(vh, axis=0).max() == 0.0
    exact = B2 * 2 * g.t / (1 + 2 * g.t)
    assert np.max(np.abs(vh[0] - exact)) < 2 * g.dt


def _self_convergence(run, levels=(4, 2, 1), N=256, M=400, seed=3):
    fine = generate_ensemble(seed, M, TimeGrid(1.0, N))
    paths = {f: run(fine.coarsen(f) if f > 1 else fine) for f in levels}
    ref = paths[levels[-1]]
    errs = [np.sqrt(np.mean((paths[f] - ref[:, ::f]) ** 2)) for f in levels[:-1]]
    return errs


def test_follower_filter_self_convergence():
    spec = generic_spec()

    def run(ens):
        g = ens.grid
        P1 = solve_P1(spec, g)
        P2 = solve_P2(spec, g, P1)
        return simulate_hat_varphi_follower(spec, P1, P2, solve_hat_phi(spec, P1, g), g, None, ens).values

    e4, e2 = _self_convergence(run)
    # error against the finest run halves (order 1) or at least drops by sqrt 2 (order 1/2)
    assert e2 < e4 / np.sqrt(2)


def test_follower_filter_ignores_tilde_noise():
    spec = generic_spec()
    g = TimeGrid(1.0, 32)
    P1 = solve_P1(spec, g)
    P2 = solve_P2(spec, g, P1)
    ens = generate_ensemble(0, 20, g)
    phi = solve_hat_phi(spec, P1, g)
    a = simulate_hat_varphi_follower(spec, P1, P2, phi, g, None, ens).values
    b = simulate_hat_varphi_follower(spec, P1, P2, phi, g, None, ens.permute_tilde(1)).values
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- leader filters

def test_hat_tilde_phi_zero_terminal():
    spec = generic_spec(c1=(0.0, 0.0))
    spec.terminal = TerminalCondition.zero(2)
    sol = solve_all(spec, TimeGrid(1.0, 16))
    phi = solve_hat_tilde_phi(sol)
    assert np.all(phi.a == 0) and np.all(phi.b == 0)


def test_hat_tilde_phi_uncoupled_exponential():
    a, c0 = -0.3, 2.0
    spec = zero_spec(1, 1, 1, 1.0, A=a, B1=0.0, terminal=TerminalCondition([c0], [0.0], [0.0]))
    g = TimeGrid(1.0, 200)
    phi = solve_hat_tilde_phi(solve_all(spec, g))
    assert np.all(phi.a_grid[:, 0] == 0)
    assert np.max(np.abs(phi.a_grid[:, 1] - c0 * np.exp(a * (1.0 - g.t)))) < 1e-10


def test_hat_tilde_phi_pension_cross_validation():
    p = PensionParams(**PENSION, N=64)
    spec = make_pension_spec(p)
    sol = solve_all(spec, p.grid())
    phi = solve_hat_tilde_phi(sol)
    ens = generate_ensemble(2, 10_000, p.grid())
    rows = cross_validate(phi, hat_tilde_phi_bsde(sol), ens, [6, 19, 32, 45, 58])
    assert max(r.zscore for r in rows) <= 3.0


def test_recover_standard_is_identity():
    spec = generic_spec()
    sol = solve_all(spec, TimeGrid(1.0, 16))
    phi = solve_hat_tilde_phi(sol)
    out = recover_tilde_phi(phi, TerminalMode.STANDARD)
    assert out.affine is phi and out.residual == 0.0


def test_recover_experimental_zero_terminal():
    spec = zero_spec(1, 1, 1, 1.0, A=-0.2, B1=1.0, C1=0.2)
    g = TimeGrid(1.0, 16)
    sol = solve_all(spec, g)
    ens = generate_ensemble(0, 200, g)
    out = recover_tilde_phi(solve_hat_tilde_phi(sol), TerminalMode.EXPERIMENTAL, sol, ens)
    assert np.all(out.values == 0) and out.residual == 0.0 and out.terminal_error == 0.0


def test_recover_experimental_terminal_match():
    spec = zero_spec(1, 1, 1, 1.0, A=-0.2, B1=1.0, C1=0.2, terminal=TerminalCondition([1.0], [0.3], [0.5]))
    g = TimeGrid(1.0, 16)
    sol = solve_all(spec, g)
    errs = {}
    for M in (1000, 16000):
        out = recover_tilde_phi(solve_hat_tilde_phi(sol), TerminalMode.EXPERIMENTAL, sol, generate_ensemble(4, M, g))
        errs[M] = out.terminal_error
        # regression noise in the integrands accumulates to O(N / M) in the re-simulated terminal
        assert out.terminal_error <= 3 * g.N / M
    assert errs[16000] < errs[1000] / 4
    # oracle for the W~ integrand: its loading c solves c' = -(Pi1 B1 + A1^T) c, c(T) = c2
    b = sol.aug.blocks
    own = sol.pis_half()["Pi1"] @ b["B1"] + np.swapaxes(b["A1"], 1, 2)
    ode = LinearBSDESpec(MY=own, MZ=np.zeros_like(own), c0=np.zeros(2), c1=np.zeros(2), c2=sol.aug.xi_c2,
                         MZt=np.zeros_like(own))
    c = solve_affine_linear_bsde(ode, g, allow_tilde=True).c_grid
    target = np.trapezoid(np.sum(c ** 2, axis=1), g.t)
    assert out.residual == pytest.approx(target, rel=0.1)


def test_leader_filter_zero():
    spec = generic_spec()
    spec.terminal = TerminalCondition.zero(2)
    g = TimeGrid(1.0, 16)
    sol = solve_all(spec, g)
    out = simulate_hat_tilde_varphi(sol, solve_hat_tilde_phi(sol), generate_ensemble(0, 5, g))
    assert np.all(out.values == 0)


def test_leader_filter_matches_direct_integration():
    p = PensionParams(**PENSION, N=64)
    sol = solve_all(make_pension_spec(p), p.grid())
    phi = solve_hat_tilde_phi(sol)
    tab = leader_tables(sol)
    ens = generate_ensemble(5, 50, p.grid())
    Wv = phi.evaluate(ens.W)
    eta = phi.b_grid

    def drift(i, t, x, aux):
        return x @ tab["hat_drift_v"][i].T + Wv[:, i] @ tab["beta_phi"][i].T + tab["hat_drift_eta"][i] @ eta[i]

    def diff(i, t, x, aux):
        return x @ tab["hat_diff_v"][i].T + Wv[:, i] @ tab["hat_diff_phi"][i].T + tab["hat_diff_eta"][i] @ eta[i]

    ref = euler_integrate(drift, diff, None, np.zeros(2), ens).values
    got = simulate_hat_tilde_varphi(sol, phi, ens, tab).values
    assert np.max(np.abs(ref - got)) < 1e-13


def test_leader_filter_self_convergence():
    p = PensionParams(**PENSION, N=256)
    spec = make_pension_spec(p)

    def run(ens):
        sol = solve_all(spec, ens.grid)
        return simulate_hat_tilde_varphi(sol, solve_hat_tilde_phi(sol), ens).values

    e4, e2 = _self_convergence(run)
    assert e2 < e4 / np.sqrt(2)


def test_leader_filter_ignores_tilde_noise():
    p = PensionParams(**PENSION, N=32)
    sol = solve_all(make_pension_spec(p), p.grid())
    phi = solve_hat_tilde_phi(sol)
    ens = generate_ensemble(0, 10, p.grid())
    a = simulate_hat_tilde_varphi(sol, phi, ens).values
    b = simulate_hat_tilde_varphi(sol, phi, ens.permute_tilde(2)).values
    assert np.array_equal(a, b) and np.all(a[:, 0] == 0)
