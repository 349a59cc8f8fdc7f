import numpy as np
import pytest
from scipy.linalg import expm

from stackbsde import pension as pn
from stackbsde.errors import StructuralError
from stackbsde.model import sample_coefficients
from stackbsde.pension import (PensionParams, closed_form_benchmark, dual_route_check, make_pension_spec,
                               portfolio_weights, propagator_gamma, run_pension)

from conftest import PENSION


@pytest.fixture(scope="module")
def solution():
    return run_pension(PensionParams(**PENSION, N=64), seed=0, M=2000)


def test_coefficients():
    p = PensionParams(**PENSION, N=8)
    tab = sample_coefficients(make_pension_spec(p), p.grid())
    assert tab.on_grid("C1")[0, 0, 0] == pytest.approx(-0.25, abs=1e-15)
    assert tab.on_grid("C2")[0, 0, 0] == pytest.approx(-0.1, abs=1e-15)
    assert tab.on_grid("A")[0, 0, 0] == -0.05 and tab.on_grid("B1")[0, 0, 0] == -1.0
    assert make_pension_spec(p).G1[0, 0] == 2.0


def test_no_discount_gives_unit_weights():
    p = PensionParams(**{**PENSION, "beta": 0.0}, N=8)
    tab = sample_coefficients(make_pension_spec(p), p.grid())
    assert np.all(tab["R1"] == 1.0) and np.all(tab["R2"] == 1.0)


@pytest.mark.parametrize("kw", [dict(DB=0.1), dict(NC=0.2), dict(mu1=0.01), dict(sigma=0.0)])
def test_unsupported_parameters_raise(kw):
    with pytest.raises(StructuralError):
        PensionParams(**{**PENSION, **kw})


def test_zero_target_gives_zero_solution():
    sol = run_pension(PensionParams(**PENSION, N=32, c0=0.0, c1=0.0), M=50)
    assert sol.reserve == 0.0
    assert np.all(sol.v1 == 0) and np.all(sol.v2 == 0)
    assert sol.costs["J1"] == 0.0 and sol.costs["J2"] == 0.0


def test_scalar_displays_match_generic_solver(solution):
    c = solution.checks
    # RK4 at N = 64 against a tight adaptive solve
    assert c["P1_display_gap"] < 1e-12 and c["P2_display_gap"] < 1e-6
    assert c["v1_display_gap"] < 1e-10 and c["v1_generic_gap"] < 1e-10


def test_display_P1_frozen_value():
    # independently evaluated to 16 digits by quadrature
    p = PensionParams(**PENSION)
    assert pn.pension_P1(p, 0.0) == pytest.approx(1.0371421529676550, rel=1e-13)
    assert pn.pension_P2(p, [0.0, 0.5])[1] == pytest.approx(0.9253482229804801, rel=1e-9)


def test_reserve_is_linear_and_increasing_in_target():
    r = [run_pension(PensionParams(**PENSION, N=32, c0=c0), M=20).reserve for c0 in (0.5, 1.0, 1.5)]
    assert r[0] < r[1] < r[2]
    assert r[2] - r[1] == pytest.approx(r[1] - r[0], rel=1e-10)


def test_gamma_is_identity_at_horizon(solution):
    res, ens = solution.result, solution.ensemble
    G, acc, _ = propagator_gamma(res, ens, ens.grid.N)
    assert np.all(G == np.eye(2)) and np.all(acc == 0)


def test_gamma_multiplies_from_the_right(solution, monkeypatch):
    res, ens = solution.result, solution.ensemble
    N = ens.grid.N
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0, 0.0], [1.0, 0.0]])
    AY = np.array([A if i < N // 2 else B for i in range(N + 1)])
    zero = np.zeros((N + 1, 2, 2))
    monkeypatch.setattr(pn, "_gamma_coefficients", lambda r: (AY, zero, zero, zero, zero))
    G, acc, _ = propagator_gamma(res, ens, 0)
    expect = expm(A / 2) @ expm(B / 2)
    assert np.all(acc == 0)
    assert np.max(np.abs(G[0] - expect)) < 2 * ens.grid.dt
    assert np.max(np.abs(G[0] - expm(B / 2) @ expm(A / 2))) > 0.1


def test_dual_route_matches_decoupling():
    # the Euler propagator carries an O(dt) weak bias (about 0.27 dt in the adjoint block), so the grid is
    # chosen fine enough for that bias to sit well inside 3 SE at this M
    sol = run_pension(PensionParams(**PENSION, N=256), seed=0, M=2000)
    checks = dual_route_check(sol.result, sol.spec, sol.ensemble, [0, 128])
    assert all(c.ok(3.0) for c in checks.values())
    assert checks[0].estimate.within(sol.reserve, 3.0)


def test_weights_mask_small_fund():
    p = PensionParams(**PENSION)
    y = np.array([[1.0, 0.0, 1e-9, -2.0]])
    z = np.full_like(y, 0.2)
    w = portfolio_weights(y, z, z, p)
    assert w.masked == 2
    assert np.isnan(w.pi1[0, 1]) and np.isnan(w.pi2[0, 2])
    assert w.pi1[0, 0] == pytest.approx(1.0) and w.pi2[0, 3] == pytest.approx(-1 / 3)


def test_fund_round_trip(solution):
    assert solution.checks["fund_roundtrip_median_sup"] < 0.05


def test_benchmark_terms():
    p = PensionParams(**PENSION)
    b = closed_form_benchmark(p)
    k = 0.1 + 0.25 ** 2 - 0.1
    assert b["K"] == pytest.approx((np.exp(k) - 1) / k, rel=1e-14)
    assert b["deflated_terminal"] == pytest.approx(np.exp(-0.05) * (1.0 - 0.5 * 0.25), rel=1e-14)


@pytest.mark.xfail(strict=True, reason="deflator benchmark assumes a W-adapted follower response; "
                                       "the decoupled equilibrium reserve differs by about 8%")
def test_reserve_matches_deflator_benchmark():
    sol = run_pension(PensionParams(**PENSION, N=256), M=20)
    assert sol.reserve == pytest.approx(sol.benchmark["reserve"], rel=1e-2)
