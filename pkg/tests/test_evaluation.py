import numpy as np
import pytest
from hypothesis import given, strategies as st

from stackbsde.equilibrium import simulate_equilibrium
from stackbsde.evaluation import (FOLLOWER, LEADER, SIMPSON, TRAPEZOID, evaluate_J1, evaluate_J2, fit_quadratic,
                                  follower_stationarity_residual, leader_stationarity_residual, perturbation_curve,
                                  random_direction, time_integral)
from stackbsde.errors import StructuralError
from stackbsde.model import ExpDiscount, TimeGrid, zero_spec
from stackbsde.pension import PensionParams, make_pension_spec
from stackbsde.simulate import generate_ensemble

from conftest import PENSION


def _parts(M, N, n=1, k=1, y=0.0, v=0.0):
    return {"y": np.full((M, N + 1, n), y), "z": np.zeros((M, N + 1, n)), "zt": np.zeros((M, N + 1, n)),
            "v1": np.full((M, N + 1, k), v), "v2": np.full((M, N + 1, k), v)}


@pytest.fixture(scope="module")
def pension_eq():
    p = PensionParams(**PENSION, N=64)
    spec = make_pension_spec(p)
    ens = generate_ensemble(3, 2000, p.grid())
    return spec, ens, simulate_equilibrium(spec, p.grid(), ens)


def test_zero_paths_cost_nothing():
    spec = zero_spec(1, 1, 1, 1.0, Q1=1.0, Q2=1.0, G1=[[1.0]], G2=[[1.0]])
    g = TimeGrid(1.0, 8)
    tr = _parts(5, 8)
    assert evaluate_J1(tr, spec, g).value == 0.0 and evaluate_J2(tr, spec, g).value == 0.0


def test_unit_follower_cost():
    spec = zero_spec(1, 1, 1, 1.0, Q1=2.0)
    rep = evaluate_J1(_parts(3, 10, y=1.0), spec, TimeGrid(1.0, 10))
    assert rep.value == pytest.approx(1.0, abs=1e-15) and rep.se == 0.0


def test_discounted_leader_cost():
    # 1/2 int_0^1 e^{-0.1 t} dt = (1 - e^{-0.1}) / 0.2
    spec = zero_spec(1, 1, 1, 1.0, R2=ExpDiscount(0.1))
    rep = evaluate_J2(_parts(2, 64, v=1.0), spec, TimeGrid(1.0, 64), rule=SIMPSON)
    assert rep.value == pytest.approx(0.4758129098202024, abs=1e-9)


def test_breakdown_sums_to_total(pension_eq):
    spec, ens, res = pension_eq
    for f in (evaluate_J1, evaluate_J2):
        rep = f(res.traj, spec, ens.grid)
        assert rep.breakdown_total() == pytest.approx(rep.value, rel=1e-12)
        assert set(rep.breakdown) == {"state", "control", "z", "zt", "initial"}


def test_missing_component_is_reported():
    with pytest.raises(StructuralError):
        evaluate_J1({"y": np.zeros((1, 3, 1))}, zero_spec(1, 1, 1, 1.0), TimeGrid(1.0, 2))


def test_simpson_beats_trapezoid():
    g = TimeGrid(1.0, 16)
    f = (g.t ** 2 * np.exp(g.t))[None]
    exact = np.e - 2
    e_s = abs(time_integral(f, g.dt, SIMPSON)[0] - exact)
    e_t = abs(time_integral(f, g.dt, TRAPEZOID)[0] - exact)
    assert e_s < e_t / 10
    with pytest.raises(ValueError):
        time_integral(np.zeros((1, 4)), 0.1, SIMPSON)


@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.integers(0, 1000))
def test_cost_is_nonnegative(q, r, seed):
    spec = zero_spec(1, 1, 1, 1.0, Q1=q, R1=r + 0.1, S1=q, G1=[[r]])
    rng = np.random.default_rng(seed)
    tr = {k: rng.normal(size=(4, 9, 1)) for k in ("y", "z", "zt", "v1")}
    assert np.all(evaluate_J1(tr, spec, TimeGrid(1.0, 8)).per_path >= 0)


def test_follower_residual_is_affine_in_control(pension_eq):
    spec, ens, res = pension_eq
    base = follower_stationarity_residual(res.traj, spec, ens)
    shifted = follower_stationarity_residual(res.traj, spec, ens, v1=res.traj.v1 + 1.0)
    R1 = res.sol.tab.on_grid("R1")[:, :, 0]
    assert np.allclose(shifted.mean - base.mean, -R1, atol=1e-12)
    scaled = follower_stationarity_residual(res.traj, spec, ens, gain_scale=1.1)
    assert np.allclose(scaled.mean - base.mean, -0.1 * np.mean(res.traj.v1, axis=0) * R1, atol=1e-12)


def test_leader_residual_is_affine_in_control(pension_eq):
    spec, ens, res = pension_eq
    base = leader_stationarity_residual(res.traj, res.sol, ens)
    shifted = leader_stationarity_residual(res.traj, res.sol, ens, v2=res.traj.v2 + 1.0)
    R2 = res.sol.tab.on_grid("R2")[:, :, 0]
    assert np.allclose(shifted.mean - base.mean, R2, atol=1e-12)


def test_follower_residual_small_at_equilibrium(pension_eq):
    spec, ens, res = pension_eq
    r = follower_stationarity_residual(res.traj, spec, ens)
    off = follower_stationarity_residual(res.traj, spec, ens, gain_scale=1.1)
    assert np.max(off.rms) > 5 * np.max(r.rms)


@pytest.mark.parametrize("player", [FOLLOWER, LEADER])
def test_zero_direction_changes_nothing(pension_eq, player):
    spec, ens, res = pension_eq
    u = random_direction(np.random.default_rng(0), ens.grid, 1, player, scale=0.0)
    rep = perturbation_curve(res, spec, ens, player, u)
    assert np.all(rep.delta == 0) and rep.central_difference == 0.0


@pytest.mark.parametrize("player", [FOLLOWER, LEADER])
def test_cost_change_is_exactly_quadratic(pension_eq, player):
    spec, ens, res = pension_eq
    u = random_direction(np.random.default_rng(1), ens.grid, 1, player)
    rep = perturbation_curve(res, spec, ens, player, u)
    assert rep.curvature > 0 and rep.r2 > 1 - 1e-9


def test_follower_direction_must_ignore_tilde(pension_eq):
    spec, ens, res = pension_eq
    u = random_direction(np.random.default_rng(1), ens.grid, 1, LEADER)
    with pytest.raises(StructuralError):
        perturbation_curve(res, spec, ens, FOLLOWER, u)


def test_follower_is_stationary(pension_eq):
    spec, ens, res = pension_eq
    rng = np.random.default_rng(4)
    for _ in range(3):
        rep = perturbation_curve(res, spec, ens, FOLLOWER, random_direction(rng, ens.grid, 1))
        assert rep.passes(k=3.0, r2_min=0.99)


def test_fit_quadratic_exact():
    eps = np.array([-0.2, -0.1, 0.1, 0.2])
    s, h, r2 = fit_quadratic(eps, 0.3 * eps + 2.0 * eps ** 2)
    assert s == pytest.approx(0.3) and h == pytest.approx(2.0) and r2 == pytest.approx(1.0)
