import numpy as np
import pytest
from scipy.integrate import solve_ivp

from ctrlbench.kinetics import competition_network, conservation_laws, mass_action_compile
from ctrlbench.ode import (
    DivergenceError,
    Impulse,
    PiecewiseConstant,
    StiffnessError,
    Trajectory,
    ZeroControl,
    integrate,
    linearize,
    solve_segment,
    windowed_rms,
    windowed_rms_array,
)
from ctrlbench.robots import RobotKind, sample_spec

GRID = np.arange(81.0)


def crn(rng):
    f = mass_action_compile(competition_network(rng.uniform(0.01, 0.2, 10)))
    return f, (lambda x, c: f(x) if c is None else f(x) + c)


def test_control_signals():
    imp = Impulse(np.array([1.0, 2.0]), 0.0, 3.0)
    np.testing.assert_array_equal(imp(2.999), [1.0, 2.0])
    np.testing.assert_array_equal(imp(3.0), [0.0, 0.0])
    assert imp.breakpoints(0.0, 80.0) == [3.0]
    pc = PiecewiseConstant([0.0, 1.0, 2.0], [[1.0], [2.0]])
    assert pc(0.5)[0] == 1.0 and pc(1.0)[0] == 2.0 and pc(5.0)[0] == 2.0
    assert pc.breakpoints(0.0, 2.0) == [1.0]
    np.testing.assert_array_equal(ZeroControl(3)(1.0), np.zeros(3))
    with pytest.raises(ValueError):
        PiecewiseConstant([0.0, 1.0], [[1.0], [2.0]])


def test_zero_field_impulse_closed_form():
    u = np.array([0.5, -1.0, 2.0])
    x0 = np.array([1.0, 2.0, 3.0])
    traj = integrate(lambda x, c: np.zeros_like(x) + (0 if c is None else c), Impulse(u, 0, 3), x0, GRID,
                     mixing=np.eye(3))
    want = x0 + u * np.minimum(GRID, 3.0)[:, None]
    np.testing.assert_allclose(traj.states, want, rtol=1e-12, atol=1e-12)


def test_exponential_decay():
    traj = integrate(lambda x, c: -x, None, np.array([1.0]), [0.0, 1.0], tol=1e-10)
    assert traj.states[-1, 0] == pytest.approx(np.exp(-1.0), rel=1e-9)


def test_matches_solve_ivp_on_reaction_network(rng):
    for _ in range(3):
        f, rhs = crn(rng)
        x0 = rng.uniform(0.5, 2.0, 15)
        B = rng.uniform(0.5, 1.5, (15, 8))
        u = rng.uniform(0, 2, 8)
        ours = integrate(rhs, Impulse(u, 0, 3), x0, GRID, mixing=B, tol=1e-10).states
        a = solve_ivp(lambda t, x: f(x) + B @ u, (0, 3), x0, method="DOP853", rtol=1e-12, atol=1e-14,
                      t_eval=GRID[:4])
        b = solve_ivp(lambda t, x: f(x), (3, 80), a.y[:, -1], method="DOP853", rtol=1e-12, atol=1e-14,
                      t_eval=GRID[3:])
        ref = np.concatenate([a.y[:, :3], b.y], axis=1).T
        np.testing.assert_allclose(ours, ref, rtol=1e-7, atol=1e-9)


def test_restart_matches_split_integration(rng):
    f, rhs = crn(rng)
    x0 = rng.uniform(0.5, 2.0, 15)
    B = np.eye(15)[:, :8]
    u = np.full(8, 0.7)
    whole = integrate(rhs, Impulse(u, 0, 3), x0, GRID, mixing=B).states
    first = integrate(lambda x, c: rhs(x, B @ u), None, x0, GRID[:4]).states
    second = integrate(rhs, None, first[-1], GRID[3:]).states
    np.testing.assert_allclose(whole[:4], first, rtol=0, atol=1e-12)
    np.testing.assert_allclose(whole[3:], second, rtol=0, atol=1e-12)


def test_additive_in_control_for_zero_field():
    zero = lambda x, c: np.zeros_like(x) if c is None else c + 0 * x  # noqa: E731
    grid = np.linspace(0, 5, 11)
    s1 = PiecewiseConstant([0, 1, 2], [[1.0, 0.0], [0.0, 2.0]])
    s2 = PiecewiseConstant([0, 1, 2], [[0.5, 0.5], [1.0, -1.0]])
    s12 = PiecewiseConstant([0, 1, 2], s1.values + s2.values)
    x0 = np.zeros(2)
    a = integrate(zero, s1, x0, grid).states + integrate(zero, s2, x0, grid).states
    b = integrate(zero, s12, x0, grid).states
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_halving_tolerance_converges(rng):
    f, rhs = crn(rng)
    x0 = rng.uniform(0.5, 2.0, 15)
    for tol in (1e-6, 1e-8):
        a = integrate(rhs, None, x0, GRID, tol=tol).states
        b = integrate(rhs, None, x0, GRID, tol=tol / 2).states
        assert np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-3)) <= 10 * tol


def test_conservation_transport(rng):
    for _ in range(3):
        k = rng.uniform(0.01, 0.2, 10)
        net = competition_network(k)
        f = mass_action_compile(net)
        x = integrate(lambda x, c: f(x), None, rng.uniform(0.5, 2.0, 15), GRID).states
        for v in conservation_laws(net):
            q = x @ v
            assert np.max(np.abs(q - q[0])) <= 1e-6 * max(np.max(np.abs(x @ np.abs(v))), 1e-12)


def test_batched_matches_single(rng):
    f, rhs = crn(rng)
    x0 = rng.uniform(0.5, 2.0, (4, 15))
    batch = integrate(rhs, None, x0, GRID)
    for i in range(4):
        single = integrate(rhs, None, x0[i], GRID).states
        np.testing.assert_allclose(batch[:, i], single, rtol=1e-6, atol=1e-9)


def test_divergence_reports_time():
    with pytest.raises(DivergenceError) as info:
        integrate(lambda x, c: x**2, None, np.array([1.0]), [0.0, 0.5, 2.0])
    assert 0.5 < info.value.t <= 2.0


def test_masked_divergence_keeps_other_members():
    out = integrate(lambda x, c: x**2, None, np.array([[1.0], [0.1]]), [0.0, 2.0], mask_divergent=True)
    assert np.isnan(out[-1, 0, 0])
    assert out[-1, 1, 0] == pytest.approx(0.1 / (1 - 0.2), rel=1e-6)


def test_stiffness_error_on_step_underflow():
    with pytest.raises((StiffnessError, DivergenceError)):
        solve_segment(lambda t, y: -1e12 * (y - np.cos(t)), 0.0, 1.0, np.array([0.0]), np.empty(0),
                      max_steps=100)


def test_invalid_grid_and_tol():
    with pytest.raises(ValueError):
        integrate(lambda x, c: -x, None, np.ones(1), [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        integrate(lambda x, c: -x, None, np.ones(1), [0.0, 1.0], tol=0.0)


def test_linearize_polynomial_at_origin(rng):
    f = mass_action_compile(competition_network(rng.uniform(0.1, 2.0, 10)))
    B = rng.uniform(0.5, 1.5, (15, 8))
    A, Bu = linearize(lambda x, c: f(x) + c, np.zeros(15), np.zeros(8), mixing=B)
    np.testing.assert_allclose(A, f.linear, atol=1e-9)
    np.testing.assert_allclose(Bu, B, rtol=1e-8)


class _AnalyticField:
    def __init__(self, f, B):
        self.f, self.B = f, B

    def __call__(self, x, c):
        return self.f(x) + c

    def jacobian(self, x, c):
        return self.f.jacobian(x), np.eye(len(x))


def test_linearize_uses_analytic_jacobian(rng):
    f = mass_action_compile(competition_network(rng.uniform(0.1, 2.0, 10)))
    B = rng.uniform(0.5, 1.5, (15, 8))
    x = rng.uniform(0.1, 2.0, 15)
    A, Bu = linearize(_AnalyticField(f, B), x, np.zeros(8), mixing=B)
    np.testing.assert_array_equal(A, f.jacobian(x))
    np.testing.assert_array_equal(Bu, B)


def test_linearize_robot_matches_finite_differences(rng):
    spec = sample_spec(RobotKind.ROT2, rng)
    x = rng.uniform(-1, 1, 4)
    tau = rng.normal(size=2)
    A, B = spec.jacobian(x, tau)
    Af, Bf = linearize(lambda s, c: spec.rhs(s, c), x, tau)
    np.testing.assert_allclose(A, Af, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(B, Bf, rtol=1e-5, atol=1e-6)


def test_windowed_rms_examples():
    t = np.arange(81.0)
    flat = Trajectory(t, np.full((81, 1), 2.5))
    assert windowed_rms(flat, 0, 2.5, (40, 80)) == 0.0
    assert windowed_rms(flat, 0, 1.5, (40, 80)) == pytest.approx(1.0, abs=1e-15)
    ramp_t = np.linspace(0, 1, 1001)
    ramp = Trajectory(ramp_t, ramp_t[:, None])
    assert windowed_rms(ramp, 0, 0.0, (0, 1)) == pytest.approx(np.sqrt(1 / 3), abs=1e-4)
    with pytest.raises(ValueError):
        windowed_rms(flat, 0, 0.0, (40, 90))
    vals = np.stack([np.full(81, 1.0), np.full(81, 3.0)], axis=1)
    np.testing.assert_allclose(windowed_rms_array(t, vals, 1.0, (40, 80)), [0.0, 2.0])


def test_trajectory_csv_round_trip(rng):
    traj = Trajectory(np.linspace(0, 1, 5), rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
    back = Trajectory.from_csv(traj.to_csv())
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.controls, traj.controls)
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], np.zeros((2, 1)))
