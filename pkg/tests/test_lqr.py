import numpy as np
import pytest
import scipy.linalg

from ctrlbench import robo
from ctrlbench.controllers.base import ZeroController
from ctrlbench.controllers.lqr import (
    RiccatiError,
    damped_ik,
    dare_residual,
    discretize,
    is_stabilizable,
    lqr_design,
    oracle_lqr,
    solve_dare,
)
from ctrlbench.controllers.robot_sysid import FittedRobotModel, sysid_lqr_controller
from ctrlbench.robots import RobotKind, build_system_table, sample_spec


def test_scalar_integrator_closed_form():
    dt, q, r = 0.01, 3.0, 0.5
    Ad, Bd, _ = discretize([[0.0]], [[1.0]], dt)
    assert Ad[0, 0] == 1.0 and Bd[0, 0] == pytest.approx(dt, rel=1e-14)
    P = solve_dare(Ad, Bd, [[q]], [[r]])
    b = Bd[0, 0]
    want = (q + np.sqrt(q**2 + 4 * q * r / b**2)) / 2
    assert P[0, 0] == pytest.approx(want, rel=1e-8)


def test_discretize_with_drift():
    # x' = -x + 1 from 0 reaches 1 - exp(-dt)
    Ad, Bd, d = discretize([[-1.0]], np.zeros((1, 1)), 0.3, drift=[1.0])
    assert Ad[0, 0] == pytest.approx(np.exp(-0.3), rel=1e-14)
    assert d[0] == pytest.approx(1 - np.exp(-0.3), rel=1e-14)


def test_uncontrollable_rejected():
    with pytest.raises(RiccatiError):
        solve_dare(np.eye(2), np.zeros((2, 1)), np.eye(2), np.eye(1))
    A = np.diag([1.5, 0.5])
    B = np.array([[0.0], [1.0]])
    assert not is_stabilizable(A, B)
    with pytest.raises(RiccatiError):
        solve_dare(A, B, np.eye(2), np.eye(1))
    with pytest.raises(RiccatiError):
        solve_dare(np.eye(1), np.eye(1), np.eye(1), np.zeros((1, 1)))


def test_double_integrator_design():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    Q = np.diag([100.0, 1.0])
    R = np.array([[0.1]])
    gain = lqr_design(A, B, Q, R, 0.01)
    assert gain.spectral_radius() < 1
    assert dare_residual(gain.Ad, gain.Bd, Q, R, gain.P) < 1e-8 * np.linalg.norm(gain.P)
    ref = scipy.linalg.solve_discrete_are(gain.Ad, gain.Bd, Q, R)
    np.testing.assert_allclose(gain.P, ref, rtol=1e-8)


def test_dare_agrees_with_scipy_on_random_systems(rng):
    for _ in range(10):
        n, m = 4, 2
        A = rng.normal(size=(n, n))
        B = rng.normal(size=(n, m))
        Q = np.eye(n)
        R = np.eye(m) * 0.3
        P = solve_dare(A, B, Q, R)
        np.testing.assert_allclose(P, scipy.linalg.solve_discrete_are(A, B, Q, R), rtol=1e-7, atol=1e-9)


def test_damped_ik_reaches_target(rng):
    spec = sample_spec(RobotKind.ROT2, rng)
    theta = np.array([0.3, -0.4])
    target = spec.tip(theta)
    got = damped_ik(spec.dynamics, target, np.zeros(2))
    np.testing.assert_allclose(spec.tip(got), target, atol=1e-9)


def test_identity_interface_pinv():
    systems = build_system_table(5)
    for s in (systems[0], systems[8], systems[16]):
        np.testing.assert_array_equal(s.interface.pinv, np.eye(s.spec.n))


def test_wide_interface_controls_in_row_space():
    system = build_system_table(5)[3]
    A = system.interface.A
    assert A.shape[1] > A.shape[0]
    ctrl = oracle_lqr(system.spec, system.interface)
    target = robo.generate_targets(system.spec, 1, seed=2)[0]
    res = robo.run_episode(system, ctrl, target)
    proj = np.linalg.pinv(A) @ A
    np.testing.assert_allclose(res.U @ proj.T, res.U, atol=1e-9)


def test_sysid_controller_with_true_model_matches_oracle():
    system = build_system_table(5)[10]
    target = robo.generate_targets(system.spec, 1, seed=3)[0]
    oracle = robo.run_episode(system, oracle_lqr(system.spec, system.interface), target)
    model = FittedRobotModel.from_truth(system.spec, system.interface)
    sysid = robo.run_episode(system, sysid_lqr_controller(model), target)
    np.testing.assert_allclose(sysid.U, oracle.U, rtol=0, atol=1e-8)


def test_oracle_tracks_better_than_zero():
    for system in build_system_table(5)[::8]:
        target = robo.generate_targets(system.spec, 1, seed=4)[0]
        zero = robo.run_episode(system, ZeroController(system.p), target)
        oracle = robo.run_episode(system, oracle_lqr(system.spec, system.interface), target)
        assert oracle.tracking < 0.05 * zero.tracking
