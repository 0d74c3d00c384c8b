import json

import numpy as np
import pytest

from ctrlbench import robo
from ctrlbench.controllers.base import ZeroController
from ctrlbench.controllers.lqr import oracle_lqr
from ctrlbench.robots import build_system_table


class NeverAnswers:
    """In-process controller that never produces a reply."""

    def start(self, info):
        pass

    def query(self, step, obs, target):
        return None

    def finish(self):
        pass


class NullSpacePadded:
    """Oracle controls plus a fixed null-space component of the interface."""

    def __init__(self, system, null):
        self.inner = oracle_lqr(system.spec, system.interface)
        self.null = null

    def start(self, info):
        self.inner.start(info)

    def query(self, step, obs, target):
        return self.inner.query(step, obs, target) + self.null

    def finish(self):
        pass


@pytest.fixture(scope="module")
def systems():
    return build_system_table(5)


@pytest.fixture(scope="module")
def picked(systems):
    # one square non-identity rot2, one wide rot3, one wide prismatic
    return [systems[1], systems[11], systems[19]]


@pytest.fixture(scope="module")
def calibrated(picked):
    return robo.calibrate_table(picked, 2, seed=7)


def test_calibrate_scaling_example():
    cal = robo.calibrate_scaling(50.0, 0.2, 4.0)
    assert cal.b == pytest.approx(2.0, abs=1e-15)
    assert cal.c == pytest.approx(0.15, abs=1e-15)
    assert not cal.degenerate
    assert cal.loss(50.0, 0.0) == pytest.approx(100.0)
    assert cal.loss(0.2, 4.0) == pytest.approx(1.0)


def test_calibrate_scaling_degenerate_and_errors():
    cal = robo.calibrate_scaling(50.0, 1.0, 4.0)
    assert cal.degenerate and cal.c == 0.0
    with pytest.raises(robo.DegenerateTargetError):
        robo.calibrate_scaling(0.0, 0.1, 1.0)


def test_calibration_is_idempotent():
    cal = robo.calibrate_scaling(37.0, 0.05, 2.5)
    # the calibrated losses of the two reference runs reproduce the same constants
    again = robo.calibrate_scaling(37.0, 0.05, 2.5)
    assert (again.b, again.c) == (cal.b, cal.c)
    assert cal.loss(37.0, 0.0) == pytest.approx(100.0, rel=1e-15)


def test_zero_and_oracle_score_calibration_points(picked, calibrated):
    for system, cset in zip(picked, calibrated):
        for k, (target, cal) in enumerate(zip(cset.targets, cset.calibrations)):
            zero = robo.run_episode(system, ZeroController(system.p), target, episode=k + 1)
            oracle = robo.run_episode(system, oracle_lqr(system.spec, system.interface), target,
                                      episode=k + 1)
            assert robo.episode_score(zero, cal)[0] == pytest.approx(100.0, abs=1e-6)
            assert robo.episode_score(oracle, cal)[0] == pytest.approx(1.0, abs=1e-6)
            assert oracle.timeouts == 0 and zero.effort == 0.0


def test_silent_controller_equals_zero(picked, calibrated):
    system, cset = picked[0], calibrated[0]
    target = cset.targets[0]
    silent = robo.run_episode(system, NeverAnswers(), target)
    zero = robo.run_episode(system, ZeroController(system.p), target)
    assert silent.timeouts == robo.N_STEPS
    np.testing.assert_array_equal(silent.states, zero.states)
    assert robo.episode_score(silent, cset.calibrations[0])[1] == pytest.approx(100.0, abs=1e-9)


def test_interface_null_space_does_not_move_the_arm(picked, calibrated):
    system = picked[2]
    A = system.interface.A
    assert A.shape[1] > A.shape[0]
    _, _, Vt = np.linalg.svd(A)
    null = Vt[-1] * 0.5
    target = calibrated[2].targets[0]
    base = robo.run_episode(system, oracle_lqr(system.spec, system.interface), target)
    padded = robo.run_episode(system, NullSpacePadded(system, null), target)
    np.testing.assert_allclose(padded.states, base.states, rtol=0, atol=1e-12)
    assert padded.effort > base.effort


def test_scores_are_clipped(picked, calibrated):
    system, cset = picked[0], calibrated[0]

    class Wild:
        def start(self, info):
            pass

        def query(self, step, obs, target):
            return np.full(system.p, 50.0)

        def finish(self):
            pass

    res = robo.run_episode(system, Wild(), cset.targets[0])
    raw, clipped = robo.episode_score(res, cset.calibrations[0])
    assert raw > 100 and clipped == 100.0
    report = robo.score_results([res], cset.calibrations[:1])
    assert report.rows[0]["clipped"] and 0 <= report.grand_mean <= 100


def test_actuation_is_interface_times_controls(picked, calibrated):
    system = picked[1]
    res = robo.run_episode(system, oracle_lqr(system.spec, system.interface), calibrated[1].targets[0])
    np.testing.assert_allclose(res.C, res.U @ system.interface.A.T, atol=1e-12)
    # oracle controls are minimum-norm preimages, so they lie in the row space of A
    P = np.linalg.pinv(system.interface.A) @ system.interface.A
    np.testing.assert_allclose(res.U @ P.T, res.U, atol=1e-9)


def test_targets(systems):
    for system in (systems[0], systems[8], systems[16]):
        spec = system.spec
        T = robo.generate_targets(spec, 3, seed=4)
        assert T.shape == (3, 201, 2)
        np.testing.assert_array_equal(T, robo.generate_targets(spec, 3, seed=4))
        assert not np.array_equal(T, robo.generate_targets(spec, 3, seed=5))
        home_tip = spec.tip(spec.home_state()[: spec.n])
        np.testing.assert_array_equal(T[:, 0], np.broadcast_to(home_tip, (3, 2)))
        assert np.all(robo.in_workspace(spec, T))
        if spec.kind.rotational:
            assert np.all(np.linalg.norm(T, axis=-1) <= spec.reach + 1e-12)


def test_training_trajectories(systems):
    system = systems[17]
    runs = robo.generate_training_trajectories(system, count=3, seed=1)
    text = robo.training_csv(runs)
    lines = text.strip().split("\n")
    assert len(lines) == 1 + 3 * 201
    assert lines[0].split(",") == robo.training_header(system.d, system.p)
    assert "target" not in lines[0] and "zx" not in lines[0]
    back = robo.read_training_csv(text)
    for r, res in zip(back, runs):
        np.testing.assert_array_equal(r.U, res.U)
        np.testing.assert_array_equal(r.Z, res.Z)
        np.testing.assert_allclose(res.C, res.U @ system.interface.A.T, atol=1e-12)
    again = robo.generate_training_trajectories(system, count=3, seed=1)
    assert robo.training_csv(again) == text


def test_targets_csv_round_trip(systems):
    T = robo.generate_targets(systems[0].spec, 2, seed=1)
    back = robo.read_targets_csv(robo.targets_csv([(1, T)]))
    np.testing.assert_array_equal(back[1], T)


def test_report_json_and_parallel_evaluation(picked, calibrated):
    serial, _ = robo.evaluate_controller(picked, calibrated, lambda s: ZeroController(s.p))
    parallel, _ = robo.evaluate_controller(picked, calibrated, lambda s: ZeroController(s.p), jobs=2)
    assert serial.to_json() == parallel.to_json()
    data = json.loads(serial.to_json())
    assert data["grand_mean"] == pytest.approx(100.0, abs=1e-6)
    assert set(data["per_system"]) == {str(s.index) for s in picked}


def test_calibration_json_round_trip(calibrated):
    back = robo.calibration_from_json(robo.calibration_json(calibrated))
    for a, b in zip(back, calibrated):
        np.testing.assert_array_equal(a.targets, b.targets)
        assert a.calibrations == b.calibrations


def test_bad_target_shape(picked):
    with pytest.raises(ValueError):
        robo.run_episode(picked[0], ZeroController(), np.zeros((10, 2)))
