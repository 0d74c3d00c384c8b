import json

import numpy as np
import pytest

from ctrlbench import robo
from ctrlbench.controllers.robot_sysid import (
    FitError,
    FittedRobotModel,
    estimate_lengths,
    fit_linear_surrogate,
    fit_robot_model,
    infer_kind,
    model_from_json,
)
from ctrlbench.robots import RobotKind, build_system_table


@pytest.fixture(scope="module")
def systems():
    return build_system_table(5)


def training_runs(system, count, seed=0):
    return robo.episodes_as_runs(robo.generate_training_trajectories(system, count=count, seed=seed))


def held_out_states(spec, rng, count=200):
    n = spec.n
    lo = -1.0 if spec.kind.rotational else -0.2
    return np.c_[rng.uniform(lo, -lo, (count, n)), rng.normal(0, 1, (count, n))]


def test_kind_and_lengths_from_geometry(systems):
    for s in (systems[0], systems[8], systems[16]):
        runs = training_runs(s, 2)
        assert infer_kind(runs) == s.spec.kind
        if s.spec.kind.rotational:
            np.testing.assert_allclose(estimate_lengths(runs, s.spec.kind), s.spec.lengths, rtol=1e-9)


def test_identity_interface_rot2_accelerations(systems, rng):
    system = systems[0]
    model = fit_robot_model(training_runs(system, 8))
    assert model.kind == RobotKind.ROT2
    x = held_out_states(system.spec, rng)
    U = rng.normal(0, 2, (len(x), system.p))
    want = system.spec.acceleration(x, U @ system.interface.A.T)
    got = model.acceleration(x, U)
    rms = np.sqrt(np.mean((got - want) ** 2))
    assert rms < 1e-6 * max(1.0, np.sqrt(np.mean(want**2)))


def test_wide_interface_rows_in_true_row_space(systems):
    system = systems[3]
    A = system.interface.A
    model = fit_robot_model(training_runs(system, 8))
    Ahat = model.interface
    outside = Ahat - Ahat @ np.linalg.pinv(A) @ A
    assert np.linalg.norm(outside) < 1e-3 * np.linalg.norm(Ahat)
    # each fitted row is a rescaling of the matching true row
    for a, b in zip(Ahat, A):
        cos = abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos == pytest.approx(1.0, abs=1e-6)


def test_prismatic_structured_fit(systems, rng):
    system = systems[16]
    model = fit_robot_model(training_runs(system, 6))
    x = held_out_states(system.spec, rng)
    U = rng.normal(0, 2, (len(x), system.p))
    want = system.spec.acceleration(x, U @ system.interface.A.T)
    np.testing.assert_allclose(model.acceleration(x, U), want, atol=1e-5 * np.abs(want).max())


def test_surrogate_beats_constant_velocity(systems):
    system = systems[17]
    train = training_runs(system, 6, seed=1)
    test = training_runs(system, 2, seed=2)
    sur = fit_linear_surrogate(train)
    err_model, err_base = [], []
    for r in test:
        obs = r.observations()
        s = np.concatenate([obs.Z, obs.W, obs.dZ, obs.dW], axis=-1)
        pred = sur.predict(s[:-1], r.U)
        base = s[:-1].copy()
        base[:, :2] += robo.DT * s[:-1, 2 * system.d + 2: 2 * system.d + 4]
        err_model.append(pred[:, :2] - s[1:, :2])
        err_base.append(base[:, :2] - s[1:, :2])
    assert np.sqrt(np.mean(np.concatenate(err_model) ** 2)) < np.sqrt(np.mean(np.concatenate(err_base) ** 2))


def test_unexcited_controls_raise(systems):
    system = systems[0]
    runs = training_runs(system, 2)
    for r in runs:
        r.U[:, 1] = 0.0
    with pytest.raises(FitError, match="excite"):
        fit_robot_model(runs, refine=False)
    with pytest.raises(FitError):
        fit_robot_model([])


def test_json_round_trip(systems):
    system = systems[0]
    model = FittedRobotModel.from_truth(system.spec, system.interface)
    back = model_from_json(model.to_json())
    x = np.array([0.1, -0.2, 0.3, 0.0])
    np.testing.assert_array_equal(back.acceleration(x, [1.0, 2.0]), model.acceleration(x, [1.0, 2.0]))
    sur = fit_linear_surrogate(training_runs(systems[16], 2))
    again = model_from_json(sur.to_json())
    np.testing.assert_array_equal(again.F, sur.F)
    assert json.loads(sur.to_json())["model"] == "linear"
