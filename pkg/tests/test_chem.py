import json

import numpy as np
import pytest

from ctrlbench import chem
from ctrlbench.kinetics import N_SPECIES, Y_INDEX, conservation_laws, competition_network
from ctrlbench.ode import windowed_rms_array


@pytest.fixture(scope="module")
def spec():
    return chem.sample_ensemble(11)


@pytest.fixture(scope="module")
def episodes(spec):
    return chem.generate_training_data(spec)


@pytest.fixture(scope="module")
def cases(spec):
    return chem.generate_test_cases(spec, 6)


def test_ensemble_is_deterministic(spec):
    again = chem.sample_ensemble(11)
    assert json.dumps(again.to_json()) == json.dumps(spec.to_json())
    other = chem.sample_ensemble(12)
    assert not np.array_equal(other.rates, spec.rates)


def test_ensemble_shares_sparsity_and_signs(spec):
    fields = spec.fields
    lin0, quad0 = fields[0].sign_pattern()
    for f in fields[1:]:
        lin, quad = f.sign_pattern()
        np.testing.assert_array_equal(lin, lin0)
        np.testing.assert_array_equal(quad, quad0)
    assert np.all(spec.rates > 0)


def test_control_matrix_edges(spec):
    nz = spec.B != 0
    np.testing.assert_array_equal(np.flatnonzero(nz[:, 4]), [0, 6])
    expected = [(0, 2), (1, 3), (4, 6), (5, 7), (0, 6), (1, 7), (2, 4), (3, 5)]
    for col, rows in enumerate(expected):
        np.testing.assert_array_equal(np.flatnonzero(nz[:, col]), rows)
    vals = spec.B[nz]
    assert np.all((vals >= 0.5) & (vals <= 1.5))


def test_spec_json_round_trip(spec):
    back = chem.ChemSystemSpec.from_json(json.dumps(spec.to_json()))
    for name in ("rates", "B", "noise_sigma", "z0_logmean", "confounder", "control_mean"):
        np.testing.assert_array_equal(getattr(back, name), getattr(spec, name))


def test_training_data_shape_and_bounds(spec, episodes):
    assert len(episodes) == chem.N_SYSTEMS * chem.RUNS_PER_SYSTEM
    assert {e.system for e in episodes} == set(range(1, 13))
    for e in episodes:
        assert e.observations.shape == (81, N_SPECIES)
        assert np.all(np.abs(e.u) <= chem.U_BOUND)
        assert np.all(e.z0 > 0)


def test_noise_free_observations_equal_latent():
    spec0 = chem.with_noise_sigma(chem.sample_ensemble(3), 0.0)
    eps = chem.generate_training_data(spec0, runs_per_system=2)
    for e in eps:
        np.testing.assert_array_equal(e.observations, e.latent)


def test_training_data_is_confounded(spec, episodes):
    for i in range(1, 13):
        sys_eps = [e for e in episodes if e.system == i]
        Z0 = np.array([e.z0 for e in sys_eps])
        U = np.array([e.u for e in sys_eps])
        rho = np.corrcoef(np.hstack([U, Z0]).T)[:8, 8:]
        assert np.nanmax(np.abs(rho)) > 0.2, f"system {i}"


def test_confounding_kill_switch():
    spec0 = chem.with_confounding(chem.sample_ensemble(11), 0.0)
    i = 0
    rng = np.random.default_rng(0)
    mean = spec0.z0_mean(i)
    n = 4000
    z0 = np.exp(spec0.z0_logmean[i] + spec0.z0_logsd * rng.standard_normal((n, N_SPECIES)))
    eps = spec0.control_mean[i] + spec0.control_sd * rng.standard_normal((n, 8))
    u = np.clip((z0 - mean) @ spec0.confounder[i].T + eps, -10, 10)
    rho = np.corrcoef(np.hstack([u, z0]).T)[:8, 8:]
    assert np.max(np.abs(rho)) < 4 / np.sqrt(n)


def test_conservation_along_zero_control_episodes(spec):
    rng = np.random.default_rng(5)
    for _ in range(5):
        i = int(rng.integers(12))
        z0 = rng.uniform(0.5, 2.0, N_SPECIES)
        z = spec.model(i).simulate(z0, np.zeros(8)).states
        for a, b in ((0, 1), (2, 3), (4, 5), (6, 7)):
            d = z[:, a] - z[:, b]
            assert np.max(np.abs(d - d[0])) <= 1e-6 * max(abs(d[0]), np.max(z[:, [a, b]]))
    laws = conservation_laws(competition_network(spec.rates[0]))
    assert len(laws) >= 4


def test_observe_noise():
    z = np.ones((10, N_SPECIES))
    np.testing.assert_array_equal(chem.observe(z, 0.0, np.random.default_rng(0)), z)
    sigma = 0.3
    big = np.zeros((100_000, 1))
    noise = chem.observe(big, sigma, np.random.default_rng(1))
    assert abs(noise.mean()) < 3 * sigma / np.sqrt(100_000)
    a = chem.observe(z, 0.1, np.random.default_rng(2))
    b = chem.observe(z, 0.1, np.random.default_rng(3))
    assert not np.array_equal(a, b)


def test_penalty_term():
    assert chem.penalty_term(np.full(8, 10.0)) == pytest.approx(0.5, abs=1e-15)
    assert chem.penalty_term(np.zeros(8)) == 0.0
    u = np.random.default_rng(0).normal(size=(20, 8))
    np.testing.assert_allclose(chem.penalty_term(u), np.sqrt(np.sum(u**2, axis=1) / 8) / 20)


def test_zero_submission_scores_tracking_only(spec, cases):
    K = 6
    rep = chem.evaluate_submission(spec, cases, np.zeros((12, K, 8)))
    assert not rep.penalty.any()
    np.testing.assert_allclose(rep.per_system, rep.tracking.mean(axis=1))
    assert rep.grand_mean == pytest.approx(np.mean(rep.per_system))
    tc = cases[0]
    z = spec.model(0).simulate(tc.z0, np.zeros(8)).states
    sel = chem.GRID >= 40
    want = np.sqrt(np.trapezoid((z[sel, Y_INDEX] - tc.ystar) ** 2, chem.GRID[sel]) / 40)
    assert rep.tracking[0, 0] == pytest.approx(want, rel=1e-6)


def test_replacing_y_by_target_zeroes_tracking():
    y = np.full((81, 3), 0.7)
    np.testing.assert_array_equal(windowed_rms_array(chem.GRID, y, 0.7, chem.EVAL_WINDOW), np.zeros(3))


def test_out_of_bounds_controls_are_clipped(spec, cases):
    u = np.zeros((12, 6, 8))
    u[0, 0, 0] = 25.0
    rep = chem.evaluate_submission(spec, cases, u)
    assert rep.clipped[0, 0] and rep.clipped.sum() == 1
    assert rep.penalty[0, 0] == pytest.approx(chem.penalty_term(np.r_[10.0, np.zeros(7)]))
    assert rep.to_json()["any_clipped"]


def test_submission_shape_mismatch(spec, cases):
    with pytest.raises(ValueError, match="does not match"):
        chem.evaluate_submission(spec, cases, np.zeros((12, 5, 8)))


def test_targets_are_reachable(spec, cases):
    assert len(cases) == 12 * 6
    assert all(tc.ystar > 0 for tc in cases)


def test_training_csv_round_trip(episodes):
    text = chem.training_csv(episodes[:3])
    rows = text.strip().split("\n")
    assert rows[0].split(",")[:4] == ["system", "run", "t", "X1"]
    assert len(rows) == 1 + 3 * 81
    runs = chem.read_training_csv(text)
    for r, e in zip(runs, episodes[:3]):
        np.testing.assert_array_equal(r.x, e.observations)
        np.testing.assert_array_equal(r.u, e.u)
    # controls are zero after the impulse window
    assert rows[1 + 3].split(",")[-8:] == ["0.0"] * 8


def test_test_case_csv_round_trip(spec, cases):
    back = chem.read_test_cases_csv(chem.test_cases_csv(cases), spec)
    for a, b in zip(back, cases):
        np.testing.assert_array_equal(a.x0, b.x0)
        np.testing.assert_array_equal(a.z0, b.z0)
        assert a.ystar == b.ystar


def test_submission_csv_round_trip_and_errors():
    u = np.random.default_rng(0).uniform(-10, 10, (12, 3, 8))
    text = chem.submission_csv(u)
    np.testing.assert_array_equal(chem.read_submission_csv(text, 3), u)
    lines = text.split("\n")
    lines[5] = "1,2,abc"
    with pytest.raises(chem.SubmissionError, match="line 6"):
        chem.read_submission_csv("\n".join(lines), 3)
    missing = "\n".join(text.split("\n")[:-3])
    with pytest.raises(chem.SubmissionError, match=r"\(12, 2\)"):
        chem.read_submission_csv(missing, 3)
    with pytest.raises(chem.SubmissionError, match="line 1"):
        chem.read_submission_csv("a,b\n", 3)
