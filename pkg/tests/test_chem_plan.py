import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctrlbench import chem
from ctrlbench.controllers.chem_plan import (
    best_candidate,
    penalty,
    plan_impulses,
    predicted_outputs,
    start_points,
    tracking_from_outputs,
)


@pytest.fixture(scope="module")
def setup():
    spec = chem.sample_ensemble(3)
    cases = [tc for tc in chem.generate_test_cases(spec, 3) if tc.system == 1]
    x0 = np.array([tc.x0 for tc in cases])
    ystar = np.array([tc.ystar for tc in cases])
    return spec, spec.model(0), x0, ystar


@pytest.fixture(scope="module")
def full_plan(setup):
    _, model, x0, ystar = setup
    return plan_impulses(model, x0, ystar, seed=1)


@pytest.fixture(scope="module")
def weak_plan(setup):
    _, model, x0, ystar = setup
    return plan_impulses(model, x0, ystar, controls=chem.WEAK_CONTROLS, seed=1)


def test_plan_never_predicts_worse_than_zero(setup, full_plan):
    _, model, x0, ystar = setup
    zero = tracking_from_outputs(predicted_outputs(model, x0, np.zeros((len(x0), 8))), ystar)
    assert np.all(full_plan.loss <= zero + 1e-12)
    assert np.all(np.abs(full_plan.u) <= chem.U_BOUND)
    np.testing.assert_allclose(full_plan.loss, full_plan.tracking + penalty(full_plan.u))


def test_predicted_tracking_matches_scoring(setup, full_plan):
    _, model, x0, ystar = setup
    scored = chem.tracking_terms(model, x0, full_plan.u, ystar)
    np.testing.assert_allclose(full_plan.tracking, scored, rtol=1e-3, atol=1e-5)


def test_weak_only_planner_leaves_strong_controls_at_zero(weak_plan):
    assert not weak_plan.u[:, :4].any()
    for _, Uk in weak_plan.candidates:
        assert not Uk[:, :4].any()


def test_start_points():
    s = start_points(rng=np.random.default_rng(0))
    assert s.shape == (8, 8)
    assert not s[0].any()
    np.testing.assert_array_equal(s[1], [0, 0, 0, 0, 10, 10, 10, 10])
    np.testing.assert_array_equal(s[3], [0, 0, 0, 0, -10, -10, 10, 10])
    assert np.all((s[5:] >= 0) & (s[5:] <= 2))
    weak = start_points(chem.WEAK_CONTROLS, rng=np.random.default_rng(0))
    assert not weak[:, :4].any()
    narrow = start_points(bounds=(-1.0, 1.0), rng=np.random.default_rng(0))
    assert np.abs(narrow).max() <= 1.0


def test_tracking_from_outputs():
    y = np.full((2, 41), 0.5)
    y[1, 3] = np.nan
    got = tracking_from_outputs(y, [0.25, 0.5])
    assert got[0] == pytest.approx(0.25, rel=1e-14)
    assert got[1] == np.inf


def test_penalty_matches_scoring():
    u = np.random.default_rng(0).uniform(-10, 10, (5, 8))
    np.testing.assert_allclose(penalty(u), chem.penalty_term(u), rtol=1e-15)
    assert penalty(np.full(8, 10.0)) == pytest.approx(0.5, abs=1e-15)


def test_best_candidate_prefers_smaller_norm_on_ties():
    cands = np.array([[2.0] * 8, [1.0] * 8, [3.0] * 8])
    track = np.array([1.0, 1.0, 0.0]) - penalty(cands) + penalty(cands[1])
    # the last one has the lowest loss, the first two tie
    assert best_candidate(track, cands) == 2
    track[2] = 10.0
    assert best_candidate(track, cands) == 1
    assert best_candidate(np.full(3, np.inf), cands) == 1


@settings(max_examples=60, deadline=None)
@given(
    arrays(float, 6, elements=st.floats(0.0, 5.0)),
    arrays(float, (6, 8), elements=st.floats(-10.0, 10.0)),
    st.floats(0.0, 2.0),
    st.floats(0.0, 2.0),
)
def test_larger_cost_weight_never_picks_larger_norm(track, cands, c1, c2):
    lo, hi = sorted((c1, c2))
    n_lo = np.linalg.norm(cands[best_candidate(track, cands, lo)])
    n_hi = np.linalg.norm(cands[best_candidate(track, cands, hi)])
    assert n_hi <= n_lo + 1e-9
