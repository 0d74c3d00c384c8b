import json

import numpy as np
import pytest
from scipy.interpolate import make_smoothing_spline

from ctrlbench import chem
from ctrlbench.controllers.chem_sysid import (
    N_FEATURES,
    FitError,
    FittedChemModel,
    SplineSmoother,
    coefficients_from_field,
    feature_names,
    field_from_coefficients,
    fit_chem_model,
    library,
)
from ctrlbench.kinetics import N_SPECIES, Y_INDEX


def true_theta(spec):
    return np.stack([coefficients_from_field(f) for f in spec.fields])


def test_library_layout(rng):
    z = rng.uniform(size=N_SPECIES)
    lib = library(z)
    names = feature_names()
    assert lib.shape == (N_FEATURES,) == (len(names),)
    assert names[N_SPECIES] == "Z1*Z1" and lib[N_SPECIES] == z[0] ** 2
    k = names.index("Z9*Z15")
    assert lib[k] == pytest.approx(z[8] * z[14], rel=1e-15)


def test_coefficient_field_round_trip(noise_free_ensemble):
    spec, _ = noise_free_ensemble
    for f in spec.fields[:3]:
        theta = coefficients_from_field(f)
        assert field_from_coefficients(theta).allclose(f, rtol=0, atol=1e-15)
        z = np.linspace(0.1, 1.5, N_SPECIES)
        np.testing.assert_allclose(library(z) @ theta, f(z), rtol=1e-13)


def test_spline_smoother_matches_scipy(rng):
    t = np.arange(40.0)
    y = np.sin(t / 5) + 0.1 * rng.normal(size=40)
    for lam in (0.1, 3.0, 100.0):
        ref = make_smoothing_spline(t, y, lam=lam)(t)
        np.testing.assert_allclose(SplineSmoother(t).smooth(y, lam), ref, rtol=1e-8, atol=1e-10)


def test_spline_gcv_handles_many_series(rng):
    t = np.arange(30.0)
    Y = np.stack([np.cos(t / 4), t / 30], axis=1) + 0.05 * rng.normal(size=(30, 2))
    sm = SplineSmoother(t)
    lam = sm.gcv_penalty(Y)
    assert lam.shape == (2,)
    out = sm.smooth(Y, lam)
    assert np.sqrt(np.mean((out[:, 0] - np.cos(t / 4)) ** 2)) < 0.05
    with pytest.raises(ValueError):
        SplineSmoother([0.0, 1.0, 2.0])


def test_noise_free_fit_recovers_support(noise_free_ensemble, noise_free_fit):
    spec, _ = noise_free_ensemble
    theta = true_theta(spec)
    np.testing.assert_array_equal(noise_free_fit.support, np.any(theta != 0, axis=0))
    np.testing.assert_array_equal(noise_free_fit.B != 0, spec.B != 0)


def test_noise_free_fit_recovers_coefficients(noise_free_ensemble, noise_free_fit):
    spec, _ = noise_free_ensemble
    theta = true_theta(spec)
    nz = theta != 0
    rel = np.abs(noise_free_fit.theta[nz] - theta[nz]) / np.abs(theta[nz])
    assert rel.max() < 1e-2
    bnz = spec.B != 0
    assert np.max(np.abs(noise_free_fit.B[bnz] - spec.B[bnz]) / spec.B[bnz]) < 1e-2


def test_fit_shares_support_and_respects_signs(noise_free_fit):
    fit = noise_free_fit
    kept = fit.theta[:, fit.support]
    assert np.all(np.sign(kept) * fit.signs[fit.support] >= 0)
    assert not fit.theta[:, ~fit.support].any()
    assert fit.diagnostics["sign_violations"] == 0


def test_fitted_model_json_round_trip(noise_free_fit):
    back = FittedChemModel.from_json(json.dumps(noise_free_fit.to_json()))
    np.testing.assert_array_equal(back.theta, noise_free_fit.theta)
    np.testing.assert_array_equal(back.B, noise_free_fit.B)
    np.testing.assert_array_equal(back.support, noise_free_fit.support)
    np.testing.assert_array_equal(back.signs, noise_free_fit.signs)


def test_from_truth_simulates_like_the_spec(noise_free_ensemble):
    spec, _ = noise_free_ensemble
    truth = FittedChemModel.from_truth(spec.fields, spec.B)
    z0 = np.full(N_SPECIES, 1.0)
    u = np.linspace(0, 1, 8)
    np.testing.assert_allclose(truth.model(2).simulate(z0, u).states, spec.model(2).simulate(z0, u).states,
                               rtol=1e-12, atol=1e-12)


def test_too_little_data_raises(noise_free_ensemble):
    _, episodes = noise_free_ensemble
    runs = chem.episodes_as_runs([e for e in episodes if e.run == 1])
    with pytest.raises(FitError, match="usable intervals"):
        fit_chem_model(runs)
    with pytest.raises(FitError):
        fit_chem_model([])


def test_noisy_fit_beats_constant_predictor(default_ensemble):
    spec, episodes = default_ensemble
    fit = fit_chem_model(chem.episodes_as_runs(episodes))
    held = chem.generate_training_data(spec, runs_per_system=2, seed=991)
    err_fit, err_const = [], []
    for e in held:
        y = e.latent[:, Y_INDEX]
        pred = fit.model(e.system - 1).simulate(e.z0, e.u).states[:, Y_INDEX]
        err_fit.append(pred - y)
        err_const.append(np.full_like(y, e.observations[0, Y_INDEX]) - y)
    rmse_fit = np.sqrt(np.mean(np.concatenate(err_fit) ** 2))
    rmse_const = np.sqrt(np.mean(np.concatenate(err_const) ** 2))
    assert rmse_fit < 0.5 * rmse_const
