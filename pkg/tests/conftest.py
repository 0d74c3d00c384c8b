import numpy as np
import pytest

from ctrlbench import chem
from ctrlbench.controllers.chem_sysid import fit_chem_model


@pytest.fixture(scope="session")
def noise_free_ensemble():
    """Ensemble with zero observation noise and its 12 x 20 training runs."""
    spec = chem.with_noise_sigma(chem.sample_ensemble(1), 0.0)
    episodes = chem.generate_training_data(spec)
    return spec, episodes


@pytest.fixture(scope="session")
def noise_free_fit(noise_free_ensemble):
    spec, episodes = noise_free_ensemble
    return fit_chem_model(chem.episodes_as_runs(episodes))


@pytest.fixture(scope="session")
def default_ensemble():
    spec = chem.sample_ensemble(2)
    return spec, chem.generate_training_data(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by a test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "notes": []})
    entry["passed"] &= call.excinfo is None
    entry["seconds"] += call.duration
    entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["passed"] else "FAIL"
        notes = f" [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {e['title']} ({e['seconds']:.1f} s){notes}")
