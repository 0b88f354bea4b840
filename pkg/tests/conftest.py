import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cooploc.config import from_dict, load_scenario, to_dict
from cooploc.geom3 import quat_from_rotation
from cooploc.simcore import run_scenario, timed_run

settings.register_profile("cooploc", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cooploc")


@functools.lru_cache(maxsize=None)
def _cached_run(name: str, **changes):
    cfg = load_scenario(name)
    if changes:
        cfg = cfg.replace(**changes)
    recs, runtime = timed_run(cfg)
    return cfg, recs, runtime


def cached_run(name: str, **changes):
    """Run a shipped scenario once per session for a given set of overrides."""
    return _cached_run(name, **changes)


def exact_initial(cfg, **changes):
    """Copy of ``cfg`` whose vehicles start with their true pose as estimate."""
    d = to_dict(cfg)
    d.update(changes)
    for a, spec in zip(d["agents"], cfg.agents):
        if a["kind"] == "vehicle":
            a["initial_estimate"] = {
                "quaternion": quat_from_rotation(spec.trajectory.rotation(0.0)).as_array().tolist(),
                "position": spec.trajectory.position(0.0).tolist(), "position_frame": "inertial"}
    return from_dict(d)


def series(recs, i, what="pbar"):
    """Per-record error series of vehicle ``i``."""
    if what == "pbar":
        return np.array([np.linalg.norm(r.vehicles[i].diag.pbar_tilde) for r in recs])
    if what == "angle":
        return np.array([r.vehicles[i].diag.angle for r in recs])
    if what == "x":
        return np.array([np.linalg.norm(r.vehicles[i].diag.x_tilde) for r in recs])
    raise ValueError(what)


def times(recs):
    return np.array([r.t for r in recs])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def busy_noise_free():
    return cached_run("busy_intersection", noise_enabled=False)


@pytest.fixture(scope="session")
def busy_noisy():
    return cached_run("busy_intersection")


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record ``(passed, detail)`` for an acceptance criterion."""
    def record(n: int, passed: bool, detail: str = ""):
        prev = _CRITERIA.get(n)
        if prev is not None:
            passed = passed and prev[0]
            detail = "; ".join(x for x in (prev[1], detail) if x)
        _CRITERIA[n] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
