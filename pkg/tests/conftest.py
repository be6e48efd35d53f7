import numpy as np
import pytest
import torch

from emtrack.simulator import SceneSpec, generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def moving_scene():
    """Arc-camera scene of cuboids with every object moving."""
    return generate(SceneSpec(n_objects=4, n_frames=4, seed=11, camera="arc", shapes=("cuboid",)), "mov")


@pytest.fixture(scope="session")
def static_scene():
    """Forward-moving camera over a scene where nothing moves."""
    return generate(SceneSpec(n_objects=4, n_frames=3, seed=5, camera="forward", stationary_fraction=1.0,
                              n_distractors=1), "sta")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_criteria: dict[str, tuple[str, list]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        _criteria[name] = ("PASS" if report.passed else "FAIL", report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        status, props = _criteria[name]
        detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"{status}  {name}  {detail}")
