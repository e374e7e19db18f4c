import numpy as np
import pytest
from hypothesis import settings

from egovol.camera import CameraModel
from egovol.kinematics import build_arm_chain, load_grasps

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def cam():
    return CameraModel()


@pytest.fixture(scope="session")
def chain(cam):
    return build_arm_chain(cam.z_max / (2 * cam.f))


@pytest.fixture(scope="session")
def library():
    return load_grasps()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_RUN = {
    "seed": 3,
    "synthesis": {"n_train": 120, "n_test": 40, "n_grasps": 6, "n_backgrounds": 4},
    "model": {"k": 4, "epochs": 5},
}


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A tiny end-to-end run shared by the evaluation and CLI tests."""
    from egovol.config import RunConfig
    from egovol.pipeline import run_pipeline
    work = tmp_path_factory.mktemp("run")
    cfg = RunConfig.from_dict(SMALL_RUN)
    status = run_pipeline(cfg, work)
    return cfg, work, status


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
