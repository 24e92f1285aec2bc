from __future__ import annotations

import numpy as np
import pytest
import torch

from distill3d import camera, scenes
from distill3d.guidance import DiffusionSchedule, OracleBackend, ToyConvBackend


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def schedule():
    return DiffusionSchedule.linear()


@pytest.fixture(scope="session")
def cam16():
    return camera.CameraConfig(width=16, height=16)


@pytest.fixture(scope="session")
def oracle16(schedule, cam16):
    return OracleBackend(scenes.oracle_scene("blob_pair"), schedule, camera.front_pose(cam16), samples_per_ray=48)


@pytest.fixture(scope="session")
def toy(schedule):
    return ToyConvBackend(schedule, seed=0)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
