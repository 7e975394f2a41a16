import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from cashformer.config import PRESETS  # noqa: E402
from cashformer.meshgeom import TemplateMesh, hippocampus_template, icosahedron, precompute_hierarchy  # noqa: E402


@pytest.fixture(scope="session")
def tiny_cfg():
    return PRESETS["tiny"]


@pytest.fixture(scope="session")
def toy_cfg():
    return PRESETS["toy"]


@pytest.fixture(scope="session")
def tiny_hierarchy(tiny_cfg):
    return precompute_hierarchy(icosahedron(), tiny_cfg.level_specs)


@pytest.fixture(scope="session")
def toy_template(toy_cfg):
    return hippocampus_template(toy_cfg.template_subdivisions)


@pytest.fixture(scope="session")
def toy_hierarchy(toy_cfg, toy_template):
    return precompute_hierarchy(toy_template, toy_cfg.level_specs)


@pytest.fixture
def tetrahedron():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TemplateMesh(v, f)


@pytest.fixture
def octahedron():
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return TemplateMesh(v, f)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
