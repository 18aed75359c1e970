import json

import numpy as np
import pytest
import torch

from mvp_integrator.data import manifest_from_dict
from mvp_integrator.synth import SynthConfig, generate_synthetic

_acceptance = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _acceptance.append((report.nodeid.split("::")[-1], outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _acceptance:
        terminalreporter.write_line(f"{outcome:4s}  {name}  {detail}")


@pytest.fixture
def toy_dict():
    """A={red, ripe}, O={apple, car}; train <{red,ripe},apple>, test <{red},car>."""
    return {
        "attributes": ["red", "ripe"],
        "objects": ["apple", "car"],
        "samples": [
            {"id": "s0", "split": "train", "object": "apple", "attrs": ["red", "ripe"]},
            {"id": "s1", "split": "test", "object": "car", "attrs": ["red"]},
        ],
    }


@pytest.fixture
def toy_manifest(toy_dict):
    return manifest_from_dict(toy_dict)


@pytest.fixture(scope="session")
def tiny_synth():
    cfg = SynthConfig(n_attrs=5, n_objects=4, dim=16, n_train=60, n_test=30, n_compositions=14, max_attrs=3)
    return generate_synthetic(cfg, seed=3)


@pytest.fixture
def write_json(tmp_path):
    def write(obj, name="manifest.json"):
        p = tmp_path / name
        p.write_text(json.dumps(obj))
        return p

    return write


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
