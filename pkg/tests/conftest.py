import copy

import pytest
import yaml

TINY = {
    "mode": "identification",
    "seeds": [0, 1],
    "data": {"num_classes": 10, "train_per_class": 20, "test_per_class": 10, "image_size": 8},
    "split": {"num_known": 6, "num_inner_known": 4},
    "classifier": {"epochs": 2, "hidden": [16]},
    "detector": {"epochs": 5, "hidden": 8},
    "eval": {"baselines": ["softmax"]},
}


@pytest.fixture
def tiny_dict():
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_dict):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_dict))
    return path


# Filled by tests/test_acceptance.py; echoed after the run so each criterion's
# verdict is visible whether or not output capture is on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
