import numpy as np
import pytest
import torch

from dcsd.data import SegDataset, default_shifts, synth_sample
from dcsd.segmodel import ModelConfig

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)

_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    marker = report.keywords.get("criterion_id")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[report.nodeid] = report.outcome


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.keywords["criterion_id"] = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in _criteria.items():
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{verdict:5} {nodeid.split('::')[-1]}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def tiny_model_config(seed=0, size=32):
    return ModelConfig(base_channels=2, rfb_channels=2, input_size=(size, size), seed=seed)


def make_synth_dataset(n, size=32, seed=0, center="c1"):
    shift = default_shifts()[center]
    imgs, masks, ids = [], [], []
    for i in range(n):
        img, mask = synth_sample(seed, center, i, shift, (size, size))
        imgs.append(img.transpose(2, 0, 1).astype(np.float32) / 255)
        masks.append((mask[None] > 0).astype(np.float32))
        ids.append(f"{center}/{i:04d}")
    return SegDataset(np.stack(imgs), np.stack(masks), ids)


@pytest.fixture
def synth8():
    return make_synth_dataset(8)
