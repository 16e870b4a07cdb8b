import pytest
import torch

from rasnet import data

_acceptance = {}


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy20")
    data.synthesize_toy_dataset(root, n_frames=20, image_size=(64, 64), seed=0)
    return root


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """8 frames at 32x32: the cheapest dataset the network accepts."""
    root = tmp_path_factory.mktemp("tiny8")
    data.synthesize_toy_dataset(root, n_frames=8, image_size=(32, 32), seed=1, frames_per_sequence=4,
                                test_fraction=0.25)
    return root


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


_titles = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _titles[item.nodeid] = m.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _titles or _acceptance.get(report.nodeid) in ("FAIL", "SKIP"):
        return
    if report.failed:
        _acceptance[report.nodeid] = "FAIL"
    elif report.skipped:
        _acceptance[report.nodeid] = "SKIP"
    elif report.when == "call":
        _acceptance[report.nodeid] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (number, title) in sorted(_titles.items(), key=lambda kv: kv[1][0]):
        status = _acceptance.get(nodeid)
        if status:
            terminalreporter.write_line(f"AC{number:<2} {status:4}  {title}")
