import pytest
import torch

from latent_replay.arch import ClassifierSpec, ExtractorSpec, build_classifier, get_preset
from latent_replay.datasets import synthetic

torch.set_num_threads(1)

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, text = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        prev = _criteria.get(n, (text, "PASS"))[1]
        status = "PASS" if rep.outcome == "passed" and prev == "PASS" else (
            "SKIP" if rep.outcome == "skipped" else "FAIL")
        _criteria[n] = (text, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        text, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status:<4} {text}")


@pytest.fixture
def tiny_spec():
    return get_preset("TINY")


@pytest.fixture
def tiny_classifier(tiny_spec):
    return build_classifier(tiny_spec, seed=0)


@pytest.fixture(scope="session")
def synth():
    return synthetic()


def point_spec(hidden=(3, 3), num_classes=2, extractor_width=2) -> ClassifierSpec:
    """Network whose 'image' is a single pixel and whose extractor is a 1x1 conv (an affine map)."""
    ex = ExtractorSpec(in_channels=1, image_size=1, channels=(extractor_width,), kernel_size=1, stride=1, padding=0)
    return ClassifierSpec(ex, hidden, num_classes)
