import re

import pytest

from hdwsr.config import RunConfig
from hdwsr.imageio import write_png
from hdwsr.synthetic import textured_patch


def tiny_config(tmp_path, **overrides) -> RunConfig:
    """C=4, two levels, T=4, 8x8 HR patches at scale 2."""
    base = {
        "model.base_channels": 4,
        "model.levels": 2,
        "model.dfa_repeats": [1, 1],
        "model.decoder_repeats": [1, 1],
        "model.encoder_swin": 1,
        "model.pfa_repeats": 1,
        "model.time_dim": 8,
        "model.T": 4,
        "data.patch": 8,
        "data.scale": 2,
        "optim.iterations": 5,
        "optim.batch_size": 2,
        "optim.checkpoint_every": 3,
        "optim.log_every": 1,
        "out_dir": str(tmp_path / "run"),
    }
    base.update(overrides)
    return RunConfig().with_overrides(base)


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "images"
    d.mkdir()
    for i in range(2):
        write_png(d / f"img{i}.png", textured_patch(32, i))
    return d


_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", report.nodeid)
    if not match:
        return
    number, label = int(match.group(1)), match.group(2).replace("_", " ")
    if report.failed:
        _criteria[number] = (label, "FAIL")
    elif report.skipped:
        _criteria.setdefault(number, (label, "SKIP"))
    elif report.when == "call":
        _criteria.setdefault(number, (label, "PASS"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        label, outcome = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}  {outcome}  {label}")
