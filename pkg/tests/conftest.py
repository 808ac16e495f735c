import numpy as np
import pytest

from stsn.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small model on 16x16 frames; fast enough for finite differences."""
    return ModelConfig(
        feature_channels=4,
        backbone_depth=3,
        head_stride=2,
        image_h=16,
        image_w=16,
        subnet_channels=(4, 4, 6),
        head_channels=4,
        K=1,
    )



# acceptance criteria outcomes, printed after the run: {number: (passed, detail)}
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
