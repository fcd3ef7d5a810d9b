import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spnf.field import EncodingConfig, FieldArch, init_field  # noqa: E402
from spnf.scene_io import make_synthetic_scene  # noqa: E402

SMALL_ARCH = FieldArch(width=8, depth=4, skip=2, color_width=6)
SMALL_ENC = EncodingConfig(levels_pos=3, levels_dir=2)


def small_params(seed, dtype=np.float64, jitter=0.3, arch=SMALL_ARCH, encoding=SMALL_ENC):
    """A tiny float64 field with perturbed biases so no unit sits at exactly zero."""
    p = init_field(seed, arch, encoding, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for k, v in p.tensors.items():
        p.tensors[k] = (v + rng.normal(0, jitter, v.shape)).astype(dtype)
    return p


def unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_scene():
    return make_synthetic_scene("two-planes", n_views=9, resolution=24, seed=3)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
