import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structinbet.metrics import format_report, mse, psnr
from structinbet.tensor import ShapeError, Tensor


def test_mse_examples():
    assert mse(np.zeros(4), np.ones(4)) == 1.0
    assert mse(Tensor(np.array([1.0, -1.0])), np.array([0.0, 0.0])) == 1.0
    with pytest.raises(ShapeError):
        mse(np.zeros(3), np.zeros(4))


def test_psnr_examples():
    a = np.zeros((1, 4, 4))
    assert psnr(a, a) == 99.0
    # mse 0.04 with peak 2: 10 log10(4 / 0.04) = 20 dB
    assert psnr(a, np.full_like(a, 0.2)) == pytest.approx(20.0)
    assert psnr(np.full(4, -1.0), np.full(4, 1.0)) == pytest.approx(0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0), st.floats(1.01, 3.0))
def test_psnr_symmetric_and_decreasing(seed, scale, factor):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, 16)
    d = rng.standard_normal(16) * scale
    assert psnr(a, a + d) == pytest.approx(psnr(a + d, a))
    assert psnr(a, a + factor * d) < psnr(a, a + d)


def test_report_format():
    text = format_report([("t000", 20.0, 0.04), ("t001", 30.0, 0.004)])
    lines = text.strip().split("\n")
    assert lines[0] == "triplet_id,psnr_db,mse"
    assert lines[1] == "t000,20.0000,0.040000"
    assert lines[-1].startswith("mean,25.0000,")
    assert math.isclose(float(lines[-1].split(",")[2]), 0.022)
    assert format_report([]) == "triplet_id,psnr_db,mse\n"
