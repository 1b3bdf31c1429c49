import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uncalib import _backend, _kernels_py

cy = pytest.importorskip("uncalib._kernels")

finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(arrays(float, st.integers(0, 300), elements=finite), arrays(float, st.integers(1, 41), elements=finite))
def test_sg_kernel_bit_identical(x, coeffs):
    assert _kernels_py.sg_centered(x, coeffs).tobytes() == cy.sg_centered(x, coeffs).tobytes()


def scan_state(n, W):
    return dict(
        ring_high=np.zeros((n, W), np.uint8), ring_low=np.zeros((n, W), np.uint8), ring_err=np.zeros((n, W)),
        count_high=np.zeros(n, np.int64), count_low=np.zeros(n, np.int64), counter=np.zeros(n, np.int64),
        run_onset=np.zeros(n, np.int64), emitted=np.zeros(n, np.uint8),
    )


def run_scan(mod, codes, errors, minutes, W, thresholds, persistence):
    state = scan_state(codes.shape[1], W)
    th = np.empty(codes.shape)
    tl = np.empty(codes.shape)
    pos = filled = t = 0
    steps = []
    while t < len(minutes):
        t, pos, filled, fired = mod.scan(codes, errors, minutes, *state.values(), thresholds, persistence,
                                         pos, filled, t, th, tl)
        steps.append((t, pos, filled, fired))
    return steps, state, th, tl


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 30), st.integers(0, 60))
def test_scan_kernel_identical(seed, n, W, extra):
    rng = np.random.default_rng(seed)
    T = 400
    p_high = np.repeat(rng.random((T // 40, n)), 40, axis=0)
    u = rng.random((T, n))
    codes = np.where(u < p_high, 1, np.where(u > 0.95, -1, 0)).astype(np.int8)
    errors = rng.normal(size=(T, n))
    minutes = np.arange(T, dtype=np.int64) + 1000
    thresholds = rng.uniform(0.3, 1.0, n)
    a = run_scan(_kernels_py, codes, errors, minutes, W, thresholds, W + extra)
    b = run_scan(cy, codes, errors, minutes, W, thresholds, W + extra)
    assert a[0] == b[0]
    for k in a[1]:
        assert np.array_equal(a[1][k], b[1][k])
    assert a[2].tobytes() == b[2].tobytes() and a[3].tobytes() == b[3].tobytes()


SCRIPT = """
import numpy as np, sys
from uncalib import _backend, detector as det
from uncalib.preprocess import savgol_smooth, PreprocessConfig
rng = np.random.default_rng(5)
x = np.cumsum(rng.normal(size=3000))
s = savgol_smooth(x, PreprocessConfig())
st = det.DetectorState(("a", "b"), det.DetectorConfig(20, 0.7, 60), 0.5)
codes = (rng.random((3000, 2)) < np.repeat(rng.random((30, 2)), 100, axis=0)).astype(int)
ev = st.advance(np.arange(3000), codes, rng.normal(size=(3000, 2)))
sys.stdout.write(_backend.BACKEND + " " + s.tobytes().hex()[:4000] + " " + repr([e.to_record() for e in ev]))
"""


def test_selected_backends_agree_end_to_end():
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, UNCALIB_PURE_PYTHON=flag)
        out[flag] = subprocess.run([sys.executable, "-c", SCRIPT], env=env, check=True,
                                   capture_output=True, text=True).stdout
    assert out["0"].startswith("cython ") and out["1"].startswith("python ")
    assert out["0"].split(" ", 1)[1] == out["1"].split(" ", 1)[1]
    assert "event" in out["0"]


def test_backend_name():
    assert _backend.BACKEND in ("cython", "python")
