import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmkgr import kernels
from mmkgr._jit import HAVE_NUMBA

nb, npy = kernels.numba_impl, kernels.numpy_impl


@st.composite
def segments(draw, width=None):
    sizes = draw(st.lists(st.integers(1, 6), min_size=1, max_size=6))
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    n = int(offsets[-1])
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 3.0, (n, width) if width else n)
    return x, offsets, rng


@settings(max_examples=60, deadline=None)
@given(segments())
def test_segment_log_softmax_equivalent(data):
    x, offsets, _ = data
    a, b = nb.segment_log_softmax(x, offsets), npy.segment_log_softmax(x, offsets)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    sums = np.add.reduceat(np.exp(a), offsets[:-1])
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(segments())
def test_segment_log_softmax_grad_equivalent(data):
    x, offsets, rng = data
    logp = npy.segment_log_softmax(x, offsets)
    g = rng.normal(size=x.shape)
    np.testing.assert_allclose(nb.segment_log_softmax_grad(g, logp, offsets),
                               npy.segment_log_softmax_grad(g, logp, offsets), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(segments(width=3))
def test_segment_sum_rows_equivalent(data):
    x, offsets, _ = data
    np.testing.assert_allclose(nb.segment_sum_rows(x, offsets), npy.segment_sum_rows(x, offsets),
                               atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(segments())
def test_argmax_and_sample_identical(data):
    x, offsets, rng = data
    assert nb.segment_argmax(x, offsets).tolist() == npy.segment_argmax(x, offsets).tolist()
    logp = npy.segment_log_softmax(x, offsets)
    u = rng.random(len(offsets) - 1)
    assert nb.segment_sample(logp, offsets, u).tolist() == \
        npy.segment_sample(logp, offsets, u).tolist()


def test_segment_argmax_takes_first_of_ties():
    x = np.array([1.0, 3.0, 3.0, 0.0])
    off = np.array([0, 4])
    assert nb.segment_argmax(x, off)[0] == npy.segment_argmax(x, off)[0] == 1


def test_sample_matches_distribution():
    logp = np.log(np.array([0.2, 0.5, 0.3]))
    off = np.array([0, 3])
    u = np.random.default_rng(0).random(20000)
    for impl in (nb, npy):
        picks = np.array([impl.segment_sample(logp, off, u[i:i + 1])[0] for i in range(len(u))])
        freq = np.bincount(picks, minlength=3) / len(u)
        np.testing.assert_allclose(freq, [0.2, 0.5, 0.3], atol=0.015)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scatter_add_and_gather_actions_equivalent(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 5, 12)
    src = rng.normal(size=(12, 3))
    a = nb.scatter_add_rows(np.zeros((5, 3)), idx, src)
    b = npy.scatter_add_rows(np.zeros((5, 3)), idx, src)
    np.testing.assert_allclose(a, b, atol=1e-12)
    E = 6
    deg = rng.integers(0, 4, E)
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    adj_rel = rng.integers(0, 3, indptr[-1]).astype(np.int64)
    adj_ent = rng.integers(0, E, indptr[-1]).astype(np.int64)
    cur = rng.integers(0, E, 5).astype(np.int64)
    qh = np.where(rng.random(5) < 0.5, cur, rng.integers(0, E, 5)).astype(np.int64)
    qr = rng.integers(0, 3, 5).astype(np.int64)
    qt = rng.integers(0, E, 5).astype(np.int64)
    mask = rng.random(5) < 0.7
    for x, y in zip(nb.gather_actions(indptr, adj_rel, adj_ent, cur, qh, qr, qt, mask, 9),
                    npy.gather_actions(indptr, adj_rel, adj_ent, cur, qh, qr, qt, mask, 9)):
        assert x.tolist() == y.tolist()


def _backend_in_subprocess(value):
    env = dict(os.environ, MMKGR_NO_NUMBA=value)
    out = subprocess.run([sys.executable, "-c", "from mmkgr import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_env_var_selects_numpy_fallback():
    assert _backend_in_subprocess("1") == "numpy"
    if HAVE_NUMBA:
        assert _backend_in_subprocess("") == "numba"


def test_active_backend_matches_environment():
    disabled = os.environ.get("MMKGR_NO_NUMBA", "").lower() in ("1", "true", "yes", "on")
    expected = "numba" if HAVE_NUMBA and not disabled else "numpy"
    assert kernels.BACKEND == expected
