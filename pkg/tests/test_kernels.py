import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moie import kernels
from moie.elen import ElenExpert

seeds = st.integers(0, 2**31)


def expert_arrays(r, nc=7, C=3, H=5):
    e = ElenExpert.create(nc, C, H, rng=r)
    return e.attention_tilde(), e.w1, e.b1, e.w2, e.b2


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_elen_logits_agree(seed):
    r = np.random.default_rng(seed)
    params = expert_arrays(r)
    x = r.random((20, 7))
    np.testing.assert_allclose(kernels._elen_logits_loop(x, *params),
                               kernels.elen_logits_np(x, *params), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_percentile_descent_agree(seed):
    r = np.random.default_rng(seed)
    params = expert_arrays(r)
    x = r.random((15, 7))
    pred = np.argmax(kernels.elen_logits_np(x, *params), axis=1)
    a = kernels._percentile_descent_loop(x, pred, *params, 99)
    b = kernels.percentile_descent_np(x, pred, *params, 99)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_dnf_eval_agree(seed):
    r = np.random.default_rng(seed)
    nc, nq = 6, int(r.integers(0, 5))
    sizes = r.integers(1, 4, nq)
    ptr = np.r_[0, np.cumsum(sizes)].astype(np.int64)
    idx = np.concatenate([r.choice(nc, s, replace=False) for s in sizes]).astype(np.int64) \
        if nq else np.zeros(0, np.int64)
    neg = r.random(idx.size) < 0.5
    bools = r.random((40, nc)) < 0.5
    np.testing.assert_array_equal(kernels._dnf_eval_loop(idx, neg, ptr, bools),
                                  kernels.dnf_eval_np(idx, neg, ptr, bools))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_cascade_route_agree(seed):
    r = np.random.default_rng(seed)
    pi = r.random((30, 4))
    pi[r.random(pi.shape) < 0.1] = 0.5  # exercise the boundary
    np.testing.assert_array_equal(kernels._cascade_route_loop(pi, 0.5),
                                  kernels.cascade_route_np(pi, 0.5))


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_compiled_matches_numpy():
    r = np.random.default_rng(0)
    params = expert_arrays(r)
    x = r.random((25, 7))
    np.testing.assert_allclose(kernels.elen_logits_nb(x, *params),
                               kernels.elen_logits_np(x, *params), rtol=1e-12, atol=1e-12)
    pred = np.argmax(kernels.elen_logits_np(x, *params), axis=1)
    for u, v in zip(kernels.percentile_descent_nb(x, pred, *params, 99),
                    kernels.percentile_descent_np(x, pred, *params, 99)):
        np.testing.assert_array_equal(u, v)
    pi = r.random((30, 3))
    np.testing.assert_array_equal(kernels.cascade_route_nb(pi, 0.5),
                                  kernels.cascade_route_np(pi, 0.5))


def _backend_with(flag):
    env = dict(os.environ, MOIE_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from moie import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_backend_switch():
    assert _backend_with("1") == "numpy"
    assert _backend_with("0") == ("numba" if kernels.HAVE_NUMBA else "numpy")
