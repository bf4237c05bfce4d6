import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from icp_reasoner import _pykernels, kernels

try:
    from icp_reasoner import _ckernels
except ImportError:
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")

finite = st.floats(-100, 100, allow_nan=False, width=64)


def brute_nn(src, tgt, smask, tmask):
    idx = np.full(len(src), -1)
    best = np.zeros(len(src))
    for i in range(len(src)):
        if not smask[i]:
            continue
        bd = np.inf
        for j in range(len(tgt)):
            if not tmask[j]:
                continue
            d = src[i] - tgt[j]
            d2 = (d[0] * d[0] + d[1] * d[1]) + d[2] * d[2]
            if d2 < bd:
                bd, idx[i] = d2, j
        best[i] = bd
    return idx, best


@st.composite
def nn_case(draw):
    n = draw(st.integers(1, 20))
    m = draw(st.integers(1, 20))
    # a small grid of values makes ties common
    vals = st.sampled_from([-1.0, 0.0, 0.5, 1.0, 2.0]) | finite
    src = draw(hnp.arrays(np.float64, (n, 3), elements=vals))
    tgt = draw(hnp.arrays(np.float64, (m, 3), elements=vals))
    smask = draw(hnp.arrays(bool, n))
    tmask = draw(hnp.arrays(bool, m))
    tmask[draw(st.integers(0, m - 1))] = True
    return src, tgt, smask, tmask


@given(nn_case())
def test_python_nn_matches_brute_force(case):
    idx, best = _pykernels.nearest_neighbors(*case)
    bi, bb = brute_nn(*case)
    assert np.array_equal(idx, bi)
    assert np.array_equal(best, bb)


@needs_ext
@given(nn_case())
def test_backends_agree_on_nn(case):
    a = _pykernels.nearest_neighbors(*case)
    b = _ckernels.nearest_neighbors(*case)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


@st.composite
def reduce_case(draw):
    shape = (draw(st.integers(1, 5)), draw(st.integers(1, 6)), draw(st.integers(1, 5)))
    vals = st.sampled_from([0.0, 1.0, -1.0]) | finite
    return draw(hnp.arrays(np.float64, shape, elements=vals))


@given(reduce_case())
def test_max_argmax_first_index(x):
    vals, idx = _pykernels.max_argmax(x)
    assert np.array_equal(vals, x.max(axis=1))
    for a in range(x.shape[0]):
        for b in range(x.shape[2]):
            col = x[a, :, b]
            assert idx[a, b] == int(np.nonzero(col == col.max())[0][0])


@needs_ext
@given(reduce_case())
def test_backends_agree_on_reduction(x):
    va, ia = _pykernels.max_argmax(x)
    vb, ib = _ckernels.max_argmax(x)
    assert np.array_equal(va, vb) and np.array_equal(ia, ib)
    g = np.arange(va.size, dtype=float).reshape(va.shape)
    assert np.array_equal(_pykernels.scatter_argmax(g, ia, x.shape[1]),
                          _ckernels.scatter_argmax(g, ib, x.shape[1]))


def test_scatter_is_adjoint_of_gather(rng):
    x = rng.normal(size=(3, 4, 5))
    _, idx = _pykernels.max_argmax(x)
    g = rng.normal(size=(3, 5))
    out = _pykernels.scatter_argmax(g, idx, 4)
    assert np.allclose(out.sum(axis=1), g)
    assert np.count_nonzero(out) == np.count_nonzero(g)


def test_backend_selection_reports_a_known_name():
    assert kernels.BACKEND in ("cython", "python")


def test_env_var_forces_fallback():
    import subprocess
    import sys
    code = "from icp_reasoner import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"ICP_REASONER_PURE_PYTHON": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "python"
