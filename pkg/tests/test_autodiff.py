import numpy as np
import pytest

from icp_reasoner import autodiff as ad
from icp_reasoner.autodiff import Tensor


def fd_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            fp = f(*arrays)
            a[idx] = orig - h
            fm = f(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def check(op, *shapes, seed=0, weights=True, tol=1e-7):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    probe = None

    def scalar(*arrs):
        nonlocal probe
        y = op(*[Tensor(a) for a in arrs]).data
        if probe is None:
            probe = rng.normal(size=y.shape) if weights else np.ones(y.shape)
        return float((y * probe).sum())

    scalar(*arrays)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    y = op(*ts)
    (ad.sum_all(ad.mul(y, Tensor(probe)))).backward()
    numeric = fd_grad(scalar, arrays)
    for t, g in zip(ts, numeric):
        assert np.allclose(t.grad, g, atol=tol, rtol=tol), (t.grad, g)


@pytest.mark.parametrize("name,op,shapes", [
    ("add_broadcast", ad.add, [(3, 4), (4,)]),
    ("sub", ad.sub, [(3, 4), (3, 4)]),
    ("mul_broadcast", ad.mul, [(2, 3, 4), (3, 1)]),
    ("matmul", ad.matmul, [(5, 3), (3, 2)]),
    ("matmul_batched", ad.matmul, [(2, 5, 3), (3, 4)]),
    ("linear", ad.linear, [(5, 3), (3, 2), (2,)]),
    ("transpose", lambda x: ad.transpose(x, (1, 0, 2)), [(2, 3, 4)]),
    ("reshape", lambda x: ad.reshape(x, (6, 2)), [(3, 4)]),
    ("getitem", lambda x: ad.getitem(x, (slice(1, 3), 0)), [(4, 2)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=-1), [(3, 2), (3, 5)]),
    ("mean_axis", lambda x: ad.mean(x, axis=1), [(3, 4, 2)]),
    ("mean_all", lambda x: ad.mean(x), [(3, 4)]),
    ("layer_norm", ad.layer_norm, [(4, 6), (6,), (6,)]),
    ("softplus", ad.softplus, [(5,)]),
    ("log_softmax", ad.log_softmax, [(3, 4)]),
])
def test_op_gradients(name, op, shapes):
    check(op, *shapes)


def test_relu_and_max_away_from_ties():
    # continuous draws make exact ties and zeros measure-zero events
    check(ad.relu, (4, 5), seed=3)
    check(lambda x: ad.max_axis(x, 1), (3, 5, 2), seed=4)
    check(lambda x: ad.max_axis(x, 0), (6, 3), seed=5)


def test_max_tie_goes_to_first_index():
    x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    ad.sum_all(ad.max_axis(x, 1)).backward()
    assert x.grad.tolist() == [[0.0, 1.0, 0.0]]


def test_softplus_stable():
    y = ad.softplus(Tensor(np.array([-800.0, 0.0, 800.0])))
    assert np.all(np.isfinite(y.data))
    assert y.data[2] == 800.0 and y.data[1] == pytest.approx(np.log(2))


def test_sigmoid_extremes():
    assert ad.sigmoid_np(np.array([-1000.0, 1000.0])).tolist() == [0.0, 1.0]


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.sum_all(ad.add(y, y)).backward()
    assert x.grad.tolist() == [8.0]


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(w, w)
    assert not y.requires_grad
    assert ad.mul(w, w).requires_grad


def test_detach_stops_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, ad.detach(x)), x)
    ad.sum_all(y).backward()
    assert x.grad.tolist() == [4.0]


def test_pattern_log_records_branches():
    with ad.record_patterns() as log:
        ad.relu(Tensor(np.array([-1.0, 2.0])))
        ad.max_axis(Tensor(np.eye(2)), 1)
    assert len(log) == 2
    with ad.record_patterns() as log2:
        ad.relu(Tensor(np.array([1.0, 2.0])))
    assert log2[0] != log[0]
