import zlib

import numpy as np
import pytest

from fedled import autodiff as ad
from fedled.errors import ContractError, DimensionError, DomainError

from oracles import central_diff, max_rel_err


def grad_of(build, *arrays):
    """Analytic gradients of scalar ``build(*vars)`` for each input array."""
    tape = ad.Tape()
    vs = [tape.param(a) for a in arrays]
    root = build(*vs)
    g = tape.backward(root)
    return [g[v] for v in vs]


def value_of(build):
    def fn(arrays):
        tape = ad.Tape()
        return float(build(*[tape.param(a) for a in arrays]).value)
    return fn


def fd_check(build, *arrays, tol=1e-4):
    analytic = grad_of(build, *arrays)
    numeric = central_diff(value_of(build), arrays)
    assert max_rel_err(analytic, numeric) < tol


def test_tensor_rejects_bad_input():
    with pytest.raises(DomainError):
        ad.as_tensor([1.0, np.nan])
    with pytest.raises(DomainError):
        ad.as_tensor([[np.inf]])
    with pytest.raises(DimensionError):
        ad.as_tensor(np.zeros((2, 2, 2)))
    t = ad.as_tensor([[1, 2]])
    assert t.dtype == np.float64 and not t.flags.writeable


def test_matmul_examples():
    tape = ad.Tape()
    eye = tape.constant(np.eye(2))
    m = tape.constant([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(eye, m).value, [[1, 2], [3, 4]])
    assert np.array_equal(ad.matmul(tape.constant([[1.0, 0.0]]), tape.constant([[5.0], [7.0]])).value, [[5.0]])
    with pytest.raises(DimensionError):
        ad.matmul(m, tape.constant(np.ones((3, 1))))


def test_matmul_grad_of_sum_is_ones_times_bT():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    ga, gb = grad_of(lambda x, y: ad.sum_all(ad.matmul(x, y)), a, b)
    assert np.allclose(ga, np.ones((3, 2)) @ b.T, rtol=0, atol=1e-14)
    fd_check(lambda x, y: ad.sum_all(ad.matmul(x, y)), a, b)


def test_elementwise_examples():
    tape = ad.Tape()
    assert np.array_equal(ad.relu(tape.constant([[-1.0, 0.0, 2.0]])).value, [[0, 0, 2]])
    assert ad.sigmoid(tape.constant(0.0)).value == 0.5
    x = tape.param(2.0)
    g = tape.backward(ad.log(x))
    assert g[x] == 0.5


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grad_of(lambda x: ad.sum_all(ad.relu(x)), np.array([[0.0, 1.0, -1.0]]))
    assert np.array_equal(g, [[0.0, 1.0, 0.0]])


def test_log_domain_error():
    tape = ad.Tape()
    with pytest.raises(DomainError):
        ad.log(tape.constant([[1.0, 0.0]]))
    with pytest.raises(DomainError):
        ad.log(tape.constant(-3.0))


def test_sigmoid_extremes_are_finite():
    tape = ad.Tape()
    s = ad.sigmoid(tape.constant([[-800.0, 800.0]])).value
    assert s[0, 0] == 0.0 and s[0, 1] == 1.0
    ls = ad.log_sigmoid(tape.constant([[-800.0, 800.0]])).value
    assert ls[0, 0] == -800.0 and ls[0, 1] == 0.0


def test_softmax_examples():
    tape = ad.Tape()
    u = ad.softmax_rows(tape.constant([[0.0, 0.0, 0.0]])).value
    assert np.allclose(u, 1 / 3, atol=1e-15)
    s = ad.softmax_rows(tape.constant([[1000.0, 0.0]])).value
    assert abs(s[0, 0] - 1) < 1e-12 and s[0, 1] < 1e-12
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (5, 4))
    assert np.allclose(ad.softmax_rows(tape.constant(x)).value.sum(axis=1), 1, atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, (2, 3))
    w = rng.uniform(-2, 2, (2, 3))
    fd_check(lambda a: ad.sum_all(ad.mul(ad.softmax_rows(a), w)), x)
    fd_check(lambda a: ad.sum_all(ad.mul(ad.log_softmax_rows(a), w)), x)


def test_outer_flatten_examples():
    tape = ad.Tape()
    f = tape.constant([[1.0, 2.0]])
    assert np.array_equal(ad.outer_flatten(f, tape.constant([[1.0, 0.0]])).value, [[1, 0, 2, 0]])
    o = ad.outer_flatten(tape.constant([[1.0, 1.0]]), tape.constant([[0.5, 0.5]])).value
    assert np.array_equal(o, [[0.5, 0.5, 0.5, 0.5]])
    with pytest.raises(DimensionError):
        ad.outer_flatten(f, tape.constant(np.ones((2, 2))))


def test_outer_flatten_layout_and_gradient():
    rng = np.random.default_rng(2)
    f, g = rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 2))
    tape = ad.Tape()
    out = ad.outer_flatten(tape.constant(f), tape.constant(g)).value
    for i in range(2):
        for j in range(3):
            for c in range(2):
                assert out[i, j * 2 + c] == f[i, j] * g[i, c]
    w = rng.uniform(-2, 2, (2, 6))
    fd_check(lambda a, b: ad.sum_all(ad.mul(ad.outer_flatten(a, b), w)), f, g)


def test_grad_reverse_examples():
    tape = ad.Tape()
    x = tape.param([[3.0, 4.0]])
    y = ad.grad_reverse(x, 1.0)
    assert np.array_equal(y.value, [[3, 4]])
    assert np.array_equal(tape.backward(y, seed=np.array([[1.0, 1.0]]))[x], [[-1, -1]])

    tape = ad.Tape()
    x = tape.param([[3.0, 4.0]])
    y = ad.grad_reverse(x, 0.5)
    assert np.array_equal(tape.backward(y, seed=np.array([[2.0, -2.0]]))[x], [[-1, 1]])


def test_grad_reverse_twice_is_identity_and_negative_lambda_rejected():
    rng = np.random.default_rng(4)
    up = rng.standard_normal((3, 2))
    tape = ad.Tape()
    x = tape.param(np.ones((3, 2)))
    y = ad.grad_reverse(ad.grad_reverse(x, 1.0), 1.0)
    assert np.array_equal(tape.backward(y, seed=up)[x], up)
    with pytest.raises(ContractError):
        ad.grad_reverse(x, -0.1)


def test_backward_examples():
    x = np.array([[1.0, -2.0, 3.0]])
    (gw,) = grad_of(lambda w: ad.sum_all(ad.mul(w, x)), np.array([[0.5, 0.5, 0.5]]))
    assert np.array_equal(gw, x)

    tape = ad.Tape()
    w = tape.param([[1.0, 2.0]])
    c = tape.constant(5.0)
    g = tape.backward(c)
    assert np.array_equal(g[w], [[0.0, 0.0]])
    assert not g.reached(w)


def test_backward_requires_scalar_root():
    tape = ad.Tape()
    x = tape.param(np.ones((2, 2)))
    with pytest.raises(ContractError):
        tape.backward(ad.relu(x))


def test_tape_is_topological():
    tape = ad.Tape()
    a = tape.param(np.ones((2, 2)))
    b = ad.exp(ad.matmul(a, a) + 1.0)
    ad.sum_all(b)
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)


def test_broadcasting_rules():
    tape = ad.Tape()
    m = tape.param(np.ones((3, 2)))
    b = tape.param(np.array([1.0, 2.0]))
    out = m + b
    assert np.array_equal(out.value, [[2, 3]] * 3)
    g = tape.backward(ad.sum_all(out * 2.0))
    assert np.array_equal(g[b], [6.0, 6.0])
    with pytest.raises(DimensionError):
        m + tape.constant(np.ones((2, 3)))


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, (3, 2))
    build = lambda x, y: ad.sum_all(ad.exp(ad.mul(ad.matmul(x, y), 0.3)))
    g1 = grad_of(build, a, b)
    g2 = grad_of(build, a, b)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(g1, g2))


OPS = {
    "add": lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.add(a, b))),
    "sub": lambda a, b: ad.sum_all(ad.mul(ad.sub(a, b), a)),
    "mul": lambda a, b: ad.sum_all(ad.mul(a, b)),
    # keep inputs away from the kink; the random draw keeps |x| > 1e-3 with high probability
    "relu": lambda a, b: ad.sum_all(ad.mul(ad.relu(a), b)),
    "exp": lambda a, b: ad.sum_all(ad.mul(ad.exp(a), b)),
    "log": lambda a, b: ad.sum_all(ad.mul(ad.log(ad.exp(a) + 0.5), b)),
    "sigmoid": lambda a, b: ad.sum_all(ad.mul(ad.sigmoid(a), b)),
    "log_sigmoid": lambda a, b: ad.sum_all(ad.mul(ad.log_sigmoid(a), b)),
    "softmax": lambda a, b: ad.sum_all(ad.mul(ad.softmax_rows(a), b)),
    "outer": lambda a, b: ad.sum_all(ad.outer_flatten(a, b)),
    "sqdist": lambda a, b: ad.sum_all(ad.exp(ad.sqdist(a, b) * -0.2)),
    "concat_slice": lambda a, b: ad.sum_all(ad.mul(ad.row_slice(ad.concat_rows(a, b), 1, 4), ad.row_slice(ad.concat_rows(b, a), 0, 3))),
    "transpose": lambda a, b: ad.sum_all(ad.matmul(ad.transpose(a), b)),
    "pick": lambda a, b: ad.mean_all(ad.mul(ad.pick(a, [0, 2, 1]), ad.pick(b, [1, 1, 0]))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_difference_each_op_many_trials(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    build = OPS[name]
    worst = 0.0
    for _ in range(100):
        a = rng.uniform(-2, 2, (3, 3))
        b = rng.uniform(-2, 2, (3, 3))
        if name == "relu" and np.min(np.abs(a)) < 1e-3:
            continue
        analytic = grad_of(build, a, b)
        numeric = central_diff(value_of(build), [a, b])
        worst = max(worst, max_rel_err(analytic, numeric))
    assert worst < 1e-4
