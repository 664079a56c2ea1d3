import math

import numpy as np
import pytest

from fedled import autodiff as ad
from fedled.errors import ContractError, DataError, DimensionError
from fedled.losses import (
    KernelConfig,
    LossBreakdown,
    LossWeights,
    cdan_loss,
    cross_entropy,
    entropy_weight,
    fedled_objective,
    jmmd_loss,
    median_bandwidth,
    total_loss,
)
from fedled.models import Layer, MlpParams, NetConfig, init_mlp, init_params, predict

from oracles import loop_cdan, loop_cross_entropy, loop_gauss_mmd


def consts(*xs):
    tape = ad.Tape()
    return [tape.constant(x) for x in xs]


def test_cross_entropy_examples():
    tape = ad.Tape()
    assert abs(cross_entropy(tape.constant(np.zeros((3, 2))), [0, 1, 1]).value - math.log(2)) < 1e-15
    assert cross_entropy(tape.constant([[10.0, -10.0]]), [0]).value < 1e-4
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 3)) * 3
    y = np.array([0, 2, 1, 2])
    assert abs(cross_entropy(tape.constant(logits), y).value - loop_cross_entropy(logits, y)) < 1e-12
    with pytest.raises(DataError):
        cross_entropy(tape.constant(logits), [0, 1, 3, 0])
    with pytest.raises(DimensionError):
        cross_entropy(tape.constant(logits), [0, 1])


def test_entropy_weight_identities():
    assert np.array_equal(entropy_weight(np.eye(4)), np.full(4, 2.0))
    for c in (2, 4, 8):
        w = entropy_weight(np.full((3, c), 1.0 / c))
        assert np.all(w == 1.0 + 1.0 / c)
    assert entropy_weight(np.full((1, 2), 0.5))[0] == 1.5
    assert entropy_weight(np.full((1, 4), 0.25))[0] == 1.25


def test_entropy_weight_bounds_and_contract():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(5), size=200)
    w = entropy_weight(p)
    assert np.all(w > 1) and np.all(w <= 2)
    assert np.all(w[np.max(p, axis=1) < 1] < 2)
    with pytest.raises(ContractError):
        entropy_weight([[0.5, 0.6]])
    with pytest.raises(ContractError):
        entropy_weight([[1.2, -0.2]])


def test_median_bandwidth_fallback():
    a = np.ones((3, 2))
    assert median_bandwidth(a, a) == 1.0
    assert median_bandwidth(np.array([[0.0]]), np.array([[2.0]])) == 4.0


def zero_disc(in_dim):
    return MlpParams((
        Layer(np.zeros((in_dim, 3)), np.zeros(3), "relu"),
        Layer(np.zeros((3, 1)), np.zeros(1), "none"),
    ))


def test_cdan_uninformative_discriminator():
    rng = np.random.default_rng(2)
    tape = ad.Tape()
    f_s, f_t = tape.param(rng.standard_normal((4, 3))), tape.param(rng.standard_normal((5, 3)))
    g_s = tape.constant(np.full((4, 2), 0.5))
    g_t = tape.constant(np.full((5, 2), 0.5))
    loss, _ = cdan_loss(f_s, g_s, f_t, g_t, zero_disc(6), 1.0, tape)
    assert abs(loss.value - 2 * math.log(0.5)) < 1e-15


def softmax_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_cdan_matches_scalar_reimplementation():
    rng = np.random.default_rng(3)
    f_s, f_t = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    g_s, g_t = softmax_np(rng.standard_normal((2, 2))), softmax_np(rng.standard_normal((2, 2)))
    disc = init_mlp([6, 4, 1], rng)
    tape = ad.Tape()
    loss, _ = cdan_loss(tape.constant(f_s), tape.constant(g_s), tape.constant(f_t), tape.constant(g_t), disc, 1.0, tape)

    def weights(p):
        w = [1 + math.exp(sum(pc * math.log(pc) for pc in row)) for row in p]
        return [x / (sum(w) / len(w)) for x in w]

    def probs(f, g):
        h = np.array([[f[i, j] * g[i, c] for j in range(3) for c in range(2)] for i in range(2)])
        return [1 / (1 + math.exp(-z)) for z in predict(disc, h)[:, 0]]

    ref = loop_cdan(probs(f_s, g_s), probs(f_t, g_t), weights(g_s), weights(g_t))
    assert abs(loss.value - ref) < 1e-10


def test_cdan_identical_batches():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((3, 2))
    g = softmax_np(rng.standard_normal((3, 2)))
    disc = init_mlp([4, 5, 1], rng)
    tape = ad.Tape()
    h_s, h_t = tape.param(f), tape.param(f)
    loss, _ = cdan_loss(h_s, tape.constant(g), h_t, tape.constant(g), disc, 1.0, tape)
    gr = tape.backward(loss)
    # same rows pull in opposite directions from the two domains
    nz = np.abs(gr[h_s]) > 1e-15
    assert np.all(np.sign(gr[h_s][nz]) == -np.sign(gr[h_t][nz]))
    # swapping the domains maps log D -> log(1 - D'), i.e. a discriminator with negated output
    flipped = MlpParams(disc.layers[:-1] + (Layer(-disc.layers[-1].weight, -disc.layers[-1].bias, "none"),))
    tape2 = ad.Tape()
    f2 = [tape2.constant(f) for _ in range(2)]
    loss2, _ = cdan_loss(f2[0], tape2.constant(g), f2[1], tape2.constant(g), flipped, 1.0, tape2)
    assert abs(loss.value - loss2.value) < 1e-14


def test_cdan_equal_magnitude_at_uninformative_output():
    rng = np.random.default_rng(8)
    f = rng.standard_normal((1, 2))
    g = softmax_np(rng.standard_normal((1, 2)))
    w1, v = rng.standard_normal((4, 3)), rng.standard_normal((3, 1))
    cond = (f[:, :, None] * g[:, None, :]).reshape(1, 4)
    w1 = w1 * np.sign(cond @ w1)  # keep every hidden unit active
    h = np.maximum(cond @ w1, 0)
    # output bias chosen so the logit is exactly zero, D = 0.5
    disc = MlpParams((Layer(w1, np.zeros(3), "relu"), Layer(v, -(h @ v)[0], "none")))
    tape = ad.Tape()
    h_s, h_t = tape.param(f), tape.param(f)
    loss, _ = cdan_loss(h_s, tape.constant(g), h_t, tape.constant(g), disc, 1.0, tape)
    gr = tape.backward(loss)
    assert np.any(gr[h_s] != 0)
    assert np.allclose(gr[h_s], -gr[h_t], rtol=0, atol=1e-15)


def test_cdan_dimension_error():
    tape = ad.Tape()
    f = tape.constant(np.ones((2, 3)))
    g = tape.constant(np.full((2, 2), 0.5))
    with pytest.raises(DimensionError):
        cdan_loss(f, g, f, g, zero_disc(5), 1.0, tape)


def test_adversarial_gradients_have_opposite_signs():
    # the gradient D receives on its input and the one the reversal node sends
    # into the features differ exactly by the factor -lambda
    rng = np.random.default_rng(5)
    tape = ad.Tape()
    h = tape.param(rng.standard_normal((4, 3)))
    r = ad.grad_reverse(h, 0.7)
    w = tape.param(rng.standard_normal((3, 1)))
    loss = ad.mean_all(ad.log_sigmoid(ad.matmul(r, w)))
    g = tape.backward(loss)
    upstream = (1 - 1 / (1 + np.exp(-(h.value @ w.value)))) @ w.value.T / 4
    assert np.allclose(g[h], -0.7 * upstream, atol=1e-15)


def test_jmmd_single_kernel_two_points_matches_double_sum():
    s, t = np.array([[0.3], [-1.1]]), np.array([[0.9], [2.0]])
    cfg = KernelConfig(multipliers=(1.0,), base_bandwidth=1.7)
    got = jmmd_loss(*[[v] for v in consts(s, t)], cfg).value
    k = lambda a, b: math.exp(-((a - b) ** 2) / 1.7)
    (s1, s2), (t1, t2) = s[:, 0], t[:, 0]
    hand = (
        (k(s1, s1) + k(s1, s2) + k(s2, s1) + k(s2, s2)) / 4
        + (k(t1, t1) + k(t1, t2) + k(t2, t1) + k(t2, t2)) / 4
        - 2 * (k(s1, t1) + k(s1, t2) + k(s2, t1) + k(s2, t2)) / 4
    )
    assert abs(got - hand) < 1e-12
    assert abs(got - loop_gauss_mmd(s, t, 1.7)) < 1e-12


def test_jmmd_identical_and_symmetric():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a1 = rng.standard_normal((int(rng.integers(2, 8)), 3))
        a2 = softmax_np(rng.standard_normal((a1.shape[0], 4)))
        v = consts(a1, a2)
        assert abs(jmmd_loss(v, v).value) < 1e-9
    v = consts(rng.standard_normal((5, 3)), rng.standard_normal((5, 2)), rng.standard_normal((7, 3)), rng.standard_normal((7, 2)))
    s, t = v[:2], v[2:]
    a, b = jmmd_loss(s, t).value, jmmd_loss(t, s).value
    assert abs(a - b) < 1e-14 and a >= -1e-9


def test_jmmd_product_kernel_over_layers():
    rng = np.random.default_rng(7)
    s = [rng.standard_normal((3, 2)), rng.standard_normal((3, 1))]
    t = [rng.standard_normal((4, 2)), rng.standard_normal((4, 1))]
    cfg = KernelConfig(multipliers=(1.0,), base_bandwidth=2.0)
    v = consts(*s, *t)
    got = jmmd_loss(v[:2], v[2:], cfg).value
    # concatenating the layers turns the product of Gaussians into one Gaussian
    ref = loop_gauss_mmd(np.hstack(s), np.hstack(t), 2.0)
    assert abs(got - ref) < 1e-12


def test_jmmd_scaling_drives_cross_kernel_to_zero():
    s, t = np.array([[0.0], [1.0]]), np.array([[2.0], [3.5]])
    cfg = KernelConfig(base_bandwidth=1.0)

    def mean_k(a, b):
        d2 = (a[:, None, 0] - b[None, :, 0]) ** 2
        return np.mean(sum(np.exp(-d2 / m) for m in cfg.multipliers))

    cross, gap = [], []
    for c in (1, 3, 10, 100, 1e4):
        loss = jmmd_loss(*[[v] for v in consts(s * c, t * c)], cfg).value
        within = mean_k(s * c, s * c) + mean_k(t * c, t * c)
        cross.append((within - loss) / 2)
        gap.append(abs(loss - within))
    assert all(a >= b for a, b in zip(cross, cross[1:])) and cross[0] > cross[2] > cross[3]
    assert all(a >= b for a, b in zip(gap, gap[1:]))
    # all off-diagonal kernels vanish: 5 multipliers on each diagonal, means over 2x2
    assert cross[-1] < 1e-12 and abs(loss - 5.0) < 1e-9


def test_jmmd_errors():
    with pytest.raises(DimensionError):
        jmmd_loss(*[[v] for v in consts(np.ones((3, 2)), np.ones((3, 4)))])
    with pytest.raises(ContractError):
        jmmd_loss(*[[v] for v in consts(np.ones((1, 2)), np.ones((3, 2)))])
    with pytest.raises(ContractError):
        KernelConfig(multipliers=(1.0, 0.0))


def test_total_loss_sign_convention():
    tape = ad.Tape()
    total, bd = total_loss(tape.constant(0.7), tape.constant(-1.2), tape.constant(0.3), 2.0, 0.5)
    assert total.value == 0.7 + 2.4 + 0.15
    assert bd.check()
    assert not LossBreakdown(1.0, -1.0, 0.0, 1.0, 1.0, 0.0).check()


def toy_objective(lam, beta, seed=0):
    cfg = NetConfig(4, 3, num_classes=3, feature_dim=5, extractor_hidden=(6,), classifier_hidden=(4,), discriminator_hidden=(5,))
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    f_s = tape.param(rng.standard_normal((4, 5)))
    f_t = tape.param(rng.standard_normal((3, 5)))
    obj = fedled_objective(
        tape, f_s, rng.integers(0, 3, 4), f_t, init_params(cfg, seed, "classifier"),
        init_params(cfg, seed, "discriminator"), LossWeights(lam, beta, 1.0),
    )
    return tape, f_s, f_t, obj


def test_reduction_zero_weights():
    tape, f_s, f_t, obj = toy_objective(0.0, 0.0)
    assert obj.breakdown.total == obj.breakdown.l_cls
    g = tape.backward(obj.total)
    assert np.all(g[f_t] == 0)
    assert all(np.all(x == 0) for x in obj.discriminator.grads(g))


def test_lambda_zero_gives_zero_discriminator_gradient():
    tape, f_s, f_t, obj = toy_objective(0.0, 0.5)
    g = tape.backward(obj.total)
    assert all(np.all(x == 0) for x in obj.discriminator.grads(g))
    assert np.any(g[f_t] != 0)


def test_objective_breakdown_invariant():
    for seed in range(5):
        _, _, _, obj = toy_objective(1.0, 0.5, seed)
        bd = obj.breakdown
        assert bd.check(1e-12)
        assert bd.l_cls >= 0 and bd.l_align >= -1e-9 and bd.l_cdan <= 0
