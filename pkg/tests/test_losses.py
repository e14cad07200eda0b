import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from consmooth import losses, nn
from consmooth.cli import gradcheck_loss
from consmooth.config import RunConfig
from consmooth.losses import (ConfigError, TrainConfig, ablation_loss, attack_objective, compute_loss,
                              consistency_head, consistency_loss, gaussian_loss, kl_to_mean, macer_head,
                              macer_loss, mse_head, smoothadv_attack, smoothadv_train_loss, stability_loss)
from consmooth.rng import example_noise

import oracles


def const_net(logits, d=2):
    """One layer with zero weights, so the logits ignore the input."""
    logits = np.asarray(logits, dtype=np.float64)
    return nn.DenseNet((d, len(logits)), [np.zeros((d, len(logits)))], [logits.copy()])


def setup(seed=0, b=5, m=2, d=2, k=3, sigma=0.5, activation="relu"):
    rng = np.random.default_rng(seed)
    net = nn.init_net((d, 16, 16, k), activation=activation, seed=seed)
    x = rng.standard_normal((b, d))
    y = rng.integers(0, k, b)
    deltas = example_noise(seed, (1,), np.arange(b), m, d, sigma)
    return net, x, y, deltas


# --- values ----------------------------------------------------------------------

def test_uniform_net_cross_entropy_is_log_k():
    net = nn.zero_net((2, 10))
    out = gaussian_loss(net, np.zeros((3, 2)), [1, 4, 9], np.ones((4, 3, 2)))
    assert out.value == pytest.approx(math.log(10), abs=1e-15)


def test_onehot_like_net_loss_vanishes():
    net = const_net([0.0, 800.0, 0.0])
    assert gaussian_loss(net, np.zeros(2), 1, np.ones((3, 2))).value < 1e-300


def test_consistency_worked_example():
    # p1 = (0.75, 0.25), p2 = (0.25, 0.75), y = 1, lam = 1, eta = 0
    z = np.log(np.array([[[0.75, 0.25]], [[0.25, 0.75]]]))
    value, _ = consistency_head(z, np.array([1]), 1.0, 0.0)
    ce = 0.5 * (-math.log(0.25) - math.log(0.75))
    kl = 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)) * 2
    assert ce == pytest.approx(0.8369882167858358, abs=1e-15)
    assert kl == pytest.approx(0.14384103622589045, abs=1e-15)
    assert value == pytest.approx(ce + kl, abs=1e-14)
    assert value == pytest.approx(0.9808292530117263, abs=1e-14)


def test_consistency_identical_predictions():
    net = const_net([0.2, -0.4, 1.0])
    p = nn.forward(net, np.zeros(2))
    out = consistency_loss(net, np.zeros(2), 0, np.random.default_rng(0).standard_normal((3, 2)), 10.0, 0.5)
    expected = -math.log(p[0]) + 0.5 * -(p * np.log(p)).sum()
    assert out.value == pytest.approx(expected, abs=1e-14)


def test_kl_to_mean_zero_iff_identical():
    p = np.array([[0.2, 0.3, 0.5]] * 4)
    assert abs(kl_to_mean(p)) < 1e-12
    q = p.copy()
    q[1] = [0.3, 0.2, 0.5]
    assert kl_to_mean(q) > 1e-4


def test_stability_examples():
    net, x, y, deltas = setup(1)
    clean = gaussian_loss(net, x, y, np.zeros((1,) + x.shape)).value
    assert stability_loss(net, x, y, deltas, 0.0).value == pytest.approx(clean, abs=1e-15)
    const = const_net([1.0, 0.0, -1.0])
    p = nn.forward(const, np.zeros(2))
    v = stability_loss(const, np.zeros(2), 0, deltas[:, :1], 2.0).value
    assert v == pytest.approx(-math.log(p[0]) + 2.0 * -(p * np.log(p)).sum(), abs=1e-14)


def test_mse_examples():
    z = np.log(np.array([[[1 - 1e-300, 1e-300]], [[1e-300, 1 - 1e-300]]]))
    value, _ = mse_head(z, np.array([0]), 3.0)
    ce, _ = losses.gaussian_head(z, np.array([0]))
    assert value - ce == pytest.approx(3.0 * 2, abs=1e-12)
    same = np.zeros((2, 1, 2))
    assert mse_head(same, np.array([0]), 3.0)[0] == losses.gaussian_head(same, np.array([0]))[0]


def test_macer_worked_example():
    # pbar = (0.8413, 0.1587) with m = 1, beta = 1, sigma = 1, gamma = 8, lam = 1
    z = np.log(np.array([[[0.8413, 0.1587]]]))
    value, _ = macer_head(z, np.array([0]), 1.0, 8.0, 1.0, 1.0)
    cr = oracles.phi_inv_mp(0.8413) - oracles.phi_inv_mp(0.1587)
    assert cr == pytest.approx(2.0, abs=1e-3)
    hinge = 0.5 * (8 - cr)
    assert hinge == pytest.approx(3.0, abs=1e-3)
    assert value == pytest.approx(-math.log(0.8413) + hinge, abs=1e-12)


def test_macer_misclassified_has_no_hinge():
    z = np.log(np.array([[[0.3, 0.7]], [[0.4, 0.6]]]))
    v_on, g_on = macer_head(z, np.array([0]), 5.0, 8.0, 1.0, 0.5)
    v_off, g_off = macer_head(z, np.array([0]), 0.0, 8.0, 1.0, 0.5)
    assert v_on == v_off and np.array_equal(g_on, g_off)


def test_macer_inactive_hinge_gradient_is_exactly_zero():
    net, x, _, deltas = setup(2, m=4)
    beta = 16.0
    z = nn.forward_logits(net, x[None] + deltas)
    y = np.exp(nn.log_softmax(beta * z)).mean(axis=0).argmax(axis=1)
    on = macer_loss(net, x, y, deltas, 5.0, 1e-9, beta, 0.5)
    off = macer_loss(net, x, y, deltas, 0.0, 1e-9, beta, 0.5)
    assert on.value == off.value
    for a, b in zip(on.grads, off.grads):
        assert np.array_equal(a, b)


def test_macer_clamps_saturated_quantiles():
    z = np.array([[[60.0, -60.0]]])
    value, dz = macer_head(z, np.array([0]), 1.0, 8.0, 1.0, 1.0)
    assert np.isfinite(value) and np.all(np.isfinite(dz))
    cr = losses.macer_radius(np.exp(nn.log_softmax(z[0, 0])), 0)
    assert cr == pytest.approx(2 * oracles.phi_inv_mp(1 - 1e-6), rel=1e-9)


# --- reductions (bit-exact) ---------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_reduction_web(seed):
    net, x, y, deltas = setup(seed, m=3)
    g = gaussian_loss(net, x, y, deltas)
    c = consistency_loss(net, x, y, deltas, 0.0, 0.0)
    assert c.value == g.value
    assert all(np.array_equal(a, b) for a, b in zip(c.grads, g.grads))
    kl = ablation_loss(net, x, y, deltas, 7.0, "kl")
    c0 = consistency_loss(net, x, y, deltas, 7.0, 0.0)
    assert kl.value == c0.value
    assert all(np.array_equal(a, b) for a, b in zip(kl.grads, c0.grads))
    x_adv = smoothadv_attack(net, x, y, deltas, 0.0, 10)
    sa = smoothadv_train_loss(net, x_adv, y, deltas)
    assert sa.value == g.value
    assert all(np.array_equal(a, b) for a, b in zip(sa.grads, g.grads))
    sac = smoothadv_train_loss(net, x_adv, y, deltas, 0.0, 0.0, with_consistency=True)
    assert sac.value == sa.value


def test_compute_loss_smoothadv_zero_epsilon_is_gaussian():
    net, x, y, deltas = setup(4)
    cfg = TrainConfig(loss_kind="smoothadv", attack=losses.AttackParams(epsilon=0.0))
    assert compute_loss(net, x, y, deltas, cfg).value == gaussian_loss(net, x, y, deltas).value
    # epoch 0 of the warm-up is also a zero-radius attack
    cfg = TrainConfig(loss_kind="smoothadv")
    assert compute_loss(net, x, y, deltas, cfg, epoch=0).value == gaussian_loss(net, x, y, deltas).value


# --- gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("kind", losses.LOSS_KINDS)
def test_gradcheck_every_loss(kind):
    cfg = RunConfig.defaults()
    for trial in range(2):
        rep = gradcheck_loss(kind, cfg, trial)
        assert rep.passed(1e-4), (kind, trial, rep)


def test_gradcheck_relu_consistency_and_stability():
    net, x, y, deltas = setup(7, activation="relu")
    for fn in (lambda n: consistency_loss(n, x, y, deltas, 10.0, 0.5),
               lambda n: stability_loss(n, x, y, deltas, 2.0)):
        rep = nn.gradcheck(net, lambda n: (fn(n).value, fn(n).grads))
        assert rep.passed(1e-4)


# --- properties -----------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_calibration_direction(seed, t1, t2):
    """Shrinking the draws toward their mean never increases the divergence term."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=3)
    pbar = p.mean(axis=0)
    lo, hi = sorted((t1, t2))
    small = kl_to_mean(pbar + lo * (p - pbar))
    big = kl_to_mean(pbar + hi * (p - pbar))
    assert small <= big + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_regularizers_non_negative(seed):
    rng = np.random.default_rng(seed)
    z = 3 * rng.standard_normal((3, 4, 5))
    y = rng.integers(0, 5, 4)
    ce, _ = losses.gaussian_head(z, y)
    assert consistency_head(z, y, 1.0, 0.0)[0] >= ce - 1e-12
    assert mse_head(z, y, 1.0)[0] >= ce
    assert macer_head(z, y, 1.0, 8.0, 1.0, 0.5)[0] >= macer_head(z, y, 0.0, 8.0, 1.0, 0.5)[0]


def test_m1_and_m4_gaussian_loss_estimate_same_expectation():
    net = nn.init_net((2, 16, 3), seed=3)
    x, y = np.array([0.3, -0.2]), 1
    one = example_noise(0, (5,), np.arange(10_000), 1, 2, 1.0)[0]
    per_draw = np.array([gaussian_loss(net, x, y, one[i:i + 1], grad=False).value for i in range(10_000)])
    four = example_noise(0, (6,), np.arange(10_000), 4, 2, 1.0)
    per_group = np.array([gaussian_loss(net, x, y, four[:, i], grad=False).value for i in range(10_000)])
    se = math.sqrt(per_draw.var() / 10_000 + per_group.var() / 10_000)
    assert abs(per_draw.mean() - per_group.mean()) < 3 * se


# --- attack ------------------------------------------------------------------------------

def test_attack_zero_epsilon_identity():
    net, x, y, deltas = setup(0)
    assert np.array_equal(smoothadv_attack(net, x, y, deltas, 0.0, 5), x)


def test_attack_single_step_moves_by_step_size():
    net, x, y, deltas = setup(3, b=1, activation="tanh")
    x_adv = smoothadv_attack(net, x, y, deltas, epsilon=10.0, steps=1, step_size=0.1)
    assert np.linalg.norm(x_adv - x) == pytest.approx(0.1, rel=1e-12)
    h = 1e-6
    grad = np.array([(attack_objective(net, x + h * e, y, deltas) - attack_objective(net, x - h * e, y, deltas))[0] / (2 * h)
                     for e in np.eye(2)])
    assert np.allclose((x_adv - x)[0] / 0.1, grad / np.linalg.norm(grad), atol=1e-6)


def test_attack_stays_in_ball():
    net, x, y, deltas = setup(5, b=20)
    x_adv = smoothadv_attack(net, x, y, deltas, 0.3, 10, step_size=0.2)
    assert np.all(np.linalg.norm(x_adv - x, axis=1) <= 0.3 + 1e-12)


def test_attack_increases_objective():
    nondecrease = 0
    for i in range(100):
        net, x, y, deltas = setup(100 + i, b=1, m=4, activation="tanh")
        before = attack_objective(net, x, y, deltas)[0]
        after = attack_objective(net, smoothadv_attack(net, x, y, deltas, 0.5, 10), y, deltas)[0]
        nondecrease += after >= before
    assert nondecrease >= 95


def test_warmup_schedule():
    a = losses.AttackParams(epsilon=1.0, warmup_epochs=10, steps=10)
    assert a.epsilon_at(0) == 0.0 and a.epsilon_at(5) == 0.5 and a.epsilon_at(20) == 1.0
    assert a.step_for(1.0) == pytest.approx(0.2)


# --- config validation -----------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(loss_kind="consistency", m=1), dict(loss_kind="nope"), dict(sigma=0.0),
                                    dict(lam=-1.0), dict(loss_kind="macer", macer=losses.MacerParams(beta=0.5))])
def test_train_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_consistency_needs_two_draws_at_call_time():
    net, x, y, deltas = setup(0, m=1)
    with pytest.raises(ValueError):
        consistency_loss(net, x, y, deltas, 1.0, 0.5)


def test_macer_gradcheck_with_active_hinge():
    net, x, _, deltas = setup(8, m=4, activation="tanh")
    z = nn.forward_logits(net, x[None] + deltas)
    y = np.exp(nn.log_softmax(16.0 * z)).mean(axis=0).argmax(axis=1)
    on = macer_loss(net, x, y, deltas, 3.0, 8.0, 16.0, 0.5)
    assert on.value > macer_loss(net, x, y, deltas, 0.0, 8.0, 16.0, 0.5).value
    rep = nn.gradcheck(net, lambda n: (lambda o: (o.value, o.grads))(macer_loss(n, x, y, deltas, 3.0, 8.0, 16.0, 0.5)))
    assert rep.passed(1e-4)
