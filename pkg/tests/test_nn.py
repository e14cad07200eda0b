import math

import numpy as np
import pytest

from consmooth import nn


def linear_identity():
    return nn.DenseNet((2, 2), [np.eye(2)], [np.zeros(2)])


def test_zero_net_is_uniform():
    net = nn.zero_net((3, 5, 4))
    p = nn.forward(net, np.array([1.0, -2.0, 3.0]))
    assert np.all(p == 0.25)
    assert np.all(nn.forward_logits(net, np.ones(3)) == 0)


def test_identity_linear_softmax():
    p = nn.forward(linear_identity(), np.array([10.0, 0.0]))
    e = math.exp(-10)
    assert p[0] == pytest.approx(1 / (1 + e), abs=1e-15)
    assert p[1] == pytest.approx(e / (1 + e), rel=1e-12)


def test_forward_deterministic_and_batched():
    net = nn.init_net((3, 8, 4), seed=2)
    x = np.random.default_rng(0).standard_normal((5, 3))
    a = nn.forward(net, x)
    assert np.array_equal(a, nn.forward(net, x))
    assert np.array_equal(a[2], nn.forward(net, x[2]))
    assert np.allclose(a.sum(axis=1), 1, atol=1e-12)
    assert np.all(a > 0)


def test_log_softmax_consistency_and_shift():
    net = nn.init_net((2, 16, 5), activation="tanh", seed=1)
    x = np.random.default_rng(1).standard_normal((7, 2))
    z = nn.forward_logits(net, x)
    ref = z - nn.logsumexp(z, axis=1)[:, None]
    assert np.allclose(ref, np.log(nn.forward(net, x)), atol=1e-9)
    shifted = np.exp(nn.log_softmax(z + 123.4))
    assert np.allclose(shifted, nn.forward(net, x), atol=1e-12)


def test_log_softmax_extreme_logits_stay_finite():
    lp = nn.log_softmax(np.array([[1000.0, -1000.0, 0.0]]))
    assert np.all(np.isfinite(lp))
    assert lp[0, 0] == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        nn.forward(nn.init_net((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        nn.DenseNet((2, 3), [np.zeros((3, 2))], [np.zeros(3)])


def test_init_is_glorot_and_seeded():
    a, b = nn.init_net((10, 30, 4), seed=5), nn.init_net((10, 30, 4), seed=5)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert np.abs(a.weights[0]).max() <= math.sqrt(6 / 40)
    assert all(np.all(bias == 0) for bias in a.biases)


def test_constant_loss_gives_zero_gradient():
    net = nn.init_net((2, 4, 3), seed=0)
    cache = nn.Cache()
    z = nn.forward_logits(net, np.ones((3, 2)), cache)
    grads, _ = nn.backward(net, cache, np.zeros_like(z))
    assert all(np.all(g == 0) for g in grads)


def test_softmax_ce_logit_gradient_closed_form():
    net = nn.DenseNet((2, 3), [np.array([[0.3, -0.2, 0.1], [0.5, 0.4, -0.7]])], [np.array([0.1, 0.0, -0.1])])
    x, y = np.array([0.7, -1.2]), 2
    p = nn.forward(net, x)
    dz = p - np.eye(3)[y]
    cache = nn.Cache()
    nn.forward_logits(net, x[None], cache)
    grads, dx = nn.backward(net, cache, dz[None], need_input=True)
    assert np.allclose(grads[0], np.outer(x, dz))
    assert np.allclose(grads[1], dz)
    assert np.allclose(dx[0], net.weights[0] @ dz)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradcheck_cross_entropy(activation):
    rng = np.random.default_rng(3)
    net = nn.init_net((2, 16, 16, 3), activation=activation, seed=3)
    x = rng.standard_normal((6, 2))
    y = rng.integers(0, 3, 6)

    def loss(n):
        cache = nn.Cache()
        z = nn.forward_logits(n, x, cache)
        lp = nn.log_softmax(z)
        value = -lp[np.arange(6), y].mean()
        dz = (np.exp(lp) - np.eye(3)[y]) / 6
        return value, nn.backward(n, cache, dz)[0]

    assert nn.gradcheck(net, loss).passed(1e-4)


def test_input_gradient_with_normalization_layer():
    net = nn.init_net((2, 8, 2), activation="tanh", seed=0, input_mean=[1.0, -1.0], input_std=[2.0, 0.5])
    x = np.array([[0.3, 0.4]])
    cache = nn.Cache()
    nn.forward_logits(net, x, cache)
    _, dx = nn.backward(net, cache, np.array([[1.0, 0.0]]), need_input=True)
    h = 1e-6
    num = [(nn.forward_logits(net, x + h * e)[0, 0] - nn.forward_logits(net, x - h * e)[0, 0]) / (2 * h)
           for e in np.eye(2)[:, None, :]]
    assert np.allclose(dx[0], num, rtol=1e-7)


def test_gradcheck_subsamples_large_nets():
    net = nn.init_net((50, 300, 2), seed=0)
    x = np.ones((1, 50))

    def loss(n):
        cache = nn.Cache()
        z = nn.forward_logits(n, x, cache)
        return float(z.sum()), nn.backward(n, cache, np.ones_like(z))[0]

    rep = nn.gradcheck(net, loss, max_params=500)
    assert rep.n_checked == 500


# --- SGD -------------------------------------------------------------------------

def test_sgd_zero_gradient_no_decay_is_noop():
    net = nn.init_net((2, 3), seed=0)
    before = [p.copy() for p in net.params()]
    cfg = nn.OptimConfig(weight_decay=0.0)
    nn.sgd_step(net, [np.zeros_like(p) for p in net.params()], nn.SGDState(), cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_plain_sgd_step():
    net = nn.init_net((2, 3), seed=0)
    before = [p.copy() for p in net.params()]
    g = [np.full_like(p, 0.5) for p in net.params()]
    cfg = nn.OptimConfig(learning_rate=0.1, momentum=0.0, weight_decay=1e-2)
    nn.sgd_step(net, g, nn.SGDState(), cfg)
    for p0, p1, gi in zip(before, net.params(), g):
        assert np.allclose(p1, p0 - 0.1 * (gi + 1e-2 * p0), rtol=0, atol=1e-15)


def test_nesterov_matches_reference_recurrence():
    # reference: buf = mu*buf + d ; p -= lr * (d + mu*buf)
    p = np.array([1.0, -2.0])
    net = nn.DenseNet((2, 1), [p.reshape(2, 1).copy()], [np.zeros(1)])
    cfg = nn.OptimConfig(learning_rate=0.05, momentum=0.9, weight_decay=1e-3, nesterov=True)
    state = nn.SGDState()
    ref_p, buf = p.copy(), np.zeros(2)
    for t in range(4):
        g = np.array([0.3, -0.1]) * (t + 1)
        nn.sgd_step(net, [g.reshape(2, 1), np.zeros(1)], state, cfg)
        d = g + 1e-3 * ref_p
        buf = 0.9 * buf + d
        ref_p = ref_p - 0.05 * (d + 0.9 * buf)
    assert np.allclose(net.weights[0].ravel(), ref_p, atol=1e-15)


def test_lr_schedule():
    cfg = nn.OptimConfig(learning_rate=0.01, lr_decay_epochs=(30, 60), lr_decay_factor=0.1)
    assert cfg.lr_at(0) == cfg.lr_at(29) == 0.01
    assert cfg.lr_at(30) == pytest.approx(0.001)
    assert cfg.lr_at(60) == pytest.approx(0.0001)


def test_optim_defaults_follow_reference_recipe():
    cfg = nn.OptimConfig()
    assert (cfg.momentum, cfg.nesterov, cfg.weight_decay) == (0.9, True, 1e-4)
    assert (cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.lr_decay_epochs) == (0.01, 90, 256, (30, 60))


@pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(momentum=1.0), dict(learning_rate=0.0),
                                    dict(weight_decay=-1.0), dict(epochs=-1)])
def test_optim_validation(kwargs):
    with pytest.raises(ValueError):
        nn.OptimConfig(**kwargs)


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = nn.init_net((3, 7, 2), activation="tanh", seed=9, input_mean=[0.1, 0.2, 0.3], input_std=[1, 2, 3])
    net.biases[0] += 0.123
    path = tmp_path / "m.bin"
    nn.save_checkpoint(path, net, 0.5, "seed = 1\n")
    ck = nn.load_checkpoint(path)
    assert ck.sigma == 0.5 and ck.config_text == "seed = 1\n"
    assert ck.net.layer_dims == net.layer_dims and ck.net.activation == "tanh"
    for a, b in zip(net.params(), ck.net.params()):
        assert a.tobytes() == b.tobytes()
    assert np.array_equal(ck.net.input_std, net.input_std)
    assert nn.dump_checkpoint(ck.net, ck.sigma, ck.config_text) == path.read_bytes()


def test_checkpoint_layout_header():
    blob = nn.dump_checkpoint(nn.zero_net((2, 3)), 0.25)
    assert blob[:8] == nn.MAGIC
    assert int.from_bytes(blob[8:12], "little") == nn.FORMAT_VERSION
    # 8 header + 4 version + 4 ndims + 2 dims + act + sigma + text len + flag + 9 params
    assert len(blob) == 8 + 4 + 4 + 8 + 4 + 8 + 4 + 1 + 8 * 9


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
    lambda b: b[:8] + (7).to_bytes(4, "little") + b[12:],
])
def test_checkpoint_rejects_corruption(mutate):
    blob = nn.dump_checkpoint(nn.init_net((2, 4, 2)), 0.5, "x = 1")
    with pytest.raises(nn.CheckpointError):
        nn.parse_checkpoint(mutate(blob))
