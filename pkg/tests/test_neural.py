import json

import numpy as np
import pytest

from hibid.neural import (MLP, Adam, NetSpec, finite_diff_check, forward, grad_step, load_net, net_from_dict,
                          net_to_dict, save_net, sync_target)


def test_linear_net_is_affine(rng):
    net = MLP(NetSpec(3, (), 2), rng)
    x = rng.normal(size=(4, 3))
    assert np.allclose(forward(net, x), x @ net.weights[0] + net.biases[0])


def test_zero_weights_output_bias(rng):
    net = MLP(NetSpec(3, (5,), 2), rng)
    for W in net.weights:
        W[...] = 0.0
    out = forward(net, rng.normal(size=(2, 3)))
    assert np.array_equal(out, np.tile(net.biases[-1], (2, 1)))


def test_forward_deterministic_and_dimension_check(rng):
    net = MLP(NetSpec(3, (4, 4), 1), rng)
    x = rng.normal(size=(5, 3))
    assert np.array_equal(net.predict(x), net.predict(x))
    assert np.array_equal(net.forward(x), net.predict(x))
    with pytest.raises(ValueError):
        net.predict(np.zeros((2, 4)))


def test_zero_gradient_leaves_params(rng):
    net = MLP(NetSpec(2, (3,), 1), rng)
    opt = Adam(net.params, 1e-2)
    before = [p.copy() for p in net.params]
    grad_step(net, opt, [np.zeros_like(p) for p in net.params])
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params))
    assert opt.t == 1


def test_nan_gradient_aborts(rng):
    net = MLP(NetSpec(2, (3,), 1), rng)
    opt = Adam(net.params, 1e-2)
    g = [np.zeros_like(p) for p in net.params]
    g[0][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        opt.step(net.params, g)


def test_adam_quadratic_converges():
    x = np.array([0.0])
    opt = Adam([x], 1e-2)
    for _ in range(10_000):
        opt.step([x], [2 * (x - 3.0)])
    assert abs(x[0] - 3.0) < 1e-3


def test_adam_monotone_on_convex_quadratic():
    x = np.array([5.0, -4.0])
    opt = Adam([x], 1e-3)
    losses = []
    for _ in range(500):
        losses.append(float(np.sum(x ** 2)))
        opt.step([x], [2 * x])
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_identical_nets_identical_updates(rng):
    a = MLP(NetSpec(3, (4,), 2), np.random.default_rng(5))
    b = MLP(NetSpec(3, (4,), 2), np.random.default_rng(5))
    oa, ob = Adam(a.params, 1e-2), Adam(b.params, 1e-2)
    x = rng.normal(size=(6, 3))
    for net, opt in ((a, oa), (b, ob)):
        y = net.forward(x)
        grads, _ = net.backward(2 * y / len(y))
        opt.step(net.params, grads)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def _mse_closure(net, x, y):
    def f():
        out = net.forward(x)
        d = out - y
        grads, _ = net.backward(2 * d / d.size)
        return float(np.mean(d * d)), grads
    return f


def test_finite_diff_linear_exact(rng):
    net = MLP(NetSpec(3, (), 2), rng)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    assert finite_diff_check(_mse_closure(net, x, y), net.params) < 1e-8


def test_finite_diff_two_hidden_layers(rng):
    worst = 0.0
    for _ in range(20):
        net = MLP(NetSpec(4, (6, 5), 3), rng)
        x, y = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
        net.forward(x)
        if net.min_preactivation_margin() < 1e-3:
            continue
        worst = max(worst, finite_diff_check(_mse_closure(net, x, y), net.params, h=1e-5))
    assert worst < 1e-4


def test_finite_diff_rejects_bad_h(rng):
    net = MLP(NetSpec(1, (), 1), rng)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: (0.0, [np.zeros_like(p) for p in net.params]), net.params, h=0.0)


def test_sync_target(rng):
    src = MLP(NetSpec(3, (4,), 2), rng)
    tgt = MLP(NetSpec(3, (4,), 2), np.random.default_rng(99))
    x = rng.normal(size=(3, 3))
    assert not np.allclose(src.predict(x), tgt.predict(x))
    sync_target(src, tgt)
    assert np.array_equal(src.predict(x), tgt.predict(x))
    copy = sync_target(src)
    src.weights[0] += 1.0
    assert not np.array_equal(src.predict(x), copy.predict(x))


def test_checkpoint_roundtrip(tmp_path, rng):
    net = MLP(NetSpec(3, (4, 2), 2), rng)
    opt = Adam(net.params, 1e-3)
    opt.step(net.params, [np.ones_like(p) for p in net.params])
    save_net(tmp_path / "n.json", net, opt)
    back = load_net(tmp_path / "n.json")
    assert back.spec == net.spec
    assert all(np.array_equal(a, b) for a, b in zip(back.params, net.params))
    d = json.loads((tmp_path / "n.json").read_text())
    assert d["optimizer"]["lr"] == 1e-3
    assert net_to_dict(net_from_dict(net_to_dict(net))) == net_to_dict(net)
