import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slungrl import nn


def quad_loss(target):
    def f(out):
        d = out - target
        return np.sum(d * d), 2.0 * d
    return f


def test_zero_weights_give_zero_output():
    net = nn.DenseNet([3, 4, 2])
    net.set_params([np.zeros_like(p) for p in net.params()])
    assert np.all(net(np.ones(3)) == 0)


def test_identity_single_layer():
    net = nn.DenseNet([3, 3])
    net.set_params([np.eye(3), np.zeros(3)])
    x = np.array([0.5, -2.0, 3.0])
    assert np.array_equal(net(x), x)


def test_hand_computed_2_3_1_net():
    net = nn.DenseNet([2, 3, 1])
    w1 = np.array([[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]])
    b1 = np.array([0.01, 0.02, 0.03])
    w2 = np.array([[0.7], [-0.8], [0.9]])
    b2 = np.array([0.05])
    net.set_params([w1, b1, w2, b2])
    x = np.array([1.5, -0.5])
    h = [math.tanh(x[0] * w1[0, j] + x[1] * w1[1, j] + b1[j]) for j in range(3)]
    expected = h[0] * 0.7 - h[1] * 0.8 + h[2] * 0.9 + 0.05
    assert net(x)[0] == pytest.approx(expected, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        nn.DenseNet([3, 2])(np.ones(4))


def test_linear_gradient_hand_example():
    net = nn.DenseNet([1, 1])
    net.set_params([np.array([[0.3]]), np.array([0.0])])
    _, cache = net.forward(np.array([2.0]))
    grads, gx = net.backward(cache, np.array([1.0]))
    assert grads[0][0, 0] == 2.0 and grads[1][0] == 1.0 and gx[0] == pytest.approx(0.3)


def test_zero_output_gradient():
    net = nn.DenseNet([4, 5, 3], np.random.default_rng(0))
    _, cache = net.forward(np.ones(4))
    grads, _ = net.backward(cache, np.zeros(3))
    assert all(np.all(g == 0) for g in grads)


def test_stale_cache_is_rejected():
    net = nn.DenseNet([2, 2])
    _, cache = net.forward(np.ones(2))
    net.touch()
    with pytest.raises(nn.StaleCacheError):
        net.backward(cache, np.ones(2))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 7), min_size=2, max_size=4), st.integers(0, 2**31 - 1))
def test_backward_matches_finite_differences(sizes, seed):
    rng = np.random.default_rng(seed)
    net = nn.DenseNet(sizes, rng)
    x = rng.normal(size=(2, sizes[0]))
    err = nn.gradient_check(net, quad_loss(rng.normal(size=(2, sizes[-1]))), x)
    assert err < 1e-6


def test_gradient_check_linear_net_is_exact():
    rng = np.random.default_rng(1)
    net = nn.DenseNet([3, 2], rng)
    assert nn.gradient_check(net, quad_loss(np.ones(2)), rng.normal(size=3)) < 1e-9


def test_gradient_check_8_16_4():
    rng = np.random.default_rng(2)
    net = nn.DenseNet([8, 16, 4], rng)
    assert nn.gradient_check(net, quad_loss(rng.normal(size=4)), rng.normal(size=8)) < 1e-6


def test_gradient_check_detects_sign_flip():
    rng = np.random.default_rng(3)
    net = nn.DenseNet([3, 4, 2], rng)

    def flipped(cache, g):
        grads, gx = net.backward(cache, g)
        return [-x for x in grads], gx
    err = nn.gradient_check(net, quad_loss(np.ones(2)), rng.normal(size=3), backward=flipped)
    assert err == pytest.approx(2.0, abs=1e-3)


def test_gradient_check_step_bounds():
    net = nn.DenseNet([1, 1])
    with pytest.raises(ValueError):
        nn.gradient_check(net, quad_loss(np.ones(1)), np.ones(1), h=1e-2)


def test_adam_zero_gradient_is_identity():
    p = [np.array([1.0, -2.0])]
    st_ = nn.AdamState.like(p, 0.1)
    nn.adam_step(p, [np.zeros(2)], st_)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = [np.array([0.0])]
    s = nn.AdamState.like(p, 0.1)
    nn.adam_step(p, [np.array([1.0])], s)
    assert p[0][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = [rng.normal(size=3)]
    ref = p[0].copy()
    m = v = np.zeros(3)
    s = nn.AdamState.like(p, 0.01)
    for t in range(1, 6):
        g = rng.normal(size=3)
        nn.adam_step(p, [g], s)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p[0], ref, rtol=0, atol=1e-14)


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out, norm = nn.clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert nn.global_norm(out) == pytest.approx(1.0)
    same, _ = nn.clip_by_global_norm(g, 10.0)
    assert same[0][0] == 3.0


def test_nan_parameter_aborts():
    net = nn.DenseNet([2, 2])
    net.weights[0][0, 0] = np.nan
    with pytest.raises(nn.NonFiniteError):
        nn.check_finite(net)


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    rng = np.random.default_rng(5)
    net = nn.DenseNet([3, 5, 2], rng)
    opt = nn.AdamState.like(net.params(), 1e-3)
    nn.adam_step(net.params(), [rng.normal(size=p.shape) for p in net.params()], opt)
    path = tmp_path / "ck.json"
    nn.save_checkpoint(path, {"net": nn.network_record(net, opt), "seed": 5})
    doc = nn.load_checkpoint(path)
    net2, opt2 = nn.restore_network(doc["net"])
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), net2.params()))
    assert opt2.step == 1 and all(np.array_equal(a, b) for a, b in zip(opt.m, opt2.m))
    path2 = tmp_path / "ck2.json"
    nn.save_checkpoint(path2, {"net": nn.network_record(net2, opt2), "seed": 5})
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_foreign_document(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps({"hello": 1}))
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    nn.atomic_write(tmp_path / "a.txt", "hello\n")
    assert os.listdir(tmp_path) == ["a.txt"]
    assert (tmp_path / "a.txt").read_text() == "hello\n"
