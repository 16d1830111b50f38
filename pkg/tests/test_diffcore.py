import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from ctds.diffcore import (
    FourierMap,
    Net,
    NetSpec,
    backward_params,
    forward_augmented,
    fourier_embed,
    load_checkpoint,
    save_checkpoint,
    silu,
    silu_derivs,
)


@given(st.floats(-30, 30))
def test_silu_derivatives_closed_form(h):
    s, d1, d2 = silu_derivs(np.array([h]))
    assert np.isclose(s[0], silu(np.array([h]))[0])
    eps = 1e-5
    fd1 = (silu(np.array([h + eps])) - silu(np.array([h - eps])))[0] / (2 * eps)
    fd2 = (silu_derivs(np.array([h + eps]))[1] - silu_derivs(np.array([h - eps]))[1])[0] / (2 * eps)
    assert abs(d1[0] - fd1) < 1e-7
    assert abs(d2[0] - fd2) < 1e-7


def test_fourier_zero_input():
    fm = FourierMap.create(2, 5, 1.0, seed=3)
    feats, jac = fourier_embed(np.zeros((1, 2)), fm)
    assert np.all(feats[0, :5] == 1.0)
    assert np.all(feats[0, 5:10] == 0.0)
    assert fm.out_dim == 12


def test_fourier_single_frequency_matches_fd():
    fm = FourierMap.from_frequencies([[2.7]], 1.0, 0)
    v = np.array([[0.4]])
    _, jac = fourier_embed(v, fm)
    assert np.isclose(jac[0, 1, 0], 2.7 * np.cos(2.7 * 0.4))
    fd = central_diff(lambda u: fourier_embed(u[None], fm)[0][0], v[0])
    assert rel_err(jac[0], fd) < 1e-6


def test_fourier_zero_frequencies_constant():
    fm = FourierMap.from_frequencies(np.zeros((4, 2)), 1.0, 0)
    feats, jac = fourier_embed(np.random.default_rng(0).normal(size=(3, 2)), fm)
    assert np.all(feats[:, :4] == 1) and np.all(feats[:, 4:8] == 0)
    assert np.all(jac[:, :8] == 0)


def test_fourier_rejects_wrong_dim():
    fm = FourierMap.create(2, 3, 1.0, 0)
    with pytest.raises(ValueError):
        fourier_embed(np.zeros((1, 3)), fm)


def test_fourier_frequencies_immutable():
    fm = FourierMap.create(1, 3, 1.0, 0)
    with pytest.raises(ValueError):
        fm.frequencies[0, 0] = 1.0


def test_identity_layer_divergence():
    spec = NetSpec(2, 4, 1, 2)
    net = Net(spec, {})
    w, b = net.weights()[0]
    w[:, :2] = np.eye(2)
    x = np.random.default_rng(0).normal(size=(5, 2))
    act, _ = forward_augmented(net, x, np.zeros(5))
    assert np.allclose(act.value, x)
    assert np.all(act.div_x == 2.0)


def _random_net(temperature=True, width=8, depth=2, seed=0, features=None):
    spec = NetSpec(2, width, depth, 2, temperature, features or {})
    return Net.create(spec, seed)


@pytest.mark.parametrize("features", [None, {"x": (6, 0.5), "t": (3, 2.0), "temp": (3, 1.0)}])
def test_forward_derivatives_match_fd(features, rng):
    net = _random_net(features=features)
    for _ in range(20):
        x, t, b = rng.normal(size=2), rng.uniform(), rng.uniform(0.2, 1)
        act, _ = forward_augmented(net, x[None], np.array([t]), np.array([b]))
        assert np.allclose(act.value[0], net(x[None], np.array([t]), np.array([b]))[0])
        jac = central_diff(lambda u: net(u[None], np.array([t]), np.array([b]))[0], x, 1e-4)
        dt = central_diff(lambda u: net(x[None], u, np.array([b]))[0], np.array([t]), 1e-4)[:, 0]
        db = central_diff(lambda u: net(x[None], np.array([t]), u)[0], np.array([b]), 1e-4)[:, 0]
        assert rel_err(act.jac_x[0], jac) < 1e-5
        assert rel_err(act.d_dt[0], dt) < 1e-5
        assert rel_err(act.d_dtemp[0], db) < 1e-5
        assert act.div_x[0] == np.trace(act.jac_x[0])


def test_zero_last_layer_gives_bias():
    net = _random_net()
    w, b = net.weights()[-1]
    w[:] = 0.0
    b[:] = [0.5, -1.0]
    act, _ = forward_augmented(net, np.ones((3, 2)), np.zeros(3), np.ones(3))
    assert np.all(act.value == [0.5, -1.0])
    for blk in (act.jac_x, act.div_x, act.d_dt, act.d_dtemp):
        assert np.all(blk == 0.0)


def test_non_finite_names_layer():
    net = _random_net()
    net.params[:] = 1e308
    with pytest.raises(FloatingPointError, match="layer"):
        with np.errstate(all="ignore"):
            forward_augmented(net, np.ones((1, 2)), np.zeros(1), np.ones(1))


def test_backward_zero_at_stationary_point():
    net = _random_net()
    w, b = net.weights()[-1]
    w[:] = 0.0
    b[:] = 0.0
    act, tape = forward_augmented(net, np.ones((1, 2)), np.zeros(1), np.ones(1))
    g = backward_params(tape, g_value=2 * act.value)
    assert np.all(g == 0.0)


def test_backward_divergence_of_linear_layer_is_identity_pattern():
    net = Net(NetSpec(2, 4, 1, 2), {})
    net.params[:] = np.random.default_rng(1).normal(size=net.size)
    act, tape = forward_augmented(net, np.ones((1, 2)), np.zeros(1), wrt=("x",))
    g = backward_params(tape, g_jac_x=np.eye(2)[None])
    gw = g[: 2 * 3].reshape(2, 3)
    assert np.array_equal(gw, [[1, 0, 0], [0, 1, 0]])
    assert np.all(g[6:] == 0)


def test_tape_single_use():
    net = _random_net()
    _, tape = forward_augmented(net, np.ones((1, 2)), np.zeros(1), np.ones(1))
    backward_params(tape, g_value=np.ones((1, 2)))
    with pytest.raises(RuntimeError):
        backward_params(tape, g_value=np.ones((1, 2)))


def _loss_and_grad(net, x, t, b, coef):
    act, tape = forward_augmented(net, x, t, b)
    c1, c2, c3 = coef
    loss = c1 * np.sum(act.value**2) + c2 * np.sum(act.div_x**2) + c3 * np.sum(act.d_dt * act.d_dtemp)
    g = backward_params(tape, g_value=2 * c1 * act.value,
                        g_jac_x=2 * c2 * act.div_x[:, None, None] * np.eye(2),
                        g_dt=c3 * act.d_dtemp, g_dtemp=c3 * act.d_dt)
    return loss, g


def test_param_gradient_matches_fd(rng):
    net = _random_net(features={"x": (4, 0.5), "t": (2, 1.0)})
    x, t, b = rng.normal(size=(4, 2)), rng.uniform(size=4), rng.uniform(0.2, 1, 4)
    _, g = _loss_and_grad(net, x, t, b, (1.0, 0.7, 0.3))
    p0 = net.params.copy()

    def f(p):
        net.params[:] = p
        return _loss_and_grad(net, x, t, b, (1.0, 0.7, 0.3))[0]

    fd = central_diff(f, p0, 1e-6)
    net.params[:] = p0
    assert rel_err(g, fd) < 1e-4


def test_backward_is_linear_in_loss(rng):
    net = _random_net()
    x, t, b = rng.normal(size=(3, 2)), rng.uniform(size=3), rng.uniform(0.2, 1, 3)
    _, g1 = _loss_and_grad(net, x, t, b, (1.0, 0.0, 0.0))
    _, g2 = _loss_and_grad(net, x, t, b, (0.0, 1.0, 1.0))
    _, g12 = _loss_and_grad(net, x, t, b, (2.0, -3.0, -3.0))
    assert np.allclose(g12, 2 * g1 - 3 * g2, rtol=1e-12, atol=1e-12)


def test_determinism():
    a = _random_net(seed=7, features={"x": (4, 0.5)})
    b = _random_net(seed=7, features={"x": (4, 0.5)})
    assert np.array_equal(a.params, b.params)
    x = np.ones((2, 2))
    assert np.array_equal(a(x, np.zeros(2), np.ones(2)), b(x, np.zeros(2), np.ones(2)))


def test_checkpoint_round_trip(tmp_path):
    nets = {"control": _random_net(features={"x": (5, 0.1), "t": (2, 5.0)}), "other": _random_net(seed=3)}
    p = tmp_path / "a.bin"
    save_checkpoint(p, nets, {"note": "hi"})
    loaded, meta = load_checkpoint(p)
    assert meta == {"note": "hi"}
    for k, net in nets.items():
        assert loaded[k].spec == net.spec
        assert np.array_equal(loaded[k].params, net.params)
        for g in net.fourier:
            assert np.array_equal(loaded[k].fourier[g].frequencies, net.fourier[g].frequencies)
    x = np.ones((2, 2))
    assert np.array_equal(loaded["control"](x, np.zeros(2), np.ones(2)), nets["control"](x, np.zeros(2), np.ones(2)))
    q = tmp_path / "b.bin"
    save_checkpoint(q, loaded, meta)
    assert p.read_bytes() == q.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_param_count_matches_layout(depth, width, seed):
    spec = NetSpec(2, width, depth, 1, True, {"t": (3, 1.0)})
    net = Net.create(spec, seed)
    assert net.size == net.params.size
    assert sum(w.size + b.size for w, b in net.weights()) == net.size
