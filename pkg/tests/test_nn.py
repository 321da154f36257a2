from __future__ import annotations

import math
import pickle

import numpy as np
import pytest

from scpo.nn import (
    Adam,
    GaussianTanhPolicy,
    Mlp,
    backward,
    forward,
    input_hvp,
    load_checkpoint,
    log1m_tanh_sq,
    mlp_backward,
    mlp_forward,
    policy_backward,
    policy_forward,
    policy_mean_action,
    policy_sample,
    save_checkpoint,
)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float((np.abs(a - b) / (np.maximum(np.abs(a), np.abs(b)) + 1e-12)).max())


def central_diff(f, x, idx, h=1e-5):
    x = x.copy()
    out = []
    for i in idx:
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def test_zero_network_outputs_zero():
    net = Mlp([3, 5, 2])
    assert np.array_equal(mlp_forward(net, [1.0, -2.0, 3.0]), np.zeros(2))


def test_single_affine_layer():
    net = Mlp([1, 1], params=np.array([2.0, 1.0]))
    assert mlp_forward(net, [3.0]).tolist() == [7.0]


def test_forward_matches_straight_line_oracle():
    net = Mlp.init([2, 16, 1], np.random.default_rng(0))
    x = [0.5, -0.2]
    w1, b1, w2, b2 = net.weights[0], net.biases[0], net.weights[1], net.biases[1]
    hidden = []
    for j in range(16):
        z = x[0] * w1[0, j] + x[1] * w1[1, j] + b1[j]
        hidden.append(z if z > 0 else 0.0)
    expected = sum(hidden[j] * w2[j, 0] for j in range(16)) + b2[0]
    assert mlp_forward(net, x)[0] == pytest.approx(expected, rel=1e-14)


def test_batch_and_single_forward_agree():
    net = Mlp.init([3, 8, 8, 2], np.random.default_rng(1))
    xs = np.random.default_rng(2).normal(size=(5, 3))
    batch = mlp_forward(net, xs)
    for row, x in zip(batch, xs):
        assert np.allclose(row, mlp_forward(net, x), rtol=0, atol=1e-15)


def test_dimension_mismatch_is_rejected():
    net = Mlp([3, 2])
    with pytest.raises(ValueError):
        mlp_forward(net, [1.0, 2.0])
    with pytest.raises(ValueError):
        Mlp([3, 2], params=np.zeros(5))
    with pytest.raises(ValueError):
        Mlp([3], params=None)
    with pytest.raises(ValueError):
        Mlp([3, 2], activation="gelu")


def test_linear_network_input_gradient_is_the_transposed_weights():
    rng = np.random.default_rng(3)
    net = Mlp.init([4, 3], rng)
    g = mlp_backward(net, rng.normal(size=4), np.ones(3))
    assert np.array_equal(g.d_input, net.weights[0] @ np.ones(3))


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(4)
    for _ in range(10):
        net = Mlp.init([3, 16, 16, 2], rng, activation)
        x = rng.normal(size=3)
        up = rng.normal(size=2)
        g = mlp_backward(net, x, up)
        fd_in = central_diff(lambda z: float(up @ mlp_forward(net, z)), x, range(3))
        assert rel_err(g.d_input, fd_in) < 1e-5
        idx = rng.choice(net.n_params, size=50, replace=False)

        def f_params(p):
            return float(up @ mlp_forward(Mlp(net.layer_sizes, p, activation), x))

        assert rel_err(g.d_params[idx], central_diff(f_params, net.params, idx)) < 1e-5


def test_batched_parameter_gradient_is_the_sum_over_rows():
    rng = np.random.default_rng(5)
    net = Mlp.init([2, 8, 1], rng)
    xs = rng.normal(size=(4, 2))
    total = mlp_backward(net, xs, np.ones((4, 1)))
    rows = [mlp_backward(net, x, np.ones(1)) for x in xs]
    assert np.allclose(total.d_params, sum(r.d_params for r in rows), atol=1e-14)
    assert np.allclose(total.d_input, [r.d_input for r in rows], atol=1e-15)


def test_input_hvp_matches_differentiated_input_gradient():
    rng = np.random.default_rng(6)
    net = Mlp.init([4, 12, 12, 1], rng, "tanh")
    x = rng.normal(size=(3, 4))
    t = rng.normal(size=(3, 4))
    hv = input_hvp(net, forward(net, x), np.ones((3, 1)), t)
    h = 1e-5
    grad = lambda z: mlp_backward(net, z, np.ones((3, 1))).d_input  # noqa: E731
    fd = (grad(x + h * t) - grad(x - h * t)) / (2 * h)
    assert rel_err(hv, fd) < 1e-5


def test_input_hvp_vanishes_for_relu():
    rng = np.random.default_rng(7)
    net = Mlp.init([4, 12, 12, 1], rng)
    x = rng.normal(size=(3, 4))
    assert not np.any(input_hvp(net, forward(net, x), np.ones((3, 1)), rng.normal(size=(3, 4))))


def test_initialisation_is_seeded_and_bounded():
    a = Mlp.init([5, 64, 1], np.random.default_rng(8))
    b = Mlp.init([5, 64, 1], np.random.default_rng(8))
    assert np.array_equal(a.params, b.params)
    assert np.abs(a.weights[0]).max() <= 1 / math.sqrt(5)
    assert np.abs(a.weights[1]).max() <= 1 / 8


# -- policy head ----------------------------------------------------------------

def test_zero_noise_gives_the_squashed_mean():
    pol = GaussianTanhPolicy.init(3, 2, [16], np.random.default_rng(9))
    s = np.array([0.1, -0.4, 0.7])
    action, logp = policy_sample(pol, s, np.zeros(2))
    mean = mlp_forward(pol.trunk, s)[:2]
    assert np.array_equal(action, np.tanh(mean))
    assert np.array_equal(action, policy_mean_action(pol, s))
    assert math.isfinite(logp)


def test_log_density_integrates_against_quadrature():
    # 1-D action: compare with the change-of-variables density on a fine grid
    trunk = Mlp([1, 2], params=np.array([0.0, 0.0, 0.3, -0.5]))
    pol = GaussianTanhPolicy(trunk)
    mu, sigma = 0.3, math.exp(-0.5)
    grid = np.linspace(-1 + 1e-9, 1 - 1e-9, 400001)
    u = np.arctanh(grid)
    dens = np.exp(-0.5 * ((u - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi)) / (1 - grid**2)
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    total = trapezoid(dens, grid)
    assert total == pytest.approx(1.0, abs=1e-3)
    for noise in (-1.5, 0.0, 0.4, 2.0):
        a, logp = policy_sample(pol, [1.0], [noise])
        k = int(np.argmin(np.abs(grid - a[0])))
        assert math.exp(logp) == pytest.approx(dens[k], rel=1e-3)


def test_tiny_std_keeps_log_density_finite():
    trunk = Mlp([1, 2], params=np.array([0.0, 0.0, 0.0, -100.0]))
    pol = GaussianTanhPolicy(trunk)
    a, logp = policy_sample(pol, [1.0], [0.7])
    assert math.isfinite(logp) and not np.isnan(a).any()
    assert a[0] == pytest.approx(math.tanh(0.7 * math.exp(-20.0)), abs=1e-15)


def test_sampled_actions_stay_inside_the_box():
    rng = np.random.default_rng(10)
    pol = GaussianTanhPolicy.init(3, 2, [16], rng)
    pol.trunk.biases[-1][2:] = 2.0  # wide distribution, heavy saturation
    s = rng.normal(size=(100000, 3)) * 3
    a, logp = policy_sample(pol, s, rng.normal(size=(100000, 2)))
    assert np.all(np.abs(a) < 1.0)
    assert np.all(np.isfinite(logp))


def test_stable_log_jacobian():
    u = np.array([-30.0, -3.0, 0.0, 0.5, 3.0, 30.0])
    direct = np.log(1 - np.tanh(u[1:-1]) ** 2)
    assert np.allclose(log1m_tanh_sq(u[1:-1]), direct, rtol=1e-12)
    assert np.all(np.isfinite(log1m_tanh_sq(u)))


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_policy_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(11)
    pol = GaussianTanhPolicy.init(3, 2, [16, 16], rng, activation)
    s = rng.normal(size=(4, 3))
    noise = rng.normal(size=(4, 2))
    ca, cl = rng.normal(size=(4, 2)), rng.normal(size=4)

    def loss(params, states):
        p = GaussianTanhPolicy(Mlp(pol.trunk.layer_sizes, params, activation))
        out = policy_forward(p, states, noise)
        return float((ca * out.action).sum() + (cl * out.log_prob).sum())

    d_params, d_state = policy_backward(pol, policy_forward(pol, s, noise), ca, cl)
    idx = rng.choice(pol.trunk.n_params, size=50, replace=False)
    assert rel_err(d_params[idx], central_diff(lambda p: loss(p, s), pol.trunk.params, idx)) < 1e-5
    flat = s.ravel()
    fd_state = central_diff(lambda z: loss(pol.trunk.params, z.reshape(4, 3)), flat, range(12))
    assert rel_err(d_state.ravel(), fd_state) < 1e-5


def test_clamped_log_std_passes_no_gradient():
    trunk = Mlp([1, 2], params=np.array([0.0, 0.5, 0.0, 5.0]))
    pol = GaussianTanhPolicy(trunk)
    out = policy_forward(pol, np.array([[1.0]]), np.array([[0.3]]))
    d_params, _ = policy_backward(pol, out, np.ones((1, 1)), np.ones(1))
    # parameters feeding the log-std output: weight index 1 and bias index 3
    assert d_params[1] == 0.0 and d_params[3] == 0.0
    assert d_params[0] != 0.0


# -- optimiser and checkpoints ----------------------------------------------------

def test_first_adam_step_moves_by_learning_rate():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    opt = Adam(3, lr=0.1)
    opt.step(p, g)
    assert np.allclose(p, [1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8),
                           0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8)], rtol=0, atol=1e-15)


def test_adam_minimises_a_quadratic():
    p = np.array([3.0, -1.0])
    opt = Adam(2, lr=0.05)
    for _ in range(2000):
        opt.step(p, 2 * p)
    assert np.abs(p).max() < 1e-3


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(12)
    nets = {"q1": Mlp.init([4, 8, 1], rng), "pi": Mlp.init([3, 8, 2], rng, "tanh")}
    path = save_checkpoint(tmp_path / "c.npz", nets, {"log_alpha": np.array(0.25)}, {"epsilon": 0.005})
    loaded, arrays, meta = load_checkpoint(path)
    for name, net in nets.items():
        assert np.array_equal(loaded[name].params, net.params)
        assert loaded[name].activation == net.activation
        x = rng.normal(size=net.in_dim)
        assert np.array_equal(mlp_forward(loaded[name], x), mlp_forward(net, x))
    assert float(arrays["log_alpha"]) == 0.25 and meta == {"epsilon": 0.005}


def test_checkpoint_version_is_checked(tmp_path):
    path = tmp_path / "c.npz"
    np.savez(path, format_version=np.array(99), header=np.array("{}"))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_pickled_network_keeps_parameter_views():
    net = Mlp.init([2, 3, 1], np.random.default_rng(0))
    twin = pickle.loads(pickle.dumps(net))
    twin.params[:] = 0.0
    assert not np.any(twin.weights[0]) and np.any(net.weights[0])


def test_relu_input_curvature_vanishes_away_from_kinks():
    rng = np.random.default_rng(3)
    net = Mlp.init([3, 8, 8, 1], rng)
    x, t = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    h = 1e-6
    grad = lambda z: backward(net, forward(net, z), np.ones((1, 1)), need_params=False)[1]  # noqa: E731
    fd = (grad(x + h * t) - grad(x - h * t)) / (2 * h)
    assert np.allclose(fd, 0.0, atol=1e-8)
    assert np.array_equal(input_hvp(net, forward(net, x), np.ones((1, 1)), t), np.zeros((1, 3)))
