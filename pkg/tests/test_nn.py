import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codesign.errors import ShapeMismatch, TapeConsumed
from codesign.nn import (HIDDEN, AdamState, GaussianPolicy, MlpParams, ValueNet, adam_update, backward, elu,
                         elu_grad, gaussian_log_prob, load_checkpoint, mlp_forward, sample_action,
                         save_checkpoint)


def naive_forward(params: MlpParams, x):
    """Independent forward pass: explicit loops over layers with scalar ELU."""
    sizes = params.sizes
    theta = params.theta
    h = list(x)
    i = 0
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = theta[i:i + n_in * n_out].reshape(n_in, n_out)
        i += n_in * n_out
        b = theta[i:i + n_out]
        i += n_out
        z = [sum(h[a] * W[a, c] for a in range(n_in)) + b[c] for c in range(n_out)]
        if k < len(sizes) - 2:
            z = [v if v > 0 else math.exp(v) - 1 for v in z]
        h = z
    return np.array(h)


def fd_agreement(sizes, rng, h=1e-5, batch=3):
    """Fraction of parameters whose central difference matches the analytic gradient."""
    params = MlpParams.init(sizes, rng, out_gain=1.0)
    x = rng.normal(size=(batch, sizes[0]))
    w = rng.normal(size=(batch, sizes[-1]))
    _, tape = mlp_forward(params, x)
    grad = backward(tape, w)
    theta = params.theta
    fd = np.empty_like(theta)
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + h
        up = np.sum(mlp_forward(params, x)[0] * w)
        theta[i] = old - h
        down = np.sum(mlp_forward(params, x)[0] * w)
        theta[i] = old
        fd[i] = (up - down) / (2 * h)
    rel = np.abs(fd - grad) / np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-6)
    return float(np.mean(rel < 1e-4))


def test_elu_values():
    assert elu(0.0) == 0.0
    assert elu(1.0) == 1.0
    assert abs(elu(-1.0) - (math.exp(-1) - 1)) < 1e-15
    assert abs(elu(-1.0) - (-0.63212)) < 1e-5


def test_elu_is_c1_at_zero():
    h = 1e-7
    left = (elu(0.0) - elu(-h)) / h
    right = (elu(h) - elu(0.0)) / h
    assert abs(left - 1.0) < 1e-6 and abs(right - 1.0) < 1e-6
    assert elu_grad(0.0) == 1.0


@given(st.floats(-30, 30, allow_nan=False))
def test_elu_grad_matches_finite_difference(x):
    h = 1e-6
    fd = (elu(x + h) - elu(x - h)) / (2 * h)
    assert abs(fd - elu_grad(x)) < 1e-5


def test_zero_network_outputs_zero():
    params = MlpParams.zeros((4, 5, 3))
    out, _ = mlp_forward(params, np.ones(4))
    np.testing.assert_array_equal(out, 0.0)


def test_single_identity_layer_reproduces_input():
    params = MlpParams.zeros((3, 3))
    W, _ = params.layers()[0]
    W[...] = np.eye(3)
    x = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(mlp_forward(params, x)[0], x)


@pytest.mark.parametrize("sizes", [(3, 4, 2), (5, 7, 6, 1), (2, 8, 8, 8, 3)])
def test_forward_matches_naive_implementation(sizes):
    rng = np.random.default_rng(sum(sizes))
    params = MlpParams.init(sizes, rng, out_gain=1.0)
    params.theta[:] += 0.1 * rng.normal(size=params.theta.shape)
    x = rng.normal(size=sizes[0])
    np.testing.assert_allclose(mlp_forward(params, x)[0], naive_forward(params, x), rtol=0, atol=1e-12)


def test_batched_and_single_forward_agree():
    rng = np.random.default_rng(0)
    params = MlpParams.init((4, 6, 2), rng)
    x = rng.normal(size=(5, 4))
    batched = mlp_forward(params, x)[0]
    for k in range(5):
        np.testing.assert_allclose(mlp_forward(params, x[k])[0], batched[k], rtol=0, atol=1e-15)


def test_shape_mismatch():
    params = MlpParams.zeros((4, 2))
    with pytest.raises(ShapeMismatch):
        mlp_forward(params, np.ones(3))
    with pytest.raises(ShapeMismatch):
        MlpParams((4, 2), np.zeros(3))


def test_bias_gradient_of_linear_layer_is_ones():
    params = MlpParams.init((3, 4), np.random.default_rng(1))
    _, tape = mlp_forward(params, np.ones(3))
    grad = backward(tape, np.ones(4))
    _, gb = MlpParams(params.sizes, grad).layers()[0]
    np.testing.assert_array_equal(gb, 1.0)


def test_constant_branch_has_zero_gradient():
    # a hidden unit that is dead for every input (huge negative bias) passes back only exp(-big) ~ 0
    params = MlpParams.init((2, 3, 1), np.random.default_rng(2))
    W1, b1 = params.layers()[0]
    W1[:, 0] = 0.0
    b1[0] = -800.0
    _, tape = mlp_forward(params, np.ones(2))
    grad = backward(tape, np.ones(1))
    gW1, gb1 = MlpParams(params.sizes, grad).layers()[0]
    assert gb1[0] == 0.0 and np.all(gW1[:, 0] == 0.0)
    # a zero output gradient makes the whole output constant as far as backward is concerned
    _, tape = mlp_forward(params, np.ones(2))
    assert not backward(tape, np.zeros(1)).any()


def test_tape_is_consumed_once():
    params = MlpParams.init((2, 2), np.random.default_rng(3))
    _, tape = mlp_forward(params, np.ones(2))
    backward(tape, np.ones(2))
    with pytest.raises(TapeConsumed):
        backward(tape, np.ones(2))


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    params = MlpParams.init((4, 6, 3), rng, out_gain=1.0)
    x = rng.normal(size=4)
    w = rng.normal(size=3)
    _, tape = mlp_forward(params, x)
    _, gx = backward(tape, w, input_grad=True)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (mlp_forward(params, x + e)[0] @ w - mlp_forward(params, x - e)[0] @ w) / (2 * h)
        assert abs(fd - gx[i]) < 1e-7


def test_gradient_of_three_layer_net_matches_finite_differences():
    assert fd_agreement((5, 8, 7, 6, 3), np.random.default_rng(5)) >= 0.99


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=2, max_size=5), st.integers(0, 2**32 - 1))
def test_gradient_property_random_shapes(sizes, seed):
    assert fd_agreement(tuple(sizes), np.random.default_rng(seed)) >= 0.99


def test_forward_is_deterministic():
    a = MlpParams.init((3, 5, 2), np.random.default_rng(9))
    b = MlpParams.init((3, 5, 2), np.random.default_rng(9))
    x = np.random.default_rng(1).normal(size=3)
    np.testing.assert_array_equal(mlp_forward(a, x)[0], mlp_forward(b, x)[0])


def test_default_initialization():
    rng = np.random.default_rng(10)
    policy = GaussianPolicy.init(12, 4, rng)
    assert policy.sizes == (12, *HIDDEN, 4)
    np.testing.assert_array_equal(policy.log_sigma, 0.0)
    layers = policy.mean_net.layers()
    for W, b in layers:
        np.testing.assert_array_equal(b, 0.0)
    # hidden layers orthogonal with gain sqrt(2), output layer gain 0.01
    W0 = layers[0][0]   # 12 x 256: orthonormal rows scaled by the gain
    np.testing.assert_allclose(W0 @ W0.T, 2.0 * np.eye(W0.shape[0]), atol=1e-10)
    W1 = layers[1][0]   # 256 x 128: orthonormal columns
    np.testing.assert_allclose(W1.T @ W1, 2.0 * np.eye(W1.shape[1]), atol=1e-10)
    Wo = layers[-1][0]
    np.testing.assert_allclose(Wo.T @ Wo, 1e-4 * np.eye(4), atol=1e-14)
    value = ValueNet.init(12, rng)
    assert value.sizes[-1] == 1 and value(np.zeros(12)).shape == ()
    with pytest.raises(ShapeMismatch):
        ValueNet((3, 2), np.zeros(MlpParams.count((3, 2))))


def test_tiny_sigma_action_is_the_mean():
    rng = np.random.default_rng(11)
    policy = GaussianPolicy.init(3, 2, rng, hidden=(8,), log_sigma=-20.0)
    obs = rng.normal(size=3)
    action, _ = sample_action(policy, obs, rng)
    np.testing.assert_allclose(action, policy.mean(obs), atol=1e-6)


def test_log_prob_at_mean_closed_form():
    ls = np.array([-0.5, 0.2, 1.0])
    mu = np.array([0.1, 2.0, -3.0])
    expected = -0.5 * np.sum(2 * ls + math.log(2 * math.pi))
    assert abs(gaussian_log_prob(mu, mu, ls) - expected) < 1e-12


def test_sample_mean_within_four_standard_errors():
    rng = np.random.default_rng(12)
    policy = GaussianPolicy.init(3, 2, rng, hidden=(8,), log_sigma=0.3)
    obs = rng.normal(size=3)
    obs_batch = np.tile(obs, (100_000, 1))
    actions, _ = sample_action(policy, obs_batch, rng)
    se = np.exp(0.3) / math.sqrt(100_000)
    assert np.all(np.abs(actions.mean(0) - policy.mean(obs)) < 4 * se)


def test_log_prob_integrates_to_one():
    x = np.linspace(-12.0, 12.0, 1_000_000)[:, None]
    dens = np.exp(gaussian_log_prob(x, np.array([0.7]), np.array([0.4])))
    dx = x[1, 0] - x[0, 0]
    integral = dx * (dens.sum() - 0.5 * (dens[0] + dens[-1]))
    assert abs(integral - 1.0) < 0.02


def test_adam_zero_gradient_and_zero_lr_leave_params():
    p = np.array([1.0, -2.0])
    assert np.array_equal(adam_update(p, np.zeros(2), 1e-3, AdamState.like(p)), p)
    assert np.array_equal(adam_update(p, np.array([0.5, -3.0]), 0.0, AdamState.like(p)), p)


def test_adam_constant_gradient_step_is_lr_times_sign():
    p = np.zeros(3)
    g = np.array([0.01, -5.0, 300.0])
    state = AdamState.like(p)
    for _ in range(2000):
        new = adam_update(p, g, 1e-3, state)
        step, p = new - p, new
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_first_step_against_hand_computation():
    p, g = np.array([1.0]), np.array([2.0])
    state = AdamState.like(p)
    out = adam_update(p, g, 0.1, state)
    # bias-corrected moments equal g and g^2 after one step
    assert out[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    with pytest.raises(ShapeMismatch):
        adam_update(p, np.zeros(2), 0.1, state)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(13)
    arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "s": np.asarray(rng.normal())}
    save_checkpoint(tmp_path / "c.npz", arrays, {"epoch": 3})
    loaded, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"epoch": 3}
    for k, v in arrays.items():
        assert loaded[k].shape == v.shape and np.array_equal(loaded[k], v)
