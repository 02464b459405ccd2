import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codesign.env import EnvConfig, VecEnv, morphology_reference
from codesign.errors import LengthMismatch
from codesign.morphology import build_graph
from codesign.nn import GaussianPolicy, ValueNet, gaussian_log_prob
from codesign.ppo import (Learner, RolloutBuffer, RunningMeanStd, TrainConfig, adapt_lr, compute_gae, evaluate,
                          gaussian_kl, make_learner, policy_loss_grad, surrogate_loss, train_generation,
                          train_single, value_loss, value_loss_grad)

from conftest import TWO_LEG


def gae_oracle(rewards, values, dones, bootstrap, gamma, lam):
    """Advantages by expanding sum_k (gamma*lam)^k delta_{t+k}, cut at the first episode end."""
    T = len(rewards)
    next_v = np.append(values[1:], bootstrap)
    delta = [rewards[t] + gamma * next_v[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, w = 0.0, 1.0
        for k in range(t, T):
            total += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = total
    return adv, adv + np.asarray(values)


def random_stream(rng, T):
    return rng.normal(size=T), rng.normal(size=T), rng.random(T) < 0.2, rng.normal()


def test_gae_single_terminal_step():
    adv, ret = compute_gae([1.0], [0.0], [True], 0.0, 0.99, 0.95)
    assert adv[0] == 1.0 and ret[0] == 1.0


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v, d, b = random_stream(rng, 12)
    adv, _ = compute_gae(r, v, d, b, 0.9, 0.0)
    next_v = np.append(v[1:], b)
    np.testing.assert_allclose(adv, r + 0.9 * next_v * (1 - d) - v, rtol=0, atol=1e-14)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 0.95, 0.99, 1.0])
@pytest.mark.parametrize("lam", [0.0, 0.5, 0.95, 1.0])
def test_gae_matches_direct_summation(gamma, lam):
    rng = np.random.default_rng([int(gamma * 100), int(lam * 100)])
    for _ in range(20):
        r, v, d, b = random_stream(rng, int(rng.integers(1, 51)))
        adv, ret = compute_gae(r, v, d, b, gamma, lam)
        o_adv, o_ret = gae_oracle(r, v, d, b, gamma, lam)
        np.testing.assert_allclose(adv, o_adv, rtol=0, atol=1e-10)
        np.testing.assert_allclose(ret, o_ret, rtol=0, atol=1e-10)


def test_gae_streams_are_independent():
    rng = np.random.default_rng(1)
    cols = [random_stream(rng, 10) for _ in range(3)]
    r = np.stack([c[0] for c in cols], 1)
    v = np.stack([c[1] for c in cols], 1)
    d = np.stack([c[2] for c in cols], 1)
    b = np.array([c[3] for c in cols])
    adv, _ = compute_gae(r, v, d, b, 0.99, 0.95)
    for k, c in enumerate(cols):
        np.testing.assert_allclose(adv[:, k], compute_gae(*c, 0.99, 0.95)[0], rtol=0, atol=1e-14)


def test_gae_length_mismatch():
    with pytest.raises(LengthMismatch):
        compute_gae([1.0, 2.0], [0.0], [False, False], 0.0, 0.99, 0.95)


def test_adapt_lr_examples():
    assert adapt_lr(3e-4, 0.01, 0.01) == 3e-4
    assert adapt_lr(1e-4, 1e6, 0.01) == 1e-4
    assert adapt_lr(9e-4, 0.0, 0.01) == 1e-3
    assert adapt_lr(3e-4, 0.05, 0.01) == pytest.approx(2e-4)
    assert adapt_lr(3e-4, 0.001, 0.01) == pytest.approx(4.5e-4)


@given(st.lists(st.floats(0, 10, allow_nan=False), max_size=200), st.floats(1e-4, 1e-3))
def test_adapt_lr_stays_in_bounds(kls, lr):
    for kl in kls:
        lr = adapt_lr(lr, kl, 0.01)
        assert 1e-4 <= lr <= 1e-3


@given(st.lists(st.floats(0.0, 5.0, allow_nan=False), min_size=1, max_size=30),
       st.floats(0.05, 0.5))
def test_clipped_ratio_bounds(ratios, eps):
    ratio = np.array(ratios)
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    assert np.all((clipped >= 1 - eps) & (clipped <= 1 + eps))


def test_surrogate_two_sample_hand_computation():
    # one-dimensional actions, sigma = 1, old mean 0, new mean 0.5
    a = np.array([[1.0], [-1.0]])
    adv = np.array([2.0, -1.0])
    logp_old = gaussian_log_prob(a, np.zeros((2, 1)), np.zeros(1))
    logp_new = gaussian_log_prob(a, np.full((2, 1), 0.5), np.zeros(1))
    ratio = np.exp(logp_new - logp_old)
    # by hand: log ratio = -(a-0.5)^2/2 + a^2/2 = 0.5a - 0.125
    r1, r2 = np.exp(0.375), np.exp(-0.625)
    np.testing.assert_allclose(ratio, [r1, r2], rtol=0, atol=1e-14)
    loss, _ = surrogate_loss(ratio, adv, 0.2)
    expected = -0.5 * (min(r1 * 2.0, 1.2 * 2.0) + min(r2 * -1.0, 0.8 * -1.0))
    assert abs(loss - expected) < 1e-10


def test_surrogate_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    ratio = rng.uniform(0.5, 1.5, 20)
    adv = rng.normal(size=20)
    _, g = surrogate_loss(ratio, adv, 0.2)
    h = 1e-7
    for i in range(20):
        if abs(abs(ratio[i] - 1) - 0.2) < 1e-5:
            continue
        e = np.zeros(20)
        e[i] = h
        fd = (surrogate_loss(ratio + e, adv, 0.2)[0] - surrogate_loss(ratio - e, adv, 0.2)[0]) / (2 * h)
        assert abs(fd - g[i]) < 1e-7


def test_value_loss_matches_definition():
    rng = np.random.default_rng(4)
    v, v_old, ret = rng.normal(size=(3, 50))
    loss, g = value_loss(v, v_old, ret, 0.2)
    v_clip = v_old + np.clip(v - v_old, -0.2, 0.2)
    assert abs(loss - np.mean(np.maximum((v - ret) ** 2, (v_clip - ret) ** 2))) < 1e-14
    h = 1e-7
    for i in range(50):
        e = np.zeros(50)
        e[i] = h
        fd = (value_loss(v + e, v_old, ret, 0.2)[0] - value_loss(v - e, v_old, ret, 0.2)[0]) / (2 * h)
        assert abs(fd - g[i]) < 1e-6


def test_gaussian_kl_zero_for_identical_and_positive_otherwise():
    rng = np.random.default_rng(5)
    mu, ls = rng.normal(size=(8, 3)), rng.normal(size=3) * 0.3
    np.testing.assert_allclose(gaussian_kl(mu, ls, mu, ls), 0.0, atol=1e-15)
    assert np.all(gaussian_kl(mu, ls, mu + 0.1, ls - 0.2) > 0)


def test_gaussian_kl_monte_carlo():
    rng = np.random.default_rng(6)
    mu0, ls0, mu1, ls1 = np.array([0.3]), np.array([-0.2]), np.array([-0.1]), np.array([0.1])
    x = mu0 + np.exp(ls0) * rng.standard_normal((200_000, 1))
    mc = np.mean(gaussian_log_prob(x, mu0, ls0) - gaussian_log_prob(x, mu1, ls1))
    assert abs(mc - gaussian_kl(mu0, ls0, mu1, ls1)) < 5e-3


def fd_check(f, theta, grad, rng, count=40, h=1e-6):
    idx = rng.choice(len(theta), size=min(count, len(theta)), replace=False)
    for i in idx:
        old = theta[i]
        theta[i] = old + h
        up = f()
        theta[i] = old - h
        down = f()
        theta[i] = old
        fd = (up - down) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-5 * max(1.0, abs(fd)), (i, fd, grad[i])


def test_policy_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    policy = GaussianPolicy.init(5, 2, rng, hidden=(8, 6), log_sigma=-0.3)
    policy.theta[:] += 0.3 * rng.normal(size=policy.theta.shape)
    x = rng.normal(size=(16, 5))
    mu = policy.mean(x)
    a = mu + 0.5 * rng.normal(size=mu.shape)
    logp_old = gaussian_log_prob(a, mu, policy.log_sigma) + 0.05 * rng.normal(size=16)
    adv = rng.normal(size=16)
    _, grad, _, _ = policy_loss_grad(policy, x, a, logp_old, adv, 0.2, entropy_coef=0.01)
    fd_check(lambda: policy_loss_grad(policy, x, a, logp_old, adv, 0.2, entropy_coef=0.01)[0],
             policy.theta, grad, rng)
    # the log-sigma entries are the last ones
    fd_check(lambda: policy_loss_grad(policy, x, a, logp_old, adv, 0.2, entropy_coef=0.01)[0],
             policy.theta[-2:], grad[-2:], rng, count=2)


def test_value_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    value = ValueNet.init(4, rng, hidden=(8, 6))
    x = rng.normal(size=(20, 4))
    v_old = value(x) + 0.3 * rng.normal(size=20)
    ret = rng.normal(size=20)
    _, grad = value_loss_grad(value, x, v_old, ret, 0.2)
    fd_check(lambda: value_loss_grad(value, x, v_old, ret, 0.2)[0], value.theta, grad, rng)


def test_identity_update_has_unit_ratio_and_zero_kl():
    rng = np.random.default_rng(9)
    policy = GaussianPolicy.init(3, 2, rng, hidden=(8,))
    x = rng.normal(size=(10, 3))
    mu = policy.mean(x)
    a = mu + rng.normal(size=mu.shape)
    logp = gaussian_log_prob(a, mu, policy.log_sigma)
    _, _, ratio, _ = policy_loss_grad(policy, x, a, logp, rng.normal(size=10), 0.2)
    np.testing.assert_array_equal(ratio, 1.0)
    assert np.mean(np.abs(ratio - 1) > 0.2) == 0.0
    np.testing.assert_allclose(gaussian_kl(mu, policy.log_sigma, mu, policy.log_sigma), 0.0, atol=1e-15)


def test_zero_advantage_leaves_only_entropy_gradient():
    rng = np.random.default_rng(10)
    policy = GaussianPolicy.init(3, 2, rng, hidden=(8,))
    x = rng.normal(size=(10, 3))
    mu = policy.mean(x)
    a = mu + rng.normal(size=mu.shape)
    logp = gaussian_log_prob(a, mu, policy.log_sigma) + 0.1
    _, grad, _, _ = policy_loss_grad(policy, x, a, logp, np.zeros(10), 0.2, entropy_coef=0.0)
    assert not np.any(grad)
    _, grad, _, _ = policy_loss_grad(policy, x, a, logp, np.zeros(10), 0.2, entropy_coef=0.1)
    assert not np.any(grad[:-2])
    np.testing.assert_allclose(grad[-2:], -0.1)


def test_running_mean_std_matches_batch_statistics():
    rng = np.random.default_rng(11)
    data = rng.normal(3.0, 2.0, size=(1000, 4))
    rms = RunningMeanStd.zeros(4)
    for chunk in np.array_split(data, 7):
        rms.update(chunk)
    np.testing.assert_allclose(rms.mean, data.mean(0), atol=1e-5)
    np.testing.assert_allclose(rms.var, data.var(0), rtol=1e-3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=5e-3)


SMALL = TrainConfig(horizon=8, n_envs=4, epochs=2, hidden=(16, 16), eval_episodes=1)


@pytest.fixture(scope="module")
def agent():
    return build_graph(TWO_LEG)


def test_collect_single_tuple(agent):
    cfg = TrainConfig(horizon=1, n_envs=1, hidden=(8,))
    rng = np.random.default_rng(0)
    env = VecEnv([agent], 1, EnvConfig(), rng, morphology_reference(agent))
    learner = make_learner(env, cfg, rng)
    s_m, obs = env.reset()
    buf = learner.collect(env, {"s_m": s_m, "obs": obs}, rng)
    assert isinstance(buf, RolloutBuffer) and buf.size == 1
    learner.update(buf, rng)
    assert buf.size == 0


def test_deterministic_policy_gives_identical_buffers(agent):
    cfg = TrainConfig(horizon=6, n_envs=3, hidden=(8,), init_log_sigma=-20.0)

    def run():
        rng = np.random.default_rng(42)
        env = VecEnv([agent], 3, EnvConfig(), rng, morphology_reference(agent))
        learner = make_learner(env, cfg, rng)
        s_m, obs = env.reset()
        return learner.collect(env, {"s_m": s_m, "obs": obs}, rng)

    a, b = run(), run()
    for name in ("obs", "actions", "rewards", "values", "dones"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_allclose(a.actions, a.mu, atol=1e-6)


def test_train_single_zero_epochs_leaves_policy_unchanged(agent):
    rng = np.random.default_rng(1)
    cfg = TrainConfig(horizon=4, n_envs=2, epochs=0, hidden=(8,))
    env = VecEnv([agent], 2, EnvConfig(), np.random.default_rng(1), morphology_reference(agent))
    fresh = make_learner(env, cfg, np.random.default_rng(1))
    learner, curve, _ = train_single(agent, cfg, EnvConfig(), rng, learner=fresh.copy())
    assert curve == []
    np.testing.assert_array_equal(learner.policy.theta, fresh.policy.theta)


def test_train_curve_length_and_checkpoint_round_trip(agent, tmp_path):
    learner, curve, logs = train_single(agent, SMALL, EnvConfig(), np.random.default_rng(2))
    assert len(curve) == SMALL.epochs == len(logs)
    assert all(1e-4 <= l.lr <= 1e-3 for l in logs)
    learner.save(tmp_path / "p.npz")
    loaded, meta = Learner.load(tmp_path / "p.npz")
    np.testing.assert_array_equal(loaded.policy.theta, learner.policy.theta)
    np.testing.assert_array_equal(loaded.obs_rms.mean, learner.obs_rms.mean)
    assert meta["epoch"] == learner.epoch == SMALL.epochs
    a = evaluate(learner, agent, EnvConfig(), 1, 7)
    assert a == evaluate(loaded, agent, EnvConfig(), 1, 7)


def test_evaluate_is_reproducible_and_averages_episodes(agent):
    learner, _, _ = train_single(agent, SMALL, EnvConfig(), np.random.default_rng(3))
    one = evaluate(learner, agent, EnvConfig(), 1, 5)
    assert one == evaluate(learner, agent, EnvConfig(), 1, 5)
    from codesign.env import rollout_returns

    per_episode = rollout_returns([agent], learner.act, 3, 5, EnvConfig(), morphology_reference(agent))[0]
    assert evaluate(learner, agent, EnvConfig(), 3, 5) == pytest.approx(per_episode.mean(), abs=1e-12)


def test_train_generation_fitness_per_variant(agent):
    from dataclasses import replace

    variants = [agent, build_graph(TWO_LEG.replace("length: 0.3", "length: 0.33"))]
    assert variants[1] != variants[0]
    base, _, _ = train_single(agent, SMALL, EnvConfig(), np.random.default_rng(4))
    learner, fitness, logs = train_generation(variants, agent, base, replace(SMALL, epochs=1), EnvConfig(),
                                              np.random.default_rng(5))
    assert fitness.shape == (2,) and len(logs) == 1
    # the base learner is copied, never trained in place
    assert learner is not base and not np.array_equal(learner.policy.theta, base.policy.theta)
