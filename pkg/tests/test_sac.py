import math

import numpy as np
import pytest

from meee.buffer import Batch
from meee.nn import AdamState, ContractError, DenseNet, adam_update, max_relative_error, numeric_gradient
from meee.sac import (
    SQUASH_EPS,
    CriticPair,
    GaussianPolicy,
    SACAgent,
    actor_loss,
    critic_loss,
    sample_action,
    td_target,
    update_targets,
)


class ZeroNormal:
    def standard_normal(self, shape):
        return np.zeros(shape)


def random_batch(n, state_dim=3, action_dim=2, seed=0, done=None):
    rng = np.random.default_rng(seed)
    return Batch(
        rng.normal(size=(n, state_dim)),
        rng.uniform(-1, 1, (n, action_dim)),
        rng.normal(size=n),
        rng.normal(size=(n, state_dim)),
        np.zeros(n, dtype=bool) if done is None else np.asarray(done),
        np.ones(n),
    )


def make_parts(seed=0, activation="relu", hidden=(16, 16), alpha=0.2, gamma=0.99, polyak=0.995):
    low, high = -np.ones(2), np.ones(2)
    policy = GaussianPolicy(3, low, high, hidden, activation, seed=seed)
    critics = CriticPair(3, 2, hidden, activation, seed=seed + 1, gamma=gamma, alpha=alpha, polyak=polyak)
    return policy, critics


def set_constant(net: DenseNet, value: float):
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = value


def fixed_policy(mean, log_std, low=-2.0, high=2.0):
    """One-dimensional policy whose outputs ignore the state."""
    policy = GaussianPolicy(1, np.array([low]), np.array([high]), (4,), seed=0)
    policy.trunk.weights[-1][...] = 0.0
    policy.trunk.biases[-1][...] = [mean, log_std]
    return policy


class TestPolicySampling:
    def test_zero_noise_gives_squashed_mean(self):
        policy, _ = make_parts()
        s = np.array([0.3, -0.1, 0.7])
        a, _ = sample_action(policy, s, ZeroNormal())
        mean = policy.trunk.forward(s)[:2]
        np.testing.assert_array_equal(a, np.tanh(mean))
        np.testing.assert_array_equal(a, policy.mode(s))

    def test_pre_squash_mean_within_four_sigma(self):
        policy = fixed_policy(0.4, math.log(0.7))
        n = 100_000
        z = np.random.default_rng(1).standard_normal((n, 1))
        u = policy.pre_squash(np.zeros((n, 1)), z)
        assert abs(u.mean() - 0.4) < 4 * 0.7 / math.sqrt(n)

    def test_log_prob_matches_histogram_density(self):
        policy = fixed_policy(0.3, math.log(0.5))
        rng = np.random.default_rng(2)
        n = 1_000_000
        actions, _ = sample_action(policy, np.zeros((n, 1)), rng)
        actions = np.sort(actions[:, 0])
        probes, logp = sample_action(policy, np.zeros((100, 1)), rng)
        half = 0.02
        for a, lp in zip(probes[:, 0], logp):
            count = np.searchsorted(actions, a + half) - np.searchsorted(actions, a - half)
            density = count / (n * 2 * half)
            assert math.exp(lp) == pytest.approx(density, rel=0.10)

    def test_actions_inside_box_and_log_prob_finite_under_stress(self):
        policy, _ = make_parts(seed=3)
        policy.trunk.biases[-1][:2] = [40.0, -40.0]  # saturate the squash
        rng = np.random.default_rng(3)
        states = rng.normal(scale=5.0, size=(100_000, 3))
        a, logp = sample_action(policy, states, rng)
        assert np.all(np.abs(a) < 1.0)
        assert np.isfinite(logp).all()

    def test_rescaling_to_asymmetric_box(self):
        policy = GaussianPolicy(2, np.array([0.0]), np.array([4.0]), (4,), seed=1)
        a, logp = sample_action(policy, np.random.default_rng(0).normal(size=(1000, 2)), np.random.default_rng(1))
        assert np.all((a > 0.0) & (a < 4.0)) and np.isfinite(logp).all()

    def test_state_dimension_mismatch(self):
        policy, _ = make_parts()
        with pytest.raises(ContractError):
            sample_action(policy, np.zeros(4), np.random.default_rng(0))

    def test_checkpoint_round_trip(self, tmp_path):
        policy, _ = make_parts(seed=5)
        policy.save(tmp_path / "p.ckpt")
        loaded = GaussianPolicy.load(tmp_path / "p.ckpt")
        s = np.random.default_rng(0).normal(size=(5, 3))
        assert np.array_equal(policy.mode(s), loaded.mode(s))


class TestTDTarget:
    def test_terminal_row_returns_reward(self):
        policy, critics = make_parts()
        batch = random_batch(1, done=[True])
        batch.r[0] = 2.5
        assert td_target(batch, critics, policy, np.random.default_rng(0))[0] == 2.5

    def test_constant_critics_without_entropy(self):
        policy, critics = make_parts(alpha=0.0)
        set_constant(critics.q1_target, 3.0)
        set_constant(critics.q2_target, 3.0)
        batch = random_batch(5)
        y = td_target(batch, critics, policy, np.random.default_rng(0))
        np.testing.assert_allclose(y, batch.r + 0.99 * 3.0, rtol=0, atol=1e-15)

    def test_uses_smaller_target_critic(self):
        policy, critics = make_parts(alpha=0.0)
        set_constant(critics.q1_target, 3.0)
        set_constant(critics.q2_target, -1.0)
        batch = random_batch(4)
        y = td_target(batch, critics, policy, np.random.default_rng(0))
        np.testing.assert_allclose(y, batch.r - 0.99, rtol=0, atol=1e-15)

    def test_myopic_limit(self):
        policy, critics = make_parts(gamma=0.0)
        batch = random_batch(6)
        np.testing.assert_array_equal(td_target(batch, critics, policy, np.random.default_rng(0)), batch.r)

    def test_terminal_rows_never_read_next_state(self):
        policy, critics = make_parts()
        batch = random_batch(4, done=[True, False, True, False])
        y = td_target(batch, critics, policy, np.random.default_rng(7))
        batch.s_next[[0, 2]] = np.nan
        y2 = td_target(batch, critics, policy, np.random.default_rng(7))
        assert np.array_equal(y, y2)


class TestCriticLoss:
    def test_unit_weights_match_unweighted_loss(self):
        policy, critics = make_parts()
        batch = random_batch(8)
        loss, _ = critic_loss(batch, np.ones(8), critics, policy, np.random.default_rng(1))
        assert loss == reference_critic_loss(batch, critics, policy, np.random.default_rng(1))[0]

    def test_half_weights_halve_the_loss(self):
        policy, critics = make_parts()
        batch = random_batch(8)
        full, _ = critic_loss(batch, np.ones(8), critics, policy, np.random.default_rng(1))
        half, _ = critic_loss(batch, np.full(8, 0.5), critics, policy, np.random.default_rng(1))
        assert half == 0.5 * full

    def test_linear_in_weights(self):
        policy, critics = make_parts()
        rng = np.random.default_rng(2)
        for trial in range(10):
            batch = random_batch(8, seed=trial)
            w = rng.uniform(0.5, 1.0, 8)
            y = td_target(batch, critics, policy, np.random.default_rng(trial))
            x = np.concatenate([batch.s, batch.a], axis=1)
            per_sample = sum((net.forward(x)[:, 0] - y) ** 2 for net in critics.online())
            loss, _ = critic_loss(batch, w, critics, policy, np.random.default_rng(trial))
            assert loss == pytest.approx(np.mean(w * per_sample), rel=1e-12)

    def test_rejects_out_of_range_weights(self):
        policy, critics = make_parts()
        with pytest.raises(ContractError):
            critic_loss(random_batch(2), np.array([1.0, 0.4]), critics, policy, np.random.default_rng(0))

    def test_gradient_matches_finite_differences(self):
        policy, critics = make_parts(activation="tanh", hidden=(6, 6))
        batch = random_batch(4)
        w = np.array([0.5, 0.7, 1.0, 0.9])
        _, grads = critic_loss(batch, w, critics, policy, np.random.default_rng(3))
        for net, g in zip(critics.online(), grads):
            numeric = numeric_gradient(
                net.params(), lambda: critic_loss(batch, w, critics, policy, np.random.default_rng(3))[0]
            )
            assert max_relative_error(g, numeric) < 1e-5


class TestActorLoss:
    def test_unit_weights_match_unweighted_loss(self):
        policy, critics = make_parts()
        s = random_batch(8).s
        loss, grads = actor_loss(s, np.ones(8), critics, policy, np.random.default_rng(1))
        ref_loss, ref_grads = reference_actor_loss(s, critics, policy, np.random.default_rng(1))
        assert loss == ref_loss
        assert all(np.array_equal(a, b) for a, b in zip(grads, ref_grads))

    def test_constant_critic_without_entropy_gives_no_signal(self):
        policy, critics = make_parts(alpha=0.0)
        set_constant(critics.q1, 1.5)
        set_constant(critics.q2, 1.5)
        _, grads = actor_loss(random_batch(6).s, np.ones(6), critics, policy, np.random.default_rng(0))
        assert all(not g.any() for g in grads)

    def test_critic_parameters_untouched(self):
        policy, critics = make_parts()
        before = [net.get_flat() for net in critics.online()]
        actor_loss(random_batch(6).s, np.ones(6), critics, policy, np.random.default_rng(0))
        assert all(np.array_equal(net.get_flat(), b) for net, b in zip(critics.online(), before))

    @pytest.mark.parametrize("alpha", [0.0, 0.2])
    def test_gradient_matches_finite_differences(self, alpha):
        policy, critics = make_parts(activation="tanh", hidden=(6, 6), alpha=alpha)
        s = random_batch(4).s
        w = np.array([0.5, 0.8, 1.0, 0.6])
        _, grads = actor_loss(s, w, critics, policy, np.random.default_rng(4))
        numeric = numeric_gradient(
            policy.trunk.params(), lambda: actor_loss(s, w, critics, policy, np.random.default_rng(4))[0]
        )
        assert max_relative_error(grads, numeric) < 1e-5

    def test_half_weights_halve_the_loss(self):
        policy, critics = make_parts()
        s = random_batch(8).s
        full, _ = actor_loss(s, np.ones(8), critics, policy, np.random.default_rng(5))
        half, _ = actor_loss(s, np.full(8, 0.5), critics, policy, np.random.default_rng(5))
        assert half == 0.5 * full


class TestTargets:
    def test_polyak_one_keeps_targets(self):
        _, critics = make_parts(polyak=1.0)
        critics.q1.flat += 1.0
        before = critics.q1_target.get_flat()
        update_targets(critics)
        assert np.array_equal(critics.q1_target.get_flat(), before)

    def test_polyak_zero_copies_online(self):
        _, critics = make_parts(polyak=0.0)
        critics.q1.flat += 1.0
        update_targets(critics)
        assert np.array_equal(critics.q1_target.get_flat(), critics.q1.get_flat())
        assert np.array_equal(critics.q2_target.get_flat(), critics.q2.get_flat())

    def test_geometric_convergence(self):
        _, critics = make_parts(polyak=0.9)
        critics.q1.flat += 1.0
        gap = np.max(np.abs(critics.q1_target.flat - critics.q1.flat))
        for _ in range(20):
            update_targets(critics)
            new_gap = np.max(np.abs(critics.q1_target.flat - critics.q1.flat))
            assert new_gap / gap == pytest.approx(0.9, abs=1e-12)
            gap = new_gap

    def test_targets_are_moving_average_over_updates(self):
        agent = SACAgent(3, -np.ones(2), np.ones(2), hidden=(8, 8), seed=2, polyak=0.95)
        rng = np.random.default_rng(0)
        expected = [agent.critics.q1_target.get_flat(), agent.critics.q2_target.get_flat()]
        for i in range(20):
            agent.update(random_batch(16, seed=i), np.ones(16), rng)
            for k, net in enumerate((agent.critics.q1, agent.critics.q2)):
                expected[k] = 0.95 * expected[k] + 0.05 * net.get_flat()
        np.testing.assert_allclose(agent.critics.q1_target.get_flat(), expected[0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(agent.critics.q2_target.get_flat(), expected[1], rtol=0, atol=1e-12)


class TestAgent:
    def test_unit_weights_reproduce_reference_sac_bitwise(self):
        agent = SACAgent(3, -np.ones(2), np.ones(2), hidden=(16, 16), seed=4)
        ref = ReferenceSAC(3, -np.ones(2), np.ones(2), hidden=(16, 16), seed=4)
        rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
        for i in range(100):
            batch = random_batch(32, seed=100 + i)
            la = agent.update(batch, np.ones(32), rng_a)
            lb = ref.update(batch, rng_b)
            assert la == lb
        assert np.array_equal(agent.policy.trunk.get_flat(), ref.policy.trunk.get_flat())
        for a, b in zip(
            (agent.critics.q1, agent.critics.q2, agent.critics.q1_target, agent.critics.q2_target),
            (ref.q1, ref.q2, ref.q1_target, ref.q2_target),
        ):
            assert np.array_equal(a.get_flat(), b.get_flat())

    def test_single_critic_trains_only_first(self):
        agent = SACAgent(3, -np.ones(2), np.ones(2), hidden=(8,), seed=1, single_critic=True)
        q2 = agent.critics.q2.get_flat()
        agent.update(random_batch(8), np.ones(8), np.random.default_rng(0))
        assert np.array_equal(agent.critics.q2.get_flat(), q2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_batch_skips_update(self):
        agent = SACAgent(3, -np.ones(2), np.ones(2), hidden=(8,), seed=1)
        before = agent.policy.trunk.get_flat()
        batch = random_batch(4)
        batch.r[0] = np.inf
        c_loss, a_loss = agent.update(batch, np.ones(4), np.random.default_rng(0))
        assert not math.isfinite(c_loss)
        assert np.array_equal(agent.policy.trunk.get_flat(), before)

    def test_auto_entropy_moves_temperature(self):
        agent = SACAgent(3, -np.ones(2), np.ones(2), hidden=(8,), seed=1, auto_entropy=True)
        agent.update(random_batch(16), np.ones(16), np.random.default_rng(0))
        assert agent.critics.alpha != 0.2


# Plain SAC without weights, used as the reduction oracle for the weighted agent.


def reference_td_target(batch, q1_target, q2_target, policy, gamma, alpha, rng):
    z = rng.standard_normal((len(batch), policy.action_dim))
    a_next, logp = policy.sample_with_noise(batch.s_next, z, rows=False)
    x = np.concatenate([batch.s_next, a_next], axis=1)
    q = np.minimum(q1_target.forward(x)[:, 0], q2_target.forward(x)[:, 0])
    return batch.r + gamma * (q - alpha * logp)


def reference_critic_loss(batch, critics, policy, rng):
    n = len(batch)
    y = reference_td_target(batch, critics.q1_target, critics.q2_target, policy, critics.gamma, critics.alpha, rng)
    x = np.concatenate([batch.s, batch.a], axis=1)
    total = 0.0
    grads = []
    for net in (critics.q1, critics.q2):
        q, acts = net.forward_cache(x)
        diff = q[:, 0] - y
        total = total + diff * diff
        grads.append(net.backward(acts, (2.0 * diff / n)[:, None], need_input=False)[0])
    return float(np.mean(total)), grads


def reference_actor_loss(s, critics, policy, rng):
    n = len(s)
    z = rng.standard_normal((n, policy.action_dim))
    out, p_acts = policy.trunk.forward_cache(s)
    mean, raw, log_std = policy._split(out)
    std = np.exp(log_std)
    u = mean + std * z
    t = np.tanh(u)
    logp = policy._log_prob(u, z, log_std)
    x = np.concatenate([s, policy.squash(u)], axis=1)
    (q1, acts1), (q2, acts2) = critics.q1.forward_cache(x), critics.q2.forward_cache(x)
    first = q1[:, 0] <= q2[:, 0]
    q = np.where(first, q1[:, 0], q2[:, 0])
    alpha = critics.alpha
    loss = float(np.mean(alpha * logp - q))
    d_a = (
        critics.q1.input_grad(acts1, (-first.astype(float) / n)[:, None])[:, 3:]
        + critics.q2.input_grad(acts2, (-(~first).astype(float) / n)[:, None])[:, 3:]
    )
    unclipped = np.abs(t) < 1.0 - SQUASH_EPS
    d_u = d_a * policy.scale * (1.0 - t * t) * unclipped + alpha / n * 2.0 * t
    d_log_std = (d_u * std * z - alpha / n) * ((raw > -20.0) & (raw < 2.0))
    grads, _ = policy.trunk.backward(p_acts, np.concatenate([d_u, d_log_std], axis=1), need_input=False)
    return loss, grads


class ReferenceSAC:
    def __init__(self, state_dim, low, high, hidden, seed):
        self.policy = GaussianPolicy(state_dim, low, high, hidden, "relu", seed=seed)
        self.critics = CriticPair(state_dim, len(low), hidden, "relu", seed=seed + 1)
        self.q1, self.q2 = self.critics.q1, self.critics.q2
        self.q1_target, self.q2_target = self.critics.q1_target, self.critics.q2_target
        self.adams = [AdamState.for_net(n) for n in (self.q1, self.q2, self.policy.trunk)]

    def update(self, batch, rng):
        c_loss, c_grads = reference_critic_loss(batch, self.critics, self.policy, rng)
        adam_update(self.q1, c_grads[0], self.adams[0], 3e-4)
        adam_update(self.q2, c_grads[1], self.adams[1], 3e-4)
        a_loss, a_grads = reference_actor_loss(batch.s, self.critics, self.policy, rng)
        adam_update(self.policy.trunk, a_grads, self.adams[2], 3e-4)
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            target.flat[...] = 0.995 * target.flat + (1 - 0.995) * online.flat
        return c_loss, a_loss
