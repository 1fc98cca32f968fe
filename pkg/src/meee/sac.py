"""Soft actor-critic with per-sample loss weights.

Each minibatch element carries a weight ``w`` that scales its contribution to
both the critic and the actor loss; ``w = 1`` everywhere recovers plain SAC.
All gradients are computed by hand through :mod:`meee.nn`.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from meee.buffer import WEIGHT_MAX, WEIGHT_MIN, Batch
from meee.checkpoint import read_flat, write_flat
from meee.nn import AdamState, ContractError, DenseNet, adam_update

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
SQUASH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class GaussianPolicy:
    """Tanh-squashed diagonal Gaussian rescaled to the action box."""

    def __init__(
        self,
        state_dim: int,
        action_low: np.ndarray,
        action_high: np.ndarray,
        hidden: Sequence[int] = (64, 64),
        activation: str = "relu",
        seed: int = 0,
    ):
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.state_dim = state_dim
        self.action_dim = len(self.action_low)
        self.scale = (self.action_high - self.action_low) / 2.0
        self.offset = (self.action_high + self.action_low) / 2.0
        self.log_scale_sum = float(np.log(self.scale).sum())
        self.trunk = DenseNet([state_dim, *hidden, 2 * self.action_dim], activation, seed=seed)

    def _check_state(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.state_dim:
            raise ContractError(f"state dimension {s.shape[-1]} != policy state dimension {self.state_dim}")
        return s

    def _split(self, out: np.ndarray):
        d = self.action_dim
        mean = out[..., :d]
        raw = out[..., d:]
        return mean, raw, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    def squash(self, u: np.ndarray) -> np.ndarray:
        return self.offset + self.scale * np.clip(np.tanh(u), -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)

    def _log_prob(self, u: np.ndarray, z: np.ndarray, log_std: np.ndarray) -> np.ndarray:
        per_dim = -0.5 * z * z - log_std - HALF_LOG_2PI - _log1m_tanh2(u)
        return per_dim.sum(axis=-1) - self.log_scale_sum

    def sample_with_noise(self, s: np.ndarray, z: np.ndarray, rows: bool = True):
        """Action and log-density for given standard-normal noise ``z``."""
        s = self._check_state(s)
        out = self.trunk.forward_rows(s) if rows else self.trunk.forward(s)
        mean, _, log_std = self._split(out)
        u = mean + np.exp(log_std) * z
        return self.squash(u), self._log_prob(u, z, log_std)

    def pre_squash(self, s: np.ndarray, z: np.ndarray) -> np.ndarray:
        mean, _, log_std = self._split(self.trunk.forward_rows(self._check_state(s)))
        return mean + np.exp(log_std) * z

    def mode(self, s: np.ndarray) -> np.ndarray:
        """Deterministic action: the squashed Gaussian mean."""
        mean, _, _ = self._split(self.trunk.forward_rows(self._check_state(s)))
        return self.squash(mean)

    def copy(self) -> "GaussianPolicy":
        new = object.__new__(GaussianPolicy)
        new.__dict__.update(self.__dict__)
        new.trunk = self.trunk.copy()
        return new

    def save(self, path: str | Path) -> None:
        header = {
            "kind": "policy",
            "state_dim": self.state_dim,
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "layer_sizes": self.trunk.layer_sizes,
            "activation": self.trunk.hidden_activation,
            "nets": ["policy"],
        }
        write_flat(path, header, self.trunk.get_flat())

    @classmethod
    def load(cls, path: str | Path) -> "GaussianPolicy":
        header, values = read_flat(path)
        if header.get("kind") != "policy":
            raise ValueError(f"{path}: not a policy checkpoint")
        pol = cls(
            header["state_dim"],
            np.array(header["action_low"]),
            np.array(header["action_high"]),
            hidden=header["layer_sizes"][1:-1],
            activation=header["activation"],
        )
        pol.trunk.set_flat(values)
        return pol


def sample_action(policy: GaussianPolicy, state: np.ndarray, rng: np.random.Generator):
    """``(action, log_prob)`` for one state or a batch of states."""
    state = np.asarray(state, dtype=np.float64)
    z = rng.standard_normal(state.shape[:-1] + (policy.action_dim,))
    a, logp = policy.sample_with_noise(state, z)
    return a, (float(logp) if np.ndim(logp) == 0 else logp)


class CriticPair:
    """Twin Q-networks with Polyak-averaged targets; ``single_critic`` uses ``q1`` only."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden: Sequence[int] = (64, 64),
        activation: str = "relu",
        seed: int = 0,
        gamma: float = 0.99,
        alpha: float = 0.2,
        polyak: float = 0.995,
        single_critic: bool = False,
    ):
        if not 0.0 <= gamma < 1.0:
            raise ContractError(f"gamma must lie in [0, 1), got {gamma}")
        if not 0.0 <= polyak <= 1.0:
            raise ContractError(f"polyak must lie in [0, 1], got {polyak}")
        if alpha < 0:
            raise ContractError(f"alpha must be nonnegative, got {alpha}")
        sizes = [state_dim + action_dim, *hidden, 1]
        self.state_dim = state_dim
        self.q1 = DenseNet(sizes, activation, seed=seed)
        self.q2 = DenseNet(sizes, activation, seed=seed + 1)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.gamma = gamma
        self.alpha = alpha
        self.polyak = polyak
        self.single_critic = single_critic

    def online(self) -> list[DenseNet]:
        return [self.q1] if self.single_critic else [self.q1, self.q2]

    def targets(self) -> list[DenseNet]:
        return [self.q1_target] if self.single_critic else [self.q1_target, self.q2_target]

    def q_value(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Conservative online value (min over the twins), row-exact."""
        x = np.concatenate([s, a], axis=-1)
        qs = [net.forward_rows(x)[..., 0] for net in self.online()]
        return qs[0] if len(qs) == 1 else np.minimum(qs[0], qs[1])


def td_target(batch: Batch, critics: CriticPair, policy: GaussianPolicy, rng: np.random.Generator) -> np.ndarray:
    """Soft bootstrap target ``r + gamma * (min target Q(s', a') - alpha log pi(a'|s'))``.

    Terminal rows get ``r`` and their ``s'`` is never evaluated.
    """
    n = len(batch)
    z = rng.standard_normal((n, policy.action_dim))
    y = np.array(batch.r, dtype=np.float64)
    live = ~np.asarray(batch.done, dtype=bool)
    if critics.gamma == 0.0 or not live.any():
        return y
    s_next = batch.s_next[live]
    a_next, logp = policy.sample_with_noise(s_next, z[live], rows=False)
    x = np.concatenate([s_next, a_next], axis=1)
    qs = [net.forward(x)[:, 0] for net in critics.targets()]
    q = qs[0] if len(qs) == 1 else np.minimum(qs[0], qs[1])
    y[live] = y[live] + critics.gamma * (q - critics.alpha * logp)
    return y


def _check_weights(weights: np.ndarray, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ContractError(f"expected {n} weights, got shape {w.shape}")
    if not (np.isfinite(w).all() and np.all((w >= WEIGHT_MIN) & (w <= WEIGHT_MAX))):
        raise ContractError("loss weights must lie in [0.5, 1.0]")
    return w


def critic_loss(
    batch: Batch,
    weights: np.ndarray,
    critics: CriticPair,
    policy: GaussianPolicy,
    rng: np.random.Generator,
) -> tuple[float, list[list[np.ndarray]]]:
    """Weighted squared Bellman residual summed over the critics, averaged over the batch.

    Returns the loss and one gradient list per online critic.
    """
    n = len(batch)
    w = _check_weights(weights, n)
    y = td_target(batch, critics, policy, rng)
    x = np.concatenate([batch.s, batch.a], axis=1)
    per_sample = np.zeros(n)
    grads = []
    for net in critics.online():
        q, acts = net.forward_cache(x)
        diff = q[:, 0] - y
        per_sample = per_sample + diff * diff
        g, _ = net.backward(acts, (2.0 * w * diff / n)[:, None], need_input=False)
        grads.append(g)
    return float(np.mean(w * per_sample)), grads


def actor_loss(
    batch_states: np.ndarray,
    weights: np.ndarray,
    critics: CriticPair,
    policy: GaussianPolicy,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    """Weighted ``alpha * log pi(a|s) - min Q(s, a)`` with ``a`` reparametrized.

    Gradients reach the policy through the action; critic parameters are untouched.
    """
    s = np.asarray(batch_states, dtype=np.float64)
    n = len(s)
    w = _check_weights(weights, n)
    d = policy.action_dim
    z = rng.standard_normal((n, d))
    out, p_acts = policy.trunk.forward_cache(s)
    mean, raw, log_std = policy._split(out)
    std = np.exp(log_std)
    u = mean + std * z
    t = np.tanh(u)
    a = policy.squash(u)
    logp = policy._log_prob(u, z, log_std)
    x = np.concatenate([s, a], axis=1)
    nets = critics.online()
    cached = [net.forward_cache(x) for net in nets]
    if len(nets) == 1:
        q = cached[0][0][:, 0]
        picks = [np.ones(n)]
    else:
        q1, q2 = cached[0][0][:, 0], cached[1][0][:, 0]
        first = q1 <= q2
        q = np.where(first, q1, q2)
        picks = [first.astype(np.float64), (~first).astype(np.float64)]
    alpha = critics.alpha
    loss = float(np.mean(w * (alpha * logp - q)))
    # weights multiply first so that w = 1 reproduces the unweighted arithmetic exactly
    entropy_coef = (w * alpha / n)[:, None]
    d_a = np.zeros((n, d))
    for net, (_, acts), pick in zip(nets, cached, picks):
        g_in = net.input_grad(acts, (-(w * pick) / n)[:, None])
        d_a = d_a + g_in[:, critics.state_dim :]
    unclipped = np.abs(t) < 1.0 - SQUASH_EPS
    d_u = d_a * policy.scale * (1.0 - t * t) * unclipped + entropy_coef * 2.0 * t
    d_mean = d_u
    d_log_std = (d_u * std * z - entropy_coef) * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
    grads, _ = policy.trunk.backward(p_acts, np.concatenate([d_mean, d_log_std], axis=1), need_input=False)
    return loss, grads


def update_targets(critics: CriticPair) -> None:
    rho = critics.polyak
    for online, target in ((critics.q1, critics.q1_target), (critics.q2, critics.q2_target)):
        target.flat[...] = rho * target.flat + (1.0 - rho) * online.flat


class SACAgent:
    """Policy, twin critics and their optimizers; :meth:`update` is one gradient step."""

    def __init__(
        self,
        state_dim: int,
        action_low: np.ndarray,
        action_high: np.ndarray,
        hidden: Sequence[int] = (64, 64),
        activation: str = "relu",
        seed: int = 0,
        gamma: float = 0.99,
        alpha: float = 0.2,
        polyak: float = 0.995,
        actor_lr: float = 3e-4,
        critic_lr: float = 3e-4,
        single_critic: bool = False,
        auto_entropy: bool = False,
        alpha_lr: float = 3e-4,
    ):
        self.policy = GaussianPolicy(state_dim, action_low, action_high, hidden, activation, seed=seed)
        self.critics = CriticPair(
            state_dim, len(self.policy.action_low), hidden, activation, seed=seed + 1,
            gamma=gamma, alpha=alpha, polyak=polyak, single_critic=single_critic,
        )
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.pi_adam = AdamState.for_net(self.policy.trunk)
        self.q_adams = [AdamState.for_net(self.critics.q1), AdamState.for_net(self.critics.q2)]
        self.auto_entropy = auto_entropy
        self.alpha_lr = alpha_lr
        self.target_entropy = -float(self.policy.action_dim)
        self.log_alpha = math.log(alpha) if alpha > 0 else -20.0
        self._alpha_m = self._alpha_v = 0.0
        self._alpha_t = 0

    def update(self, batch: Batch, weights: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
        """Critic step, actor step, target update; returns ``(critic_loss, actor_loss)``.

        Nothing is applied if either loss is non-finite.
        """
        c_loss, c_grads = critic_loss(batch, weights, self.critics, self.policy, rng)
        if not np.isfinite(c_loss):
            return c_loss, float("nan")
        for net, g, st in zip(self.critics.online(), c_grads, self.q_adams):
            adam_update(net, g, st, self.critic_lr)
        a_loss, a_grads = actor_loss(batch.s, weights, self.critics, self.policy, rng)
        if not np.isfinite(a_loss):
            return c_loss, a_loss
        adam_update(self.policy.trunk, a_grads, self.pi_adam, self.actor_lr)
        if self.auto_entropy:
            self._tune_alpha(batch.s, weights, rng)
        update_targets(self.critics)
        return c_loss, a_loss

    def _tune_alpha(self, s: np.ndarray, weights: np.ndarray, rng: np.random.Generator) -> None:
        _, logp = sample_action(self.policy, s, rng)
        # d/d(log alpha) of mean(-log_alpha * (logp + target_entropy))
        g = -float(np.mean(weights * (logp + self.target_entropy)))
        self._alpha_t += 1
        self._alpha_m = 0.9 * self._alpha_m + 0.1 * g
        self._alpha_v = 0.999 * self._alpha_v + 0.001 * g * g
        m_hat = self._alpha_m / (1 - 0.9**self._alpha_t)
        v_hat = self._alpha_v / (1 - 0.999**self._alpha_t)
        self.log_alpha -= self.alpha_lr * m_hat / (math.sqrt(v_hat) + 1e-8)
        self.critics.alpha = math.exp(self.log_alpha)
