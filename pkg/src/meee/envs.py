"""Deterministic continuous-control tasks: a discounted LQR point mass and a
torque-limited pendulum swing-up.

Environments are stateless with respect to the episode: ``step`` is a pure
function of ``(state, action)`` and ``reset`` draws from a caller-owned
generator, so one instance can be shared by training and evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from meee.nn import ContractError


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    has_termination: bool = False

    def __post_init__(self):
        if self.state_dim <= 0 or self.action_dim <= 0 or self.max_episode_steps <= 0:
            raise ContractError("EnvSpec dimensions and episode length must be positive")
        low = np.asarray(self.action_low, dtype=np.float64)
        high = np.asarray(self.action_high, dtype=np.float64)
        if low.shape != (self.action_dim,) or high.shape != (self.action_dim,):
            raise ContractError("action bounds must have shape (action_dim,)")
        if not np.all(low < high):
            raise ContractError("action_low must be strictly below action_high")
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool = False


class Env:
    name = "env"
    spec: EnvSpec
    # closed interval every per-step reward lies in
    reward_range: tuple[float, float]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def termination_predicate(self, state: np.ndarray) -> bool:
        state = np.asarray(state, dtype=np.float64)
        if not np.isfinite(state).all():
            raise ContractError(f"non-finite state passed to termination predicate: {state}")
        return False

    def _check_action(self, action: np.ndarray) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.action_dim,):
            raise ContractError(
                f"action has shape {action.shape}, expected ({self.spec.action_dim},)"
            )
        if np.any(action < self.spec.action_low) or np.any(action > self.spec.action_high):
            raise ContractError(
                f"action {action} outside box [{self.spec.action_low}, {self.spec.action_high}]"
            )
        return action

    def _check_state(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.spec.state_dim,):
            raise ContractError(f"state has shape {state.shape}, expected ({self.spec.state_dim},)")
        return state

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.spec.action_low, self.spec.action_high)


@dataclass(frozen=True)
class LQRParams:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray


class LQREnv(Env):
    """Planar point mass: ``s' = A s + B a``, reward ``-(s'Qs + a'Ra)``.

    States are clipped to ``[-state_bound, state_bound]`` so rewards stay
    bounded; trajectories of any reasonable controller never reach the clip.
    """

    name = "lqr"

    def __init__(
        self,
        params: LQRParams | None = None,
        max_episode_steps: int = 200,
        action_bound: float = 1.0,
        state_bound: float = 2.0,
    ):
        if params is None:
            eye = np.eye(2)
            params = LQRParams(A=eye.copy(), B=eye.copy(), Q=eye.copy(), R=eye.copy())
        self.params = params
        n, m = params.B.shape
        self.state_bound = float(state_bound)
        self.spec = EnvSpec(
            state_dim=n,
            action_dim=m,
            action_low=-action_bound * np.ones(m),
            action_high=action_bound * np.ones(m),
            max_episode_steps=max_episode_steps,
        )
        qmax = np.linalg.eigvalsh(params.Q).max()
        rmax = np.linalg.eigvalsh(params.R).max()
        worst = qmax * n * self.state_bound**2 + rmax * m * action_bound**2
        self.reward_range = (-float(worst), 0.0)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.spec.state_dim)

    def step(self, state, action):
        s = self._check_state(state)
        a = self._check_action(action)
        p = self.params
        reward = -(s @ p.Q @ s + a @ p.R @ a)
        s_next = np.clip(p.A @ s + p.B @ a, -self.state_bound, self.state_bound)
        return s_next, float(reward), False


def angle_normalize(theta: float) -> float:
    """Map an angle to ``(-pi, pi]``."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


class PendulumEnv(Env):
    """Torque-limited pendulum, observed as ``(cos th, sin th, th_dot)``; ``th = 0`` is upright."""

    name = "pendulum"
    max_speed = 8.0
    max_torque = 2.0

    def __init__(
        self,
        max_episode_steps: int = 200,
        g: float = 9.81,
        mass: float = 1.0,
        length: float = 1.0,
        dt: float = 0.05,
    ):
        self.g, self.mass, self.length, self.dt = g, mass, length, dt
        self.spec = EnvSpec(
            state_dim=3,
            action_dim=1,
            action_low=np.array([-self.max_torque]),
            action_high=np.array([self.max_torque]),
            max_episode_steps=max_episode_steps,
        )
        worst = math.pi**2 + 0.1 * self.max_speed**2 + 0.001 * self.max_torque**2
        self.reward_range = (-worst, 0.0)

    @staticmethod
    def observe(theta: float, theta_dot: float) -> np.ndarray:
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        theta = rng.uniform(-math.pi, math.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return self.observe(theta, theta_dot)

    def step(self, state, action):
        s = self._check_state(state)
        u = float(self._check_action(action)[0])
        theta = math.atan2(s[1], s[0])
        theta_dot = float(s[2])
        cost = angle_normalize(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2
        ml2 = self.mass * self.length**2
        acc = 3.0 * self.g / (2.0 * self.length) * math.sin(theta) + 3.0 / ml2 * u
        new_dot = min(max(theta_dot + acc * self.dt, -self.max_speed), self.max_speed)
        new_theta = angle_normalize(theta + new_dot * self.dt)
        return self.observe(new_theta, new_dot), -cost, False


ENVIRONMENTS = {"lqr": LQREnv, "pendulum": PendulumEnv}


def make_env(name: str, max_episode_steps: int = 200) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ContractError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(max_episode_steps=max_episode_steps)


def riccati_residual(params: LQRParams, P: np.ndarray, gamma: float) -> float:
    A, B, Q, R = params.A, params.B, params.Q, params.R
    G = R + gamma * B.T @ P @ B
    rhs = Q + gamma * A.T @ P @ A - gamma**2 * A.T @ P @ B @ np.linalg.solve(G, B.T @ P @ A)
    return float(np.max(np.abs(rhs - P)))


def lqr_optimal_value(
    params: LQRParams, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000
) -> tuple[np.ndarray, np.ndarray]:
    """Discounted LQR by Riccati fixed-point iteration.

    Returns ``(K, P)``: the optimal policy is ``a = -K s`` and the optimal
    discounted return from ``s`` is ``-s' P s``.
    """
    if not 0.0 < gamma < 1.0:
        raise ContractError(f"gamma must lie in (0, 1), got {gamma}")
    A, B, Q, R = params.A, params.B, params.Q, params.R
    P = Q.copy()
    for _ in range(max_iter):
        G = R + gamma * B.T @ P @ B
        K = gamma * np.linalg.solve(G, B.T @ P @ A)
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = Q + gamma * A.T @ P @ A - gamma * A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        if not np.isfinite(P_next).all():
            break
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            K = gamma * np.linalg.solve(R + gamma * B.T @ P @ B, B.T @ P @ A)
            return K, P
        P = P_next
    raise ArithmeticError(f"discounted Riccati iteration did not converge in {max_iter} iterations")


def linear_policy(K: np.ndarray):
    """Wrap ``a = -K s`` as a deterministic policy callable."""
    return lambda s: -K @ s
