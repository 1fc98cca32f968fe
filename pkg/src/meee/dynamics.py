"""Ensemble of Gaussian one-step dynamics models and its disagreement signal.

Each member maps ``(s, a)`` to a diagonal Gaussian over the standardized
target ``(s' - s, r)``. Inputs and targets are standardized with statistics
of the real-transition buffer, shared by all members. Disagreement is the
unbiased variance of the members' mean predictions in standardized units,
averaged over output dimensions.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from meee.buffer import EnvBuffer
from meee.checkpoint import read_flat, write_flat
from meee.nn import AdamState, ContractError, DenseNet, adam_update

LOGVAR_MIN, LOGVAR_MAX = -10.0, 4.0
# starting log-variance bias per loss: the sample-MSE optimum is zero variance,
# so start near it instead of waiting for a slow descent from 0
INIT_LOGVAR = {"mse": -8.0, "nll": 0.0}
STD_FLOOR = 1e-6


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def fit(self, data: np.ndarray) -> None:
        self.mean = data.mean(axis=0)
        self.std = np.maximum(data.std(axis=0), STD_FLOOR)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


class ProbabilisticModel:
    """One ensemble member; the trunk emits ``[mean | log-variance]`` of the target."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        init_seed: int,
        hidden: Sequence[int] = (64, 64),
        activation: str = "relu",
        input_norm: Normalizer | None = None,
        target_norm: Normalizer | None = None,
        init_logvar: float = 0.0,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.out_dim = state_dim + 1
        self.init_seed = int(init_seed)
        self.trunk = DenseNet(
            [state_dim + action_dim, *hidden, 2 * self.out_dim], activation, seed=init_seed
        )
        self.trunk.biases[-1][self.out_dim :] += init_logvar
        self.adam = AdamState.for_net(self.trunk)
        self.input_norm = input_norm or Normalizer.identity(state_dim + action_dim)
        self.target_norm = target_norm or Normalizer.identity(self.out_dim)

    def _inputs(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim:
            raise ContractError(
                f"state/action dims {s.shape[-1]}/{a.shape[-1]} do not match model "
                f"{self.state_dim}/{self.action_dim}"
            )
        return self.input_norm.normalize(np.concatenate([s, a], axis=-1))

    def heads(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Standardized mean and clamped log-variance; rows are computed independently."""
        out = self.trunk.forward_rows(self._inputs(s, a))
        d = self.out_dim
        return out[..., :d], np.clip(out[..., d:], LOGVAR_MIN, LOGVAR_MAX)

    def sample_from_heads(
        self, s: np.ndarray, mean_n: np.ndarray, logvar: np.ndarray, z: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        y = self.target_norm.denormalize(mean_n + np.exp(0.5 * logvar) * z)
        return s + y[..., : self.state_dim], y[..., self.state_dim]


def predict(
    model: ProbabilisticModel, s: np.ndarray, a: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float | np.ndarray]:
    """Draw ``(s', r)`` from the member's Gaussian; ``s' = s + delta``."""
    s = np.asarray(s, dtype=np.float64)
    mean_n, logvar = model.heads(s, a)
    z = rng.standard_normal(mean_n.shape)
    s_next, r = model.sample_from_heads(s, mean_n, logvar, z)
    if not (np.isfinite(s_next).all() and np.isfinite(r).all()):
        raise FloatingPointError(f"model {model.init_seed} produced a non-finite prediction")
    return s_next, (float(r) if np.ndim(r) == 0 else r)


def predict_mean(model: ProbabilisticModel, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Mean of ``(s' - s, r)`` in raw units."""
    mean_n, _ = model.heads(s, a)
    return model.target_norm.denormalize(mean_n)


class Ensemble:
    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        size: int = 5,
        base_seed: int = 0,
        hidden: Sequence[int] = (64, 64),
        activation: str = "relu",
        learning_rate: float = 1e-3,
        loss: str = "mse",
        include_reward: bool = True,
        seeds: Sequence[int] | None = None,
    ):
        if size < 2:
            raise ContractError(f"ensemble needs at least 2 members, got {size}")
        if loss not in ("mse", "nll"):
            raise ContractError(f"unknown model loss {loss!r}")
        seeds = list(seeds) if seeds is not None else [base_seed + i for i in range(size)]
        if len(seeds) != size or len(set(seeds)) != size:
            raise ContractError(f"need {size} distinct member seeds, got {seeds}")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = list(hidden)
        self.activation = activation
        self.learning_rate = learning_rate
        self.loss = loss
        self.include_reward = include_reward
        self.input_norm = Normalizer.identity(state_dim + action_dim)
        self.target_norm = Normalizer.identity(state_dim + 1)
        self.members = [
            ProbabilisticModel(
                state_dim, action_dim, sd, hidden, activation, self.input_norm, self.target_norm,
                INIT_LOGVAR[loss],
            )
            for sd in seeds
        ]

    def __len__(self) -> int:
        return len(self.members)

    def member_means(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Standardized mean predictions, shape ``(I, ..., out_dim)``."""
        return np.stack([m.heads(s, a)[0] for m in self.members])

    def variance_from_means(self, means: np.ndarray) -> np.ndarray:
        if not self.include_reward:
            means = means[..., : self.state_dim]
        return disagreement(means)

    def save(self, path: str | Path) -> None:
        header = {
            "kind": "ensemble",
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "ensemble_size": len(self),
            "seeds": [m.init_seed for m in self.members],
            "layer_sizes": self.members[0].trunk.layer_sizes,
            "activation": self.activation,
            "loss": self.loss,
            "include_reward": self.include_reward,
            "nets": ["input_mean", "input_std", "target_mean", "target_std"]
            + [f"member_{i}" for i in range(len(self))],
        }
        values = np.concatenate(
            [self.input_norm.mean, self.input_norm.std, self.target_norm.mean, self.target_norm.std]
            + [m.trunk.get_flat() for m in self.members]
        )
        write_flat(path, header, values)

    @classmethod
    def load(cls, path: str | Path) -> "Ensemble":
        header, values = read_flat(path)
        if header.get("kind") != "ensemble":
            raise ValueError(f"{path}: not an ensemble checkpoint")
        sd, ad = header["state_dim"], header["action_dim"]
        ens = cls(
            sd,
            ad,
            header["ensemble_size"],
            hidden=header["layer_sizes"][1:-1],
            activation=header["activation"],
            loss=header["loss"],
            include_reward=header["include_reward"],
            seeds=header["seeds"],
        )
        i = 0
        for arr in (ens.input_norm.mean, ens.input_norm.std, ens.target_norm.mean, ens.target_norm.std):
            arr[...] = values[i : i + arr.size]
            i += arr.size
        for m in ens.members:
            n = m.trunk.n_params()
            m.trunk.set_flat(values[i : i + n])
            i += n
        return ens


def disagreement(means: np.ndarray) -> np.ndarray:
    """Unbiased across-member variance (axis 0), averaged over the last axis."""
    n = means.shape[0]
    if n < 2:
        raise ContractError("variance across members needs at least 2 members")
    centre = means.mean(axis=0)
    var = ((means - centre) ** 2).sum(axis=0) / (n - 1)
    return var.mean(axis=-1)


def ensemble_variance(ensemble: Ensemble, s: np.ndarray, a: np.ndarray) -> float | np.ndarray:
    """Disagreement of member means at ``(s, a)``; a float for a single pair."""
    v = ensemble.variance_from_means(ensemble.member_means(s, a))
    return float(v) if np.ndim(v) == 0 else v


def uncertainty_weight(variance, temperature: float):
    """``sigmoid(-variance * temperature) + 0.5``; lies in ``[0.5, 1]`` and equals 1 at zero."""
    v = np.asarray(variance, dtype=np.float64)
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if np.any(v < 0) or np.any(np.isnan(v)):
        raise ContractError(f"variance must be nonnegative, got {variance}")
    x = v * temperature
    # sigmoid(-x) for x >= 0 without overflow
    e = np.exp(-x)
    w = e / (1.0 + e) + 0.5
    return float(w) if w.ndim == 0 else w


def model_loss(
    model: ProbabilisticModel,
    x_norm: np.ndarray,
    y_norm: np.ndarray,
    z: np.ndarray,
    kind: str = "mse",
) -> tuple[float, list[np.ndarray]]:
    """Loss and trunk gradients on a standardized minibatch.

    ``mse``: mean over the batch of ``||y - (mu + sigma*z)||^2`` with the
    reparametrized sample. ``nll``: mean Gaussian negative log-likelihood
    (constant dropped).
    """
    out, acts = model.trunk.forward_cache(x_norm)
    d = model.out_dim
    n = len(x_norm)
    mu = out[:, :d]
    raw_lv = out[:, d:]
    lv = np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
    inside = (raw_lv > LOGVAR_MIN) & (raw_lv < LOGVAR_MAX)
    if kind == "mse":
        sigma = np.exp(0.5 * lv)
        err = y_norm - (mu + sigma * z)
        loss = float((err * err).sum() / n)
        d_mu = -2.0 * err / n
        d_lv = d_mu * z * sigma * 0.5
    else:
        inv = np.exp(-lv)
        diff = y_norm - mu
        loss = float(0.5 * (diff * diff * inv + lv).sum() / n)
        d_mu = -diff * inv / n
        d_lv = 0.5 * (1.0 - diff * diff * inv) / n
    upstream = np.concatenate([d_mu, d_lv * inside], axis=1)
    grads, _ = model.trunk.backward(acts, upstream, need_input=False)
    return loss, grads


def training_arrays(ensemble: Ensemble, buffer: EnvBuffer) -> tuple[np.ndarray, np.ndarray]:
    """Refit the shared normalizers on the buffer and return standardized (inputs, targets)."""
    b = buffer.arrays()
    x = np.concatenate([b.s, b.a], axis=1)
    y = np.concatenate([b.s_next - b.s, b.r[:, None]], axis=1)
    ensemble.input_norm.fit(x)
    ensemble.target_norm.fit(y)
    return ensemble.input_norm.normalize(x), ensemble.target_norm.normalize(y)


def train_member(
    model: ProbabilisticModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    seed,
    learning_rate: float,
    kind: str,
) -> list[float]:
    rng = np.random.default_rng(seed)
    n = len(x)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            z = rng.standard_normal((len(idx), model.out_dim))
            loss, grads = model_loss(model, x[idx], y[idx], z, kind)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss while training ensemble member {model.init_seed}")
            adam_update(model.trunk, grads, model.adam, learning_rate)
            total += loss * len(idx)
        trace.append(total / n)
    return trace


def train_ensemble(
    ensemble: Ensemble,
    env_buffer: EnvBuffer,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> list[list[float]]:
    """Train every member separately on the real buffer; returns per-member epoch-mean losses.

    Member ``i`` draws minibatch order and noise from its own stream seeded by
    ``(base, i)``, so threaded and sequential training give identical results.
    """
    if env_buffer.size < batch_size:
        raise ContractError(f"buffer holds {env_buffer.size} transitions, need >= batch_size={batch_size}")
    x, y = training_arrays(ensemble, env_buffer)
    base = int(rng.integers(2**63 - 1))

    def job(i: int) -> list[float]:
        m = ensemble.members[i]
        return train_member(m, x, y, epochs, batch_size, (base, i), ensemble.learning_rate, ensemble.loss)

    idx = range(len(ensemble))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, idx))
    return [job(i) for i in idx]
