"""Short imagined rollouts from real start states, weighted by ensemble confidence."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from meee.buffer import EnvBuffer, ModelBuffer, sample_states
from meee.dynamics import Ensemble, uncertainty_weight
from meee.envs import Env
from meee.nn import ContractError
from meee.sac import GaussianPolicy


@dataclass
class RolloutParams:
    M: int = 10
    k: int = 1
    member_selection: str = "uniform_per_step"

    def __post_init__(self):
        if self.M < 1 or self.k < 1:
            raise ContractError(f"rollout count and horizon must be >= 1, got M={self.M}, k={self.k}")
        if self.member_selection != "uniform_per_step":
            raise ContractError(f"unknown member selection {self.member_selection!r}")


@dataclass
class RolloutNoise:
    """All randomness of one call, indexed by rollout; row ``j`` is rollout ``j``'s stream."""

    starts: np.ndarray  # (M, state_dim)
    policy_z: np.ndarray  # (M, k, action_dim)
    members: np.ndarray  # (M, k)
    model_z: np.ndarray  # (M, k, state_dim + 1)

    @classmethod
    def draw(cls, env_buffer: EnvBuffer, params: RolloutParams, n_members: int, rng: np.random.Generator):
        starts = np.array(sample_states(env_buffer, params.M, rng))
        M, k = params.M, params.k
        return cls(
            starts,
            rng.standard_normal((M, k, env_buffer.action_dim)),
            rng.integers(0, n_members, size=(M, k)),
            rng.standard_normal((M, k, env_buffer.state_dim + 1)),
        )


def _run_chunk(
    ensemble: Ensemble,
    policy: GaussianPolicy,
    noise: RolloutNoise,
    rows: np.ndarray,
    k: int,
    weight_T: float | None,
    env: Env | None,
) -> list[dict]:
    """Advance rollouts ``rows`` in lockstep; every network call is row-exact."""
    n = len(rows)
    traces = [{"s": [], "a": [], "r": [], "s_next": [], "done": [], "w": [], "v": [], "member": []} for _ in rows]
    s = noise.starts[rows].copy()
    active = np.ones(n, dtype=bool)
    for i in range(k):
        live = np.flatnonzero(active)
        if live.size == 0:
            break
        idx = rows[live]
        s_live = s[live]
        a, _ = policy.sample_with_noise(s_live, noise.policy_z[idx, i])
        heads = [m.heads(s_live, a) for m in ensemble.members]
        means = np.stack([h[0] for h in heads])
        logvars = np.stack([h[1] for h in heads])
        variance = ensemble.variance_from_means(means)
        chosen = noise.members[idx, i]
        pick = np.arange(live.size)
        member = ensemble.members[0]
        s_next, r = member.sample_from_heads(s_live, means[chosen, pick], logvars[chosen, pick], noise.model_z[idx, i])
        finite = (
            np.isfinite(s_next).all(axis=1) & np.isfinite(r) & np.isfinite(variance) & np.isfinite(a).all(axis=1)
        )
        weights = np.ones(live.size)
        if weight_T is not None:
            weights[finite] = uncertainty_weight(variance[finite], weight_T)
        for j, row in enumerate(live):
            if not finite[j]:
                active[row] = False
                continue
            done = env.termination_predicate(s_next[j]) if env is not None else False
            w = float(weights[j])
            t = traces[row]
            t["s"].append(s_live[j])
            t["a"].append(a[j])
            t["r"].append(r[j])
            t["s_next"].append(s_next[j])
            t["done"].append(done)
            t["w"].append(w)
            t["v"].append(variance[j])
            t["member"].append(int(chosen[j]))
            s[row] = s_next[j]
            if done:
                active[row] = False
    return traces


def generate_rollouts(
    ensemble: Ensemble,
    policy: GaussianPolicy,
    env_buffer: EnvBuffer,
    model_buffer: ModelBuffer,
    params: RolloutParams,
    weight_T: float | None,
    rng: np.random.Generator,
    env: Env | None = None,
    workers: int = 1,
    stats: dict | None = None,
) -> int:
    """Run ``M`` rollouts of up to ``k`` imagined steps and store them in ``model_buffer``.

    ``weight_T=None`` stores every transition with weight 1. Rollouts stop at
    the first non-finite value or terminal state. Storage order is rollout by
    rollout regardless of ``workers``. Returns the number stored.
    """
    if env_buffer.size == 0:
        raise ContractError("cannot start rollouts from an empty environment buffer")
    noise = RolloutNoise.draw(env_buffer, params, len(ensemble), rng)
    all_rows = np.arange(params.M)
    if workers > 1:
        chunks = [c for c in np.array_split(all_rows, workers) if c.size]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(lambda c: _run_chunk(ensemble, policy, noise, c, params.k, weight_T, env), chunks)
            traces = [t for part in parts for t in part]
    else:
        traces = _run_chunk(ensemble, policy, noise, all_rows, params.k, weight_T, env)
    stored = [t for t in traces if t["r"]]
    if not stored:
        return 0
    block = {key: np.concatenate([np.asarray(t[key]) for t in stored]) for key in ("r", "done", "w", "v", "member")}
    for key in ("s", "a", "s_next"):
        block[key] = np.concatenate([np.stack(t[key]) for t in stored])
    model_buffer.push_arrays(block["s"], block["a"], block["r"], block["s_next"], block["done"], block["w"])
    if stats is not None:
        stats.setdefault("weights", []).append(block["w"])
        stats.setdefault("variances", []).append(block["v"])
        stats.setdefault("members", []).append(block["member"])
    return len(block["r"])
