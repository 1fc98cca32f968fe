"""Training loop: real steps with optional optimistic exploration, ensemble
training once per epoch, imagined rollouts after every real step, and weighted
SAC updates on the imagined data.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from meee.buffer import Batch, EnvBuffer, ModelBuffer
from meee.config import ExperimentConfig, validate
from meee.dynamics import Ensemble, train_ensemble
from meee.envs import Env, Transition, make_env
from meee.explore import ExplorationParams, select_action
from meee.rollout import RolloutParams, generate_rollouts
from meee.sac import GaussianPolicy, SACAgent, sample_action

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "epoch",
    "total_env_steps",
    "eval_return_mean",
    "eval_return_std",
    "mean_model_loss",
    "mean_rollout_weight",
    "mean_ensemble_variance",
    "wall_clock_seconds",
]


class DivergenceError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    epoch: int
    total_env_steps: int
    eval_return_mean: float
    eval_return_std: float
    mean_model_loss: float
    mean_rollout_weight: float
    mean_ensemble_variance: float
    wall_clock_seconds: float

    def as_list(self) -> list:
        return [getattr(self, k) for k in METRICS_HEADER]


def sub_seed(seed: int, name: str) -> int:
    """Independent 63-bit seed for a named random stream."""
    state = np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def write_metrics(rows: list[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([v if isinstance(v, int) else repr(float(v)) for v in row.as_list()])


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [
            MetricsRow(int(r[0]), int(r[1]), *(float(x) for x in r[2:]))
            for r in reader
        ]


def evaluate_policy(
    policy: GaussianPolicy | Callable[[np.ndarray], np.ndarray],
    env: Env,
    episodes: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Undiscounted return statistics of the deterministic policy over full episodes."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    act = policy.mode if isinstance(policy, GaussianPolicy) else policy
    returns = []
    for _ in range(episodes):
        s = env.reset(rng)
        total = 0.0
        for _ in range(env.spec.max_episode_steps):
            a = env.clip_action(np.asarray(act(s), dtype=np.float64))
            s, r, done = env.step(s, a)
            total += r
            if done:
                break
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


@dataclass
class RunResult:
    rows: list[MetricsRow]
    summary: dict
    agent: SACAgent
    ensemble: Ensemble | None
    env_buffer: EnvBuffer
    model_buffer: ModelBuffer | None
    weights_seen: list = field(default_factory=list)


def _nanmean(chunks: list[np.ndarray]) -> float:
    if not chunks:
        return float("nan")
    return float(np.mean(np.concatenate(chunks)))


def run_experiment(
    config: ExperimentConfig,
    env: Env | None = None,
    write: bool = True,
    keep_weights: bool = False,
) -> RunResult:
    """Run one experiment; ``env`` overrides the environment named in the config."""
    cfg = validate(config)
    env = env or make_env(cfg.env_name, cfg.max_episode_steps)
    eval_env = make_env(cfg.env_name, cfg.max_episode_steps) if env.name in ("lqr", "pendulum") else env
    spec = env.spec
    out_dir = Path(cfg.out_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng_env = np.random.default_rng(sub_seed(cfg.seed, "env"))
    rng_act = np.random.default_rng(sub_seed(cfg.seed, "act"))
    rng_train = np.random.default_rng(sub_seed(cfg.seed, "agent-train"))
    rng_model = np.random.default_rng(sub_seed(cfg.seed, "model-train"))
    rng_roll = np.random.default_rng(sub_seed(cfg.seed, "rollouts"))
    eval_seed = sub_seed(cfg.seed, "eval")

    agent = SACAgent(
        spec.state_dim, spec.action_low, spec.action_high,
        hidden=cfg.hidden_sizes, activation=cfg.activation, seed=sub_seed(cfg.seed, "agent-init") % 2**31,
        gamma=cfg.gamma, alpha=cfg.alpha, polyak=cfg.polyak, actor_lr=cfg.actor_lr, critic_lr=cfg.critic_lr,
        single_critic=cfg.single_critic, auto_entropy=cfg.auto_entropy,
    )
    env_buffer = EnvBuffer(cfg.env_buffer_capacity, spec.state_dim, spec.action_dim)
    ensemble = model_buffer = None
    if cfg.model_based:
        ensemble = Ensemble(
            spec.state_dim, spec.action_dim, cfg.ensemble_size,
            base_seed=sub_seed(cfg.seed, "model-init") % 2**31,
            hidden=cfg.hidden_sizes, activation=cfg.activation, learning_rate=cfg.model_lr,
            loss=cfg.model_loss, include_reward=cfg.variance_include_reward,
        )
        model_buffer = ModelBuffer(cfg.resolved_model_buffer_capacity(), spec.state_dim, spec.action_dim)
    psi = np.broadcast_to(np.asarray(cfg.psi, dtype=np.float64), (spec.action_dim,)).copy()
    explore = ExplorationParams(cfg.lam, psi, cfg.candidates, cfg.include_base)
    weight_T = cfg.weight_temperature if cfg.weighted else None

    rows: list[MetricsRow] = []
    total_steps = eval_steps = 0
    model_trained = False
    last_model_loss = float("nan")
    window_weights: list[np.ndarray] = []
    window_var: list[np.ndarray] = []
    weights_seen: list[np.ndarray] = []
    bad_updates = 0
    t0 = time.perf_counter()
    n_real = int(round(cfg.real_data_fraction * cfg.batch_size))

    state = env.reset(rng_env)
    ep_t = 0
    lo, hi = env.reward_range

    for epoch in range(cfg.n_epochs):
        if cfg.model_based and total_steps >= cfg.warmup_steps and env_buffer.size > 0:
            # the first training may see fewer transitions than one minibatch
            model_batch = min(cfg.model_batch_size, env_buffer.size)
            traces = train_ensemble(ensemble, env_buffer, cfg.model_train_epochs, model_batch, rng_model, cfg.workers)
            last_model_loss = float(np.mean([t[-1] for t in traces])) if cfg.model_train_epochs else float("nan")
            model_trained = True
        rollout_params = RolloutParams(cfg.model_rollouts_per_step, cfg.horizon_at(epoch))

        for _ in range(cfg.steps_per_epoch):
            if total_steps < cfg.warmup_steps:
                action = rng_act.uniform(spec.action_low, spec.action_high)
            elif cfg.explore and model_trained:
                action = select_action(state, agent.policy, agent.critics, ensemble, explore, rng_act)
            else:
                action, _ = sample_action(agent.policy, state, rng_act)
            s_next, reward, done = env.step(state, action)
            if not lo - 1e-9 <= reward <= hi + 1e-9:
                raise AssertionError(f"reward {reward} outside the task's bounded range [{lo}, {hi}]")
            env_buffer.push(Transition(state, action, reward, s_next, done))
            total_steps += 1
            ep_t += 1
            state = s_next
            if done or ep_t >= spec.max_episode_steps:
                state = env.reset(rng_env)
                ep_t = 0

            if total_steps >= cfg.warmup_steps:
                train_ready = False
                if cfg.model_based:
                    if model_trained:
                        stats: dict = {}
                        generate_rollouts(
                            ensemble, agent.policy, env_buffer, model_buffer, rollout_params, weight_T,
                            rng_roll, env, cfg.workers, stats,
                        )
                        if stats:
                            window_weights.extend(stats["weights"])
                            window_var.extend(stats["variances"])
                            if keep_weights:
                                weights_seen.extend(stats["weights"])
                        train_ready = model_buffer.size > 0
                else:
                    train_ready = env_buffer.size >= cfg.batch_size
                if train_ready:
                    for _ in range(cfg.gradient_updates_per_step):
                        batch = _training_batch(cfg, env_buffer, model_buffer, n_real, rng_train)
                        c_loss, a_loss = agent.update(batch, batch.w, rng_train)
                        if math.isfinite(c_loss) and math.isfinite(a_loss):
                            bad_updates = 0
                        else:
                            bad_updates += 1
                            if bad_updates >= cfg.divergence_patience:
                                raise DivergenceError(
                                    f"non-finite agent loss for {bad_updates} consecutive updates "
                                    f"at env step {total_steps} (critic={c_loss}, actor={a_loss})"
                                )

            if total_steps % cfg.eval_interval == 0:
                mean, std = evaluate_policy(agent.policy, eval_env, cfg.eval_episodes, np.random.default_rng(eval_seed))
                eval_steps += cfg.eval_episodes * spec.max_episode_steps
                wall = time.perf_counter() - t0 if cfg.log_wall_clock else 0.0
                rows.append(MetricsRow(
                    epoch, total_steps, mean, std, last_model_loss,
                    _nanmean(window_weights), _nanmean(window_var), wall,
                ))
                window_weights, window_var = [], []
                log.info("epoch %d step %d return %.3f +- %.3f", epoch, total_steps, mean, std)

    summary = {
        "variant": cfg.variant,
        "env_name": cfg.env_name,
        "seed": cfg.seed,
        "total_env_steps": total_steps,
        "eval_env_steps": eval_steps,
        "final_eval_return_mean": rows[-1].eval_return_mean if rows else None,
        "final_eval_return_std": rows[-1].eval_return_std if rows else None,
        "best_eval_return_mean": max((r.eval_return_mean for r in rows), default=None),
        "config": cfg.to_dict(),
    }
    if write:
        write_metrics(rows, out_dir / "metrics.csv")
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        agent.policy.save(out_dir / "policy.ckpt")
        if ensemble is not None:
            ensemble.save(out_dir / "ensemble.ckpt")
    return RunResult(rows, summary, agent, ensemble, env_buffer, model_buffer, weights_seen)


def _training_batch(
    cfg: ExperimentConfig,
    env_buffer: EnvBuffer,
    model_buffer: ModelBuffer | None,
    n_real: int,
    rng: np.random.Generator,
) -> Batch:
    if not cfg.model_based:
        return env_buffer.sample_arrays(cfg.batch_size, rng)
    n_model = cfg.batch_size - n_real
    parts = []
    if n_model:
        parts.append(model_buffer.sample_arrays(n_model, rng))
    if n_real:
        parts.append(env_buffer.sample_arrays(n_real, rng))
    return parts[0] if len(parts) == 1 else Batch.concat(parts)
