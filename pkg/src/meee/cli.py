"""Command line entry point: ``meee run`` trains one experiment, ``meee eval`` scores a saved policy."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from meee.config import VARIANTS, ConfigError, config_from_dict, load_config
from meee.envs import ENVIRONMENTS, make_env
from meee.runner import DivergenceError, evaluate_policy, run_experiment
from meee.sac import GaussianPolicy

log = logging.getLogger("meee")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meee", description="Train or evaluate model-based agents on the toy tasks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one experiment and write metrics, summary and checkpoints")
    run.add_argument("--config", help="flat TOML config; omitted keys take the environment defaults")
    run.add_argument("--seed", type=int)
    run.add_argument("--variant", choices=VARIANTS)
    run.add_argument("--env", choices=sorted(ENVIRONMENTS))
    run.add_argument("--out", help="output directory")

    ev = sub.add_parser("eval", help="evaluate a saved policy with its deterministic action")
    ev.add_argument("--checkpoint", required=True, help="policy.ckpt written by a run")
    ev.add_argument("--env", required=True, choices=sorted(ENVIRONMENTS))
    ev.add_argument("--episodes", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--max-episode-steps", type=int, default=200)
    return parser


def _resolve_config(args: argparse.Namespace):
    overrides = {"env_name": args.env, "seed": args.seed, "variant": args.variant, "out_dir": args.out}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        return load_config(args.config, overrides)
    return config_from_dict(overrides)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    result = run_experiment(cfg)
    s = result.summary
    print(
        f"{s['variant']} on {s['env_name']} seed {s['seed']}: final return "
        f"{s['final_eval_return_mean']:.4f} +- {s['final_eval_return_std']:.4f} "
        f"after {s['total_env_steps']} steps; outputs in {cfg.out_dir}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    policy = GaussianPolicy.load(args.checkpoint)
    env = make_env(args.env, args.max_episode_steps)
    if policy.state_dim != env.spec.state_dim or policy.action_dim != env.spec.action_dim:
        raise ValueError(
            f"checkpoint expects state/action dims {policy.state_dim}/{policy.action_dim}, "
            f"{args.env} has {env.spec.state_dim}/{env.spec.action_dim}"
        )
    mean, std = evaluate_policy(policy, env, args.episodes, np.random.default_rng(args.seed))
    print(json.dumps({"env": args.env, "episodes": args.episodes, "return_mean": mean, "return_std": std}))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return cmd_run(args) if args.command == "run" else cmd_eval(args)
    except (ConfigError, DivergenceError, ValueError, OSError) as err:
        print(f"meee: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
