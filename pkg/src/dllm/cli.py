"""Command-line entry point: train, eval, goals-report, plot."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402

from .config import load_config, validate_paper_defaults  # noqa: E402


def _add_train_parser(sub):
    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--run-dir", type=Path, default=Path("runs/default"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None,
                   help="intrinsic reward scale")
    p.add_argument("--no-rnd-decay", action="store_true",
                   help="freeze the novelty predictor so magnitudes never decay")
    p.add_argument("--random-goals", action="store_true",
                   help="draw goals uniformly from the caption vocabulary")
    p.add_argument("--allow-repetition", action="store_true",
                   help="reward a goal every time it matches within a rollout")
    p.add_argument("--provider", choices=("scripted", "random", "remote"), default=None)
    p.add_argument("--env-steps", type=int, default=None)
    p.add_argument("--quiet", action="store_true")


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "alpha": args.alpha,
        "provider": "random" if args.random_goals else args.provider,
        "env_steps": args.env_steps,
    }
    if args.no_rnd_decay:
        overrides["no_rnd_decay"] = True
    if args.allow_repetition:
        overrides["allow_repetition"] = True
    config = load_config(args.config, overrides)
    validate_paper_defaults()
    from .trainer import Trainer

    trainer = Trainer(config, args.run_dir)
    summary = trainer.run(progress=not args.quiet)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from . import diffmath as dmod
    from .agent import ActorCritic, AgentConfig
    from .env import NUM_ACTIONS, OBS_DIM, AchievementGridEnv, TRANSITION_CAPTIONS
    from .textembed import CaptionVocabulary
    from .worldmodel import WorldModel, WorldModelConfig

    config_path = args.config or args.checkpoint.parent / "config.txt"
    config = load_config(config_path)
    vocab = CaptionVocabulary(list(TRANSITION_CAPTIONS), dim=config.embed_dim)
    wm_config = WorldModelConfig(
        obs_dim=OBS_DIM, embed_dim=config.embed_dim, action_dim=NUM_ACTIONS,
        vocab_size=len(vocab), hidden=config.hidden, recurrent=config.recurrent,
        groups=config.groups, classes=config.classes, bins=config.bins)
    wm = WorldModel(wm_config, seed=0)
    agent = ActorCritic(AgentConfig(state_dim=wm_config.state_dim,
                                    action_dim=NUM_ACTIONS, bins=config.bins,
                                    hidden=config.hidden), seed=0)
    arrays = dmod.load_checkpoint(args.checkpoint)
    wm.params.load_arrays({k.split("/", 1)[1]: v for k, v in arrays.items()
                           if k.startswith("world_model/")})
    agent.actor_params.load_arrays({k.split("/", 1)[1]: v for k, v in arrays.items()
                                    if k.startswith("actor/")})
    agent.critic_params.load_arrays({k.split("/", 1)[1]: v for k, v in arrays.items()
                                     if k.startswith("critic/")})

    rng = np.random.default_rng(args.seed)
    env = AchievementGridEnv(episode_limit=config.episode_limit)
    returns, achievement_counts = [], []
    for _ in range(args.episodes):
        obs, _, transition_caption = env.reset(seed=int(rng.integers(0, 2**31)))
        u = vocab.embedding_at(vocab.index_of(transition_caption))
        latent = wm.initial_state(1)
        prev_action = np.zeros((1, NUM_ACTIONS))
        total = 0.0
        while True:
            latent = wm.observe(latent, prev_action, obs[None, :],
                                np.asarray(u)[None, :], rng.random((1, config.groups)))
            action = agent.act(latent.state[0], float(rng.random()))
            obs, reward, cont, event = env.step(action)
            u = vocab.embedding_at(vocab.index_of(env.caption_transition(event)))
            prev_action = np.eye(NUM_ACTIONS)[[action]]
            total += reward
            if cont == 0.0:
                break
        returns.append(total)
        achievement_counts.append(len(env.state.achievements))
    print(json.dumps({
        "episodes": args.episodes,
        "mean_return": float(np.mean(returns)),
        "mean_achievements": float(np.mean(achievement_counts)),
    }, indent=2, sort_keys=True))
    return 0


def cmd_goals_report(args) -> int:
    path = Path(args.run) / "goal_quality.csv"
    if not path.exists():
        print(f"no goal_quality.csv under {args.run}", file=sys.stderr)
        return 1
    rows = path.read_text(encoding="utf-8").strip().splitlines()
    header = rows[0].split(",")
    data = np.array([[float(v) for v in row.split(",")] for row in rows[1:]])
    if data.size == 0:
        print("no assessment windows recorded")
        return 0
    weights = data[:, 1]
    report = {"windows": len(data), "samples": int(weights.sum())}
    for col, name in enumerate(header[2:], start=2):
        if weights.sum() > 0:
            report[name] = float(np.average(data[:, col], weights=np.maximum(weights, 1)))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    metrics = Path(args.run) / "metrics.csv"
    rows = metrics.read_text(encoding="utf-8").strip().splitlines()
    header = rows[0].split(",")
    data = np.array([[float(v) for v in row.split(",")] for row in rows[1:]])
    out = Path(args.out) if args.out else Path(args.run) / "training.svg"
    fig, axes = plt.subplots(2, 2, figsize=(11, 7))
    panels = [("mean_return", "episode return"),
              ("mean_achievements", "achievements per episode"),
              ("loss_total", "world-model loss"),
              ("mean_intrinsic", "mean intrinsic reward")]
    steps = data[:, header.index("step")]
    for ax, (column, label) in zip(axes.flat, panels):
        ax.plot(steps, data[:, header.index(column)])
        ax.set_xlabel("environment steps")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dllm",
        description="Train and inspect a language-goal-guided world-model agent.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train_parser(sub)

    p_eval = sub.add_parser("eval", help="roll episodes with a trained checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--config", type=Path, default=None)
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=0)

    p_report = sub.add_parser("goals-report", help="aggregate goal-quality rates")
    p_report.add_argument("--run", type=Path, required=True)

    p_plot = sub.add_parser("plot", help="render training curves to SVG")
    p_plot.add_argument("--run", type=Path, required=True)
    p_plot.add_argument("--out", type=Path, default=None)

    args = parser.parse_args(argv)
    if args.command == "train":
        return cmd_train(args)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "goals-report":
        return cmd_goals_report(args)
    if args.command == "plot":
        return cmd_plot(args)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
