"""Acting and training loops, metrics logging, and checkpoints.

One control thread interleaves environment steps with gradient updates at
the configured train ratio. Every random draw comes from named streams
spawned off the run seed, so a (seed, config) pair reproduces its metrics
file byte for byte.
"""

from __future__ import annotations

import json
import time
from collections import deque
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .agent import ActorCritic, AgentConfig, ReturnNormalizer, update_normalizer
from .config import Config
from .env import (ACHIEVEMENTS, NUM_ACTIONS, OBS_DIM, AchievementGridEnv,
                  TRANSITION_CAPTIONS)
from .goalquality import GoalQualityReport
from .goals import (FallbackProvider, GoalSource, QueryCache, RandomGoalProvider,
                    RemoteGoalProvider, ScriptedGoalProvider, default_template)
from .replay import NotEnoughDataError, ReplayBuffer, TransitionRecord, collate
from .rewards import RndPair, RunningStats, normalize, rnd_update
from .textembed import CaptionVocabulary
from .worldmodel import LatentState, TwoHotSpec, WorldModel, WorldModelConfig

METRICS_HEADER = (
    "step,episodes,mean_return,mean_achievements,score,mean_intrinsic,"
    "loss_total,loss_obs,loss_caption,loss_reward,loss_continue,loss_pred,"
    "loss_reg,actor_loss,critic_loss,rnd_error,normalizer_scale,"
    "goal_correctness,goal_novelty,goal_context,goal_common_sense"
)

_TRAIN_METRIC_KEYS = (
    "mean_intrinsic", "loss_total", "loss_obs", "loss_caption", "loss_reward",
    "loss_continue", "loss_pred", "loss_reg", "actor_loss", "critic_loss",
    "rnd_error",
)


def crafter_style_score(rates: dict[str, float]) -> float:
    """Geometric mean over achievement success rates, in percent."""
    percents = np.array([rates[a] * 100.0 for a in ACHIEVEMENTS])
    return float(np.exp(np.mean(np.log(1.0 + percents))) - 1.0)


class Trainer:
    def __init__(self, config: Config, run_dir, provider=None):
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

        seeds = np.random.SeedSequence(config.seed).spawn(8)
        (wm_seed, agent_seed, rnd_seed, env_seed,
         act_seed, batch_seed, imagine_seed, provider_seed) = seeds
        self._env_rng = np.random.default_rng(env_seed)
        self._act_rng = np.random.default_rng(act_seed)
        self._batch_rng = np.random.default_rng(batch_seed)
        self._imagine_rng = np.random.default_rng(imagine_seed)

        self.vocab = CaptionVocabulary(list(TRANSITION_CAPTIONS), dim=config.embed_dim)
        self.env = AchievementGridEnv(episode_limit=config.episode_limit)
        wm_config = WorldModelConfig(
            obs_dim=OBS_DIM, embed_dim=config.embed_dim, action_dim=NUM_ACTIONS,
            vocab_size=len(self.vocab), hidden=config.hidden,
            recurrent=config.recurrent, groups=config.groups,
            classes=config.classes, bins=config.bins,
        )
        self.world_model = WorldModel(wm_config, seed=int(wm_seed.generate_state(1)[0]))
        self.agent = ActorCritic(AgentConfig(
            state_dim=wm_config.state_dim, action_dim=NUM_ACTIONS, bins=config.bins,
            hidden=config.hidden, gamma=config.gamma, lam=config.lam,
            entropy_coef=config.entropy_coef,
            normalizer_decay=config.normalizer_decay,
            unimix=config.actor_unimix,
        ), seed=int(agent_seed.generate_state(1)[0]))
        self.rnd = RndPair(config.embed_dim, seed=int(rnd_seed.generate_state(1)[0]))
        self.rnd_stats = RunningStats(decay=config.rnd_stats_decay)
        self.normalizer = ReturnNormalizer(config.normalizer_decay)
        self.spec = TwoHotSpec.exponential(config.bins, config.bin_limit)
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.oracle = ScriptedGoalProvider()
        self.goal_source = GoalSource(
            provider if provider is not None else self._build_provider(provider_seed),
            k=config.goals_per_query, query_interval=config.query_interval,
            dim=config.embed_dim)

        self.env_step = 0
        self.train_steps = 0
        self.episodes_completed = 0
        self._episode_return = 0.0
        self._recent_returns: deque = deque(maxlen=50)
        self._recent_achievements: deque = deque(maxlen=50)
        self._needs_reset = True
        self._latent: LatentState | None = None
        self._prev_action = np.zeros((1, NUM_ACTIONS))
        self._obs = None
        self._obs_caption = ""
        self._u_vec = None
        self._window_train: dict[str, list] = {k: [] for k in _TRAIN_METRIC_KEYS}
        self._window_quality = GoalQualityReport()

    def _build_provider(self, provider_seed):
        name = self.config.provider
        if name == "scripted":
            return ScriptedGoalProvider()
        if name == "random":
            return RandomGoalProvider(self.vocab,
                                      seed=int(provider_seed.generate_state(1)[0]))
        if name == "remote":
            remote = RemoteGoalProvider(default_template(self.config.goals_per_query),
                                        QueryCache(self.run_dir / "query_cache.jsonl"))
            if self.config.remote_fallback == "scripted":
                return FallbackProvider(remote, ScriptedGoalProvider())
            return remote
        raise ValueError(f"unknown provider: {name}")

    # -- acting ---------------------------------------------------------------

    def _reset_episode(self) -> None:
        obs, caption, transition_caption = self.env.reset(
            seed=int(self._env_rng.integers(0, 2**31)))
        self._obs = obs
        self._obs_caption = caption
        idx = self.vocab.index_of(transition_caption)
        self._u_vec = self.vocab.embedding_at(idx)
        self._latent = self.world_model.initial_state(1)
        self._prev_action = np.zeros((1, NUM_ACTIONS))
        self._episode_return = 0.0
        self._needs_reset = False

    def act_steps(self, n: int) -> None:
        """Run n environment steps under the current policy, appending one
        complete record per step."""
        for _ in range(n):
            if self._needs_reset:
                self._reset_episode()
            summary = self.env.state_summary()
            before = self.goal_source.invocations
            goals = self.goal_source.goals_for_step(self.env_step, summary,
                                                    self._obs_caption)
            if self.goal_source.invocations != before:
                oracle_goals = self.oracle.propose(summary, self._obs_caption,
                                                   self.config.goals_per_query)
                for text in goals.texts:
                    self._window_quality.add_goal(text, summary, oracle_goals,
                                                  self.vocab)
            uniforms = self._act_rng.random((1, self.config.groups))
            self._latent = self.world_model.observe(
                self._latent, self._prev_action, self._obs[None, :],
                np.asarray(self._u_vec)[None, :], uniforms)
            action = self.agent.act(self._latent.state[0], float(self._act_rng.random()))
            obs, reward, cont, event = self.env.step(action)
            caption = self.env.caption_transition(event)
            idx = self.vocab.index_of(caption)
            u_vec = self.vocab.embedding_at(idx)
            self.buffer.append(TransitionRecord(
                x=obs, u_text=caption, u=u_vec, caption_index=idx, a=action,
                r=reward, c=cont, goals=goals), episode_done=(cont == 0.0))
            self._episode_return += reward
            self._obs = obs
            self._obs_caption = self.env.caption_observation() if cont else ""
            self._u_vec = u_vec
            self._prev_action = np.eye(NUM_ACTIONS)[[action]]
            self.env_step += 1
            if cont == 0.0:
                self.episodes_completed += 1
                self._recent_returns.append(self._episode_return)
                self._recent_achievements.append(frozenset(self.env.state.achievements))
                self._needs_reset = True

    # -- training -------------------------------------------------------------

    def train_step(self) -> dict:
        """One Algorithm-ordered update: sample, RND magnitudes and update,
        world-model step, imagination, actor step, critic step."""
        c = self.config
        need = c.batch_size * c.batch_length
        if self.buffer.num_steps < need:
            raise NotEnoughDataError(f"{self.buffer.num_steps} < {need}")
        windows = self.buffer.sample_windows(c.batch_size, c.batch_length,
                                             self._batch_rng)
        batch = collate(windows, NUM_ACTIONS)
        batch["uniforms"] = self._batch_rng.random(
            (c.batch_size, c.batch_length, c.groups))

        # per-goal novelty magnitudes; common goals are weighted by their
        # multiplicity in the batch so their errors decay faster
        unique: dict[int, tuple] = {}
        goalset_index = np.empty(need, dtype=np.int64)
        flat_records = [rec for w in windows for rec in w]
        for pos, rec in enumerate(flat_records):
            key = id(rec.goals)
            if key not in unique:
                unique[key] = (len(unique), rec.goals, 0)
            uidx, gs, count = unique[key]
            unique[key] = (uidx, gs, count + 1)
            goalset_index[pos] = uidx
        goal_sets = [entry[1] for entry in sorted(unique.values())]
        counts = np.array([entry[2] for entry in sorted(unique.values())], dtype=np.float64)
        stacked = np.stack([gs.embeddings for gs in goal_sets])  # (U, K, D)
        flat_embeddings = stacked.reshape(-1, c.embed_dim)
        errors_flat = self.rnd.errors(flat_embeddings)
        rnd_error_mean = float(np.average(
            errors_flat.reshape(len(goal_sets), c.goals_per_query).mean(axis=1),
            weights=counts))
        if not c.no_rnd_decay:
            rnd_update(flat_embeddings, self.rnd, self.rnd_stats, lr=c.rnd_lr,
                       weights=np.repeat(counts, c.goals_per_query))
        magnitudes_u = normalize(errors_flat.reshape(len(goal_sets), c.goals_per_query),
                                 self.rnd_stats, clamp_at_zero=c.clamp_intrinsic_at_zero)

        with dm.Tape():
            total, terms, posts = self.world_model.loss(batch, self.spec)
            dm.backward(total)
        dm.optimizer_step(self.world_model.params, c.model_lr)

        n_starts = min(c.imagine_starts, need)
        pick = self._imagine_rng.choice(need, size=n_starts, replace=False)
        starts = LatentState(
            z=posts.z.reshape(need, -1)[pick],
            h=posts.h.reshape(need, -1)[pick],
            probs=posts.probs.reshape(need, c.groups, c.classes)[pick],
        )
        rollout = self.agent.imagine(
            self.world_model, starts,
            goal_embeddings=stacked[goalset_index[pick]],
            magnitudes=magnitudes_u[goalset_index[pick]],
            horizon=c.imagination_horizon, spec=self.spec, vocab=self.vocab,
            alpha=c.alpha, match_threshold=c.match_threshold,
            seed=int(self._imagine_rng.integers(0, 2**62)),
            allow_repetition=c.allow_repetition,
        )
        returns, values = self.agent.returns_and_values(rollout, self.spec)
        update_normalizer(returns, self.normalizer)
        with dm.Tape():
            actor_loss = self.agent.actor_loss(rollout, returns, values, self.normalizer)
            dm.backward(actor_loss)
        dm.optimizer_step(self.agent.actor_params, c.actor_lr)
        with dm.Tape():
            critic_loss = self.agent.critic_loss(rollout, returns, self.spec)
            dm.backward(critic_loss)
        dm.optimizer_step(self.agent.critic_params, c.critic_lr)

        self.train_steps += 1
        metrics = dict(terms)
        metrics["actor_loss"] = float(actor_loss.data)
        metrics["critic_loss"] = float(critic_loss.data)
        metrics["mean_intrinsic"] = float(rollout.intrinsic.mean())
        metrics["rnd_error"] = rnd_error_mean
        return metrics

    # -- full run ---------------------------------------------------------

    def achievement_rates(self) -> dict[str, float]:
        episodes = list(self._recent_achievements)
        if not episodes:
            return {a: 0.0 for a in ACHIEVEMENTS}
        return {a: sum(a in ep for ep in episodes) / len(episodes) for a in ACHIEVEMENTS}

    def _metrics_row(self) -> str:
        returns = list(self._recent_returns)
        achievements = [len(ep) for ep in self._recent_achievements]
        train_means = {}
        for key in _TRAIN_METRIC_KEYS:
            vals = self._window_train[key]
            train_means[key] = float(np.mean(vals)) if vals else 0.0
        quality = self._window_quality.rates()
        fields = [
            self.env_step,
            self.episodes_completed,
            float(np.mean(returns)) if returns else 0.0,
            float(np.mean(achievements)) if achievements else 0.0,
            crafter_style_score(self.achievement_rates()),
            train_means["mean_intrinsic"],
            train_means["loss_total"], train_means["loss_obs"],
            train_means["loss_caption"], train_means["loss_reward"],
            train_means["loss_continue"], train_means["loss_pred"],
            train_means["loss_reg"], train_means["actor_loss"],
            train_means["critic_loss"], train_means["rnd_error"],
            self.normalizer.scale,
            quality["correctness"], quality["novelty"],
            quality["context_sensitivity"], quality["common_sense"],
        ]
        return ",".join(f"{v:.8g}" if isinstance(v, float) else str(v) for v in fields)

    def checkpoint(self, path) -> None:
        arrays = self.world_model.checkpoint_arrays()
        arrays.update(self.agent.checkpoint_arrays())
        arrays.update({f"rnd_target/{k}": v
                       for k, v in self.rnd.target_params.arrays().items()})
        arrays.update({f"rnd_predictor/{k}": v
                       for k, v in self.rnd.predictor_params.arrays().items()})
        dm.save_checkpoint(path, arrays)

    def run(self, progress: bool = False) -> dict:
        """Interleave acting and training; write metrics, checkpoints, and a
        final summary into the run directory."""
        c = self.config
        self.config.to_file(self.run_dir / "config.txt")
        self.vocab.save(self.run_dir / "vocab.txt")
        start_time = time.monotonic()
        metrics_path = self.run_dir / "metrics.csv"
        quality_path = self.run_dir / "goal_quality.csv"
        timing_path = self.run_dir / "timing.csv"
        need = c.batch_size * c.batch_length
        try:
            with open(metrics_path, "w", encoding="utf-8") as mf, \
                    open(quality_path, "w", encoding="utf-8") as qf, \
                    open(timing_path, "w", encoding="utf-8") as tf:
                mf.write(METRICS_HEADER + "\n")
                qf.write(GoalQualityReport.CSV_HEADER + "\n")
                tf.write("step,wall_clock_seconds\n")
                while self.env_step < c.env_steps:
                    self.act_steps(1)
                    if (self.buffer.num_steps >= need
                            and self.env_step % c.train_interval == 0):
                        metrics = self.train_step()
                        for key in _TRAIN_METRIC_KEYS:
                            self._window_train[key].append(metrics[key])
                    if self.env_step % c.log_interval == 0:
                        mf.write(self._metrics_row() + "\n")
                        qf.write(self._window_quality.csv_row(self.env_step) + "\n")
                        tf.write(f"{self.env_step},"
                                 f"{time.monotonic() - start_time:.3f}\n")
                        mf.flush(); qf.flush(); tf.flush()
                        if progress:
                            print(f"[{self.env_step}/{c.env_steps}] "
                                  f"episodes={self.episodes_completed} "
                                  f"mean_achievements="
                                  f"{np.mean([len(e) for e in self._recent_achievements]) if self._recent_achievements else 0.0:.2f}",
                                  flush=True)
                        self._window_train = {k: [] for k in _TRAIN_METRIC_KEYS}
                        self._window_quality = GoalQualityReport()
                    if self.env_step % c.checkpoint_interval == 0:
                        self.checkpoint(self.run_dir / f"step_{self.env_step}.ckpt")
        except Exception as exc:
            module = type(exc).__module__
            raise RuntimeError(
                f"run aborted in module {module}: {exc}") from exc
        self.checkpoint(self.run_dir / "final.ckpt")
        summary = self.summary(wall_clock=time.monotonic() - start_time)
        (self.run_dir / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return summary

    def summary(self, wall_clock: float = 0.0) -> dict:
        achievements = [len(ep) for ep in self._recent_achievements]
        rates = self.achievement_rates()
        return {
            "env_steps": self.env_step,
            "train_steps": self.train_steps,
            "episodes": self.episodes_completed,
            "mean_return_last50": float(np.mean(self._recent_returns))
            if self._recent_returns else 0.0,
            "mean_achievements_last50": float(np.mean(achievements))
            if achievements else 0.0,
            "achievement_rates_last50": rates,
            "score_last50": crafter_style_score(rates),
            "provider_invocations": self.goal_source.invocations,
            "wall_clock_seconds": round(wall_clock, 3),
        }
