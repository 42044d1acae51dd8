"""Actor-critic trained purely inside world-model rollouts.

Rollouts are generated without gradient tracking; the actor and critic are
then re-run over the recorded states under a tape. The actor follows
REINFORCE with a stop-gradiented advantage scaled by a percentile-range
moving average, plus an entropy bonus; the critic regresses two-hot encoded
bootstrapped lambda-returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .rewards import intrinsic_batch
from .textembed import CaptionVocabulary
from .worldmodel import (LatentState, TwoHotSpec, WorldModel,
                         caption_embeddings, sample_categorical)

GAMMA = 0.997
LAMBDA = 0.95
ENTROPY_COEF = 3e-4
NORMALIZER_DECAY = 0.99


@dataclass
class AgentConfig:
    state_dim: int
    action_dim: int
    bins: int = 41
    hidden: int = 256
    gamma: float = GAMMA
    lam: float = LAMBDA
    entropy_coef: float = ENTROPY_COEF
    normalizer_decay: float = NORMALIZER_DECAY
    unimix: float = 0.01


class ReturnNormalizer:
    """Moving average of the 5th-to-95th percentile range of batch returns;
    the advantage denominator is max(1, S)."""

    def __init__(self, decay: float = NORMALIZER_DECAY):
        self.decay = decay
        self.s = 0.0

    def update(self, batch_returns) -> float:
        r = np.asarray(batch_returns, dtype=np.float64).reshape(-1)
        if r.size == 0:
            raise ValueError("empty return batch")
        spread = float(np.percentile(r, 95) - np.percentile(r, 5))
        self.s = self.decay * self.s + (1.0 - self.decay) * spread
        return self.s

    @property
    def scale(self) -> float:
        return max(1.0, self.s)


def update_normalizer(batch_returns, normalizer: ReturnNormalizer) -> float:
    return normalizer.update(batch_returns)


def lambda_returns(rewards, conts, values, lam: float, gamma: float) -> np.ndarray:
    """Bootstrapped lambda-returns by backward recursion.

    rewards and conts cover steps 0..T-1, values covers states 0..T; the
    recursion seeds with the final value and never consumes rewards beyond
    the horizon.
    """
    r = np.asarray(rewards, dtype=np.float64)
    c = np.asarray(conts, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    T = r.shape[0]
    if c.shape[0] != T or v.shape[0] != T + 1:
        raise ValueError(
            f"length mismatch: rewards {r.shape[0]}, conts {c.shape[0]}, values {v.shape[0]}")
    out = np.empty_like(r)
    next_return = v[T]
    for t in range(T - 1, -1, -1):
        out[t] = r[t] + gamma * c[t] * ((1.0 - lam) * v[t + 1] + lam * next_return)
        next_return = out[t]
    return out


@dataclass
class ImaginedRollout:
    """Horizon-T trajectory decoded from the world model under the actor."""

    states: np.ndarray  # (T+1, N, state_dim)
    actions: np.ndarray  # (T, N) int
    action_onehot: np.ndarray  # (T, N, A)
    rewards_pred: np.ndarray  # (T, N) decoded two-hot rewards
    intrinsic: np.ndarray  # (T, N)
    conts: np.ndarray  # (T, N)
    caption_idx: np.ndarray  # (T, N)
    caption_emb: np.ndarray  # (T, N, D)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def combined_rewards(self) -> np.ndarray:
        return self.rewards_pred + self.intrinsic


def _per_start_uniforms(seed, seed_offset: int, n: int, horizon: int, groups: int):
    """Independent uniform stream per rollout start.

    Start i always draws from the stream keyed by (seed, seed_offset + i),
    so a joint batch and the same starts run one at a time consume identical
    randomness.
    """
    blocks = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, seed_offset + i)))
        blocks.append(rng.random((horizon, 1 + groups)))
    arr = np.stack(blocks, axis=1)  # (T, N, 1+G)
    return arr[:, :, 0], arr[:, :, 1:]


class ActorCritic:
    def __init__(self, config: AgentConfig, seed: int):
        self.config = config
        seq = np.random.SeedSequence(seed)
        actor_rng, critic_rng = (np.random.default_rng(s) for s in seq.spawn(2))
        self.actor_params = dm.ParameterSet()
        self.actor = dm.MLP(self.actor_params, "actor", config.state_dim,
                            [config.hidden, config.hidden], config.action_dim, actor_rng,
                            zero_output=True)
        self.critic_params = dm.ParameterSet()
        self.critic = dm.MLP(self.critic_params, "critic", config.state_dim,
                             [config.hidden, config.hidden], config.bins, critic_rng,
                             zero_output=True)

    # -- forwards ---------------------------------------------------------

    def policy_probs(self, states) -> dm.Tensor:
        # a uniform exploration floor (unimix) keeps every action reachable
        # so imagination cannot collapse onto hallucinated rewards early
        logits = self.actor(dm._as_tensor(states))
        eps = max(self.config.unimix / self.config.action_dim, dm.EPS_PROB)
        return dm.floor_probs(dm.softmax(logits), self.config.action_dim, eps=eps)

    def value_probs(self, states) -> dm.Tensor:
        return dm.floor_probs(dm.softmax(self.critic(dm._as_tensor(states))),
                              self.config.bins)

    def values(self, states: np.ndarray, spec: TwoHotSpec) -> np.ndarray:
        """Two-hot decoded critic values, gradient-free."""
        flat = states.reshape(-1, states.shape[-1])
        v = spec.decode(self.value_probs(flat).data)
        return v.reshape(states.shape[:-1])

    def act(self, state_vec: np.ndarray, uniform: float) -> int:
        probs = self.policy_probs(state_vec[None, :]).data[0]
        idx = int(np.searchsorted(np.cumsum(probs), uniform))
        return min(idx, self.config.action_dim - 1)

    # -- imagination ------------------------------------------------------

    def imagine(self, wm: WorldModel, start: LatentState, goal_embeddings: np.ndarray,
                magnitudes: np.ndarray, horizon: int, spec: TwoHotSpec,
                vocab: CaptionVocabulary, alpha: float, match_threshold: float,
                seed: int, seed_offset: int = 0,
                allow_repetition: bool = False) -> ImaginedRollout:
        """Roll the model forward under the policy from posterior starts.

        Intrinsic rewards come from matching decoded caption embeddings of
        steps 1..T against each start's goal set; rewards past the horizon
        are unreachable and contribute nothing.
        """
        n = start.z.shape[0]
        c = wm.config
        u_action, u_latent = _per_start_uniforms(seed, seed_offset, n, horizon, c.groups)
        z, h = start.z, start.h
        states = [np.concatenate([z, h], axis=-1)]
        actions = np.empty((horizon, n), dtype=np.int64)
        action_onehot = np.empty((horizon, n, self.config.action_dim))
        rewards = np.empty((horizon, n))
        conts = np.empty((horizon, n))
        caption_idx = np.empty((horizon, n), dtype=np.int64)
        caption_emb = np.empty((horizon, n, vocab.embeddings.shape[1]))
        for t in range(horizon):
            probs = self.policy_probs(states[-1]).data
            a_onehot = sample_categorical(probs, u_action[t])
            prior, h_t = wm.sequence_step(z, h, a_onehot)
            z_onehot = sample_categorical(prior.data, u_latent[t])
            z = z_onehot.reshape(n, c.latent_dim)
            h = h_t.data
            decoded = wm.decode(z, h)
            states.append(np.concatenate([z, h], axis=-1))
            actions[t] = np.argmax(a_onehot, axis=-1)
            action_onehot[t] = a_onehot
            rewards[t] = spec.decode(decoded.reward_probs.data)
            conts[t] = decoded.cont.data
            caption_emb[t], caption_idx[t] = caption_embeddings(
                decoded.caption_probs.data, vocab)

        cosines = np.einsum("tnd,nkd->ntk", caption_emb, goal_embeddings)
        cosines = np.clip(cosines, -1.0, 1.0)
        intrinsic = intrinsic_batch(cosines, magnitudes, alpha, match_threshold,
                                    allow_repetition).T  # back to (T, N)
        return ImaginedRollout(
            states=np.stack(states), actions=actions, action_onehot=action_onehot,
            rewards_pred=rewards, intrinsic=intrinsic, conts=conts,
            caption_idx=caption_idx, caption_emb=caption_emb,
        )

    # -- losses -----------------------------------------------------------

    def returns_and_values(self, rollout: ImaginedRollout, spec: TwoHotSpec):
        values = self.values(rollout.states, spec)  # (T+1, N)
        returns = lambda_returns(rollout.combined_rewards, rollout.conts, values,
                                 self.config.lam, self.config.gamma)
        return returns, values

    def critic_loss(self, rollout: ImaginedRollout, returns: np.ndarray,
                    spec: TwoHotSpec) -> dm.Tensor:
        """Cross-entropy between the critic's bins and two-hot returns; the
        targets are constants, so no gradient leaks into the return path."""
        T = rollout.horizon
        flat_states = rollout.states[:T].reshape(T * returns.shape[1], -1)
        target = spec.encode(returns.reshape(-1))
        probs = self.value_probs(flat_states)
        return dm.tmean(dm.neg(dm.tsum(dm.xlogy_const(target, probs), axis=-1)))

    def actor_loss(self, rollout: ImaginedRollout, returns: np.ndarray,
                   values: np.ndarray, normalizer: ReturnNormalizer) -> dm.Tensor:
        """REINFORCE with normalized stop-gradiented advantages and an
        entropy bonus. The normalizer must already reflect this batch."""
        T = rollout.horizon
        n = returns.shape[1]
        flat_states = rollout.states[:T].reshape(T * n, -1)
        advantage = (returns - values[:T]).reshape(-1) / normalizer.scale
        probs = self.policy_probs(flat_states)
        logp = dm.log(probs)
        chosen = dm.tsum(dm.mul(logp, rollout.action_onehot.reshape(T * n, -1)), axis=-1)
        entropy = dm.neg(dm.tsum(dm.plogp(probs), axis=-1))
        per_step = dm.sub(dm.mul(dm.neg(chosen), advantage),
                          dm.mul(entropy, self.config.entropy_coef))
        return dm.tmean(per_step)

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        out = {f"actor/{k}": v for k, v in self.actor_params.arrays().items()}
        out.update({f"critic/{k}": v for k, v in self.critic_params.arrays().items()})
        return out
