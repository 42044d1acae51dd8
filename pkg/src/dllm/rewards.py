"""Intrinsic rewards: thresholded goal matching with first-exceed gating,
and per-goal novelty magnitudes from random network distillation.

Match scoring is pure and safe to run concurrently; predictor updates
happen only from the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .goals import GoalSet
from .textembed import SentenceEmbedding

SIGMA_FLOOR = 1e-8

RND_HIDDEN = 64
RND_OUT_DIM = 32


def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, SentenceEmbedding) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def match_score(u_hat, goal, threshold: float) -> float:
    """Cosine similarity if strictly above the threshold, else zero."""
    u, g = _vec(u_hat), _vec(goal)
    if u.shape != g.shape:
        raise ValueError(f"embedding shapes differ: {u.shape} vs {g.shape}")
    c = float(np.clip(np.dot(u, g), -1.0, 1.0))
    return c if c > threshold else 0.0


@dataclass
class MatchResult:
    """Thresholded scores per (step, goal) and each goal's first crossing."""

    w: np.ndarray  # (T, K), zero where cosine <= threshold
    first_hit: list  # per goal: step index or None


def match_rollout(cosines: np.ndarray, threshold: float) -> MatchResult:
    cosines = np.asarray(cosines, dtype=np.float64)
    w = np.where(cosines > threshold, cosines, 0.0)
    first_hit = []
    for k in range(cosines.shape[1]):
        hits = np.nonzero(cosines[:, k] > threshold)[0]
        first_hit.append(int(hits[0]) if hits.size else None)
    return MatchResult(w=w, first_hit=first_hit)


def rollout_intrinsic_rewards(
    u_hats,
    goals: GoalSet,
    magnitudes,
    alpha: float,
    threshold: float,
    allow_repetition: bool = False,
) -> np.ndarray:
    """Per-step intrinsic rewards for one imagined rollout.

    Each goal pays alpha * w * i at the first step its match score exceeds
    the threshold and nowhere else, unless repetition is explicitly allowed.
    """
    u = np.stack([_vec(x) for x in u_hats])
    cosines = np.clip(u @ goals.embeddings.T, -1.0, 1.0)
    return intrinsic_from_cosines(cosines, np.asarray(magnitudes, dtype=np.float64),
                                  alpha, threshold, allow_repetition)


def intrinsic_from_cosines(cosines, magnitudes, alpha, threshold,
                           allow_repetition: bool = False) -> np.ndarray:
    result = match_rollout(cosines, threshold)
    T = result.w.shape[0]
    rewards = np.zeros(T, dtype=np.float64)
    if allow_repetition:
        rewards = alpha * (result.w @ magnitudes)
        return rewards
    for k, hit in enumerate(result.first_hit):
        if hit is not None:
            rewards[hit] += alpha * result.w[hit, k] * magnitudes[k]
    return rewards


def intrinsic_batch(cosines: np.ndarray, magnitudes: np.ndarray, alpha: float,
                    threshold: float, allow_repetition: bool = False) -> np.ndarray:
    """Vectorized gating over a batch: cosines (N, T, K), magnitudes (N, K)."""
    w = np.where(cosines > threshold, cosines, 0.0)
    if allow_repetition:
        return alpha * np.einsum("ntk,nk->nt", w, magnitudes)
    above = cosines > threshold
    any_hit = above.any(axis=1)
    first = above.argmax(axis=1)  # (N, K), valid only where any_hit
    gate = np.zeros_like(w)
    n_idx, k_idx = np.nonzero(any_hit)
    gate[n_idx, first[n_idx, k_idx], k_idx] = 1.0
    return alpha * np.einsum("ntk,nk->nt", w * gate, magnitudes)


# ---------------------------------------------------------------------------
# Running statistics
# ---------------------------------------------------------------------------

class RunningStats:
    """Bias-corrected exponential moving mean and standard deviation.

    Prediction errors decay by orders of magnitude as the predictor trains,
    so the running estimates must track the current scale; a cumulative
    mean would sit far above every present-day error and drive all
    magnitudes negative. Updates are order-dependent but deterministic.
    """

    def __init__(self, decay: float = 0.99) -> None:
        self.decay = decay
        self._mean = 0.0
        self._mean_sq = 0.0
        self.count = 0

    def push(self, value: float, square: float | None = None) -> None:
        """Fold in one observation (or a batch's mean and mean-square)."""
        self.count += 1
        sq = value * value if square is None else square
        self._mean = self.decay * self._mean + (1.0 - self.decay) * value
        self._mean_sq = self.decay * self._mean_sq + (1.0 - self.decay) * sq

    def _debias(self) -> float:
        return 1.0 - self.decay**self.count

    @property
    def mean(self) -> float:
        if self.count == 0:
            return 0.0
        return self._mean / self._debias()

    @property
    def std(self) -> float:
        if self.count < 2:
            return SIGMA_FLOOR
        var = self._mean_sq / self._debias() - self.mean**2
        return max(float(np.sqrt(max(var, 0.0))), SIGMA_FLOOR)

    def state(self) -> tuple[float, float, int]:
        return (self._mean, self._mean_sq, self.count)


def normalize(errors, stats: RunningStats, clamp_at_zero: bool = False):
    """Standardize prediction errors into intrinsic magnitudes.

    Before the stats warm up (fewer than two observations) errors pass
    through unscaled. The stats are never mutated here. Magnitudes may be
    negative unless clamping is requested.
    """
    e = np.asarray(errors, dtype=np.float64)
    if stats.count >= 2:
        i = (e - stats.mean) / stats.std
    else:
        i = e.copy()
    if clamp_at_zero:
        i = np.maximum(i, 0.0)
    return float(i) if np.isscalar(errors) or e.ndim == 0 else i


# ---------------------------------------------------------------------------
# Random network distillation
# ---------------------------------------------------------------------------

class RndPair:
    """Frozen random target network and a trainable predictor of the same
    shape, both mapping goal embeddings to a small feature vector."""

    def __init__(self, embed_dim: int, seed: int, hidden: int = RND_HIDDEN,
                 out_dim: int = RND_OUT_DIM):
        self.embed_dim = embed_dim
        self.out_dim = out_dim
        seq = np.random.SeedSequence(seed)
        target_rng, predictor_rng = (np.random.default_rng(s) for s in seq.spawn(2))
        self.target_params = dm.ParameterSet()
        self.target = dm.MLP(self.target_params, "target", embed_dim,
                             [hidden, hidden], out_dim, target_rng)
        self.predictor_params = dm.ParameterSet()
        self.predictor = dm.MLP(self.predictor_params, "predictor", embed_dim,
                                [hidden, hidden], out_dim, predictor_rng)

    def copy_target_to_predictor(self) -> None:
        for (_, tp), (_, pp) in zip(self.target_params, self.predictor_params):
            pp.data = tp.data.copy()

    def target_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.target_params.arrays().items()}

    def errors(self, embeddings) -> np.ndarray:
        """Squared prediction error per embedding, without gradients."""
        x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        diff = self.predictor(dm.Tensor(x)).data - self.target(dm.Tensor(x)).data
        return np.sum(diff * diff, axis=-1)


def rnd_error(goal, pair: RndPair) -> float:
    """Eq.-style squared error for one goal embedding."""
    return float(pair.errors(_vec(goal)[None, :])[0])


def rnd_update(goal_batch, pair: RndPair, stats: RunningStats, lr: float,
               weights=None) -> float:
    """One predictor step on the (weighted) mean error over the batch, plus
    a streaming stats push of the batch's error mean and mean square. The
    target never moves.

    Returns the batch-mean error (computed before the update).
    """
    x = np.atleast_2d(np.asarray(goal_batch, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty goal batch")
    if weights is None:
        w = np.full(x.shape[0], 1.0 / x.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    target_out = pair.target(dm.Tensor(x)).data  # frozen side
    with dm.Tape():
        pred = pair.predictor(dm.Tensor(x))
        diff = dm.sub(pred, dm.Tensor(target_out))
        per_row = dm.tsum(dm.square(diff), axis=-1)
        loss = dm.tsum(dm.mul(per_row, w))
        batch_mean = float(loss.data)
        dm.backward(loss)
    dm.optimizer_step(pair.predictor_params, lr)
    stats.push(batch_mean, square=float(np.sum(w * per_row.data**2)))
    return batch_mean
