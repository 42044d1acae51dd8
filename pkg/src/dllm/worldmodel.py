"""Recurrent state-space world model.

An encoder maps (observation, transition embedding, recurrent state) to
grouped categorical latents; a gated recurrent cell advances the state from
(latent, action); dense heads decode observation, transition caption,
two-hot reward, and continuation. The training loss combines
reconstruction, caption, reward, and continue terms with two free-nats KL
terms under asymmetric stop-gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .textembed import CaptionVocabulary

BETA_PRED = 0.5
BETA_REG = 0.1
FREE_NATS = 1.0

_CONT_EPS = 1e-9  # keeps the continue probability inside (0, 1) for training


@dataclass
class WorldModelConfig:
    obs_dim: int
    embed_dim: int
    action_dim: int
    vocab_size: int
    hidden: int = 256
    recurrent: int = 256
    groups: int = 8
    classes: int = 8
    bins: int = 41
    bin_limit: float = 20.0
    beta_pred: float = BETA_PRED
    beta_reg: float = BETA_REG

    @property
    def latent_dim(self) -> int:
        return self.groups * self.classes

    @property
    def state_dim(self) -> int:
        return self.latent_dim + self.recurrent


# ---------------------------------------------------------------------------
# Two-hot value codec
# ---------------------------------------------------------------------------

def symexp(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.exp(np.abs(x)) - 1.0)


def symlog(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


class TwoHotSpec:
    """Exponentially spaced bins for distributional scalar regression.

    Encoding puts linearly interpolated mass on the two bins bracketing the
    value, so decode(encode(v)) == v for any in-range v; out-of-range values
    clamp to the boundary bins.
    """

    def __init__(self, bin_centers: np.ndarray):
        centers = np.asarray(bin_centers, dtype=np.float64)
        if centers.ndim != 1 or centers.size % 2 != 1:
            raise ValueError("bin centers must be a 1-D odd-length grid")
        if not np.all(np.diff(centers) > 0):
            raise ValueError("bin centers must be strictly increasing")
        if centers[centers.size // 2] != 0.0:
            raise ValueError("center bin must sit at zero")
        self.bin_centers = centers

    @classmethod
    def exponential(cls, num_bins: int = 41, limit: float = 20.0) -> "TwoHotSpec":
        return cls(symexp(np.linspace(-limit, limit, num_bins)))

    @property
    def num_bins(self) -> int:
        return self.bin_centers.size

    def encode(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if np.any(np.isnan(v)):
            raise ValueError("cannot two-hot encode NaN")
        centers = self.bin_centers
        v = np.clip(v, centers[0], centers[-1])
        idx = np.searchsorted(centers, v, side="right") - 1
        idx = np.clip(idx, 0, centers.size - 2)
        left, right = centers[idx], centers[idx + 1]
        t = (v - left) / (right - left)
        weights = np.zeros(v.shape + (centers.size,), dtype=np.float64)
        flat_w = weights.reshape(-1, centers.size)
        flat_idx = idx.reshape(-1)
        flat_t = t.reshape(-1)
        rows = np.arange(flat_w.shape[0])
        flat_w[rows, flat_idx] = 1.0 - flat_t
        flat_w[rows, flat_idx + 1] += flat_t
        return weights

    def decode(self, weights) -> np.ndarray:
        # row-local reduction keeps results independent of batch size,
        # unlike a BLAS matvec
        w = np.asarray(weights, dtype=np.float64)
        return np.sum(w * self.bin_centers, axis=-1)


def twohot_encode(value, spec: TwoHotSpec) -> np.ndarray:
    return spec.encode(value)


def twohot_decode(weights, spec: TwoHotSpec):
    out = spec.decode(weights)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Latents
# ---------------------------------------------------------------------------

@dataclass
class LatentState:
    """Sampled one-hot code (flattened groups x classes), recurrent state,
    and the per-group distributions behind the sample."""

    z: np.ndarray  # (N, groups * classes)
    h: np.ndarray  # (N, recurrent)
    probs: np.ndarray  # (N, groups, classes)

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.z, self.h], axis=-1)


def sample_categorical(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sample per group; returns one-hots of probs' shape."""
    cdf = np.cumsum(probs, axis=-1)
    idx = np.sum(cdf < uniforms[..., None], axis=-1)
    idx = np.minimum(idx, probs.shape[-1] - 1)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return onehot


@dataclass
class DecodedStep:
    obs: dm.Tensor  # (N, obs_dim)
    caption_probs: dm.Tensor  # (N, vocab)
    reward_probs: dm.Tensor  # (N, bins)
    cont: dm.Tensor  # (N,), in [0, 1]


class WorldModel:
    def __init__(self, config: WorldModelConfig, seed: int):
        self.config = config
        self.params = dm.ParameterSet()
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        c = config
        enc_in = c.obs_dim + c.embed_dim + c.recurrent
        self.encoder = dm.MLP(self.params, "encoder", enc_in, [c.hidden], c.latent_dim,
                              rng, zero_output=True)
        self.cell = dm.GRUCell(self.params, "sequence", c.latent_dim + c.action_dim,
                               c.recurrent, rng)
        self.prior_head = dm.MLP(self.params, "prior", c.recurrent, [c.hidden],
                                 c.latent_dim, rng, zero_output=True)
        self.obs_head = dm.MLP(self.params, "obs", c.state_dim, [c.hidden], c.obs_dim,
                               rng, zero_output=True)
        self.caption_head = dm.MLP(self.params, "caption", c.state_dim, [c.hidden],
                                   c.vocab_size, rng, zero_output=True)
        self.reward_head = dm.MLP(self.params, "reward", c.state_dim, [c.hidden],
                                  c.bins, rng, zero_output=True)
        self.cont_head = dm.MLP(self.params, "cont", c.state_dim, [c.hidden], 1, rng,
                                zero_output=True)

    # -- pieces ---------------------------------------------------------------

    def _grouped_probs(self, logits: dm.Tensor, n: int) -> dm.Tensor:
        c = self.config
        grouped = dm.reshape(logits, (n, c.groups, c.classes))
        return dm.floor_probs(dm.softmax(grouped, axis=-1), c.classes)

    def encode(self, x, u, h, uniforms: np.ndarray, latent_mode: str = "sample"):
        """Posterior over latents plus a straight-through sample.

        Returns (probs Tensor (N,G,C), one-hot ndarray, feed Tensor
        flattened to (N, G*C)). In "mean" mode the feed is the expected
        one-hot (the probabilities themselves), which makes the whole loss
        an analytically differentiable function; "sample" feeds the hard
        sample with straight-through gradients.
        """
        x_t, u_t, h_t = dm._as_tensor(x), dm._as_tensor(u), dm._as_tensor(h)
        n = x_t.data.shape[0]
        expected = (self.config.obs_dim, self.config.embed_dim, self.config.recurrent)
        for name, t, dim in (("x", x_t, expected[0]), ("u", u_t, expected[1]),
                             ("h", h_t, expected[2])):
            if t.data.shape != (n, dim):
                raise dm.ShapeMismatchError(f"encode input {name} has shape {t.data.shape}")
        logits = self.encoder(dm.concat([x_t, u_t, h_t], axis=1))
        probs = self._grouped_probs(logits, n)
        onehot = sample_categorical(probs.data, uniforms)
        if latent_mode == "mean":
            feed = dm.reshape(probs, (n, self.config.latent_dim))
        else:
            feed = dm.reshape(dm.straight_through(probs, onehot),
                              (n, self.config.latent_dim))
        return probs, onehot, feed

    def sequence_step(self, z, h, action):
        """Advance the recurrent state and predict the next latent prior."""
        z_t, h_t, a_t = dm._as_tensor(z), dm._as_tensor(h), dm._as_tensor(action)
        h_next = self.cell(h_t, dm.concat([z_t, a_t], axis=1))
        prior = self._grouped_probs(self.prior_head(h_next), h_next.data.shape[0])
        return prior, h_next

    def decode(self, z, h) -> DecodedStep:
        z_t, h_t = dm._as_tensor(z), dm._as_tensor(h)
        s = dm.concat([z_t, h_t], axis=1)
        n = s.data.shape[0]
        caption = dm.floor_probs(dm.softmax(self.caption_head(s)), self.config.vocab_size)
        reward = dm.floor_probs(dm.softmax(self.reward_head(s)), self.config.bins)
        cont = dm.clip_const(dm.sigmoid(self.cont_head(s)), _CONT_EPS, 1.0 - _CONT_EPS)
        return DecodedStep(
            obs=self.obs_head(s),
            caption_probs=caption,
            reward_probs=reward,
            cont=dm.reshape(cont, (n,)),
        )

    def initial_state(self, n: int) -> LatentState:
        c = self.config
        return LatentState(
            z=np.zeros((n, c.latent_dim)),
            h=np.zeros((n, c.recurrent)),
            probs=np.full((n, c.groups, c.classes), 1.0 / c.classes),
        )

    def observe(self, prev: LatentState, action_onehot, x, u,
                uniforms: np.ndarray) -> LatentState:
        """Acting-path posterior step (no gradients kept by the caller)."""
        _, h = self.sequence_step(prev.z, prev.h, action_onehot)
        probs, onehot, _ = self.encode(x, u, h.data, uniforms)
        n = x.shape[0]
        return LatentState(z=onehot.reshape(n, -1), h=h.data, probs=probs.data)

    # -- training -------------------------------------------------------------

    def loss(self, batch: dict, spec: TwoHotSpec, latent_mode: str = "sample"):
        """End-to-end sequence loss over a (B, L) batch.

        Returns (total Tensor, float metrics, posterior latents and
        recurrent states as (B, L, ...) arrays for imagination starts).
        """
        c = self.config
        x, u = batch["x"], batch["u"]
        B, L = x.shape[:2]
        z_prev: dm.Tensor | np.ndarray = np.zeros((B, c.latent_dim))
        h: dm.Tensor | np.ndarray = np.zeros((B, c.recurrent))
        posts, priors, states_z, states_h = [], [], [], []
        for t in range(L):
            prior, h = self.sequence_step(z_prev, h, batch["action"][:, t])
            post, onehot, z_prev = self.encode(x[:, t], u[:, t], h, batch["uniforms"][:, t],
                                               latent_mode=latent_mode)
            posts.append(dm.reshape(post, (B, 1, c.groups, c.classes)))
            priors.append(dm.reshape(prior, (B, 1, c.groups, c.classes)))
            states_z.append(dm.reshape(z_prev, (B, 1, c.latent_dim)))
            states_h.append(dm.reshape(h, (B, 1, c.recurrent)))
        post_seq = dm.reshape(dm.concat(posts, axis=1), (B * L, c.groups, c.classes))
        prior_seq = dm.reshape(dm.concat(priors, axis=1), (B * L, c.groups, c.classes))
        z_seq = dm.reshape(dm.concat(states_z, axis=1), (B * L, c.latent_dim))
        h_seq = dm.reshape(dm.concat(states_h, axis=1), (B * L, c.recurrent))

        decoded = self.decode(z_seq, h_seq)
        caption_onehot = np.eye(c.vocab_size)[batch["caption_idx"].reshape(-1)]
        total, terms = loss_terms(
            decoded=decoded,
            post_probs=post_seq,
            prior_probs=prior_seq,
            obs_target=x.reshape(B * L, -1),
            caption_onehot=caption_onehot,
            reward_twohot=spec.encode(batch["r"].reshape(-1)),
            cont_target=batch["c"].reshape(-1),
            beta_pred=c.beta_pred,
            beta_reg=c.beta_reg,
        )
        post_states = LatentState(
            z=z_seq.data.reshape(B, L, c.latent_dim).copy(),
            h=h_seq.data.reshape(B, L, c.recurrent).copy(),
            probs=post_seq.data.reshape(B, L, c.groups, c.classes).copy(),
        )
        return total, terms, post_states

    def checkpoint_arrays(self, prefix: str = "world_model") -> dict[str, np.ndarray]:
        return {f"{prefix}/{k}": v for k, v in self.params.arrays().items()}


def loss_terms(decoded: DecodedStep, post_probs, prior_probs, obs_target,
               caption_onehot, reward_twohot, cont_target,
               beta_pred: float = BETA_PRED, beta_reg: float = BETA_REG):
    """Combine per-step predictions into the training objective.

    Squared error on observations; categorical cross-entropy on captions and
    two-hot rewards; binary cross-entropy on continuation; and the two KL
    terms floored at one free nat, each stop-gradiented on one side.
    """
    obs_target = np.asarray(obs_target, dtype=np.float64)
    cont_target = np.asarray(cont_target, dtype=np.float64)

    l_obs = dm.tmean(dm.tsum(dm.square(dm.sub(decoded.obs, obs_target)), axis=-1))
    l_caption = dm.tmean(dm.neg(dm.tsum(
        dm.xlogy_const(caption_onehot, decoded.caption_probs), axis=-1)))
    l_reward = dm.tmean(dm.neg(dm.tsum(
        dm.xlogy_const(reward_twohot, decoded.reward_probs), axis=-1)))
    one_minus = dm.add(1.0, dm.neg(decoded.cont))
    l_cont = dm.tmean(dm.neg(dm.add(
        dm.xlogy_const(cont_target, decoded.cont),
        dm.xlogy_const(1.0 - cont_target, one_minus))))

    kl_pred = dm.tsum(dm.categorical_kl(dm.stop_gradient(post_probs), prior_probs), axis=-1)
    kl_reg = dm.tsum(dm.categorical_kl(post_probs, dm.stop_gradient(prior_probs)), axis=-1)
    l_pred = dm.tmean(dm.maximum_const(kl_pred, FREE_NATS))
    l_reg = dm.tmean(dm.maximum_const(kl_reg, FREE_NATS))

    total = dm.add(
        dm.add(dm.add(l_obs, l_caption), dm.add(l_reward, l_cont)),
        dm.add(dm.mul(l_pred, beta_pred), dm.mul(l_reg, beta_reg)),
    )
    terms = {
        "loss_total": float(total.data),
        "loss_obs": float(l_obs.data),
        "loss_caption": float(l_caption.data),
        "loss_reward": float(l_reward.data),
        "loss_continue": float(l_cont.data),
        "loss_pred": float(l_pred.data),
        "loss_reg": float(l_reg.data),
        "kl_raw": float(kl_pred.data.mean()),
    }
    return total, terms


def caption_embeddings(caption_probs: np.ndarray, vocab: CaptionVocabulary):
    """Unit-norm embedding of each row's most likely caption."""
    idx = np.argmax(caption_probs, axis=-1)
    return vocab.embeddings[idx], idx
