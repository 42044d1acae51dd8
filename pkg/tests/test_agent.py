import numpy as np
import pytest
from helpers import finite_difference, max_rel_err

from dllm import diffmath as dm
from dllm.agent import (ActorCritic, AgentConfig, ImaginedRollout,
                        ReturnNormalizer, lambda_returns, update_normalizer)
from dllm.textembed import CaptionVocabulary
from dllm.worldmodel import TwoHotSpec, WorldModel, WorldModelConfig

VOCAB = CaptionVocabulary(["noop", "move", "collect the wood", "place the table"],
                          dim=8)
WM_CONFIG = WorldModelConfig(obs_dim=6, embed_dim=8, action_dim=3, vocab_size=len(VOCAB),
                             hidden=8, recurrent=8, groups=2, classes=3, bins=5)
AGENT_CONFIG = AgentConfig(state_dim=WM_CONFIG.state_dim, action_dim=WM_CONFIG.action_dim,
                           bins=5, hidden=8)


def tiny_spec():
    return TwoHotSpec.exponential(num_bins=5, limit=3.0)


def make_wm_and_agent(seed=0):
    return WorldModel(WM_CONFIG, seed=seed), ActorCritic(AGENT_CONFIG, seed=seed + 100)


def random_start(rng, n):
    grouped = np.zeros((n, WM_CONFIG.groups, WM_CONFIG.classes))
    idx = rng.integers(0, WM_CONFIG.classes, size=(n, WM_CONFIG.groups))
    np.put_along_axis(grouped, idx[..., None], 1.0, axis=-1)
    from dllm.worldmodel import LatentState
    return LatentState(z=grouped.reshape(n, -1), h=rng.standard_normal((n, WM_CONFIG.recurrent)),
                       probs=np.full((n, WM_CONFIG.groups, WM_CONFIG.classes),
                                     1.0 / WM_CONFIG.classes))


def run_imagine(wm, agent, start, goals, mags, alpha=1.0, horizon=5, seed=42,
                seed_offset=0, allow_repetition=False):
    return agent.imagine(wm, start, goals, mags, horizon, tiny_spec(), VOCAB,
                         alpha=alpha, match_threshold=0.5, seed=seed,
                         seed_offset=seed_offset, allow_repetition=allow_repetition)


# ---------------------------------------------------------------------------
# lambda returns
# ---------------------------------------------------------------------------

def test_lambda_zero_collapses_to_one_step(rng):
    T = 8
    r = rng.standard_normal((T,))
    c = rng.integers(0, 2, size=T).astype(float)
    v = rng.standard_normal((T + 1,))
    got = lambda_returns(r, c, v, lam=0.0, gamma=0.9)
    expected = r + 0.9 * c * v[1:]
    assert np.allclose(got, expected, atol=1e-12)


def test_termination_cuts_return_exactly(rng):
    T = 6
    r = rng.standard_normal((T,))
    c = np.ones(T)
    c[3] = 0.0
    v = rng.standard_normal((T + 1,))
    got = lambda_returns(r, c, v, lam=0.95, gamma=0.99)
    assert got[3] == r[3]


def _expansion_oracle(r, c, v, lam, gamma):
    """Forward expansion: sum the discounted reward-plus-bootstrap terms with
    explicit lambda-mixture coefficients."""
    T = len(r)
    out = np.zeros(T)
    for t in range(T):
        acc, coef = 0.0, 1.0
        for j in range(t, T):
            acc += coef * (r[j] + gamma * c[j] * (1.0 - lam) * v[j + 1])
            coef *= gamma * c[j] * lam
        out[t] = acc + coef * v[T]
    return out


def test_lambda_returns_match_expansion_oracle_200(rng):
    for _ in range(200):
        T = int(rng.integers(1, 16))
        r = rng.standard_normal((T,))
        c = rng.integers(0, 2, size=T).astype(float)
        v = rng.standard_normal((T + 1,))
        lam = float(rng.uniform(0, 1))
        gamma = float(rng.uniform(0.8, 1.0))
        got = lambda_returns(r, c, v, lam, gamma)
        expected = _expansion_oracle(r, c, v, lam, gamma)
        assert np.max(np.abs(got - expected)) <= 1e-10


def test_single_step_boundary_is_bootstrap(rng):
    r = np.array([0.0])
    c = np.array([1.0])
    v = np.array([3.0, 5.0])
    got = lambda_returns(r, c, v, lam=0.7, gamma=1.0)
    # the recursion seeds with the final value, so the mixture collapses to it
    assert got[0] == pytest.approx(5.0)


def test_lambda_returns_batched_columns(rng):
    T, N = 7, 4
    r = rng.standard_normal((T, N))
    c = rng.integers(0, 2, size=(T, N)).astype(float)
    v = rng.standard_normal((T + 1, N))
    got = lambda_returns(r, c, v, 0.95, 0.99)
    for n in range(N):
        single = lambda_returns(r[:, n], c[:, n], v[:, n], 0.95, 0.99)
        assert np.allclose(got[:, n], single, atol=1e-12)


def test_lambda_returns_length_mismatch(rng):
    with pytest.raises(ValueError):
        lambda_returns(np.zeros(3), np.zeros(3), np.zeros(3), 0.9, 0.9)


# ---------------------------------------------------------------------------
# normalizer
# ---------------------------------------------------------------------------

def test_normalizer_constant_returns_decay_to_zero():
    norm = ReturnNormalizer(decay=0.5)
    norm.s = 4.0
    for _ in range(10):
        update_normalizer(np.full(32, 7.0), norm)
    assert norm.s < 0.01
    assert norm.scale == 1.0


def test_normalizer_percentile_oracle():
    norm = ReturnNormalizer(decay=0.0)
    s = update_normalizer(np.arange(100.0), norm)
    expected = np.percentile(np.arange(100.0), 95) - np.percentile(np.arange(100.0), 5)
    assert expected == pytest.approx(89.1)
    assert s == pytest.approx(expected)


def test_normalizer_never_negative(rng):
    norm = ReturnNormalizer()
    for _ in range(50):
        update_normalizer(rng.standard_normal(16), norm)
        assert norm.s >= 0.0
        assert norm.scale >= 1.0


def test_normalizer_rejects_empty():
    with pytest.raises(ValueError):
        update_normalizer(np.array([]), ReturnNormalizer())


# ---------------------------------------------------------------------------
# imagination
# ---------------------------------------------------------------------------

def test_imagine_shapes_and_horizon(rng):
    wm, agent = make_wm_and_agent()
    start = random_start(rng, 3)
    goals = rng.standard_normal((3, 2, 8))
    goals /= np.linalg.norm(goals, axis=-1, keepdims=True)
    rollout = run_imagine(wm, agent, start, goals, np.ones((3, 2)), horizon=5)
    assert rollout.horizon == 5
    assert rollout.states.shape == (6, 3, WM_CONFIG.state_dim)
    assert rollout.rewards_pred.shape == (5, 3)
    assert rollout.intrinsic.shape == (5, 3)
    assert rollout.conts.shape == (5, 3)
    assert np.all((rollout.conts >= 0.0) & (rollout.conts <= 1.0))


def test_imagine_orthogonal_goals_zero_intrinsic(rng):
    wm, agent = make_wm_and_agent()
    start = random_start(rng, 2)
    # goals orthogonal to every caption embedding
    goals = np.zeros((2, 2, 8))
    rank = np.linalg.matrix_rank(VOCAB.embeddings)
    basis = np.linalg.svd(VOCAB.embeddings)[2][:rank]  # rows spanning caption space
    null = np.eye(8) - basis.T @ basis
    vec = null @ rng.standard_normal(8)
    vec /= np.linalg.norm(vec)
    assert np.max(np.abs(VOCAB.embeddings @ vec)) < 1e-9
    goals[:] = vec
    rollout = run_imagine(wm, agent, start, goals, np.ones((2, 2)))
    assert np.all(rollout.intrinsic == 0.0)
    assert np.array_equal(rollout.combined_rewards, rollout.rewards_pred)


def test_imagine_alpha_zero_matches_extrinsic_only(rng):
    wm, agent = make_wm_and_agent()
    start = random_start(rng, 2)
    goals = np.stack([VOCAB.embeddings[:2], VOCAB.embeddings[1:3]])
    a = run_imagine(wm, agent, start, goals, np.ones((2, 2)), alpha=0.0)
    b = run_imagine(wm, agent, start, goals, np.zeros((2, 2)), alpha=1.0)
    assert np.all(a.intrinsic == 0.0)
    assert np.array_equal(a.combined_rewards, a.rewards_pred)
    assert np.array_equal(a.states, b.states)


def test_imagine_joint_batch_equals_single_starts_bit_exact(rng):
    """A batch of 2 starts and the same two starts rolled out one at a time
    must agree bit for bit, given the per-start random streams."""
    wm, agent = make_wm_and_agent(seed=5)
    start = random_start(rng, 2)
    goals = np.stack([VOCAB.embeddings[:2], VOCAB.embeddings[2:4]])
    mags = np.array([[1.0, 2.0], [0.5, -0.5]])
    joint = run_imagine(wm, agent, start, goals, mags, horizon=6, seed=7)

    from dllm.worldmodel import LatentState
    for i in range(2):
        solo_start = LatentState(z=start.z[i:i + 1], h=start.h[i:i + 1],
                                 probs=start.probs[i:i + 1])
        solo = run_imagine(wm, agent, solo_start, goals[i:i + 1], mags[i:i + 1],
                           horizon=6, seed=7, seed_offset=i)
        assert np.array_equal(solo.states[:, 0], joint.states[:, i])
        assert np.array_equal(solo.actions[:, 0], joint.actions[:, i])
        assert np.array_equal(solo.rewards_pred[:, 0], joint.rewards_pred[:, i])
        assert np.array_equal(solo.intrinsic[:, 0], joint.intrinsic[:, i])
        assert np.array_equal(solo.caption_idx[:, 0], joint.caption_idx[:, i])


def test_imagine_single_step_horizon(rng):
    wm, agent = make_wm_and_agent()
    start = random_start(rng, 2)
    goals = np.stack([VOCAB.embeddings[:1]] * 2)
    rollout = run_imagine(wm, agent, start, goals, np.ones((2, 1)), horizon=1)
    returns, values = agent.returns_and_values(rollout, tiny_spec())
    assert returns.shape == (1, 2)
    expected = rollout.combined_rewards[0] + AGENT_CONFIG.gamma * rollout.conts[0] * values[1]
    assert np.allclose(returns[0], expected, atol=1e-12)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _fake_rollout(rng, T=4, n=3):
    states = rng.standard_normal((T + 1, n, AGENT_CONFIG.state_dim))
    actions = rng.integers(0, AGENT_CONFIG.action_dim, size=(T, n))
    onehot = np.eye(AGENT_CONFIG.action_dim)[actions]
    return ImaginedRollout(
        states=states, actions=actions, action_onehot=onehot,
        rewards_pred=rng.standard_normal((T, n)) * 0.1,
        intrinsic=np.zeros((T, n)),
        conts=np.ones((T, n)),
        caption_idx=np.zeros((T, n), dtype=np.int64),
        caption_emb=np.zeros((T, n, 8)),
    )


def test_actor_loss_zero_when_advantage_zero_and_no_entropy(rng):
    _, agent = make_wm_and_agent()
    agent.config.entropy_coef = 0.0
    rollout = _fake_rollout(rng)
    returns, values = agent.returns_and_values(rollout, tiny_spec())
    loss = agent.actor_loss(rollout, returns=values[:4], values=values,
                            normalizer=ReturnNormalizer())
    assert float(loss.data) == 0.0
    with dm.Tape():
        loss = agent.actor_loss(rollout, values[:4], values, ReturnNormalizer())
        dm.backward(loss)
    for _, p in agent.actor_params:
        assert np.all(p.grad == 0.0)


def test_actor_entropy_term_for_uniform_policy(rng):
    _, agent = make_wm_and_agent()
    eta = agent.config.entropy_coef = 0.01
    for _, p in agent.actor_params:
        p.data[:] = 0.0  # zero logits -> exactly uniform policy
    rollout = _fake_rollout(rng)
    returns, values = agent.returns_and_values(rollout, tiny_spec())
    loss = agent.actor_loss(rollout, returns=values[:4], values=values,
                            normalizer=ReturnNormalizer())
    expected = -eta * np.log(AGENT_CONFIG.action_dim)
    assert float(loss.data) == pytest.approx(expected, rel=1e-9)


def test_entropy_bounds_along_training(rng):
    _, agent = make_wm_and_agent()
    states = rng.standard_normal((20, AGENT_CONFIG.state_dim))
    probs = agent.policy_probs(states).data
    entropy = -(probs * np.log(probs)).sum(axis=-1)
    assert np.all(entropy >= 0.0)
    assert np.all(entropy <= np.log(AGENT_CONFIG.action_dim) + 1e-12)


def test_advantage_scaling_preserves_gradient_signs(rng):
    _, agent = make_wm_and_agent()
    agent.config.entropy_coef = 0.0
    rollout = _fake_rollout(rng)
    returns, values = agent.returns_and_values(rollout, tiny_spec())

    def grad_with_scale(scale):
        norm = ReturnNormalizer()
        norm.s = scale
        agent.actor_params.zero_grads()
        with dm.Tape():
            loss = agent.actor_loss(rollout, returns, values, norm)
            dm.backward(loss)
        return {k: p.grad.copy() for k, p in agent.actor_params}

    g1 = grad_with_scale(1.0)
    g2 = grad_with_scale(4.0)
    for k in g1:
        assert np.array_equal(np.sign(g1[k]), np.sign(g2[k]))


def test_critic_loss_at_target_equals_entropy(rng):
    spec = tiny_spec()
    returns = rng.uniform(-2.0, 2.0, size=12)
    target = spec.encode(returns)
    loss = dm.tmean(dm.neg(dm.tsum(dm.xlogy_const(target, dm.Tensor(target)), axis=-1)))
    entropies = np.array([
        -sum(w * np.log(w) for w in row if w > 0) for row in target])
    assert float(loss.data) == pytest.approx(entropies.mean(), abs=1e-12)


def test_critic_loss_gradient_stays_in_critic(rng):
    _, agent = make_wm_and_agent()
    rollout = _fake_rollout(rng)
    returns, _ = agent.returns_and_values(rollout, tiny_spec())
    agent.actor_params.zero_grads()
    agent.critic_params.zero_grads()
    with dm.Tape():
        loss = agent.critic_loss(rollout, returns, tiny_spec())
        dm.backward(loss)
    assert all(p.grad is None for _, p in agent.actor_params)
    assert any(np.any(p.grad != 0.0) for _, p in agent.critic_params)


def test_critic_gradient_matches_finite_differences(rng):
    _, agent = make_wm_and_agent()
    rollout = _fake_rollout(rng, T=3, n=2)
    returns, _ = agent.returns_and_values(rollout, tiny_spec())

    def loss_fn():
        return float(agent.critic_loss(rollout, returns, tiny_spec()).data)

    agent.critic_params.zero_grads()
    with dm.Tape():
        dm.backward(agent.critic_loss(rollout, returns, tiny_spec()))
    for name, p in agent.critic_params:
        numeric = finite_difference(loss_fn, [p])[0]
        assert max_rel_err(p.grad, numeric) <= 1e-3, name


def test_actor_gradient_matches_finite_differences(rng):
    _, agent = make_wm_and_agent()
    rollout = _fake_rollout(rng, T=3, n=2)
    returns, values = agent.returns_and_values(rollout, tiny_spec())
    norm = ReturnNormalizer()
    norm.update(returns)

    def loss_fn():
        return float(agent.actor_loss(rollout, returns, values, norm).data)

    agent.actor_params.zero_grads()
    with dm.Tape():
        dm.backward(agent.actor_loss(rollout, returns, values, norm))
    for name, p in agent.actor_params:
        numeric = finite_difference(loss_fn, [p])[0]
        assert max_rel_err(p.grad, numeric) <= 1e-3, name


def test_agent_checkpoint_arrays_cover_both_nets():
    _, agent = make_wm_and_agent()
    arrays = agent.checkpoint_arrays()
    assert any(k.startswith("actor/") for k in arrays)
    assert any(k.startswith("critic/") for k in arrays)
