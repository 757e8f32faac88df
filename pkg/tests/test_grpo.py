import itertools
import math
import statistics

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rubric_rl.errors import Diverged, ValidationError
from rubric_rl.grpo import (
    FILLER,
    GrpoConfig,
    TaskSpec,
    ToyPolicy,
    clipped_term,
    expected_reward,
    finite_difference,
    gradcheck,
    grpo_gradient,
    grpo_objective,
    grpo_train,
    importance_ratio,
    kl_categorical,
    kl_gradient,
    make_group,
    normalize_advantages,
    relative_error,
    render_tag_tokens,
    sft_descent,
    sft_nll,
    tag_seq_task,
    two_armed_task,
)
from rubric_rl.spans import DEFAULT_TAGS, format_reward

rewards_lists = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=16)


def oracle_advantages(r, eps):
    mu = statistics.fmean(r)
    sigma = statistics.pstdev(r)
    return [(x - mu) / (sigma + eps) for x in r]


# ---- advantages -------------------------------------------------------------


def test_advantage_examples():
    assert np.all(normalize_advantages([0.3] * 5) == 0)
    assert normalize_advantages([0.7]).tolist() == [0.0]
    a = normalize_advantages([0, 1], 1e-4)
    assert a == pytest.approx([-0.5 / 0.5001, 0.5 / 0.5001], abs=1e-12)
    assert a[1] == pytest.approx(0.99980, abs=1e-5)


@given(rewards_lists)
def test_advantages_match_population_formula(r):
    got = normalize_advantages(r, 1e-4)
    if len(set(r)) == 1:
        assert np.all(got == 0)
    else:
        assert got == pytest.approx(oracle_advantages(r, 1e-4), abs=1e-9)
    assert abs(got.mean()) < 1e-12 * max(1.0, np.abs(got).max()) * len(r)


@given(rewards_lists, st.floats(-5, 5))
def test_advantages_shift_invariant(r, c):
    assert normalize_advantages(np.add(r, c)) == pytest.approx(normalize_advantages(r), abs=1e-6)


@given(rewards_lists, st.floats(0.5, 20))
def test_advantages_scale_invariant_when_spread(r, k):
    assume(statistics.pstdev(r) >= 100 * 1e-4 and statistics.pstdev(r) * k >= 100 * 1e-4)
    a = normalize_advantages(r)
    b = normalize_advantages(np.multiply(r, k))
    # (r - mu)/(sigma + eps) moves by at most |A| * eps / sigma under scaling
    assert b == pytest.approx(a, abs=1e-6 + 2e-2 * np.abs(a).max())


@given(rewards_lists)
def test_advantage_ranks_follow_rewards(r):
    a = normalize_advantages(r)
    for i, j in itertools.combinations(range(len(r)), 2):
        if r[i] == r[j]:
            assert a[i] == a[j]
        elif r[i] > r[j]:
            assert a[i] >= a[j]
            if r[i] - r[j] > 1e-9:
                assert a[i] > a[j]
        else:
            assert a[i] <= a[j]
            if r[j] - r[i] > 1e-9:
                assert a[i] < a[j]


def test_advantage_bad_epsilon():
    with pytest.raises(ValidationError):
        normalize_advantages([0, 1], 0.0)


# ---- ratios, clipping -------------------------------------------------------


def test_importance_ratio():
    assert importance_ratio(-1.3, -1.3) == 1.0
    assert importance_ratio(math.log(2) - 4, -4) == pytest.approx(2.0, abs=1e-12)
    assert importance_ratio(math.log(0.8), 0.0) == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(ValidationError) as exc:
        importance_ratio(float("-inf"), 0.0)
    assert exc.value.code == "NONFINITE_LOGPROB"


@pytest.mark.parametrize("rho,a,expected", [(1.0, 0.37, 0.37), (1.0, -2.0, -2.0), (1.5, 1.0, 1.2), (0.5, -1.0, -0.8)])
def test_clipped_term(rho, a, expected):
    assert clipped_term(rho, a, 0.2) == pytest.approx(expected, abs=1e-15)


# ---- KL ---------------------------------------------------------------------


def test_kl_two_point():
    assert kl_categorical(np.array([0.5, 0.5]), np.array([0.25, 0.75])) == pytest.approx(0.143841036, abs=1e-9)


def test_kl_approaches_ln2():
    gaps = [math.log(2) - kl_categorical(np.array([1 - d, d]), np.array([0.5, 0.5])) for d in (1e-2, 1e-4, 1e-8)]
    assert gaps[0] > gaps[1] > gaps[2] > 0
    assert gaps[2] < 1e-6


def test_kl_support_mismatch():
    with pytest.raises(ValidationError) as exc:
        kl_categorical(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert exc.value.code == "SUPPORT_MISMATCH"
    with pytest.raises(ValidationError):
        kl_categorical(ToyPolicy(("a", "b")), ToyPolicy(("a", "b", "c")))


def enumerated_kl(p: ToyPolicy, q: ToyPolicy, ctx: int = 0) -> float:
    lp, lq = p.log_probs(), q.log_probs()
    total = 0.0
    for seq in itertools.product(range(p.V), repeat=p.horizon):
        a, b = p.log_prob(ctx, seq, lp), q.log_prob(ctx, seq, lq)
        total += math.exp(a) * (a - b)
    return total


policy_shapes = st.tuples(
    st.integers(2, 3), st.integers(1, 3), st.sampled_from(["position", "prefix", "window"]), st.integers(1, 2)
)


def random_pair(shape, seed):
    V, H, mode, w = shape
    rng = np.random.default_rng(seed)
    vocab = tuple("abc"[:V])
    p = ToyPolicy(vocab, H, n_contexts=2, state_mode=mode, window=w)
    q = p.copy()
    p.logits = rng.normal(0, 1.5, p.logits.shape)
    q.logits = rng.normal(0, 1.5, q.logits.shape)
    return p, q


@settings(max_examples=60, deadline=None)
@given(policy_shapes, st.integers(0, 2**32 - 1), st.integers(0, 1))
def test_sequence_kl_matches_enumeration(shape, seed, ctx):
    p, q = random_pair(shape, seed)
    assert kl_categorical(p, q, ctx) == pytest.approx(enumerated_kl(p, q, ctx), abs=1e-10)
    assert kl_categorical(p, q, ctx) >= 0
    assert kl_categorical(p, p.copy(), ctx) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(policy_shapes, st.integers(0, 2**32 - 1))
def test_kl_gradient_matches_finite_differences(shape, seed):
    p, q = random_pair(shape, seed)
    probe = p.copy()

    def f(theta):
        probe.logits = theta
        return kl_categorical(probe, q)

    numeric = finite_difference(f, p.logits.copy())
    assert relative_error(kl_gradient(p, q), numeric) < 1e-5


def test_kl_gradient_vanishes_at_reference():
    p, _ = random_pair((3, 2, "prefix", 1), 5)
    assert np.abs(kl_gradient(p, p.copy())).max() < 1e-12


# ---- objective and gradient -------------------------------------------------


def _group_from(policy, rewards, seed=0):
    rng = np.random.default_rng(seed)
    table = policy.probs()
    draws = [policy.sample(0, rng, table) for _ in rewards]
    return make_group(0, [d[0] for d in draws], [d[1] for d in draws], rewards)


def test_objective_at_reference_is_zero():
    policy, _ = random_pair((3, 2, "position", 1), 3)
    for beta in (0.0, 0.04):
        group = _group_from(policy, [0.0, 1.0, 0.25, 0.5])
        assert grpo_objective(group, policy, policy.copy(), GrpoConfig(beta=beta)) == pytest.approx(0.0, abs=1e-12)
    single = _group_from(policy, [0.4])
    assert grpo_objective(single, policy, policy.copy(), GrpoConfig(beta=0.0)) == 0.0


def test_gradient_zero_for_flat_rewards():
    policy, ref = random_pair((3, 2, "window", 2), 11)
    group = _group_from(policy, [0.5] * 6)
    assert np.all(grpo_gradient(group, policy, ref, GrpoConfig(beta=0.0)) == 0)


def test_gradient_three_token_bandit():
    rng = np.random.default_rng(42)
    policy = ToyPolicy(("a", "b", "c"))
    policy.logits = rng.normal(size=policy.logits.shape)
    sampler = policy.copy(policy.logits + rng.normal(0, 0.4, policy.logits.shape))
    table = sampler.probs()
    draws = [sampler.sample(0, rng, table) for _ in range(8)]
    group = make_group(0, [d[0] for d in draws], [d[1] for d in draws], rng.random(8))
    ref = ToyPolicy(("a", "b", "c"))
    config = GrpoConfig(beta=0.1)
    probe = policy.copy()

    def f(theta):
        probe.logits = theta
        return grpo_objective(group, probe, ref, config)

    numeric = finite_difference(f, policy.logits.copy())
    assert relative_error(grpo_gradient(group, policy, ref, config), numeric) < 1e-4


def test_gradcheck_small_batch():
    assert gradcheck(instances=20, seed=123) < 1e-4


# ---- SFT --------------------------------------------------------------------


def test_sft_uniform_closed_form():
    policy = ToyPolicy(("a", "b", "c", "d"), horizon=3)
    assert sft_nll(policy, 0, ["a", "d", "b"]) == pytest.approx(3 * math.log(4), abs=1e-12)


def test_sft_confident_policy():
    policy = ToyPolicy(("a", "b"), horizon=2)
    policy.logits[:, 0] = 60.0
    assert sft_nll(policy, 0, ["a", "a"]) == pytest.approx(0.0, abs=1e-12)


def test_sft_unknown_token():
    with pytest.raises(ValidationError) as exc:
        sft_nll(ToyPolicy(("a", "b")), 0, ["z"])
    assert exc.value.code == "UNKNOWN_TOKEN"


@pytest.mark.parametrize("mode", ["position", "prefix", "window"])
def test_sft_descent_monotone(mode):
    policy = ToyPolicy(("a", "b", "c", "d"), horizon=3, state_mode=mode, window=1)
    losses = sft_descent(policy, 0, ["c", "a", "c"], lr=0.5, steps=100)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_probabilities_normalized():
    policy, _ = random_pair((3, 3, "prefix", 1), 9)
    assert np.abs(policy.probs().sum(axis=1) - 1).max() < 1e-12


# ---- training ---------------------------------------------------------------


def test_training_is_deterministic():
    config = GrpoConfig(beta=0.04, learning_rate=0.5, steps=40)
    a = grpo_train(two_armed_task(), config, seed=5)
    b = grpo_train(two_armed_task(), config, seed=5)
    assert a.to_csv() == b.to_csv()
    assert all(np.array_equal(x, y) for x, y in zip(a.snapshots, b.snapshots))
    assert a.to_csv().splitlines()[0] == "step,objective,mean_reward,kl"


def test_bandit_expected_reward_never_drops():
    trace = grpo_train(two_armed_task(), GrpoConfig(beta=0.0, learning_rate=0.5, steps=60), seed=2)
    ers = [r.expected_reward for r in trace.rows]
    for row, before, after in zip(trace.rows, ers, ers[1:]):
        if 0 < row.mean_reward < 1:
            assert after > before
        else:
            assert after == before


def test_bandit_learns_quickly():
    trace = grpo_train(two_armed_task(), GrpoConfig(beta=0.0, learning_rate=0.5, steps=200), seed=0)
    assert expected_reward(two_armed_task(), trace.policy) >= 0.95


def test_anchor_sampler_stays_in_trust_region():
    # sampling from the frozen start policy caps ratios at 1 + clip
    trace = grpo_train(two_armed_task(), GrpoConfig(beta=0.0, learning_rate=0.5, steps=200, sampler="anchor"), seed=0)
    assert expected_reward(two_armed_task(), trace.policy) < 0.5 * 1.2 + 0.05


def test_non_finite_reward_diverges():
    task = TaskSpec("nan", ("a", "b"), 1, lambda _c, toks: float("nan") if toks[0] == "a" else 0.0)
    with pytest.raises(Diverged):
        grpo_train(task, GrpoConfig(steps=50), seed=0)


def test_config_validation():
    for bad in ({"epsilon_adv": 0}, {"epsilon_clip": 1.0}, {"beta": -1}, {"sampler": "live"}, {"group_size": 0}):
        with pytest.raises(ValidationError):
            GrpoConfig(**bad)


# ---- tag-sequence task ------------------------------------------------------


def test_tag_task_compliant_sequence():
    t = DEFAULT_TAGS.tags
    seq = [t[0], FILLER, t[1], t[2], FILLER, t[3], t[4], FILLER, t[5], t[6], FILLER, t[7]]
    assert format_reward(render_tag_tokens(seq)) == 1.0
    assert tag_seq_task(12).reward(0, tuple(seq)) == 1.0


def test_tags_alone_score_five_ninths():
    assert format_reward(render_tag_tokens(DEFAULT_TAGS.tags)) == pytest.approx(5 / 9)


@settings(max_examples=2000)
@given(st.lists(st.sampled_from(DEFAULT_TAGS.tags + (FILLER,)), min_size=1, max_size=11))
def test_short_sequences_cannot_be_fully_compliant(tokens):
    # all 8 tags exactly once plus a filler inside each span needs 12 tokens
    assert format_reward(render_tag_tokens(tokens)) <= 8 / 9 + 1e-12


def test_tag_task_initial_reward_below_half():
    task = tag_seq_task(12)
    rng = np.random.default_rng(0)
    policy = task.initial_policy()
    table = policy.probs()
    rewards = [task.reward(0, policy.decode(policy.sample(0, rng, table)[0])) for _ in range(4000)]
    assert np.mean(rewards) < 0.5
