"""Desk-scale GRPO and SFT on tabular softmax policies.

Policies here are tables of logits indexed by (state, token). A state is
either the position inside the emitted sequence (``state_mode="position"``,
tokens at different positions are independent) or the full prefix emitted so
far (``state_mode="prefix"``, a tree with ``sum(V**t for t < H)`` nodes per
context, so keep V and H small). Everything is exact: sequence
log-probabilities, the KL between two policies, and analytic gradients.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Sequence

import numpy as np

from .errors import Diverged, ValidationError
from .spans import DEFAULT_TAGS, format_reward


STATE_MODES = ("position", "prefix", "window")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ToyPolicy:
    def __init__(
        self,
        vocab: Sequence[str],
        horizon: int = 1,
        *,
        n_contexts: int = 1,
        state_mode: str = "position",
        window: int = 1,
        logits: np.ndarray | None = None,
    ) -> None:
        if state_mode not in STATE_MODES:
            raise ValueError(f"unknown state_mode {state_mode!r}")
        if horizon < 1 or n_contexts < 1 or len(vocab) < 1 or window < 1:
            raise ValueError("horizon, n_contexts, window and vocab size must all be positive")
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary has duplicate tokens")
        self.vocab = tuple(vocab)
        self.horizon = horizon
        self.n_contexts = n_contexts
        self.state_mode = state_mode
        self.window = window
        V = len(self.vocab)
        if state_mode == "position":
            self.states_per_context = horizon
        elif state_mode == "prefix":
            self.states_per_context = sum(V**t for t in range(horizon))
        else:
            # last `window` tokens, left-padded with a begin-of-sequence marker (id V)
            self.states_per_context = (V + 1) ** window
        self._level_offset = [sum(V**i for i in range(t)) for t in range(horizon)]
        self._ids = {tok: i for i, tok in enumerate(self.vocab)}
        shape = (n_contexts * self.states_per_context, V)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=float)
        if logits.shape != shape:
            raise ValueError(f"logits shape {logits.shape} != {shape}")
        self.logits = logits

    @property
    def V(self) -> int:
        return len(self.vocab)

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    def copy(self, logits: np.ndarray | None = None) -> ToyPolicy:
        return ToyPolicy(
            self.vocab,
            self.horizon,
            n_contexts=self.n_contexts,
            state_mode=self.state_mode,
            window=self.window,
            logits=self.logits.copy() if logits is None else logits,
        )

    def same_shape(self, other: ToyPolicy) -> bool:
        return (
            self.vocab == other.vocab
            and self.horizon == other.horizon
            and self.n_contexts == other.n_contexts
            and self.state_mode == other.state_mode
            and self.window == other.window
        )

    # A key identifies the state reached after some prefix: the position for
    # "position", the prefix itself for "prefix", the trailing window for "window".
    def root_key(self) -> Hashable:
        if self.state_mode == "position":
            return 0
        if self.state_mode == "prefix":
            return ()
        return (self.V,) * self.window

    def child_key(self, key: Any, token: int) -> Hashable:
        if self.state_mode == "position":
            return key + 1
        if self.state_mode == "prefix":
            return key + (token,)
        return key[1:] + (token,)

    def key_state(self, context: int, key: Any) -> int:
        base = context * self.states_per_context
        if self.state_mode == "position":
            return base + key
        if self.state_mode == "prefix":
            code = 0
            for a in key:
                code = code * self.V + a
            return base + self._level_offset[len(key)] + code
        code = 0
        for a in key:
            code = code * (self.V + 1) + a
        return base + code

    def state(self, context: int, prefix: Sequence[int]) -> int:
        key = self.root_key()
        for a in prefix:
            key = self.child_key(key, a)
        return self.key_state(context, key)

    def probs(self) -> np.ndarray:
        return np.exp(_log_softmax(self.logits))

    def log_probs(self) -> np.ndarray:
        return _log_softmax(self.logits)

    def encode(self, seq: Iterable[str | int]) -> tuple[int, ...]:
        out = []
        for tok in seq:
            if isinstance(tok, (int, np.integer)) and not isinstance(tok, bool):
                if not 0 <= tok < self.V:
                    raise ValidationError(f"token id {tok} outside vocabulary", code="UNKNOWN_TOKEN")
                out.append(int(tok))
            elif tok in self._ids:
                out.append(self._ids[tok])
            else:
                raise ValidationError(f"token {tok!r} not in vocabulary", code="UNKNOWN_TOKEN")
        return tuple(out)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.vocab[i] for i in ids)

    def log_prob(self, context: int, seq: Sequence[str | int], log_table: np.ndarray | None = None) -> float:
        ids = self.encode(seq)
        if len(ids) != self.horizon:
            raise ValidationError(f"sequence length {len(ids)} != horizon {self.horizon}", code="BAD_SEQUENCE")
        lp = self.log_probs() if log_table is None else log_table
        total, key = 0.0, self.root_key()
        for a in ids:
            total += lp[self.key_state(context, key), a]
            key = self.child_key(key, a)
        return float(total)

    def grad_log_prob(self, context: int, seq: Sequence[str | int], prob_table: np.ndarray | None = None) -> np.ndarray:
        """d log pi(seq | context) / d logits."""
        ids = self.encode(seq)
        p = self.probs() if prob_table is None else prob_table
        g = np.zeros_like(self.logits)
        key = self.root_key()
        for a in ids:
            s = self.key_state(context, key)
            g[s] -= p[s]
            g[s, a] += 1.0
            key = self.child_key(key, a)
        return g

    def sample(self, context: int, rng: np.random.Generator, prob_table: np.ndarray | None = None) -> tuple[tuple[int, ...], float]:
        p = self.probs() if prob_table is None else prob_table
        ids: list[int] = []
        logp = 0.0
        key = self.root_key()
        for _ in range(self.horizon):
            s = self.key_state(context, key)
            cdf = np.cumsum(p[s])
            a = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), self.V - 1)
            ids.append(a)
            logp += math.log(p[s, a])
            key = self.child_key(key, a)
        return tuple(ids), logp


@dataclass(frozen=True)
class GrpoConfig:
    epsilon_adv: float = 1e-4
    epsilon_clip: float = 0.2
    beta: float = 0.04
    learning_rate: float = 0.1
    steps: int = 100
    group_size: int = 8
    # "snapshot": sample each group from a frozen copy of the live policy;
    # "anchor": sample from the frozen start-of-run reference
    sampler: str = "snapshot"
    updates_per_group: int = 1

    def __post_init__(self) -> None:
        if not self.epsilon_adv > 0:
            raise ValidationError("epsilon_adv must be > 0", code="BAD_CONFIG")
        if not 0 < self.epsilon_clip < 1:
            raise ValidationError("epsilon_clip must lie in (0, 1)", code="BAD_CONFIG")
        if not self.beta >= 0:
            raise ValidationError("beta must be >= 0", code="BAD_CONFIG")
        if self.group_size < 1 or self.steps < 0 or self.updates_per_group < 1:
            raise ValidationError("group_size, updates_per_group >= 1 and steps >= 0", code="BAD_CONFIG")
        if self.sampler not in ("snapshot", "anchor"):
            raise ValidationError(f"unknown sampler {self.sampler!r}", code="BAD_CONFIG")


@dataclass(frozen=True)
class CandidateGroup:
    context: int
    sequences: tuple[tuple[int, ...], ...]
    sample_logps: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.sequences)
        if n < 1:
            raise ValidationError("a candidate group needs at least one candidate", code="EMPTY_GROUP")
        if not (len(self.sample_logps) == len(self.rewards) == len(self.advantages) == n):
            raise ValidationError("group arrays disagree in length", code="BAD_GROUP")

    @property
    def size(self) -> int:
        return len(self.sequences)


def normalize_advantages(rewards: Sequence[float], epsilon_adv: float = 1e-4) -> np.ndarray:
    """Center by the group mean and scale by the population standard deviation plus epsilon."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValidationError("no rewards to normalize", code="EMPTY_GROUP")
    if not epsilon_adv > 0:
        raise ValidationError("epsilon_adv must be > 0", code="BAD_CONFIG")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    mu = r.mean()
    sigma = math.sqrt(float(np.mean((r - mu) ** 2)))
    return (r - mu) / (sigma + epsilon_adv)


def importance_ratio(logp_current: float, logp_reference: float) -> float:
    if not (math.isfinite(logp_current) and math.isfinite(logp_reference)):
        raise ValidationError("non-finite log-probability", code="NONFINITE_LOGPROB")
    return math.exp(logp_current - logp_reference)


def clipped_term(rho: float, advantage: float, epsilon_clip: float) -> float:
    clipped = min(max(rho, 1.0 - epsilon_clip), 1.0 + epsilon_clip)
    return min(rho * advantage, clipped * advantage)


def _unclipped_active(rho: float, advantage: float, epsilon_clip: float) -> bool:
    clipped = min(max(rho, 1.0 - epsilon_clip), 1.0 + epsilon_clip)
    return rho * advantage <= clipped * advantage


def _categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValidationError("distributions differ in size", code="SUPPORT_MISMATCH")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValidationError("q is zero where p is positive", code="SUPPORT_MISMATCH")
    return max(float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))), 0.0)


def _policy_kl(p: ToyPolicy, q: ToyPolicy, context: int, want_grad: bool) -> tuple[float, np.ndarray | None]:
    """Sequence-level KL(p || q) at one context by a forward/backward pass over states.

    Forward: probability of reaching each state at each step under p.
    Backward: value of a state = expected remaining log-ratio under p.
    The gradient for a state's logits is reach * p * (g - value), summed over
    every step at which the state can be visited.
    """
    if not p.same_shape(q):
        raise ValidationError("policies are defined on different state/vocabulary layouts", code="SUPPORT_MISMATCH")
    lp, lq = p.log_probs(), q.log_probs()
    pp = np.exp(lp)
    grad = np.zeros_like(p.logits) if want_grad else None

    levels: list[dict[Hashable, float]] = [{p.root_key(): 1.0}]
    for _ in range(p.horizon - 1):
        nxt: dict[Hashable, float] = {}
        for key, reach in levels[-1].items():
            s = p.key_state(context, key)
            for a in range(p.V):
                child = p.child_key(key, a)
                nxt[child] = nxt.get(child, 0.0) + reach * pp[s, a]
        levels.append(nxt)

    values: dict[Hashable, float] = {}
    for t in range(p.horizon - 1, -1, -1):
        current: dict[Hashable, float] = {}
        for key, reach in levels[t].items():
            s = p.key_state(context, key)
            g = lp[s] - lq[s]
            if t + 1 < p.horizon:
                g = g + np.array([values[p.child_key(key, a)] for a in range(p.V)])
            v = float(pp[s] @ g)
            current[key] = v
            if grad is not None:
                grad[s] += reach * pp[s] * (g - v)
        values = current
    return max(values[p.root_key()], 0.0), grad


def kl_categorical(p: ToyPolicy | np.ndarray, q: ToyPolicy | np.ndarray, context: int = 0) -> float:
    """KL(p || q), exact.

    Accepts two probability vectors, or two policies (the KL of their
    sequence distributions at ``context``).
    """
    if isinstance(p, ToyPolicy) and isinstance(q, ToyPolicy):
        return _policy_kl(p, q, context, want_grad=False)[0]
    if isinstance(p, ToyPolicy) or isinstance(q, ToyPolicy):
        raise ValidationError("cannot mix a policy with a raw distribution", code="SUPPORT_MISMATCH")
    return _categorical_kl(p, q)


def kl_gradient(p: ToyPolicy, q: ToyPolicy, context: int = 0) -> np.ndarray:
    grad = _policy_kl(p, q, context, want_grad=True)[1]
    assert grad is not None
    return grad


def make_group(
    context: int,
    sequences: Sequence[Sequence[int]],
    sample_logps: Sequence[float],
    rewards: Sequence[float],
    epsilon_adv: float = 1e-4,
) -> CandidateGroup:
    return CandidateGroup(
        context=context,
        sequences=tuple(tuple(s) for s in sequences),
        sample_logps=np.asarray(sample_logps, dtype=float),
        rewards=np.asarray(rewards, dtype=float),
        advantages=normalize_advantages(rewards, epsilon_adv),
    )


def _ratios(group: CandidateGroup, policy: ToyPolicy, log_table: np.ndarray) -> np.ndarray:
    return np.array(
        [
            importance_ratio(policy.log_prob(group.context, seq, log_table), float(ref))
            for seq, ref in zip(group.sequences, group.sample_logps)
        ]
    )


def grpo_objective(group: CandidateGroup, policy: ToyPolicy, reference: ToyPolicy, config: GrpoConfig) -> float:
    """Clipped surrogate averaged over the group, minus beta times KL to ``reference``.

    Ratios are taken against the log-probabilities stored on the group (the
    distribution the candidates were sampled from).
    """
    rho = _ratios(group, policy, policy.log_probs())
    surrogate = float(np.mean([clipped_term(r, a, config.epsilon_clip) for r, a in zip(rho, group.advantages)]))
    if config.beta == 0:
        return surrogate
    return surrogate - config.beta * kl_categorical(policy, reference, group.context)


def grpo_gradient(group: CandidateGroup, policy: ToyPolicy, reference: ToyPolicy, config: GrpoConfig) -> np.ndarray:
    lp = policy.log_probs()
    p = np.exp(lp)
    rho = _ratios(group, policy, lp)
    grad = np.zeros_like(policy.logits)
    n = group.size
    for seq, r, a in zip(group.sequences, rho, group.advantages):
        # the clipped branch is flat in theta; only the unclipped one carries gradient
        if a != 0 and _unclipped_active(r, a, config.epsilon_clip):
            grad += (a * r / n) * policy.grad_log_prob(group.context, seq, p)
    if config.beta:
        grad -= config.beta * kl_gradient(policy, reference, group.context)
    return grad


def sft_nll(policy: ToyPolicy, context: int, target: Sequence[str | int]) -> float:
    return -policy.log_prob(context, target)


def sft_gradient(policy: ToyPolicy, context: int, target: Sequence[str | int]) -> np.ndarray:
    return -policy.grad_log_prob(context, target)


def sft_descent(policy: ToyPolicy, context: int, target: Sequence[str | int], lr: float = 0.5, steps: int = 100) -> list[float]:
    """Plain gradient descent on the NLL of one target; mutates ``policy``. Returns the loss per step."""
    losses = [sft_nll(policy, context, target)]
    for _ in range(steps):
        policy.logits -= lr * sft_gradient(policy, context, target)
        losses.append(sft_nll(policy, context, target))
    return losses


# ---- training ---------------------------------------------------------------


@dataclass
class TaskSpec:
    name: str
    vocab: tuple[str, ...]
    horizon: int
    reward: Callable[[int, tuple[str, ...]], float]
    n_contexts: int = 1
    state_mode: str = "position"
    window: int = 1
    reference_logits: np.ndarray | None = None

    def initial_policy(self) -> ToyPolicy:
        return ToyPolicy(
            self.vocab, self.horizon, n_contexts=self.n_contexts, state_mode=self.state_mode, window=self.window
        )

    def reference_policy(self) -> ToyPolicy:
        ref = self.initial_policy()
        if self.reference_logits is not None:
            ref.logits = np.array(self.reference_logits, dtype=float)
        return ref

    @property
    def enumerable(self) -> bool:
        return len(self.vocab) ** self.horizon <= 4096


def two_armed_task() -> TaskSpec:
    return TaskSpec(
        name="two-armed",
        vocab=("rewarded", "unrewarded"),
        horizon=1,
        reward=lambda _ctx, toks: 1.0 if toks[0] == "rewarded" else 0.0,
    )


FILLER = "filler"


def render_tag_tokens(tokens: Sequence[str]) -> str:
    return " ".join("word" if t == FILLER else t for t in tokens)


def tag_seq_task(horizon: int = 12) -> TaskSpec:
    """Emit tag literals and filler; reward is the format reward of the rendered text.

    A fully compliant output needs all 8 tags plus one filler inside each of
    the 4 spans, so the horizon must be at least 12 for a reward of 1.
    """
    vocab = DEFAULT_TAGS.tags + (FILLER,)
    return TaskSpec(
        name="tag-seq",
        vocab=vocab,
        horizon=horizon,
        reward=lambda _ctx, toks: format_reward(render_tag_tokens(toks)),
    )


TASKS: dict[str, Callable[[], TaskSpec]] = {"two-armed": two_armed_task, "tag-seq": tag_seq_task}


@dataclass(frozen=True)
class TraceRow:
    step: int
    objective: float
    mean_reward: float
    kl: float
    expected_reward: float | None = None


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)
    policy: ToyPolicy | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "objective", "mean_reward", "kl"])
        for r in self.rows:
            w.writerow([r.step, repr(r.objective), repr(r.mean_reward), repr(r.kl)])
        return buf.getvalue()


def expected_reward(task: TaskSpec, policy: ToyPolicy, context: int = 0) -> float:
    """Exact expected reward by enumerating every sequence (small tasks only)."""
    import itertools

    lp = policy.log_probs()
    total = 0.0
    for ids in itertools.product(range(policy.V), repeat=policy.horizon):
        total += math.exp(policy.log_prob(context, ids, lp)) * task.reward(context, policy.decode(ids))
    return total


def grpo_train(task: TaskSpec, config: GrpoConfig, seed: int) -> TrainTrace:
    """Sample a group per context, score, normalize, ascend; repeat ``config.steps`` times."""
    rng = np.random.default_rng(seed)
    policy = task.initial_policy()
    anchor = task.reference_policy()
    trace = TrainTrace()
    n_ctx = task.n_contexts

    for step in range(config.steps):
        sampler = anchor if config.sampler == "anchor" else policy.copy()
        table = sampler.probs()
        groups = []
        for c in range(n_ctx):
            draws = [sampler.sample(c, rng, table) for _ in range(config.group_size)]
            seqs = [d[0] for d in draws]
            rewards = [task.reward(c, policy.decode(s)) for s in seqs]
            groups.append(make_group(c, seqs, [d[1] for d in draws], rewards, config.epsilon_adv))

        objective = float(np.mean([grpo_objective(g, policy, anchor, config) for g in groups]))
        mean_reward = float(np.mean([g.rewards.mean() for g in groups]))
        kl = float(np.mean([kl_categorical(policy, anchor, c) for c in range(n_ctx)]))
        exp_r = float(np.mean([expected_reward(task, policy, c) for c in range(n_ctx)])) if task.enumerable else None
        if not (math.isfinite(objective) and math.isfinite(kl)):
            raise Diverged(f"non-finite objective at step {step}")
        trace.rows.append(TraceRow(step, objective, mean_reward, kl, exp_r))

        for _ in range(config.updates_per_group):
            grad = sum(grpo_gradient(g, policy, anchor, config) for g in groups) / n_ctx
            policy.logits += config.learning_rate * grad
        if not np.all(np.isfinite(policy.logits)):
            raise Diverged(f"non-finite logits after step {step}")
        trace.snapshots.append(policy.logits.copy())

    trace.policy = policy
    return trace


# ---- gradient check ---------------------------------------------------------


def finite_difference(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array, one entry at a time."""
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        orig = theta[idx]
        theta[idx] = orig + h
        up = f(theta)
        theta[idx] = orig - h
        down = f(theta)
        theta[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def random_instance(rng: np.random.Generator) -> tuple[CandidateGroup, ToyPolicy, ToyPolicy, GrpoConfig]:
    """A random policy/reference/group triple for gradient checking.

    Candidates come from a third random policy so that ratios spread out and
    some of them land outside the clip range.
    """
    V = int(rng.integers(2, 5))
    mode = STATE_MODES[int(rng.integers(0, 3))]
    H = int(rng.integers(1, 3 if mode == "prefix" else 4))
    window = int(rng.integers(1, 3))
    vocab = tuple(f"t{i}" for i in range(V))

    def rand_policy(scale: float) -> ToyPolicy:
        p = ToyPolicy(vocab, H, state_mode=mode, window=window)
        p.logits = rng.normal(0.0, scale, size=p.logits.shape)
        return p

    policy, reference, sampler = rand_policy(1.0), rand_policy(1.0), rand_policy(0.7)
    sampler.logits = policy.logits + rng.normal(0.0, 0.3, size=policy.logits.shape)
    n = int(rng.integers(2, 9))
    table = sampler.probs()
    draws = [sampler.sample(0, rng, table) for _ in range(n)]
    rewards = rng.random(n)
    group = make_group(0, [d[0] for d in draws], [d[1] for d in draws], rewards)
    config = GrpoConfig(beta=float(rng.uniform(0.0, 0.5)), epsilon_clip=0.2)
    return group, policy, reference, config


def gradcheck(instances: int = 100, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between :func:`grpo_gradient` and central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        group, policy, reference, config = random_instance(rng)
        analytic = grpo_gradient(group, policy, reference, config)
        probe = policy.copy()

        def f(theta: np.ndarray) -> float:
            probe.logits = theta
            return grpo_objective(group, probe, reference, config)

        numeric = finite_difference(f, policy.logits.copy(), h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
