"""Rewards, group-relative advantages, collapse diagnostics, GAE, and the
accept/reject prompt sampler."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import ConfigError, Prompt, RewardVector, Trajectory, Vocab, VerifyMode, verify


@dataclass(frozen=True)
class RewardConfig:
    verify_mode: VerifyMode = VerifyMode.BINARY

    def __post_init__(self):
        object.__setattr__(self, "verify_mode", VerifyMode(self.verify_mode))


def assemble_rewards(traj: Trajectory, prompt: Prompt, vocab: Vocab, cfg: RewardConfig = RewardConfig()) -> RewardVector:
    acc, correct = verify(prompt, traj.final_tokens, vocab, cfg.verify_mode)
    return RewardVector(accuracy=acc, speed=traj.tpf, correct=correct)


@dataclass
class Group:
    prompt: Prompt
    trajectories: list[Trajectory]
    rewards: list[RewardVector]
    draw_index: int = -1
    advantages: np.ndarray | None = None

    def __post_init__(self):
        if len(self.trajectories) != len(self.rewards):
            raise ConfigError("trajectories and rewards differ in length")
        if len(self.trajectories) < 2:
            raise ConfigError("a group needs at least two members")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    def reward_matrix(self) -> np.ndarray:
        """``(G, 2)`` array of (accuracy, speed)."""
        return np.array([r.as_tuple() for r in self.rewards], dtype=float)

    @property
    def tpfs(self) -> np.ndarray:
        return np.array([r.speed for r in self.rewards])

    @property
    def n_correct(self) -> int:
        return sum(r.correct for r in self.rewards)


class NormMode(str, Enum):
    COUPLED = "coupled"
    DECOUPLED = "decoupled"


class StdKind(str, Enum):
    POPULATION = "population"
    SAMPLE = "sample"


class EpsGuard(str, Enum):
    """How epsilon keeps the z-score denominator away from zero.

    ``floor`` divides by ``max(std, eps)``, which is exactly scale-invariant
    whenever ``std > eps``; ``add`` divides by ``std + eps``.
    """

    FLOOR = "floor"
    ADD = "add"


@dataclass(frozen=True)
class NormConfig:
    mode: NormMode = NormMode.DECOUPLED
    normalize_accuracy: bool = False
    epsilon: float = 1e-8
    std_kind: StdKind = StdKind.POPULATION
    batch_norm: bool = True
    guard: EpsGuard = EpsGuard.FLOOR

    def __post_init__(self):
        object.__setattr__(self, "mode", NormMode(self.mode))
        object.__setattr__(self, "std_kind", StdKind(self.std_kind))
        object.__setattr__(self, "guard", EpsGuard(self.guard))
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


def _std(x: np.ndarray, kind: StdKind, axis=None) -> np.ndarray:
    return np.std(x, axis=axis, ddof=1 if kind is StdKind.SAMPLE else 0, keepdims=axis is not None)


def zscore(x, eps: float, kind: StdKind = StdKind.POPULATION, axis=None,
           guard: EpsGuard = EpsGuard.FLOOR) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=axis, keepdims=axis is not None)
    sd = _std(x, kind, axis)
    z = (x - mu) / (np.maximum(sd, eps) if guard is EpsGuard.FLOOR else sd + eps)
    # identical entries give exactly zero, not rounding noise over eps
    return np.where(np.ptp(x, axis=axis, keepdims=axis is not None) == 0, 0.0, z)


def grpo_advantages(rewards: Sequence[float], eps: float = 1e-8, std_kind: StdKind = StdKind.POPULATION,
                    guard: EpsGuard = EpsGuard.FLOOR) -> np.ndarray:
    """Standardize scalar rewards within one group."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ConfigError("group advantages need at least two rewards")
    return zscore(r, eps, std_kind, guard=guard)


def decoupled_advantages(reward_groups: Sequence[np.ndarray], cfg: NormConfig = NormConfig()) -> list[np.ndarray]:
    """Advantages for a batch of groups.

    ``reward_groups[i]`` is a ``(G_i, n)`` matrix of raw objective values,
    column 0 being accuracy. Decoupled mode standardizes every column inside
    its group (accuracy passes through raw unless ``normalize_accuracy``) and
    sums the columns; coupled mode sums first and standardizes the total.
    With ``batch_norm`` the composite is re-standardized over the whole batch.
    """
    if not reward_groups:
        raise ConfigError("empty batch")
    composite = []
    for r in reward_groups:
        r = np.asarray(r, dtype=float)
        if r.ndim != 2 or r.shape[0] < 2:
            raise ConfigError("each group must be a (G>=2, n) reward matrix")
        if cfg.mode is NormMode.COUPLED:
            composite.append(zscore(r.sum(axis=1), cfg.epsilon, cfg.std_kind, guard=cfg.guard))
            continue
        z = zscore(r, cfg.epsilon, cfg.std_kind, axis=0, guard=cfg.guard)
        if not cfg.normalize_accuracy:
            z[:, 0] = r[:, 0]
        composite.append(z.sum(axis=1))
    if not cfg.batch_norm:
        return composite
    flat = zscore(np.concatenate(composite), cfg.epsilon, cfg.std_kind, guard=cfg.guard)
    out, i = [], 0
    for a in composite:
        out.append(flat[i:i + len(a)])
        i += len(a)
    return out


def compute_advantages(groups: Sequence[Group], cfg: NormConfig) -> list[np.ndarray]:
    advs = decoupled_advantages([g.reward_matrix() for g in groups], cfg)
    for g, a in zip(groups, advs):
        g.advantages = a
    return advs


def collapse_ratio(adv_groups: Iterable[Sequence[float]], eps_c: float = 0.1) -> float:
    """Fraction of within-group pairs whose advantages differ by less than ``eps_c``."""
    close = total = 0
    for adv in adv_groups:
        a = np.asarray(adv, dtype=float)
        d = np.abs(a[:, None] - a[None, :])[np.triu_indices(len(a), k=1)]
        close += int(np.sum(d < eps_c))
        total += d.size
    if total == 0:
        raise ValueError("collapse ratio needs at least one within-group pair")
    return close / total


def zero_signal_fraction(adv_groups: Iterable[Sequence[float]], tol: float = 1e-9) -> float:
    """Fraction of groups whose members all share one advantage value."""
    flags = [float(np.ptp(np.asarray(a, dtype=float)) < tol) for a in adv_groups]
    return sum(flags) / len(flags) if flags else 0.0


# --- critic baseline ------------------------------------------------------


@dataclass
class CriticTable:
    """Tabular value baseline keyed by (prompt bucket, block, masked-count bucket)."""

    learning_rate: float = 0.5
    n_prompt_buckets: int = 16
    values: dict = field(default_factory=dict)

    def key(self, prompt: Prompt, block: int, n_masked: int) -> tuple[int, int, int]:
        return (prompt.tokens[0] % self.n_prompt_buckets, block, n_masked)

    def value(self, key) -> float:
        return self.values.get(key, 0.0)

    def update(self, visits: Sequence[tuple[tuple, float]]) -> None:
        """One gradient step on ``1/2 (V - G)^2`` averaged over visits per key:
        ``V <- V + lr * mean(G - V)``."""
        residuals = defaultdict(list)
        for k, ret in visits:
            residuals[k].append(ret - self.value(k))
        for k, res in residuals.items():
            self.values[k] = self.value(k) + self.learning_rate * float(np.mean(res))


def step_keys(critic: CriticTable, prompt: Prompt, traj: Trajectory) -> list[tuple]:
    return [critic.key(prompt, s.block, len(s.masked)) for s in traj.steps]


def gae_advantages(
    group: Group,
    critic: CriticTable,
    gamma: float = 1.0,
    lam: float = 1.0,
    *,
    update: bool = True,
) -> list[np.ndarray]:
    """Per-step GAE advantages with the coupled total reward paid at the last step.

    Returns one array per trajectory (one entry per decoding step) and, if
    ``update``, moves the critic toward the discounted returns.
    """
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise ConfigError("gamma and lambda must lie in [0, 1]")
    out, visits = [], []
    for traj, rew in zip(group.trajectories, group.rewards):
        keys = step_keys(critic, group.prompt, traj)
        T = len(keys)
        values = np.array([critic.value(k) for k in keys] + [0.0])
        rewards = np.zeros(T)
        rewards[-1] = rew.accuracy + rew.speed
        adv = np.zeros(T)
        running = 0.0
        for t in reversed(range(T)):
            delta = rewards[t] + gamma * values[t + 1] - values[t]
            running = delta + gamma * lam * running
            adv[t] = running
        returns = np.zeros(T)
        g = 0.0
        for t in reversed(range(T)):
            g = rewards[t] + gamma * g
            returns[t] = g
        visits.extend(zip(keys, returns))
        out.append(adv)
    if update:
        critic.update(visits)
    return out


# --- dynamic sampling -----------------------------------------------------


class FilterCriterion(str, Enum):
    SPREAD = "spread"
    VARIANCE = "variance"


@dataclass(frozen=True)
class FilterConfig:
    enabled: bool = True
    criterion: FilterCriterion = FilterCriterion.SPREAD
    delta: float = 0.01
    variance_threshold: float = 0.01
    require_one_correct: bool = True
    max_resamples_per_slot: int = 20

    def __post_init__(self):
        object.__setattr__(self, "criterion", FilterCriterion(self.criterion))
        if self.criterion is FilterCriterion.SPREAD and self.delta <= 0:
            raise ConfigError("spread filter needs delta > 0")
        if self.criterion is FilterCriterion.VARIANCE and self.variance_threshold <= 0:
            raise ConfigError("variance filter needs variance_threshold > 0")
        if self.max_resamples_per_slot < 1:
            raise ConfigError("max_resamples_per_slot must be >= 1")


def group_passes(tpfs: Sequence[float], corrects: Sequence[bool], cfg: FilterConfig) -> bool:
    if not cfg.enabled:
        return True
    tpfs = np.asarray(tpfs, dtype=float)
    if cfg.require_one_correct and not any(corrects):
        return False
    if cfg.criterion is FilterCriterion.SPREAD:
        return float(tpfs.max() - tpfs.min()) >= cfg.delta
    return float(np.var(tpfs)) >= cfg.variance_threshold


class ResampleExhausted(RuntimeError):
    def __init__(self, drawn: int, accepted: int, needed: int):
        self.drawn, self.accepted, self.needed = drawn, accepted, needed
        rate = accepted / drawn if drawn else 0.0
        super().__init__(
            f"dynamic sampling drew {drawn} prompts but accepted only {accepted}/{needed} groups "
            f"(acceptance rate {rate:.3f})")


@dataclass
class SampleResult:
    groups: list[Group]
    drawn: int
    next_index: int
    rejected_no_correct: int = 0
    rejected_spread: int = 0

    @property
    def acceptance_rate(self) -> float:
        return len(self.groups) / self.drawn if self.drawn else 0.0


def dynamic_sample(
    draw_prompt: Callable[[int], Prompt],
    rollout_fn: Callable[[int, Prompt], Group],
    cfg: FilterConfig,
    batch_size: int,
    *,
    start: int = 0,
    map_fn: Callable = map,
    lookahead: int = 1,
) -> SampleResult:
    """Fill ``batch_size`` groups by accept/reject over a prompt stream.

    ``draw_prompt(i)`` returns the ``i``-th prompt of the stream and
    ``rollout_fn(i, prompt)`` its rollout group; both must be pure in ``i`` so
    that speculative rollouts (``lookahead`` > 1, e.g. with a process pool's
    ``map``) commit the same groups in the same order as a serial run.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    budget = batch_size * cfg.max_resamples_per_slot
    accepted: list[Group] = []
    res = SampleResult(accepted, 0, start)
    i = start
    while len(accepted) < batch_size:
        if res.drawn >= budget:
            raise ResampleExhausted(res.drawn, len(accepted), batch_size)
        n = max(1, min(lookahead, budget - res.drawn))
        idx = list(range(i, i + n))
        groups = list(map_fn(rollout_fn, idx, [draw_prompt(j) for j in idx]))
        for j, g in zip(idx, groups):
            res.drawn += 1
            i = j + 1
            if not g.n_correct and cfg.enabled and cfg.require_one_correct:
                res.rejected_no_correct += 1
            elif group_passes(g.tpfs, [r.correct for r in g.rewards], cfg):
                g.draw_index = j
                accepted.append(g)
            else:
                res.rejected_spread += 1
            if len(accepted) == batch_size or res.drawn >= budget:
                break
    res.next_index = i
    return res
