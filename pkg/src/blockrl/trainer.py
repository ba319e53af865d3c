"""Training loop: freeze behaviour policy, fill accepted groups, normalize,
update, log."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .core import ConfigError, MaskedState, Prompt, TaskKind, Vocab, make_prompt_set
from .decoder import DecodeConfig, DecodeMode, EvalResult, decode, evaluate_samples, greedy_samples
from .losses import LossConfig, build_token_batch, combined_loss
from .policy import (
    Algorithm,
    FeatureLayout,
    NonFiniteGradient,
    OptimizerState,
    PolicyParams,
    apply_update,
    snapshot,
)
from .rlcore import (
    CriticTable,
    FilterConfig,
    Group,
    NormConfig,
    RewardConfig,
    assemble_rewards,
    collapse_ratio,
    compute_advantages,
    ResampleExhausted,
    dynamic_sample,
    gae_advantages,
    zero_signal_fraction,
)
from .rng import stream

log = logging.getLogger(__name__)

ADVANTAGE_MODES = ("grpo", "decoupled", "gae")


@dataclass
class TrainConfig:
    task: TaskKind = TaskKind.REVERSE
    length: int = 8
    vocab_size: int = 10
    prompt_skew: float = 0.0
    data_seed: int = 0
    train_prompts: int = 512
    eval_prompts: int = 128

    iterations: int = 200
    groups_per_iter: int = 16
    group_size: int = 8
    update_epochs: int = 1
    learning_rate: float = 0.01
    optimizer: Algorithm = Algorithm.ADAM
    max_grad_norm: float = 1.0
    eval_every: int = 10

    warmup_steps: int = 0
    warmup_lr: float = 0.05
    warmup_batch: int = 32

    advantage_mode: str = "decoupled"
    critic_lr: float = 0.5
    gamma: float = 1.0
    lam: float = 1.0
    collapse_eps: float = 0.1
    workers: int = 1

    decode: DecodeConfig = field(default_factory=DecodeConfig)
    norm: NormConfig = field(default_factory=NormConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        self.task = TaskKind(self.task)
        self.optimizer = Algorithm(self.optimizer)
        for name in ("iterations", "groups_per_iter", "group_size", "update_epochs", "eval_every", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.length % self.decode.block_size:
            raise ConfigError(f"length {self.length} is not a multiple of block_size {self.decode.block_size}")
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ConfigError(f"advantage_mode must be one of {ADVANTAGE_MODES}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size)

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(self.length, self.vocab, self.decode.block_size)

    def to_dict(self) -> dict:
        def enc(v):
            if dataclasses.is_dataclass(v):
                return {f.name: enc(getattr(v, f.name)) for f in fields(v)}
            if isinstance(v, tuple):
                return [enc(x) for x in v]
            if hasattr(v, "value"):
                return v.value
            return v
        return enc(self)


SUBCONFIGS = {"decode": DecodeConfig, "norm": NormConfig, "filter": FilterConfig, "loss": LossConfig,
              "reward": RewardConfig}


def config_from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Overlay ``data`` (field names as in :class:`TrainConfig`) onto ``base``."""
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    top = {}
    for k, v in data.items():
        if k not in known:
            raise ConfigError(f"unknown config field {k!r}")
        if k in SUBCONFIGS:
            if not isinstance(v, dict):
                raise ConfigError(f"config field {k!r} must be a mapping")
            sub_known = {f.name for f in fields(SUBCONFIGS[k])}
            for sk in v:
                if sk not in sub_known:
                    raise ConfigError(f"unknown config field {k}.{sk}")
            try:
                top[k] = replace(getattr(base, k), **v)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{k}: {e}") from e
        else:
            top[k] = v
    try:
        return replace(base, **top)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


PRESETS = {
    # Zipf-skewed prompts plus a short warmup leave confidence heterogeneous
    # enough that sampled groups differ in TPF.
    "toy": {"prompt_skew": 1.0, "warmup_steps": 50},
    "paper-scale": {
        "groups_per_iter": 128,
        "group_size": 32,
        "learning_rate": 1e-6,
        "max_grad_norm": 1.0,
        "decode": {"threshold": 0.9, "temperature": 1.0},
        "loss": {"clip": 0.2, "kl_coeff": 0.01, "nll_coeff": 0.1, "reductions": "seq-tok-tok"},
        "filter": {"criterion": "variance", "variance_threshold": 0.01},
        "gamma": 1.0,
        "lam": 1.0,
    },
}


def preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return config_from_dict(PRESETS[name])


# --- metrics ----------------------------------------------------------------

METRIC_COLUMNS = (
    "iteration",
    "acc_reward",
    "acc_reward_std",
    "speed_reward",
    "speed_reward_std",
    "total_reward",
    "correct_frac",
    "collapse_ratio",
    "zero_signal_frac",
    "acceptance_rate",
    "prompts_drawn",
    "mean_group_tpf_spread",
    "policy_loss",
    "kl_loss",
    "nll_loss",
    "total_loss",
    "clip_frac",
    "ratio_dev",
    "eval_accuracy",
    "eval_tpf",
    "eval_aup",
)


@dataclass
class IterationMetrics:
    iteration: int
    acc_reward: float
    acc_reward_std: float
    speed_reward: float
    speed_reward_std: float
    total_reward: float
    correct_frac: float
    collapse_ratio: float
    zero_signal_frac: float
    acceptance_rate: float
    prompts_drawn: int
    mean_group_tpf_spread: float
    policy_loss: float
    kl_loss: float
    nll_loss: float
    total_loss: float
    clip_frac: float
    ratio_dev: float
    eval_accuracy: float | None = None
    eval_tpf: float | None = None
    eval_aup: float | None = None

    def row(self) -> list[str]:
        out = []
        for c in METRIC_COLUMNS:
            v = getattr(self, c)
            out.append("" if v is None else repr(float(v)) if isinstance(v, float) else str(v))
        return out


def metrics_csv(rows: Sequence[IterationMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[IterationMetrics]
    warmup_params: PolicyParams
    baseline: EvalResult
    final: EvalResult | None = None

    def best_aup(self) -> tuple[int, EvalResult]:
        best = (0, self.baseline)
        for m in self.metrics:
            if m.eval_aup is not None and m.eval_aup > best[1].aup:
                best = (m.iteration, EvalResult(m.eval_accuracy, m.eval_tpf, m.eval_aup))
        return best


# --- pieces -------------------------------------------------------------------


def prompt_pools(cfg: TrainConfig) -> tuple[list[Prompt], list[Prompt]]:
    """Training and held-out prompts; ids never overlap."""
    train = make_prompt_set(cfg.task, cfg.train_prompts, cfg.length, cfg.vocab, cfg.data_seed,
                            block_size=cfg.decode.block_size, skew=cfg.prompt_skew)
    held = make_prompt_set(cfg.task, cfg.eval_prompts, cfg.length, cfg.vocab, cfg.data_seed + 7919,
                           block_size=cfg.decode.block_size, id_offset=cfg.train_prompts, skew=cfg.prompt_skew)
    return train, held


class PromptCursor:
    """Sequential pass over a pool, reshuffled after every full pass.

    ``cursor(i)`` is a pure function of the draw index ``i``.
    """

    def __init__(self, pool: Sequence[Prompt], seed: int):
        if not pool:
            raise ConfigError("prompt pool is empty")
        self.pool = list(pool)
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def __call__(self, i: int) -> Prompt:
        n = len(self.pool)
        epoch = i // n
        if epoch not in self._perms:
            self._perms[epoch] = stream(self.seed, 0xC0C0, epoch).permutation(n)
        return self.pool[self._perms[epoch][i % n]]


def rollout_group(policy, dcfg: DecodeConfig, rcfg: RewardConfig, group_size: int, seed: int, iteration: int,
                  draw_index: int, prompt: Prompt) -> Group:
    trajs, rewards = [], []
    for j in range(group_size):
        t = decode(policy, prompt, dcfg, key=(seed, iteration, draw_index, prompt.id, j))
        trajs.append(t)
        rewards.append(assemble_rewards(t, prompt, policy.layout.vocab, rcfg))
    return Group(prompt, trajs, rewards)


def warmup(cfg: TrainConfig, pool: Sequence[Prompt], seed: int = 0, params: PolicyParams | None = None) -> PolicyParams:
    """Supervised cross-entropy on ground-truth completions under random
    partial maskings of a random block."""
    layout = cfg.layout
    params = params or PolicyParams.zeros(layout)
    if cfg.warmup_steps == 0:
        return params
    mask = layout.vocab.mask_id
    B, L = cfg.decode.block_size, cfg.length
    opt = OptimizerState(Algorithm.ADAM, cfg.warmup_lr, max_grad_norm=0.0)
    for step in range(cfg.warmup_steps):
        rng = stream(seed, 0x3A3A, step)
        feats, toks = [], []
        for _ in range(cfg.warmup_batch):
            p = pool[rng.integers(len(pool))]
            block = int(rng.integers(L // B))
            rate = rng.uniform(0.0, 1.0)
            tokens = list(p.target[:block * B]) + [mask] * (L - block * B)
            hidden = [i for i in range(block * B, (block + 1) * B) if rng.random() < rate]
            if not hidden:
                hidden = [block * B + int(rng.integers(B))]
            for i in range(block * B, (block + 1) * B):
                if i not in hidden:
                    tokens[i] = p.target[i]
            MaskedState(tuple(tokens), B, block).validate(mask)
            feats.append(layout.indices(p, tokens, hidden))
            toks.extend(p.target[i] for i in hidden)
        f = np.concatenate(feats)
        t = np.array(toks)
        _, probs = params.token_logprobs(f, t)
        grad = params.backprop(f, t, probs, np.full(len(t), -1.0 / len(t)))
        params = apply_update(params, opt, grad)
    return replace(params, version=0)


def evaluate(params, prompts: Sequence[Prompt], dcfg: DecodeConfig) -> EvalResult:
    """Greedy accuracy (%), mean TPF and AUP on ``prompts``."""
    if not prompts:
        raise ValueError("evaluation needs at least one prompt")
    return evaluate_samples(greedy_samples(params, prompts, dcfg))


def train(
    cfg: TrainConfig,
    seed: int = 0,
    *,
    pools: tuple[Sequence[Prompt], Sequence[Prompt]] | None = None,
    init: PolicyParams | None = None,
    on_iteration: Callable[[IterationMetrics], None] | None = None,
) -> TrainResult:
    train_pool, eval_pool = pools or prompt_pools(cfg)
    params = warmup(cfg, train_pool, seed, init)
    warm = snapshot(params)
    ref = warm
    baseline = evaluate(params, eval_pool, cfg.decode)
    log.info("seed %d post-warmup: acc=%.1f tpf=%.3f aup=%.1f", seed, baseline.accuracy, baseline.mean_tpf, baseline.aup)

    opt = OptimizerState(cfg.optimizer, cfg.learning_rate, cfg.max_grad_norm)
    critic = CriticTable(cfg.critic_lr)
    cursor = PromptCursor(train_pool, seed)
    draw_at = 0
    metrics: list[IterationMetrics] = []
    result = TrainResult(params, metrics, warm, baseline)
    train_cfg = replace(cfg.decode, mode=DecodeMode.SAMPLE)
    # grpo: plain per-group standardization of the summed reward.
    norm = cfg.norm if cfg.advantage_mode == "decoupled" else replace(cfg.norm, mode="coupled", batch_norm=False)

    pool_exec = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    map_fn = pool_exec.map if pool_exec else map
    try:
        for it in range(1, cfg.iterations + 1):
            old = snapshot(params)
            fn = partial(rollout_group, old, train_cfg, cfg.reward, cfg.group_size, seed, it)
            sampled = dynamic_sample(cursor, fn, cfg.filter, cfg.groups_per_iter, start=draw_at,
                                     map_fn=map_fn, lookahead=cfg.workers)
            draw_at = sampled.next_index
            groups = sampled.groups

            if cfg.advantage_mode == "gae":
                step_adv = [gae_advantages(g, critic, cfg.gamma, cfg.lam) for g in groups]
                traj_adv = [a for advs in step_adv for a in advs]
                diag = [np.array([a[0] for a in advs]) for advs in step_adv]
            else:
                diag = compute_advantages(groups, norm)
                traj_adv = [a for adv in diag for a in adv]

            trajs = [t for g in groups for t in g.trajectories]
            prompts = [g.prompt for g in groups for _ in g.trajectories]
            correct = [r.correct for g in groups for r in g.rewards]
            batch = build_token_batch(trajs, prompts, traj_adv, correct, ref, check=old)

            for _ in range(cfg.update_epochs):
                out = combined_loss(params, batch, cfg.loss)
                if not math.isfinite(out.value) or not np.all(np.isfinite(out.grad)):
                    raise NonFiniteGradient(f"iteration {it}: non-finite loss {out.value}")
                params = apply_update(params, opt, out.grad)

            rew = np.array([r.as_tuple() for g in groups for r in g.rewards])
            m = IterationMetrics(
                iteration=it,
                acc_reward=float(rew[:, 0].mean()),
                acc_reward_std=float(rew[:, 0].std()),
                speed_reward=float(rew[:, 1].mean()),
                speed_reward_std=float(rew[:, 1].std()),
                total_reward=float(rew.sum(axis=1).mean()),
                correct_frac=float(np.mean(correct)),
                collapse_ratio=collapse_ratio(diag, cfg.collapse_eps),
                zero_signal_frac=zero_signal_fraction(diag),
                acceptance_rate=sampled.acceptance_rate,
                prompts_drawn=sampled.drawn,
                mean_group_tpf_spread=float(np.mean([np.ptp(g.tpfs) for g in groups])),
                policy_loss=out.policy,
                kl_loss=out.kl,
                nll_loss=out.nll,
                total_loss=out.value,
                clip_frac=out.clip_frac,
                ratio_dev=out.ratio_dev,
            )
            if it % cfg.eval_every == 0 or it == cfg.iterations:
                ev = evaluate(params, eval_pool, cfg.decode)
                m.eval_accuracy, m.eval_tpf, m.eval_aup = ev.accuracy, ev.mean_tpf, ev.aup
                result.final = ev
            metrics.append(m)
            result.params = params
            if on_iteration:
                on_iteration(m)
    except (NonFiniteGradient, FloatingPointError, ResampleExhausted) as e:
        result.params = params
        raise TrainingAborted(str(e), result) from e
    finally:
        if pool_exec:
            pool_exec.shutdown()
    return result
