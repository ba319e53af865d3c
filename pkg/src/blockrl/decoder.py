"""Block-wise confidence-threshold decoding and parallelism metrics."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .core import (
    Accepted,
    ConfigError,
    InvariantError,
    MaskedState,
    Prompt,
    StepRecord,
    Trajectory,
    VerifyMode,
    verify,
)
from .policy import Policy
from .rng import stream


class DecodeMode(str, Enum):
    SAMPLE = "sample"
    GREEDY = "greedy"


@dataclass(frozen=True)
class DecodeConfig:
    block_size: int = 4
    threshold: float = 0.9
    max_steps_per_block: int | None = None
    temperature: float = 1.0
    mode: DecodeMode = DecodeMode.SAMPLE

    def __post_init__(self):
        object.__setattr__(self, "mode", DecodeMode(self.mode))
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.threshold < 0:
            raise ConfigError("threshold must be non-negative")
        if self.max_steps_per_block is not None and self.max_steps_per_block < self.block_size:
            raise ConfigError("max_steps_per_block must be >= block_size to guarantee completion")

    @property
    def steps_per_block(self) -> int:
        return self.max_steps_per_block or self.block_size

    def greedy(self, threshold: float | None = None) -> "DecodeConfig":
        return replace(self, mode=DecodeMode.GREEDY, threshold=self.threshold if threshold is None else threshold)


def decode(
    policy: Policy,
    prompt: Prompt,
    cfg: DecodeConfig,
    key: Sequence[int] = (0,),
    *,
    validate: bool = False,
) -> Trajectory:
    """Decode ``prompt``'s response block by block.

    Each step predicts every masked slot of the active block, keeps the
    candidates whose confidence clears ``cfg.threshold`` and leaves the rest
    masked. When nothing clears the bar the single most confident candidate is
    kept (lowest position on ties), so every step makes progress.
    """
    layout = policy.layout
    mask = layout.vocab.mask_id
    L, B = prompt.length, cfg.block_size
    if L % B:
        raise ConfigError(f"response length {L} is not a multiple of block size {B}")
    if layout.block_size != B or layout.length != L:
        raise ConfigError("decode config does not match the policy feature layout")
    key = tuple(int(k) for k in key)
    rng = stream(*key) if cfg.mode is DecodeMode.SAMPLE else None
    tokens = [mask] * L
    steps: list[StepRecord] = []
    for block in range(L // B):
        for _ in range(cfg.steps_per_block):
            positions = [i for i in range(block * B, (block + 1) * B) if tokens[i] == mask]
            if not positions:
                break
            feats = layout.indices(prompt, tokens, positions)
            lp = policy.log_probs(feats)
            rows = np.arange(len(positions))
            if rng is None:
                cand = lp.argmax(axis=1)
            else:
                draw_lp = lp if cfg.temperature == 1.0 else policy.log_probs(feats, cfg.temperature)
                cdf = np.cumsum(np.exp(draw_lp), axis=1)
                u = rng.random(len(positions)) * cdf[:, -1]
                cand = (cdf <= u[:, None]).sum(axis=1)
            cand_lp = lp[rows, cand]
            conf = np.exp(cand_lp)
            keep = conf >= cfg.threshold
            if not keep.any():
                keep[int(conf.argmax())] = True
            accepted = []
            for n in np.flatnonzero(keep):
                pos, tok = positions[n], int(cand[n])
                tokens[pos] = tok
                accepted.append(Accepted(pos, tok, float(cand_lp[n]), float(conf[n])))
            steps.append(StepRecord(len(steps), block, tuple(positions), tuple(accepted),
                                    len(positions) - len(accepted)))
            if validate:
                MaskedState(tuple(tokens), B, block if mask in tokens[block * B:(block + 1) * B] else block + 1
                            ).validate(mask)
        if mask in tokens[block * B:(block + 1) * B]:
            raise InvariantError(f"block {block} not finished within {cfg.steps_per_block} steps")
    return Trajectory(prompt.id, tuple(steps), tuple(tokens), B, key)


def tpf(traj: Trajectory) -> float:
    """Tokens per forward pass."""
    return traj.decoded_tokens / traj.forwards


def aup(samples: Iterable[tuple[bool, float]]) -> float:
    """Accuracy under parallelism, product form: ``100 * mean(correct * tpf)``."""
    samples = list(samples)
    if not samples:
        raise ValueError("aup of an empty sample list")
    return 100.0 * sum(float(c) * t for c, t in samples) / len(samples)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    mean_tpf: float
    aup: float


def evaluate_samples(samples: Sequence[tuple[bool, float]]) -> EvalResult:
    if not samples:
        raise ValueError("cannot evaluate an empty prompt set")
    acc = 100.0 * sum(c for c, _ in samples) / len(samples)
    return EvalResult(acc, sum(t for _, t in samples) / len(samples), aup(samples))


def greedy_samples(policy: Policy, prompts: Sequence[Prompt], cfg: DecodeConfig) -> list[tuple[bool, float]]:
    cfg = cfg.greedy()
    out = []
    for p in prompts:
        traj = decode(policy, p, cfg)
        _, correct = verify(p, traj.final_tokens, policy.layout.vocab, VerifyMode.BINARY)
        out.append((correct, traj.tpf))
    return out


@dataclass(frozen=True)
class FrontierRow:
    threshold: float
    accuracy: float
    mean_tpf: float
    aup: float


def frontier_sweep(
    policy: Policy,
    prompts: Sequence[Prompt],
    thresholds: Sequence[float],
    cfg: DecodeConfig,
) -> list[FrontierRow]:
    """Greedy accuracy / TPF / AUP at each confidence threshold."""
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("thresholds must be strictly increasing")
    rows = []
    for phi in thresholds:
        res = evaluate_samples(greedy_samples(policy, prompts, cfg.greedy(phi)))
        rows.append(FrontierRow(float(phi), res.accuracy, res.mean_tpf, res.aup))
    return rows
