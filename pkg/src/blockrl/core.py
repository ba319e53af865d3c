"""Domain types: vocabularies, prompts, masked states, trajectories, verifiers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import stream


class ConfigError(ValueError):
    """Invalid configuration or inconsistent sizes."""


class InvariantError(RuntimeError):
    """An internal invariant was violated (indicates a bug, not bad input)."""


class TaskKind(str, Enum):
    COPY = "copy"
    REVERSE = "reverse"
    MODSUM = "modsum"


class VerifyMode(str, Enum):
    BINARY = "binary"
    FRACTIONAL = "fractional"


@dataclass(frozen=True)
class Vocab:
    size: int
    mask_id: int = 0

    def __post_init__(self):
        if self.size < 3:
            raise ConfigError(f"vocab size must be >= 3, got {self.size}")
        if not 0 <= self.mask_id < self.size:
            raise ConfigError(f"mask_id {self.mask_id} outside vocab of size {self.size}")

    @property
    def content_ids(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.size) if i != self.mask_id)

    @property
    def n_content(self) -> int:
        return self.size - 1

    def to_digit(self, token: int) -> int:
        """Index of ``token`` within the content alphabet."""
        if token == self.mask_id:
            raise InvariantError("mask token has no digit value")
        return token - 1 if token > self.mask_id else token

    def from_digit(self, digit: int) -> int:
        return digit + 1 if digit >= self.mask_id else digit


@dataclass(frozen=True)
class Prompt:
    id: int
    tokens: tuple[int, ...]
    kind: TaskKind
    target: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.target)


@dataclass(frozen=True)
class MaskedState:
    """Response region ``x_t``: blocks before ``active_block`` are complete,
    blocks after it are fully masked."""

    tokens: tuple[int, ...]
    block_size: int
    active_block: int

    @property
    def n_blocks(self) -> int:
        return len(self.tokens) // self.block_size

    def block_range(self, block: int | None = None) -> range:
        b = self.active_block if block is None else block
        return range(b * self.block_size, (b + 1) * self.block_size)

    def masked_positions(self, mask_id: int) -> tuple[int, ...]:
        if self.active_block >= self.n_blocks:
            return ()
        return tuple(i for i in self.block_range() if self.tokens[i] == mask_id)

    def validate(self, mask_id: int) -> None:
        L, B = len(self.tokens), self.block_size
        if B <= 0 or L % B:
            raise InvariantError(f"length {L} is not a multiple of block size {B}")
        if not 0 <= self.active_block <= L // B:
            raise InvariantError(f"active block {self.active_block} out of range")
        for b in range(L // B):
            chunk = self.tokens[b * B:(b + 1) * B]
            if b < self.active_block and mask_id in chunk:
                raise InvariantError(f"completed block {b} still contains masks")
            if b > self.active_block and any(t != mask_id for t in chunk):
                raise InvariantError(f"future block {b} contains decoded tokens")


@dataclass(frozen=True)
class Accepted:
    position: int
    token: int
    logprob: float
    confidence: float


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    block: int
    masked: tuple[int, ...]
    accepted: tuple[Accepted, ...]
    rejected_count: int

    def __post_init__(self):
        if not self.accepted:
            raise InvariantError("a decoding step must accept at least one token")
        masked = set(self.masked)
        for a in self.accepted:
            if a.position not in masked:
                raise InvariantError(f"accepted position {a.position} was not masked")
            if not a.logprob <= 0.0 or not 0.0 < a.confidence <= 1.0:
                raise InvariantError(f"bad logprob/confidence at position {a.position}")


@dataclass(frozen=True)
class Trajectory:
    prompt_id: int
    steps: tuple[StepRecord, ...]
    final_tokens: tuple[int, ...]
    block_size: int
    seed: tuple[int, ...] = ()

    @property
    def forwards(self) -> int:
        return len(self.steps)

    @property
    def decoded_tokens(self) -> int:
        return sum(len(s.accepted) for s in self.steps)

    @property
    def n_predictions(self) -> int:
        """``|tau|``: masked slots predicted, summed over all steps."""
        return sum(len(s.masked) for s in self.steps)

    @property
    def tpf(self) -> float:
        return self.decoded_tokens / self.forwards

    def to_record(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "block_size": self.block_size,
            "seed": list(self.seed),
            "final_tokens": list(self.final_tokens),
            "steps": [
                {
                    "t": s.step_index,
                    "block": s.block,
                    "masked": list(s.masked),
                    "rejected": s.rejected_count,
                    "accepted": [[a.position, a.token, a.logprob, a.confidence] for a in s.accepted],
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        steps = tuple(
            StepRecord(
                step_index=s["t"],
                block=s["block"],
                masked=tuple(s["masked"]),
                accepted=tuple(Accepted(int(p), int(tok), float(lp), float(c)) for p, tok, lp, c in s["accepted"]),
                rejected_count=s["rejected"],
            )
            for s in rec["steps"]
        )
        return cls(
            prompt_id=rec["prompt_id"],
            steps=steps,
            final_tokens=tuple(rec["final_tokens"]),
            block_size=rec["block_size"],
            seed=tuple(rec["seed"]),
        )


@dataclass(frozen=True)
class RewardVector:
    accuracy: float
    speed: float
    correct: bool

    def as_tuple(self) -> tuple[float, float]:
        return (self.accuracy, self.speed)


def _task_target(kind: TaskKind, tokens: Sequence[int], vocab: Vocab) -> tuple[int, ...]:
    if kind is TaskKind.COPY:
        return tuple(tokens)
    if kind is TaskKind.REVERSE:
        return tuple(reversed(tokens))
    if kind is TaskKind.MODSUM:
        A = vocab.n_content
        d = [vocab.to_digit(t) for t in tokens]
        L = len(d)
        return tuple(vocab.from_digit((d[i] + d[(i + 1) % L]) % A) for i in range(L))
    raise ConfigError(f"unknown task kind {kind!r}")


def make_prompt(id: int, kind: TaskKind | str, tokens: Sequence[int], vocab: Vocab) -> Prompt:
    kind = TaskKind(kind)
    if vocab.mask_id in tokens:
        raise ConfigError("prompt tokens may not contain the mask id")
    if any(not 0 <= t < vocab.size for t in tokens):
        raise ConfigError("prompt token outside vocabulary")
    return Prompt(id=id, tokens=tuple(int(t) for t in tokens), kind=kind, target=_task_target(kind, tokens, vocab))


def make_prompt_set(
    kind: TaskKind | str,
    count: int,
    length: int,
    vocab: Vocab,
    seed: int,
    *,
    block_size: int | None = None,
    id_offset: int = 0,
    skew: float = 0.0,
) -> list[Prompt]:
    """Draw ``count`` random prompts of ``length`` content tokens.

    ``skew`` is a Zipf exponent over the content alphabet (0 gives uniform
    tokens). Prompt ``i`` is drawn from its own stream, so a set is a prefix
    of any larger set with the same seed.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if length < 1:
        raise ConfigError("length must be >= 1")
    if block_size is not None and length % block_size:
        raise ConfigError(f"length {length} is not a multiple of block size {block_size}")
    content = np.array(vocab.content_ids)
    weights = 1.0 / np.arange(1, len(content) + 1) ** skew
    weights /= weights.sum()
    kind = TaskKind(kind)
    prompts = []
    for i in range(count):
        rng = stream(seed, 0x5EED, i)
        toks = rng.choice(content, size=length, p=weights)
        prompts.append(make_prompt(id_offset + i, kind, toks.tolist(), vocab))
    return prompts


def verify(
    prompt: Prompt,
    final_tokens: Sequence[int],
    vocab: Vocab,
    mode: VerifyMode | str = VerifyMode.BINARY,
) -> tuple[float, bool]:
    """Score a finished response; returns ``(accuracy, correct)``."""
    if vocab.mask_id in final_tokens:
        raise InvariantError("verifier received a response with undecoded positions")
    if len(final_tokens) != len(prompt.target):
        raise InvariantError("response length does not match target length")
    matches = sum(int(a == b) for a, b in zip(final_tokens, prompt.target))
    correct = matches == len(prompt.target)
    if VerifyMode(mode) is VerifyMode.BINARY:
        return (1.0 if correct else -1.0), correct
    return matches / len(prompt.target), correct


def save_prompts(prompts: Iterable[Prompt], path: str | Path) -> None:
    with open(path, "w") as f:
        for p in prompts:
            f.write(json.dumps({"id": p.id, "kind": p.kind.value, "tokens": list(p.tokens), "target": list(p.target)}))
            f.write("\n")


def load_prompts(path: str | Path) -> list[Prompt]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(Prompt(rec["id"], tuple(rec["tokens"]), TaskKind(rec["kind"]), tuple(rec["target"])))
    return out

