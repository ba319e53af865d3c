"""Linear-softmax denoising policy with closed-form gradients.

A policy maps (prompt, partially decoded response, masked position) to a
categorical distribution over content tokens. The reference model is linear
in a sparse one-hot feature map, so each prediction touches exactly
``FeatureLayout.n_active`` rows of the weight matrix and its log-probability
gradient is ``phi (x) (onehot(token) - p)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import ConfigError, InvariantError, MaskedState, Prompt, Vocab


@dataclass(frozen=True)
class FeatureLayout:
    """Offsets of the one-hot feature groups.

    Groups, in order: bias; response position; prompt token at the same
    position; prompt token at the mirrored position; left and right
    neighbours inside the active block (one bucket per vocab id, where the
    mask id doubles as the "still masked" bucket, plus a block-edge bucket).
    """

    length: int
    vocab: Vocab
    block_size: int

    n_active = 6

    def __post_init__(self):
        if self.length % self.block_size:
            raise ConfigError(f"length {self.length} is not a multiple of block size {self.block_size}")

    @property
    def off_pos(self) -> int:
        return 1

    @property
    def off_tok(self) -> int:
        return 1 + self.length

    @property
    def off_rev(self) -> int:
        return self.off_tok + self.vocab.size

    @property
    def off_left(self) -> int:
        return self.off_rev + self.vocab.size

    @property
    def off_right(self) -> int:
        return self.off_left + self.vocab.size + 1

    @property
    def dim(self) -> int:
        return self.off_right + self.vocab.size + 1

    def indices(self, prompt: Prompt, tokens: Sequence[int], positions: Sequence[int]) -> np.ndarray:
        """Active feature rows for each position, shape ``(len(positions), 6)``."""
        L, B, V = self.length, self.block_size, self.vocab.size
        edge = V
        out = np.empty((len(positions), self.n_active), dtype=np.int64)
        for n, i in enumerate(positions):
            start = (i // B) * B
            left = tokens[i - 1] if i > start else edge
            right = tokens[i + 1] if i + 1 < start + B else edge
            out[n] = (
                0,
                self.off_pos + i,
                self.off_tok + prompt.tokens[i],
                self.off_rev + prompt.tokens[L - 1 - i],
                self.off_left + left,
                self.off_right + right,
            )
        return out

    def dense(self, idx_row: np.ndarray) -> np.ndarray:
        phi = np.zeros(self.dim)
        np.add.at(phi, idx_row, 1.0)
        return phi

    def to_dict(self) -> dict:
        return {"length": self.length, "vocab_size": self.vocab.size, "mask_id": self.vocab.mask_id,
                "block_size": self.block_size}


@dataclass
class PolicyParams:
    weights: np.ndarray
    layout: FeatureLayout
    version: int = 0
    frozen: bool = False

    @classmethod
    def zeros(cls, layout: FeatureLayout) -> "PolicyParams":
        return cls(np.zeros((layout.dim, layout.vocab.size)), layout)

    @property
    def mask_id(self) -> int:
        return self.layout.vocab.mask_id

    def log_probs(self, feats: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        """Log-softmax over content tokens for rows of active feature indices.

        The mask column is excluded from the support and gets ``-inf``.
        """
        logits = self.weights[feats].sum(axis=1)
        if temperature != 1.0:
            logits = logits / temperature
        logits[:, self.mask_id] = -np.inf
        m = logits.max(axis=1, keepdims=True)
        z = logits - m
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def token_logprobs(self, feats: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Log-probabilities of ``tokens`` and the full probability rows."""
        lp = self.log_probs(feats)
        probs = np.exp(lp)
        return lp[np.arange(len(tokens)), tokens], probs

    def backprop(self, feats: np.ndarray, tokens: np.ndarray, probs: np.ndarray, coef: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_n coef[n] * log p(tokens[n])`` w.r.t. the weights."""
        delta = -probs * coef[:, None]
        delta[np.arange(len(tokens)), tokens] += coef
        grad = np.zeros_like(self.weights)
        for g in range(feats.shape[1]):
            np.add.at(grad, feats[:, g], delta)
        return grad


class Policy(Protocol):
    """What the decoder and the losses need from a policy."""

    layout: FeatureLayout
    version: int

    def log_probs(self, feats: np.ndarray, temperature: float = 1.0) -> np.ndarray: ...

    def token_logprobs(self, feats: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def backprop(self, feats: np.ndarray, tokens: np.ndarray, probs: np.ndarray, coef: np.ndarray) -> np.ndarray: ...


def forward(params: Policy, prompt: Prompt, state: MaskedState, temperature: float = 1.0):
    """Distributions at every masked position of the active block.

    Returns ``(positions, probs)`` with ``probs`` of shape ``(n, vocab.size)``.
    """
    positions = state.masked_positions(params.layout.vocab.mask_id)
    if not positions:
        raise InvariantError("forward called on a state with no masked positions in the active block")
    feats = params.layout.indices(prompt, state.tokens, positions)
    return positions, np.exp(params.log_probs(feats, temperature))


def logprob_and_grad(params: Policy, prompt: Prompt, state: MaskedState, position: int, token: int):
    if token == params.layout.vocab.mask_id:
        raise InvariantError("the mask token is outside the policy support")
    if state.tokens[position] != params.layout.vocab.mask_id:
        raise InvariantError(f"position {position} is not masked")
    feats = params.layout.indices(prompt, state.tokens, [position])
    tokens = np.array([token])
    lp, probs = params.token_logprobs(feats, tokens)
    return float(lp[0]), params.backprop(feats, tokens, probs, np.ones(1))


def snapshot(params: PolicyParams) -> PolicyParams:
    w = params.weights.copy()
    w.flags.writeable = False
    return PolicyParams(w, params.layout, params.version, frozen=True)


class Algorithm(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class OptimizerState:
    algorithm: Algorithm = Algorithm.ADAM
    learning_rate: float = 0.01
    max_grad_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")


class NonFiniteGradient(FloatingPointError):
    pass


def clip_grad(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.sum(grad * grad)))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def apply_update(params: PolicyParams, opt: OptimizerState, grad: np.ndarray) -> PolicyParams:
    """One optimizer step. Returns new params; ``opt`` moments advance in place."""
    if params.frozen:
        raise InvariantError("cannot update a frozen snapshot")
    if grad.shape != params.weights.shape:
        raise ConfigError(f"gradient shape {grad.shape} != weight shape {params.weights.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient ({np.sum(~np.isfinite(grad))} entries)")
    g, _ = clip_grad(grad, opt.max_grad_norm)
    if opt.algorithm is Algorithm.SGD:
        step = opt.learning_rate * g
    else:
        if opt.m is None:
            opt.m = np.zeros_like(g)
            opt.v = np.zeros_like(g)
        opt.t += 1
        opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * g
        opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * g * g
        m_hat = opt.m / (1 - opt.beta1 ** opt.t)
        v_hat = opt.v / (1 - opt.beta2 ** opt.t)
        step = opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
    return replace(params, weights=params.weights - step, version=params.version + 1, frozen=False)


@dataclass
class GradAccumulator:
    grad: np.ndarray
    token_count: int = 0
    sequences: int = 0

    @classmethod
    def like(cls, params: PolicyParams) -> "GradAccumulator":
        return cls(np.zeros_like(params.weights))

    def add(self, grad: np.ndarray, tokens: int = 0, sequences: int = 0) -> None:
        self.grad += grad
        self.token_count += tokens
        self.sequences += sequences

    def merge(self, other: "GradAccumulator") -> None:
        self.add(other.grad, other.token_count, other.sequences)

    def zero(self) -> None:
        self.grad[...] = 0.0
        self.token_count = 0
        self.sequences = 0


CHECKPOINT_FORMAT = "blockrl-policy"
CHECKPOINT_VERSION = 1


def checkpoint_text(params: PolicyParams) -> str:
    """Text checkpoint: one JSON header line, then row-major weights (``repr``
    floats round-trip exactly)."""
    header = {"format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION,
              "feature_dim": params.layout.dim, "version": params.version, **params.layout.to_dict()}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [" ".join(repr(float(x)) for x in row) for row in params.weights]
    return "\n".join(lines) + "\n"


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_text(checkpoint_text(params))


def load_checkpoint(path: str | Path) -> PolicyParams:
    text = Path(path).read_text().splitlines()
    header = json.loads(text[0])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a policy checkpoint")
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header['format_version']}")
    layout = FeatureLayout(header["length"], Vocab(header["vocab_size"], header["mask_id"]), header["block_size"])
    w = np.array([[float(x) for x in line.split()] for line in text[1:] if line.strip()])
    if w.shape != (header["feature_dim"], header["vocab_size"]) or layout.dim != header["feature_dim"]:
        raise ConfigError(f"{path}: weight block has shape {w.shape}, header disagrees")
    return PolicyParams(w, layout, header["version"])
