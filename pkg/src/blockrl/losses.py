"""Clipped surrogate, k3 KL penalty, NLL anchor, and their weighted sum.

Every loss here is a reduction over *token records*: one record per accepted
token, evaluated at the intermediate state it was decoded from. Components
return their value together with the derivative w.r.t. each record's new
log-probability; :func:`combined_loss` chains that through the policy once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core import InvariantError, Prompt, Trajectory
from .policy import Policy


class Reduction(str, Enum):
    SEQ = "seq"
    TOK = "tok"


@dataclass(frozen=True)
class LossConfig:
    clip: float = 0.2
    kl_coeff: float = 0.01
    kl_estimator: str = "k3"
    nll_coeff: float = 0.1
    reductions: tuple[Reduction, Reduction, Reduction] = (Reduction.SEQ, Reduction.TOK, Reduction.TOK)

    def __post_init__(self):
        red = self.reductions
        if isinstance(red, str):
            red = red.lower().split("-")
        if len(red) != 3:
            raise ValueError("reductions needs three entries (policy, kl, nll)")
        object.__setattr__(self, "reductions", tuple(r if isinstance(r, Reduction) else Reduction(str(r).lower()) for r in red))
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.kl_coeff < 0 or self.nll_coeff < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.kl_estimator != "k3":
            raise ValueError(f"unsupported KL estimator {self.kl_estimator!r}")

    @property
    def reduction_label(self) -> str:
        return "-".join(r.value.capitalize() for r in self.reductions)


class CorruptTrajectory(InvariantError):
    pass


def replay(traj: Trajectory, prompt: Prompt, layout) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild every intermediate state of ``traj`` and return the feature
    rows and tokens of its accepted predictions, in step order."""
    mask = layout.vocab.mask_id
    B = traj.block_size
    tokens = [mask] * prompt.length
    feats, toks = [], []
    for step in traj.steps:
        block = range(step.block * B, (step.block + 1) * B)
        masked = tuple(i for i in block if tokens[i] == mask)
        if masked != step.masked:
            raise CorruptTrajectory(f"step {step.step_index}: replayed mask set {masked} != recorded {step.masked}")
        positions = [a.position for a in step.accepted]
        feats.append(layout.indices(prompt, tokens, positions))
        for a in step.accepted:
            tokens[a.position] = a.token
            toks.append(a.token)
    if tuple(tokens) != traj.final_tokens:
        raise CorruptTrajectory("replayed response differs from the recorded final tokens")
    return np.concatenate(feats), np.array(toks, dtype=np.int64)


def stored_logprobs(traj: Trajectory) -> np.ndarray:
    return np.array([a.logprob for s in traj.steps for a in s.accepted])


def recompute_logprobs(params: Policy, traj: Trajectory, prompt: Prompt) -> np.ndarray:
    """Log-probabilities of the accepted tokens under ``params``."""
    feats, toks = replay(traj, prompt, params.layout)
    lp, _ = params.token_logprobs(feats, toks)
    return lp


@dataclass
class TokenBatch:
    """Flattened token records for one minibatch."""

    feats: np.ndarray
    tokens: np.ndarray
    old_lp: np.ndarray
    ref_lp: np.ndarray
    adv: np.ndarray
    traj: np.ndarray
    norm: np.ndarray
    correct: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_traj(self) -> int:
        return len(self.norm)


def build_token_batch(
    trajectories: Sequence[Trajectory],
    prompts: Sequence[Prompt],
    advantages: Sequence,
    correct: Sequence[bool],
    ref: Policy,
    *,
    check: Policy | None = None,
    tol: float = 1e-12,
) -> TokenBatch:
    """Replay trajectories into token records.

    ``advantages[j]`` is a scalar (shared by every token of trajectory ``j``)
    or an array with one value per decoding step. If ``check`` is given, the
    behaviour log-probabilities stored at decode time must be reproduced by
    ``check`` within ``tol``.
    """
    feats, toks, old, adv, owner, norm = [], [], [], [], [], []
    for j, (traj, prompt, a) in enumerate(zip(trajectories, prompts, advantages)):
        f, t = replay(traj, prompt, ref.layout)
        lp = stored_logprobs(traj)
        if check is not None:
            got, _ = check.token_logprobs(f, t)
            err = float(np.max(np.abs(got - lp)))
            if err > tol:
                raise InvariantError(f"behaviour log-probs drifted by {err:.3e} on trajectory {j}")
        a = np.asarray(a, dtype=float)
        if a.ndim == 0:
            adv.append(np.full(len(t), float(a)))
        else:
            adv.append(np.repeat(a, [len(s.accepted) for s in traj.steps]))
        feats.append(f)
        toks.append(t)
        old.append(lp)
        owner.append(np.full(len(t), j))
        norm.append(traj.n_predictions)
    feats_a = np.concatenate(feats)
    toks_a = np.concatenate(toks)
    ref_lp, _ = ref.token_logprobs(feats_a, toks_a)
    return TokenBatch(feats_a, toks_a, np.concatenate(old), ref_lp, np.concatenate(adv),
                      np.concatenate(owner), np.asarray(norm, dtype=float), np.asarray(correct, dtype=bool))


def reduction_weights(traj: np.ndarray, norm: np.ndarray, mode: Reduction, include: np.ndarray | None = None) -> np.ndarray:
    """Per-token weights ``w`` such that the reduced loss is ``sum(w * term)``.

    ``norm[j]`` is trajectory ``j``'s normalizer (its number of parallel
    predictions). Seq averages within each trajectory, then across
    trajectories; Tok divides the global sum by the global normalizer.
    ``include`` restricts the reduction to a subset of trajectories.
    """
    sel = np.ones(len(norm), dtype=bool) if include is None else np.asarray(include, dtype=bool)
    if not sel.any():
        return np.zeros(len(traj))
    if Reduction(mode) is Reduction.SEQ:
        per_traj = np.where(sel, 1.0 / (sel.sum() * np.where(sel, norm, 1.0)), 0.0)
    else:
        per_traj = np.where(sel, 1.0 / norm[sel].sum(), 0.0)
    return per_traj[traj]


@dataclass
class LossPart:
    value: float
    dlogp: np.ndarray
    stats: dict = field(default_factory=dict)


def policy_loss(new_lp: np.ndarray, batch: TokenBatch, cfg: LossConfig) -> LossPart:
    """Negative clipped surrogate ``min(rho A, clip(rho) A)``.

    The derivative is ``-w rho A`` where the unclipped branch is selected and
    zero where clipping is active.
    """
    if batch.n_tokens == 0:
        return LossPart(0.0, np.zeros(0), {"clip_frac": 0.0, "ratio_dev": 0.0})
    w = reduction_weights(batch.traj, batch.norm, cfg.reductions[0])
    rho = np.exp(new_lp - batch.old_lp)
    unclipped = rho * batch.adv
    clipped = np.clip(rho, 1 - cfg.clip, 1 + cfg.clip) * batch.adv
    live = unclipped <= clipped
    surrogate = np.where(live, unclipped, clipped)
    value = -float(np.sum(w * surrogate))
    dlogp = np.where(live, -w * unclipped, 0.0)
    stats = {"clip_frac": float(np.mean(~live)), "ratio_dev": float(np.mean(np.abs(rho - 1)))}
    return LossPart(value, dlogp, stats)


def k3(new_lp: np.ndarray, ref_lp: np.ndarray) -> np.ndarray:
    """Per-token ``r - log r - 1`` with ``r = p_ref / p_theta``."""
    log_r = ref_lp - new_lp
    return np.exp(log_r) - log_r - 1.0


def kl_penalty(new_lp: np.ndarray, batch: TokenBatch, cfg: LossConfig) -> LossPart:
    """Unscaled KL penalty (``kl_coeff`` is applied by :func:`combined_loss`)."""
    if batch.n_tokens == 0:
        return LossPart(0.0, np.zeros(0))
    w = reduction_weights(batch.traj, batch.norm, cfg.reductions[1])
    log_r = batch.ref_lp - new_lp
    value = float(np.sum(w * (np.exp(log_r) - log_r - 1.0)))
    return LossPart(value, w * (1.0 - np.exp(log_r)))


def nll_anchor(new_lp: np.ndarray, batch: TokenBatch, cfg: LossConfig) -> LossPart:
    """Token-level NLL on verifier-correct trajectories; exactly 0 if there are none."""
    if batch.n_tokens == 0 or not batch.correct.any():
        return LossPart(0.0, np.zeros(batch.n_tokens))
    w = reduction_weights(batch.traj, batch.norm, cfg.reductions[2], include=batch.correct)
    return LossPart(-float(np.sum(w * new_lp)), -w)


@dataclass
class CombinedLoss:
    value: float
    grad: np.ndarray
    policy: float
    kl: float
    nll: float
    clip_frac: float
    ratio_dev: float


def combined_loss(params: Policy, batch: TokenBatch, cfg: LossConfig) -> CombinedLoss:
    """``policy + kl_coeff * kl + nll_coeff * nll`` and its weight gradient."""
    new_lp, probs = params.token_logprobs(batch.feats, batch.tokens)
    pol = policy_loss(new_lp, batch, cfg)
    kl = kl_penalty(new_lp, batch, cfg)
    nll = nll_anchor(new_lp, batch, cfg)
    value = pol.value + cfg.kl_coeff * kl.value + cfg.nll_coeff * nll.value
    dlogp = pol.dlogp + cfg.kl_coeff * kl.dlogp + cfg.nll_coeff * nll.dlogp
    grad = params.backprop(batch.feats, batch.tokens, probs, dlogp)
    return CombinedLoss(value, grad, pol.value, kl.value, nll.value,
                        pol.stats.get("clip_frac", 0.0), pol.stats.get("ratio_dev", 0.0))
