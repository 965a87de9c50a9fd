"""Tabular softmax policy over the symbolic vocabulary.

Log-probabilities, entropies and the gradient of the clipped token-level
surrogate are exact; there is no autodiff anywhere.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grammar import FeatureSpace
from .shaping import ShapedAdvantages
from .trajectory import RolloutGroup

CHECKPOINT_VERSION = 1


class GrammarError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyParams:
    logits: np.ndarray
    mask: np.ndarray
    signature: str

    def __post_init__(self) -> None:
        if self.logits.shape != self.mask.shape:
            raise ContractError(f"logits {self.logits.shape} vs mask {self.mask.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def with_logits(self, logits: np.ndarray) -> "PolicyParams":
        if logits.shape != self.logits.shape:
            raise ContractError(f"shape change {self.logits.shape} -> {logits.shape}")
        return PolicyParams(logits, self.mask, self.signature)


@dataclass(frozen=True)
class TokenDistribution:
    probs: np.ndarray
    entropy: float

    @property
    def legal(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0)


@dataclass
class SurrogateGrad:
    grads: np.ndarray
    objective_value: float
    clip_fraction: float = 0.0


def init_params(seed: int, init_scale: float, space: FeatureSpace | None = None, bias: np.ndarray | None = None) -> PolicyParams:
    if init_scale < 0:
        raise ValueError("init_scale must be >= 0")
    space = space or FeatureSpace()
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-init_scale, init_scale, size=space.mask.shape) if init_scale > 0 else np.zeros(space.mask.shape)
    if bias is not None:
        logits = logits + bias
    return PolicyParams(logits, space.mask, space.signature)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def _entropy(logp: np.ndarray) -> np.ndarray:
    p = np.exp(logp)
    return -np.where(p > 0, p * np.where(np.isfinite(logp), logp, 0.0), 0.0).sum(axis=-1)


def next_distribution(params: PolicyParams, bucket: int, mask: np.ndarray | None = None) -> TokenDistribution:
    """Temperature-1 softmax over the legal tokens; illegal tokens get probability 0."""
    m = params.mask[bucket] if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise GrammarError(f"bucket {bucket} has no legal token")
    logp = masked_log_softmax(params.logits[bucket], m)
    probs = np.where(m, np.exp(logp), 0.0)
    return TokenDistribution(probs, float(_entropy(logp)))


class DecodeTable:
    """Per-bucket sampling tables for a frozen parameter snapshot."""

    def __init__(self, params: PolicyParams):
        logp = masked_log_softmax(params.logits, params.mask)
        ent = _entropy(logp)
        self.legal: list[list[int]] = []
        self.cum: list[list[float]] = []
        self.logp: list[list[float]] = []
        self.greedy: list[int] = []
        self.entropy: list[float] = ent.tolist()
        for b in range(params.mask.shape[0]):
            ids = np.flatnonzero(params.mask[b])
            lp = logp[b, ids]
            c = np.cumsum(np.exp(lp))
            c[-1] = 1.0
            self.legal.append(ids.tolist())
            self.logp.append(lp.tolist())
            self.cum.append(c.tolist())
            self.greedy.append(int(np.argmax(lp)))

    def sample(self, bucket: int, u: float) -> tuple[int, float, float]:
        i = bisect.bisect_right(self.cum[bucket], u)
        cum = self.cum[bucket]
        if i >= len(cum):
            i = len(cum) - 1
        return self.legal[bucket][i], self.logp[bucket][i], self.entropy[bucket]

    def argmax(self, bucket: int) -> tuple[int, float, float]:
        i = self.greedy[bucket]
        return self.legal[bucket][i], self.logp[bucket][i], self.entropy[bucket]


# -- surrogate objective ---------------------------------------------------


@dataclass
class TokenBatch:
    buckets: np.ndarray
    tokens: np.ndarray
    old_logprob: np.ndarray
    advantage: np.ndarray
    weight: np.ndarray


def collect_tokens(
    space: FeatureSpace,
    groups: Sequence[RolloutGroup],
    shaped: Sequence[ShapedAdvantages],
) -> TokenBatch:
    if len(groups) != len(shaped):
        raise ContractError(f"{len(groups)} groups but {len(shaped)} advantage sets")
    index = space.vocab.index
    B, T, old, A, W = [], [], [], [], []
    n_groups = len(groups)
    for group, adv in zip(groups, shaped):
        if len(adv.final) != len(group):
            raise ContractError("advantages do not match the group's rollouts")
        total = sum(r.n_tokens for r in group)
        if total == 0:
            continue
        w = 1.0 / (n_groups * total)
        for rollout, a in zip(group, adv.final):
            n = rollout.n_tokens
            if len(a) != n or len(rollout.per_token.logprob) != n:
                raise ContractError(
                    f"rollout {rollout.query_id}: {n} tokens, {len(a)} advantages, "
                    f"{len(rollout.per_token.logprob)} stored log-probs"
                )
            B.extend(rollout.bucket_ids())
            T.extend(index[t] for t in rollout.iter_tokens())
            old.extend(rollout.per_token.logprob)
            A.append(np.asarray(a, dtype=np.float64))
            W.append(np.full(n, w))
    if not B:
        empty = np.zeros(0)
        return TokenBatch(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), empty, empty, empty)
    return TokenBatch(
        np.asarray(B, dtype=np.int64),
        np.asarray(T, dtype=np.int64),
        np.asarray(old, dtype=np.float64),
        np.concatenate(A),
        np.concatenate(W),
    )


def surrogate_from_tokens(
    params: PolicyParams,
    batch: TokenBatch,
    clip_eps: float,
    kl_beta: float = 0.0,
    ref_params: PolicyParams | None = None,
) -> SurrogateGrad:
    if not 0 < clip_eps < 1:
        raise ContractError(f"clip_eps must be in (0, 1), got {clip_eps}")
    grads = np.zeros_like(params.logits)
    n = batch.buckets.size
    if n == 0:
        return SurrogateGrad(grads, 0.0)
    mask = params.mask[batch.buckets]
    logp_all = masked_log_softmax(params.logits[batch.buckets], mask)
    probs = np.where(mask, np.exp(logp_all), 0.0)
    rows = np.arange(n)
    logp = logp_all[rows, batch.tokens]
    ratio = np.exp(logp - batch.old_logprob)
    A = batch.advantage
    unclipped = ratio * A
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * A
    objective = float(np.sum(batch.weight * np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    coef = batch.weight * A * ratio * active
    # d log pi(a|b) / d logits[b] = onehot(a) - pi(.|b)
    g = -coef[:, None] * probs
    g[rows, batch.tokens] += coef
    if kl_beta > 0:
        if ref_params is None:
            raise ContractError("kl_beta > 0 needs reference parameters")
        ref_logp = masked_log_softmax(ref_params.logits[batch.buckets], mask)
        ref_p = np.where(mask, np.exp(ref_logp), 0.0)
        diff = np.where(mask, ref_logp - np.where(mask, logp_all, 0.0), 0.0)
        kl = np.sum(ref_p * diff, axis=1)
        objective -= kl_beta * float(np.sum(batch.weight * kl))
        g += (kl_beta * batch.weight)[:, None] * (ref_p - probs)
    np.add.at(grads, batch.buckets, g)
    clip_frac = float(np.mean(~active & (unclipped != clipped)))
    return SurrogateGrad(grads, objective, clip_frac)


def surrogate_gradient(
    params: PolicyParams,
    group: RolloutGroup,
    shaped: ShapedAdvantages,
    clip_eps: float = 0.2,
    kl_beta: float = 0.0,
    space: FeatureSpace | None = None,
    ref_params: PolicyParams | None = None,
) -> SurrogateGrad:
    space = space or FeatureSpace()
    batch = collect_tokens(space, [group], [shaped])
    return surrogate_from_tokens(params, batch, clip_eps, kl_beta, ref_params)


def apply_update(
    params: PolicyParams,
    grad: np.ndarray,
    learning_rate: float,
    max_grad_norm: float | None = None,
) -> PolicyParams:
    """Gradient ascent step; the surrogate is maximized."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    if not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise NumericalError(f"gradient has {bad} non-finite entries")
    if max_grad_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > max_grad_norm:
            grad = grad * (max_grad_norm / norm)
    with np.errstate(invalid="ignore", over="ignore"):
        return params.with_logits(params.logits + learning_rate * grad)


@dataclass
class Adam:
    """Optional adaptive optimizer, ascent form."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: PolicyParams, grad: np.ndarray) -> PolicyParams:
        if not np.all(np.isfinite(grad)):
            raise NumericalError("gradient has non-finite entries")
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params.with_logits(params.logits + self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: PolicyParams, step: int = 0) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            version=np.array(CHECKPOINT_VERSION),
            shape=np.array(params.shape),
            signature=np.array(params.signature),
            step=np.array(step),
            logits=params.logits,
        )


def load_checkpoint(path, space: FeatureSpace) -> PolicyParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        shape = tuple(int(x) for x in data["shape"])
        if shape != space.mask.shape:
            raise CheckpointError(f"checkpoint shape {shape} does not match policy shape {space.mask.shape}")
        if str(data["signature"]) != space.signature:
            raise CheckpointError("checkpoint was written for a different grammar")
        logits = np.array(data["logits"], dtype=np.float64)
    if logits.shape != shape:
        raise CheckpointError("checkpoint header and payload disagree")
    return PolicyParams(logits, space.mask, space.signature)
