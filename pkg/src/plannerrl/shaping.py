"""Group-relative advantages with entropy-based shaping and selective upweighting.

Pipeline for one rollout group:

1. standardize terminal rewards within the group and broadcast each rollout's
   value to all of its tokens;
2. multiply the advantages of selected rollouts by ``lam`` (SAU);
3. add ``psi = min(alpha * H, |A| / kappa)`` to every token, where ``A`` is the
   advantage after step 2 and ``H`` the sampling-time token entropy (EAS).

``psi`` is a constant with respect to the policy parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .trajectory import Rollout, RolloutGroup, tool_call_count

MAX_REWARD = 1.0


class ShapingError(ValueError):
    pass


@dataclass(frozen=True)
class ShapingConfig:
    alpha: float = 0.1
    kappa: float = 2.0
    lam: float = 2.0
    complexity_c: int = 2
    enable_eas: bool = True
    enable_sau: bool = True

    def __post_init__(self) -> None:
        if self.kappa <= 1:
            raise ShapingError(f"kappa must be > 1, got {self.kappa}")
        if self.lam < 1:
            raise ShapingError(f"lambda must be >= 1, got {self.lam}")
        if self.alpha < 0:
            raise ShapingError(f"alpha must be >= 0, got {self.alpha}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "ShapingConfig":
        flags = {
            "vanilla": (False, False),
            "eas": (True, False),
            "sau": (False, True),
            "both": (True, True),
        }
        if mode not in flags:
            raise ShapingError(f"unknown shaping mode {mode!r}")
        eas, sau = flags[mode]
        return cls(**{**overrides, "enable_eas": eas, "enable_sau": sau})


@dataclass
class ShapedAdvantages:
    """Per-token advantages of one group; every list is indexed by rollout."""

    base: list[np.ndarray]
    sau_scaled: list[np.ndarray]
    psi: list[np.ndarray]
    final: list[np.ndarray]
    sau_selected: list[bool]
    eas_clipped: list[np.ndarray] = field(default_factory=list)

    @property
    def sample_advantages(self) -> list[float]:
        return [float(b[0]) if len(b) else 0.0 for b in self.base]


def group_advantage(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ShapingError(f"group advantage needs at least 2 rewards, got {r.size}")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def select_sau(
    group: RolloutGroup | Sequence[Rollout],
    rewards: Sequence[float],
    cfg: ShapingConfig,
    tool_counts: Sequence[int] | None = None,
) -> set[int]:
    """Indices of max-reward rollouts that tie for the fewest tool calls, if that count reaches c."""
    rollouts = list(group)
    if len(rewards) != len(rollouts):
        raise ShapingError("rewards are not aligned with the group")
    counts = list(tool_counts) if tool_counts is not None else [tool_call_count(r) for r in rollouts]
    candidates = [i for i, r in enumerate(rewards) if r == MAX_REWARD]
    if not candidates:
        return set()
    fewest = min(counts[i] for i in candidates)
    if fewest < cfg.complexity_c:
        return set()
    return {i for i in candidates if counts[i] == fewest}


def apply_sau(advantages: Sequence[np.ndarray], selected: set[int], lam: float) -> list[np.ndarray]:
    if lam < 1:
        raise ShapingError(f"lambda must be >= 1, got {lam}")
    return [a * lam if i in selected else a.copy() for i, a in enumerate(advantages)]


def eas_term(entropy, advantage, alpha: float, kappa: float):
    """``min(alpha * H, |A| / kappa)``; works on scalars and arrays alike."""
    if kappa <= 1:
        raise ShapingError("kappa must be > 1")
    return np.minimum(alpha * np.asarray(entropy, dtype=np.float64), np.abs(advantage) / kappa)


def shape(
    group: RolloutGroup | Sequence[Rollout],
    rewards: Sequence[float],
    entropies: Sequence[Sequence[float]],
    cfg: ShapingConfig,
) -> ShapedAdvantages:
    rollouts = list(group)
    if not (len(rollouts) == len(rewards) == len(entropies)):
        raise ShapingError("rollouts, rewards and entropies differ in length")
    for r, e in zip(rollouts, entropies):
        if r.n_tokens != len(e):
            raise ShapingError(f"{len(e)} entropies for a rollout with {r.n_tokens} tokens")
    return shape_arrays(rewards, entropies, [tool_call_count(r) for r in rollouts], cfg)


def shape_arrays(
    rewards: Sequence[float],
    entropies: Sequence[Sequence[float]],
    tool_counts: Sequence[int],
    cfg: ShapingConfig,
) -> ShapedAdvantages:
    """Same as :func:`shape`, from plain per-rollout rewards, token entropies and tool-call counts."""
    if not (len(rewards) == len(entropies) == len(tool_counts)):
        raise ShapingError("rewards, entropies and tool counts differ in length")
    ents = [np.asarray(e, dtype=np.float64) for e in entropies]
    for e in ents:
        if e.ndim != 1:
            raise ShapingError("each rollout needs a flat list of token entropies")

    sample_adv = group_advantage(rewards)
    base = [np.full(e.size, a) for e, a in zip(ents, sample_adv)]

    selected = select_sau(range(len(rewards)), rewards, cfg, tool_counts) if cfg.enable_sau else set()
    scaled = apply_sau(base, selected, cfg.lam) if cfg.enable_sau else [b.copy() for b in base]

    if cfg.enable_eas:
        psi = [eas_term(e, a, cfg.alpha, cfg.kappa) for e, a in zip(ents, scaled)]
        clipped = [cfg.alpha * e > np.abs(a) / cfg.kappa for e, a in zip(ents, scaled)]
        final = [a + p for a, p in zip(scaled, psi)]
    else:
        psi = [np.zeros(e.size) for e in ents]
        clipped = [np.zeros(e.size, dtype=bool) for e in ents]
        final = [a.copy() for a in scaled]

    return ShapedAdvantages(
        base=base,
        sau_scaled=scaled,
        psi=psi,
        final=final,
        sau_selected=[i in selected for i in range(len(rewards))],
        eas_clipped=clipped,
    )


def psi_ratio_terms(shaped: ShapedAdvantages) -> tuple[float, int]:
    """Sum of psi/|A| over tokens with nonzero post-SAU advantage, and their count."""
    total, n = 0.0, 0
    for a, p in zip(shaped.sau_scaled, shaped.psi):
        nz = a != 0
        if nz.any():
            total += float(np.sum(p[nz] / np.abs(a[nz])))
            n += int(nz.sum())
    return total, n
