"""Terminal reward: +0.5 for a well-formed trajectory, +0.5 more for a correct answer.

A format violation zeroes the total regardless of the answer.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from typing import Callable, Protocol

from .trajectory import Rollout, validate_format
from .world import Query

FORMAT_REWARD = 0.5
ANSWER_REWARD = 0.5
REWARD_VALUES = (0.0, 0.5, 1.0)


class Judge(Protocol):
    name: str

    def __call__(self, prediction: str, gold: str) -> bool: ...


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


@dataclass(frozen=True)
class NormalizedExactMatch:
    name: str = "normalized_exact_match"

    def __call__(self, prediction: str, gold: str) -> bool:
        return normalize_answer(prediction) == normalize_answer(gold)


JUDGES: dict[str, Callable[[], Judge]] = {"normalized_exact_match": NormalizedExactMatch}


def get_judge(name: str) -> Judge:
    try:
        return JUDGES[name]()
    except KeyError:
        raise ValueError(f"unknown judge {name!r}; known: {sorted(JUDGES)}") from None


def judge_match(prediction: str, gold: str, judge: Judge | None = None) -> bool:
    return (judge or NormalizedExactMatch())(prediction, gold)


@dataclass(frozen=True)
class RewardBreakdown:
    format_ok: bool
    answer_ok: bool
    total: float

    def as_dict(self) -> dict:
        return {"format_ok": self.format_ok, "answer_ok": self.answer_ok, "total": self.total}


def combine(format_ok: bool, answer_ok: bool) -> float:
    if not format_ok:
        return 0.0
    return FORMAT_REWARD + (ANSWER_REWARD if answer_ok else 0.0)


def score(rollout: Rollout, query: Query, judge: Judge | None = None) -> RewardBreakdown:
    format_ok, _ = validate_format(rollout)
    prediction = rollout.answer
    answer_ok = prediction is not None and judge_match(prediction, query.answer, judge)
    return RewardBreakdown(format_ok, answer_ok, combine(format_ok, answer_ok))
