"""Symbolic tokens, steps, rollouts and the JSON-lines trajectory log format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Iterator


class TokenKind(str, Enum):
    THINK_TOK = "THINK_TOK"
    PLAN_TOK = "PLAN_TOK"
    SEARCH_TOK = "SEARCH_TOK"
    BROWSE_TOK = "BROWSE_TOK"
    ANSWER_TOK = "ANSWER_TOK"
    ARG_TOK = "ARG_TOK"
    END_SEG = "END_SEG"


class ActionKind(str, Enum):
    PLAN = "Plan"
    TOOL_CALL = "ToolCall"
    ANSWER = "Answer"


class Stage(str, Enum):
    PLANNING = "Planning"
    TOOL_CALL = "ToolCall"
    ANSWER = "Answer"
    OTHER_THINK = "OtherThink"


class FormatViolation(str, Enum):
    EMPTY_ROLLOUT = "EmptyRollout"
    MISSING_INITIAL_PLAN = "MissingInitialPlan"
    MISSING_ACTION = "MissingAction"
    MULTIPLE_ACTIONS = "MultipleActions"
    SCHEMA_VIOLATION = "SchemaViolation"
    TOOL_RESPONSE_MISMATCH = "ToolResponseMismatch"
    STEPS_AFTER_ANSWER = "StepsAfterAnswer"
    NO_TERMINAL_ANSWER = "NoTerminalAnswer"


HEAD_KINDS = {
    TokenKind.PLAN_TOK: ActionKind.PLAN,
    TokenKind.SEARCH_TOK: ActionKind.TOOL_CALL,
    TokenKind.BROWSE_TOK: ActionKind.TOOL_CALL,
    TokenKind.ANSWER_TOK: ActionKind.ANSWER,
}
_ARG_KINDS = {TokenKind.THINK_TOK, TokenKind.ARG_TOK}

TOOL_SCHEMAS = {
    "web_search": {"param": "query", "min_items": 1, "unique": True},
    "browse_webpage": {"param": "url_list", "min_items": 1, "unique": False},
}


class TrajectoryError(ValueError):
    pass


class StageLabelError(TrajectoryError):
    pass


class TrajectoryParseError(TrajectoryError):
    def __init__(self, message: str, offset: int, line_no: int | None = None):
        where = f"line {line_no}, " if line_no is not None else ""
        super().__init__(f"{message} ({where}byte offset {offset})")
        self.offset = offset
        self.line_no = line_no


@dataclass(frozen=True)
class ActionToken:
    kind: TokenKind
    arg: str | None = None

    def __post_init__(self) -> None:
        if (self.arg is not None) != (self.kind in _ARG_KINDS):
            raise TrajectoryError(f"token {self.kind.value} arg mismatch: {self.arg!r}")

    def __str__(self) -> str:
        return self.kind.value if self.arg is None else f"{self.kind.value}:{self.arg}"

    @classmethod
    def parse(cls, text: str) -> "ActionToken":
        kind, _, arg = text.partition(":")
        return cls(TokenKind(kind), arg or None)


@dataclass(frozen=True)
class Step:
    index: int
    think: tuple[ActionToken, ...]
    action_kind: ActionKind | None
    action: tuple[ActionToken, ...]
    content: str = ""
    tool_response: str | None = None
    buckets: tuple[int, ...] = ()
    verdict: dict | None = None

    @property
    def tokens(self) -> tuple[ActionToken, ...]:
        return self.think + self.action

    @property
    def tool_name(self) -> str | None:
        if self.action_kind is not ActionKind.TOOL_CALL:
            return None
        try:
            return json.loads(self.content).get("name")
        except (ValueError, AttributeError):
            return None


@dataclass(frozen=True)
class PerToken:
    logprob: tuple[float, ...] = ()
    entropy: tuple[float, ...] = ()
    stage: tuple[Stage | None, ...] = ()
    mask: tuple[bool, ...] = ()

    def __len__(self) -> int:
        return len(self.logprob)


@dataclass(frozen=True)
class Rollout:
    query_id: str
    steps: tuple[Step, ...]
    reward: float = 0.0
    per_token: PerToken = field(default_factory=PerToken)

    @property
    def n_tokens(self) -> int:
        return sum(len(s.think) + len(s.action) for s in self.steps)

    @property
    def answer(self) -> str | None:
        for step in reversed(self.steps):
            if step.action_kind is ActionKind.ANSWER:
                return step.content
        return None

    def iter_tokens(self) -> Iterator[ActionToken]:
        for step in self.steps:
            yield from step.think
            yield from step.action

    def bucket_ids(self) -> list[int]:
        out: list[int] = []
        for step in self.steps:
            out.extend(step.buckets)
        return out


@dataclass(frozen=True)
class RolloutGroup:
    query_id: str
    rollouts: tuple[Rollout, ...]

    def __post_init__(self) -> None:
        if len(self.rollouts) < 2:
            raise TrajectoryError(f"a group needs at least 2 rollouts, got {len(self.rollouts)}")
        for r in self.rollouts:
            if r.query_id != self.query_id:
                raise TrajectoryError(f"rollout for {r.query_id} in group {self.query_id}")

    def __len__(self) -> int:
        return len(self.rollouts)

    def __iter__(self):
        return iter(self.rollouts)


# -- stage labels --------------------------------------------------------

_STAGE_OF = {
    ActionKind.PLAN: Stage.PLANNING,
    ActionKind.TOOL_CALL: Stage.TOOL_CALL,
    ActionKind.ANSWER: Stage.ANSWER,
}


def label_stages(rollout: Rollout) -> Rollout:
    """Tag every agent token with the stage of the step that hosts it.

    Think tokens inherit their step's stage; a step cut off before its action
    leaves its think tokens as ``OtherThink``.
    """
    if not rollout.steps:
        raise StageLabelError("cannot label an empty rollout")
    stages: list[Stage] = []
    for step in rollout.steps:
        if step.action_kind is None:
            if step.action:
                raise StageLabelError(f"step {step.index} has action tokens but no action kind")
            stages.extend([Stage.OTHER_THINK] * len(step.think))
            continue
        if not step.action:
            raise StageLabelError(f"step {step.index} declares {step.action_kind.value} with no action tokens")
        stages.extend([_STAGE_OF[step.action_kind]] * (len(step.think) + len(step.action)))
    pt = rollout.per_token
    if len(pt) and len(pt) != len(stages):
        raise StageLabelError(f"per-token stats cover {len(pt)} tokens, rollout has {len(stages)}")
    return replace(rollout, per_token=replace(pt, stage=tuple(stages)))


def stage_counts(rollout: Rollout) -> dict[Stage, int]:
    counts: dict[Stage, int] = {}
    for stage, m in zip(rollout.per_token.stage, rollout.per_token.mask or [True] * len(rollout.per_token.stage)):
        if m:
            counts[stage] = counts.get(stage, 0) + 1
    return counts


# -- format checks -------------------------------------------------------


def check_tool_call(content: str) -> bool:
    try:
        call = json.loads(content)
    except ValueError:
        return False
    if not isinstance(call, dict) or call.get("name") not in TOOL_SCHEMAS:
        return False
    schema = TOOL_SCHEMAS[call["name"]]
    args = call.get("arguments")
    if not isinstance(args, dict) or schema["param"] not in args:
        return False
    items = args[schema["param"]]
    if not isinstance(items, list) or len(items) < schema["min_items"]:
        return False
    if not all(isinstance(x, str) for x in items):
        return False
    if schema["unique"] and len(set(items)) != len(items):
        return False
    return True


def validate_format(rollout: Rollout) -> tuple[bool, list[FormatViolation]]:
    violations: list[FormatViolation] = []
    steps = rollout.steps
    if not steps:
        return False, [FormatViolation.EMPTY_ROLLOUT]
    if steps[0].action_kind is not ActionKind.PLAN:
        violations.append(FormatViolation.MISSING_INITIAL_PLAN)
    for i, step in enumerate(steps):
        heads = [t for t in step.action if t.kind in HEAD_KINDS]
        if step.action_kind is None or not heads:
            violations.append(FormatViolation.MISSING_ACTION)
        elif len(heads) > 1:
            violations.append(FormatViolation.MULTIPLE_ACTIONS)
        elif step.action[0] != heads[0] or HEAD_KINDS[heads[0].kind] is not step.action_kind:
            violations.append(FormatViolation.MISSING_ACTION)
        if step.action_kind is ActionKind.TOOL_CALL:
            if not check_tool_call(step.content):
                violations.append(FormatViolation.SCHEMA_VIOLATION)
        if (step.tool_response is not None) != (step.action_kind is ActionKind.TOOL_CALL):
            violations.append(FormatViolation.TOOL_RESPONSE_MISMATCH)
        if step.action_kind is ActionKind.ANSWER and i != len(steps) - 1:
            violations.append(FormatViolation.STEPS_AFTER_ANSWER)
    if steps[-1].action_kind is not ActionKind.ANSWER:
        violations.append(FormatViolation.NO_TERMINAL_ANSWER)
    # keep one entry per class, in first-seen order
    seen: list[FormatViolation] = []
    for v in violations:
        if v not in seen:
            seen.append(v)
    return not seen, seen


def tool_call_count(rollout: Rollout) -> int:
    return sum(1 for s in rollout.steps if s.action_kind is ActionKind.TOOL_CALL)


# -- serialization -------------------------------------------------------


def _step_to_dict(step: Step) -> dict:
    out = {
        "index": step.index,
        "think": [str(t) for t in step.think],
        "action_kind": step.action_kind.value if step.action_kind else None,
        "action": [str(t) for t in step.action],
        "content": step.content,
        "tool_response": step.tool_response,
        "buckets": list(step.buckets),
    }
    if step.verdict is not None:
        out["verdict"] = step.verdict
    return out


def _step_from_dict(d: dict) -> Step:
    return Step(
        index=int(d["index"]),
        think=tuple(ActionToken.parse(t) for t in d["think"]),
        action_kind=ActionKind(d["action_kind"]) if d["action_kind"] is not None else None,
        action=tuple(ActionToken.parse(t) for t in d["action"]),
        content=d["content"],
        tool_response=d["tool_response"],
        buckets=tuple(int(b) for b in d["buckets"]),
        verdict=d.get("verdict"),
    )


def rollout_to_dict(rollout: Rollout) -> dict:
    pt = rollout.per_token
    return {
        "query_id": rollout.query_id,
        "steps": [_step_to_dict(s) for s in rollout.steps],
        "reward": rollout.reward,
        "per_token": {
            "logprob": list(pt.logprob),
            "entropy": list(pt.entropy),
            "stage": [s.value if s is not None else None for s in pt.stage],
            "mask": list(pt.mask),
        },
    }


def serialize_rollout(rollout: Rollout) -> str:
    return json.dumps(rollout_to_dict(rollout), separators=(",", ":"))


def parse_rollout(line: str) -> Rollout:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TrajectoryParseError(exc.msg, len(line[: exc.pos].encode())) from None
    try:
        pt = d["per_token"]
        return Rollout(
            query_id=d["query_id"],
            steps=tuple(_step_from_dict(s) for s in d["steps"]),
            reward=float(d["reward"]),
            per_token=PerToken(
                logprob=tuple(float(x) for x in pt["logprob"]),
                entropy=tuple(float(x) for x in pt["entropy"]),
                stage=tuple(Stage(s) if s is not None else None for s in pt["stage"]),
                mask=tuple(bool(m) for m in pt["mask"]),
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TrajectoryParseError(f"malformed rollout record: {exc!r}", 0) from None


def parse_log(text: str) -> list[Rollout]:
    rollouts = []
    offset = 0
    for line_no, line in enumerate(text.splitlines(keepends=True), start=1):
        stripped = line.strip()
        if stripped:
            try:
                rollouts.append(parse_rollout(stripped))
            except TrajectoryParseError as exc:
                raise TrajectoryParseError(str(exc).rsplit(" (", 1)[0], offset + exc.offset, line_no) from None
        offset += len(line.encode())
    return rollouts


def read_log(path) -> list[Rollout]:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh.read())


def write_log(path, rollouts: Iterable[Rollout]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rollouts:
            fh.write(serialize_rollout(r) + "\n")
