"""Per-step training metrics, computed the same way in-run and from trajectory logs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

from .shaping import ShapedAdvantages, ShapingConfig, psi_ratio_terms, shape
from .trajectory import RolloutGroup, Stage, TrajectoryError, TrajectoryParseError, read_log, tool_call_count


@dataclass(frozen=True)
class StepMetrics:
    step: int
    n_rollouts: int
    n_tokens: int
    mean_reward: float
    frac_reward_0: float
    frac_reward_05: float
    frac_reward_1: float
    entropy_planning: float
    entropy_other: float
    entropy_toolcall: float
    entropy_answer: float
    mean_tool_calls: float
    psi_ratio: float
    selected_fraction: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _mean(total: float, n: int) -> float:
    return total / n if n else 0.0


def compute_step_metrics(
    step: int,
    groups: Sequence[RolloutGroup],
    shaped: Sequence[ShapedAdvantages],
) -> StepMetrics:
    rewards = [r.reward for g in groups for r in g]
    n = len(rewards)
    sums = {s: 0.0 for s in Stage}
    counts = {s: 0 for s in Stage}
    n_tokens = 0
    for g in groups:
        for r in g:
            pt = r.per_token
            for h, st, m in zip(pt.entropy, pt.stage, pt.mask):
                if m:
                    sums[st] += h
                    counts[st] += 1
                    n_tokens += 1
    other = [Stage.TOOL_CALL, Stage.ANSWER, Stage.OTHER_THINK]
    psi_total, psi_n = 0.0, 0
    selected = 0
    for sh in shaped:
        t, c = psi_ratio_terms(sh)
        psi_total += t
        psi_n += c
        selected += sum(sh.sau_selected)
    return StepMetrics(
        step=step,
        n_rollouts=n,
        n_tokens=n_tokens,
        mean_reward=_mean(sum(rewards), n),
        frac_reward_0=_mean(sum(1 for x in rewards if x == 0.0), n),
        frac_reward_05=_mean(sum(1 for x in rewards if x == 0.5), n),
        frac_reward_1=_mean(sum(1 for x in rewards if x == 1.0), n),
        entropy_planning=_mean(sums[Stage.PLANNING], counts[Stage.PLANNING]),
        entropy_other=_mean(sum(sums[s] for s in other), sum(counts[s] for s in other)),
        entropy_toolcall=_mean(sums[Stage.TOOL_CALL], counts[Stage.TOOL_CALL]),
        entropy_answer=_mean(sums[Stage.ANSWER], counts[Stage.ANSWER]),
        mean_tool_calls=_mean(sum(tool_call_count(r) for g in groups for r in g), n),
        psi_ratio=_mean(psi_total, psi_n),
        selected_fraction=_mean(selected, n),
    )


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def metrics_csv(rows: Sequence[StepMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(StepMetrics.columns())
    for row in rows:
        writer.writerow([_fmt(v) for v in asdict(row).values()])
    return buf.getvalue()


def read_metrics_csv(path) -> list[StepMetrics]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            vals = {}
            for f in fields(StepMetrics):
                vals[f.name] = int(rec[f.name]) if f.type in (int, "int") else float(rec[f.name])
            out.append(StepMetrics(**vals))
    return out


def metrics_close(a: StepMetrics, b: StepMetrics, tol: float = 1e-9) -> bool:
    for f in fields(StepMetrics):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if not math.isclose(x, y, rel_tol=0.0, abs_tol=tol):
            return False
    return True


# -- log analysis ----------------------------------------------------------


def groups_from_rollouts(rollouts, group_size: int) -> list[RolloutGroup]:
    if len(rollouts) % group_size:
        raise TrajectoryError(f"{len(rollouts)} rollouts do not split into groups of {group_size}")
    return [
        RolloutGroup(rollouts[i].query_id, tuple(rollouts[i : i + group_size]))
        for i in range(0, len(rollouts), group_size)
    ]


def step_files(log_dir) -> list[tuple[int, Path]]:
    out = []
    for path in sorted(Path(log_dir).glob("step_*.jsonl")):
        out.append((int(path.stem.split("_")[1]), path))
    return out


def analyze_rollouts(step_rollouts: dict[int, list], shaping: ShapingConfig, group_size: int) -> list[StepMetrics]:
    rows = []
    for step in sorted(step_rollouts):
        rollouts = step_rollouts[step]
        if not rollouts:
            continue
        groups = groups_from_rollouts(rollouts, group_size)
        shaped = [
            shape(g, [r.reward for r in g], [r.per_token.entropy for r in g], shaping) for g in groups
        ]
        rows.append(compute_step_metrics(step, groups, shaped))
    return rows


def analyze_logs(log_dir, shaping: ShapingConfig, group_size: int) -> list[StepMetrics]:
    """Rebuild the per-step metrics from trajectory logs alone."""
    logs = {}
    for step, path in step_files(log_dir):
        try:
            logs[step] = read_log(path)
        except TrajectoryParseError as exc:
            raise TrajectoryParseError(f"{path}: {str(exc).rsplit(' (', 1)[0]}", exc.offset, exc.line_no) from None
    return analyze_rollouts(logs, shaping, group_size)


def stage_entropy_table(rows: Sequence[StepMetrics]) -> list[dict]:
    return [
        {
            "step": r.step,
            "planning": r.entropy_planning,
            "other": r.entropy_other,
            "toolcall": r.entropy_toolcall,
            "answer": r.entropy_answer,
        }
        for r in rows
    ]


def reward_tier_table(rows: Sequence[StepMetrics]) -> list[dict]:
    return [
        {"step": r.step, "reward_0": r.frac_reward_0, "reward_0.5": r.frac_reward_05, "reward_1": r.frac_reward_1}
        for r in rows
    ]


def tool_call_table(rows: Sequence[StepMetrics]) -> list[dict]:
    return [{"step": r.step, "mean_tool_calls": r.mean_tool_calls, "selected_fraction": r.selected_fraction} for r in rows]
