import json
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from plannerrl.trajectory import (
    ActionKind,
    ActionToken,
    FormatViolation,
    Stage,
    StageLabelError,
    Step,
    TokenKind,
    TrajectoryError,
    TrajectoryParseError,
    check_tool_call,
    label_stages,
    parse_log,
    parse_rollout,
    serialize_rollout,
    stage_counts,
    tool_call_count,
    validate_format,
    write_log,
    read_log,
)

from conftest import answer_step, browse_step, good_rollout, make_rollout, plan_step, search_step, tok


def test_token_text_round_trip():
    for t in ["END_SEG", "THINK_TOK:t2", "ARG_TOK:url:1", "PLAN_TOK"]:
        assert str(ActionToken.parse(t)) == t
    with pytest.raises(TrajectoryError):
        ActionToken(TokenKind.PLAN_TOK, "x")
    with pytest.raises(TrajectoryError):
        ActionToken(TokenKind.ARG_TOK)


def test_stage_labels_follow_step_action():
    r = good_rollout(1)
    stages = r.per_token.stage
    plan_len = len(r.steps[0].think) + len(r.steps[0].action)
    assert stages[:plan_len] == (Stage.PLANNING,) * plan_len
    assert stages[-1] is Stage.ANSWER
    counts = stage_counts(r)
    assert counts[Stage.TOOL_CALL] == 4 + 3  # search step + browse step
    assert sum(counts.values()) == r.n_tokens


def test_cut_off_step_is_other_think():
    cut = Step(1, (tok("THINK_TOK:t0"),) * 3, None, ())
    r = make_rollout([plan_step(0), cut])
    assert r.per_token.stage[-3:] == (Stage.OTHER_THINK,) * 3


def test_stage_label_errors():
    with pytest.raises(StageLabelError):
        label_stages(make_rollout([]))
    bad = Step(0, (), ActionKind.PLAN, ())
    with pytest.raises(StageLabelError):
        make_rollout([bad])


def test_valid_rollout_passes():
    ok, violations = validate_format(good_rollout(2))
    assert ok and violations == []
    assert tool_call_count(good_rollout(2)) == 4


@pytest.mark.parametrize("steps, expected", [
    ([search_step(0), answer_step(1)], FormatViolation.MISSING_INITIAL_PLAN),
    ([plan_step(0), search_step(1)], FormatViolation.NO_TERMINAL_ANSWER),
    ([plan_step(0), answer_step(1), answer_step(2)], FormatViolation.STEPS_AFTER_ANSWER),
    ([plan_step(0), Step(1, (tok("END_SEG"),), None, ()), answer_step(2)], FormatViolation.MISSING_ACTION),
])
def test_violation_classes(steps, expected):
    ok, violations = validate_format(make_rollout(steps))
    assert not ok and expected in violations


def test_multiple_actions_in_one_step():
    step = Step(1, (tok("END_SEG"),), ActionKind.ANSWER, (tok("ANSWER_TOK"), tok("SEARCH_TOK")), "x")
    ok, violations = validate_format(make_rollout([plan_step(0), step]))
    assert FormatViolation.MULTIPLE_ACTIONS in violations


def test_schema_violation_and_response_mismatch():
    bad = replace(search_step(1), content=json.dumps({"name": "web_search", "arguments": {"query": []}}))
    ok, v = validate_format(make_rollout([plan_step(0), bad, answer_step(2)]))
    assert v == [FormatViolation.SCHEMA_VIOLATION]
    no_resp = replace(search_step(1), tool_response=None)
    ok, v = validate_format(make_rollout([plan_step(0), no_resp, answer_step(2)]))
    assert v == [FormatViolation.TOOL_RESPONSE_MISMATCH]


@pytest.mark.parametrize("content, ok", [
    ('{"name": "web_search", "arguments": {"query": ["a"]}}', True),
    ('{"name": "web_search", "arguments": {"query": ["a", "a"]}}', False),
    ('{"name": "web_search", "arguments": {"query": []}}', False),
    ('{"name": "web_search", "arguments": {"query": "a"}}', False),
    ('{"name": "browse_webpage", "arguments": {"url_list": ["u", "u"]}}', True),
    ('{"name": "browse_webpage", "arguments": {"url_list": []}}', False),
    ('{"name": "browse_webpage", "arguments": {}}', False),
    ('{"name": "open", "arguments": {"url_list": ["u"]}}', False),
    ("not json", False),
])
def test_tool_schema(content, ok):
    assert check_tool_call(content) is ok


def test_log_round_trip(tmp_path):
    rs = [good_rollout(k, query_id=f"q{k}") for k in range(3)]
    write_log(tmp_path / "log.jsonl", rs)
    assert read_log(tmp_path / "log.jsonl") == rs
    for r in rs:
        assert serialize_rollout(parse_rollout(serialize_rollout(r))) == serialize_rollout(r)


def test_corrupted_line_reports_position():
    good = serialize_rollout(good_rollout(1))
    text = good + "\n" + good[:40] + "\n"
    with pytest.raises(TrajectoryParseError) as info:
        parse_log(text)
    assert info.value.line_no == 2
    assert info.value.offset >= len(good) + 1
    assert "line 2" in str(info.value)


def test_missing_field_is_parse_error():
    d = json.loads(serialize_rollout(good_rollout(1)))
    del d["per_token"]
    with pytest.raises(TrajectoryParseError):
        parse_rollout(json.dumps(d))


def test_empty_log():
    assert parse_log("") == [] and parse_log("\n\n") == []


@settings(max_examples=60, deadline=None)
@given(pairs=st.integers(0, 4), answer=st.text(min_size=0, max_size=12), seed=st.integers(0, 1000))
def test_serialize_round_trip_property(pairs, answer, seed):
    import numpy as np

    r = good_rollout(pairs, answer=answer, rng=np.random.default_rng(seed))
    assert parse_rollout(serialize_rollout(r)) == r
