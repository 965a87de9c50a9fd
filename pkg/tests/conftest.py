import json

import numpy as np
import pytest

from plannerrl.trajectory import ActionKind, ActionToken, PerToken, Rollout, Step, TokenKind, label_stages
from plannerrl.world import generate_world, sample_queries


@pytest.fixture(scope="session")
def small_world():
    return generate_world(7, 20, 3, (1, 3))


@pytest.fixture(scope="session")
def small_queries(small_world):
    return sample_queries(small_world, 40, 3)


def tok(text: str) -> ActionToken:
    return ActionToken.parse(text)


def search_content(*queries: str) -> str:
    return json.dumps({"name": "web_search", "arguments": {"query": list(queries)}})


def browse_content(*urls: str) -> str:
    return json.dumps({"name": "browse_webpage", "arguments": {"url_list": list(urls)}})


def plan_step(i=0, think=("THINK_TOK:t0",)):
    return Step(i, tuple(tok(t) for t in think) + (tok("END_SEG"),), ActionKind.PLAN,
                (tok("PLAN_TOK"), tok("ARG_TOK:rel:1"), tok("END_SEG")), "find the father")


def search_step(i, query="Alpha father"):
    return Step(i, (tok("END_SEG"),), ActionKind.TOOL_CALL,
                (tok("SEARCH_TOK"), tok("ARG_TOK:ent:last"), tok("ARG_TOK:rel:plan")),
                search_content(query), "results")


def browse_step(i, url="alpha-father"):
    return Step(i, (tok("END_SEG"),), ActionKind.TOOL_CALL,
                (tok("BROWSE_TOK"), tok("ARG_TOK:url:1")), browse_content(url), "page")


def answer_step(i, answer="Beta"):
    return Step(i, (tok("END_SEG"),), ActionKind.ANSWER, (tok("ANSWER_TOK"), tok("ARG_TOK:ent:last")), answer)


def make_rollout(steps, query_id="q0", reward=0.0, rng=None):
    rng = rng or np.random.default_rng(0)
    n = sum(len(s.think) + len(s.action) for s in steps)
    pt = PerToken(
        tuple(float(x) for x in -rng.random(n)),
        tuple(float(x) for x in rng.random(n) * 2),
        (),
        (True,) * n,
    )
    r = Rollout(query_id, tuple(steps), reward, pt)
    return label_stages(r) if steps else r


def good_rollout(n_tool_pairs=1, answer="Beta", query_id="q0", rng=None):
    steps = [plan_step(0)]
    for _ in range(n_tool_pairs):
        steps.append(search_step(len(steps)))
        steps.append(browse_step(len(steps)))
    steps.append(answer_step(len(steps), answer))
    return make_rollout(steps, query_id, rng=rng)
