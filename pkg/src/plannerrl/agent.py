"""Plan-then-execute agent loop driven by the tabular policy.

Each step is a think segment followed by exactly one action (plan, tool call
or answer). Tool calls run against the knowledge world and their responses
feed the features of later tokens.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grammar import ENT_LAST, ENT_START, REL_PLAN, URL_LINK, FeatureSpace
from .policy import DecodeTable, PolicyParams
from .trajectory import ActionKind, ActionToken, PerToken, Rollout, Step, TokenKind, label_stages
from .world import KnowledgeWorld, Query, SearchCache, read_page, web_search


@dataclass(frozen=True)
class AgentLimits:
    max_steps: int = 8
    max_segment_tokens: int = 16
    search_k: int = 10


def rollout_rng(seed: int, step: int, query_id: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, zlib.crc32(query_id.encode()), index])


class _Uniforms:
    def __init__(self, rng: np.random.Generator, block: int = 128):
        self.rng = rng
        self.block = block
        self.buf: list[float] = []
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= len(self.buf):
            self.buf = self.rng.random(self.block).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


class _Episode:
    def __init__(self, world: KnowledgeWorld, query: Query, space: FeatureSpace, limits: AgentLimits):
        self.world = world
        self.query = query
        self.space = space
        self.limits = limits
        self.prev = "start"
        self.summary = "none"
        self.plan: list[int] | None = None
        self.cursor = 0
        self.ent_last = query.start
        self.results: tuple = ()
        self.links: tuple[str, ...] = ()
        self.cache = SearchCache()

    @property
    def plan_state(self) -> str:
        return "pending" if self.plan is not None and self.cursor < len(self.plan) else "done"

    def plan_relation(self) -> str | None:
        if self.plan_state != "pending":
            return None
        j = self.plan[self.cursor]
        return self.query.hop_chain[j - 1] if j <= self.query.hops else None

    def entity(self, pointer: str) -> str:
        return self.query.start if pointer == ENT_START else self.ent_last

    def search(self, ent_ptr: str, with_relation: bool) -> tuple[str, str]:
        words = [self.entity(ent_ptr)]
        rel = self.plan_relation() if with_relation else None
        if rel:
            words.append(rel)
        q = " ".join(words)
        resp = web_search(self.world, self.cache, [q], self.limits.search_k)[0]
        self.results = resp.results
        self.summary = "results" if resp.results else "nothing"
        self.prev = "search"
        content = json.dumps({"name": "web_search", "arguments": {"query": [q]}})
        return content, resp.render()

    def resolve_url(self, pointer: str) -> str:
        if pointer == URL_LINK:
            rel = self.plan_relation()
            if rel:
                pid = self.world.page_for(self.ent_last, rel)
                if pid in self.links:
                    return pid
            return "none"
        rank = int(pointer.split(":")[1])
        return self.results[rank - 1].url if rank <= len(self.results) else "none"

    def browse(self, url_ptr: str) -> tuple[str, str]:
        url = self.resolve_url(url_ptr)
        origin = f"{self.query.surface_form} {self.cache.last_query()}"
        text, facts = read_page(self.world, url, origin)
        links: tuple[str, ...] = ()
        for _, _, obj in facts:
            self.ent_last = obj
            self.cursor += 1
            links = tuple(self.world.pages_of(obj))
        self.links = links
        self.summary = "found" if facts else "nothing"
        self.prev = "browse"
        content = json.dumps({"name": "browse_webpage", "arguments": {"url_list": [url]}})
        return content, f"({url}, {text})"

    def plan_text(self, items: list[int]) -> str:
        parts = []
        for j in items:
            rel = self.query.hop_chain[j - 1] if j <= self.query.hops else "?"
            parts.append(f"find the {rel}")
        return "; ".join(parts)


Chooser = Callable[[int], tuple[int, float, float]]


def run_episode(
    choose: Chooser,
    world: KnowledgeWorld,
    query: Query,
    space: FeatureSpace,
    limits: AgentLimits = AgentLimits(),
) -> Rollout:
    vocab = space.vocab
    toks = vocab.tokens
    end_id = vocab.kind(TokenKind.END_SEG)
    max_seg = min(limits.max_segment_tokens, space.cfg.max_segment_tokens)
    H = space.cfg.max_hops
    ep = _Episode(world, query, space, limits)
    b_of = space.index
    steps: list[Step] = []
    logps: list[float] = []
    ents: list[float] = []

    def pick(key) -> ActionToken:
        b = b_of[key]
        tid, lp, h = choose(b)
        buckets.append(b)
        logps.append(lp)
        ents.append(h)
        return toks[tid]

    for t in range(limits.max_steps):
        buckets: list[int] = []
        think: list[ActionToken] = []
        finished_think = False
        while len(think) < max_seg:
            tok = pick(("think", ep.prev, len(think)))
            think.append(tok)
            if tok.kind is TokenKind.END_SEG:
                finished_think = True
                break
        if not finished_think:
            steps.append(Step(t, tuple(think), None, (), buckets=tuple(buckets)))
            break

        if t == 0:
            head = pick(("head", "start"))
        else:
            browsable = bool(ep.results) or bool(ep.links)
            head = pick(("head", ep.prev, ep.summary, ep.plan_state, browsable))
        action = [head]
        kind = head.kind
        content, response = "", None
        truncated = False

        if kind is TokenKind.PLAN_TOK:
            items: list[int] = []
            while True:
                if len(action) >= max_seg:
                    truncated = True
                    break
                p = min(len(items), H + 1)
                tok = pick(("plan", p, query.hops > len(items)))
                action.append(tok)
                if tok.kind is TokenKind.END_SEG:
                    break
                if tok.arg.startswith("rel:"):
                    items.append(int(tok.arg[4:]))
            if not truncated:
                ep.plan = items
                ep.prev = "plan"
                content = ep.plan_text(items)
            step_kind = ActionKind.PLAN
        elif kind is TokenKind.SEARCH_TOK:
            ent = pick(("search_ent", ep.summary, ep.plan_state))
            rel = pick(("search_rel", ep.plan_state))
            action += [ent, rel]
            content, response = ep.search(ent.arg, rel.arg == REL_PLAN)
            step_kind = ActionKind.TOOL_CALL
        elif kind is TokenKind.BROWSE_TOK:
            key = ("browse", ep.prev, ep.summary, ep.plan_state, bool(ep.results), bool(ep.links))
            url = pick(key)
            action.append(url)
            content, response = ep.browse(url.arg)
            step_kind = ActionKind.TOOL_CALL
        else:
            ent = pick(("answer", ep.summary, ep.plan_state))
            action.append(ent)
            content = ep.entity(ent.arg)
            step_kind = ActionKind.ANSWER

        if truncated:
            steps.append(Step(t, tuple(think), step_kind, tuple(action), buckets=tuple(buckets)))
            break
        steps.append(Step(t, tuple(think), step_kind, tuple(action), content, response, tuple(buckets)))
        if step_kind is ActionKind.ANSWER:
            break

    n = len(logps)
    rollout = Rollout(
        query.query_id,
        tuple(steps),
        0.0,
        PerToken(tuple(logps), tuple(ents), (), (True,) * n),
    )
    return label_stages(rollout)


def sample_rollout(
    params: PolicyParams | DecodeTable,
    world: KnowledgeWorld,
    query: Query,
    rng: np.random.Generator,
    limits: AgentLimits = AgentLimits(),
    space: FeatureSpace | None = None,
) -> Rollout:
    """Sample one trajectory; stored log-probs and entropies are the behavior-policy values."""
    space = space or FeatureSpace()
    table = params if isinstance(params, DecodeTable) else DecodeTable(params)
    u = _Uniforms(rng)
    return run_episode(lambda b: table.sample(b, u()), world, query, space, limits)


def greedy_rollout(
    params: PolicyParams | DecodeTable,
    world: KnowledgeWorld,
    query: Query,
    limits: AgentLimits = AgentLimits(),
    space: FeatureSpace | None = None,
) -> Rollout:
    space = space or FeatureSpace()
    table = params if isinstance(params, DecodeTable) else DecodeTable(params)
    return run_episode(table.argmax, world, query, space, limits)
