"""Synthetic multi-hop knowledge world and the two research tools run against it.

Every entity has exactly one object per relation label, so a hop chain from a
start entity has a unique answer. Each triple lives on its own page: searching
finds the page (the snippet hides the object), browsing reveals the object and
the outgoing links of the object entity.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable

import numpy as np

WORLD_FORMAT_VERSION = 1
DEFAULT_TOP_K = 10

RELATION_LABELS = (
    "father", "birthplace", "employer", "mentor", "spouse", "founder",
    "publisher", "capital", "teacher", "rival", "sponsor", "architect",
)
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "th")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "n", "r", "l", "s", "th", "m")
_FILLER = (
    "archive", "record", "notes", "history", "overview", "listing", "profile",
    "summary", "details", "reference", "catalog", "entry", "index", "survey",
)
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class WorldConfigError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


Triple = tuple[str, str, str]


@dataclass(frozen=True)
class Page:
    page_id: str
    title: str
    facts: tuple[Triple, ...]
    distractor_text: str

    @property
    def snippet(self) -> str:
        # fact text cut right before the object
        subject, relation, _ = self.facts[0]
        return f"{subject} {relation}: ... {self.distractor_text}"


@dataclass(frozen=True)
class Query:
    query_id: str
    surface_form: str
    start: str
    hop_chain: tuple[str, ...]
    answer: str

    @property
    def hops(self) -> int:
        return len(self.hop_chain)


@dataclass(frozen=True)
class SearchResult:
    title: str
    url: str
    snippet: str


@dataclass(frozen=True)
class SearchResponse:
    query: str
    results: tuple[SearchResult, ...]
    error: str | None = None

    def render(self) -> str:
        if self.error is not None:
            return f"[web_search error] {self.error}"
        lines = [f"results for '{self.query}':"]
        lines += [f"({r.title}, {r.url}, {r.snippet})" for r in self.results]
        return "\n".join(lines)


@dataclass
class KnowledgeWorld:
    seed: int
    entities: list[str]
    relation_labels: list[str]
    relations: list[Triple]
    pages: dict[str, Page]
    hop_depth_range: tuple[int, int]
    _objects: dict[tuple[str, str], str] = field(default_factory=dict, repr=False, compare=False)
    _page_tokens: dict[str, frozenset[str]] = field(default_factory=dict, repr=False, compare=False)
    _rank_memo: dict[tuple[str, int], tuple] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._objects = {(s, r): o for s, r, o in self.relations}
        self._page_tokens = {
            pid: frozenset(tokenize(p.title + " " + p.snippet)) for pid, p in self.pages.items()
        }

    def follow(self, start: str, chain: Iterable[str]) -> str:
        entity = start
        for relation in chain:
            entity = self._objects[(entity, relation)]
        return entity

    def page_for(self, subject: str, relation: str) -> str:
        return page_id_for(subject, relation)

    def pages_of(self, entity: str) -> list[str]:
        return [page_id_for(entity, r) for r in self.relation_labels]

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": WORLD_FORMAT_VERSION,
            "seed": self.seed,
            "hop_depth_range": list(self.hop_depth_range),
            "entities": list(self.entities),
            "relation_labels": list(self.relation_labels),
            "relations": [list(t) for t in self.relations],
            "pages": [
                {
                    "page_id": p.page_id,
                    "title": p.title,
                    "facts": [list(f) for f in p.facts],
                    "distractor_text": p.distractor_text,
                }
                for p in self.pages.values()
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "KnowledgeWorld":
        if data.get("version") != WORLD_FORMAT_VERSION:
            raise WorldConfigError(f"unsupported world format version {data.get('version')!r}")
        pages = {}
        for p in data["pages"]:
            pages[p["page_id"]] = Page(
                page_id=p["page_id"],
                title=p["title"],
                facts=tuple(tuple(f) for f in p["facts"]),
                distractor_text=p["distractor_text"],
            )
        return cls(
            seed=data["seed"],
            entities=list(data["entities"]),
            relation_labels=list(data["relation_labels"]),
            relations=[tuple(t) for t in data["relations"]],
            pages=pages,
            hop_depth_range=tuple(data["hop_depth_range"]),
        )

    @classmethod
    def loads(cls, text: str) -> "KnowledgeWorld":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def page_id_for(subject: str, relation: str) -> str:
    return f"{subject.lower()}-{relation}"


def _make_names(rng: np.random.Generator, n: int) -> list[str]:
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < n:
        n_syll = int(rng.integers(2, 4))
        parts = []
        for _ in range(n_syll):
            parts.append(_ONSETS[rng.integers(len(_ONSETS))])
            parts.append(_VOWELS[rng.integers(len(_VOWELS))])
        parts.append(_CODAS[rng.integers(len(_CODAS))])
        name = "".join(parts).capitalize()
        if name.lower() in seen or name.lower() in RELATION_LABELS or name.lower() in _FILLER:
            continue
        seen.add(name.lower())
        names.append(name)
    return names


def generate_world(
    seed: int,
    n_entities: int,
    n_relations: int,
    hop_depth_range: tuple[int, int] = (1, 3),
) -> KnowledgeWorld:
    """Build a seeded world with ``n_entities`` entities and ``n_relations`` relation labels.

    Relations are total and functional: every (entity, label) pair maps to one
    object different from the subject.
    """
    lo, hi = hop_depth_range
    if n_entities < 2:
        raise WorldConfigError(f"n_entities must be >= 2, got {n_entities}")
    if not 1 <= n_relations <= len(RELATION_LABELS):
        raise WorldConfigError(f"n_relations must be in [1, {len(RELATION_LABELS)}], got {n_relations}")
    if not 1 <= lo <= hi <= 5:
        raise WorldConfigError(f"hop range must lie within [1, 5], got {hop_depth_range}")
    if seed < 0:
        raise WorldConfigError("seed must be unsigned")

    rng = np.random.default_rng(seed)
    entities = _make_names(rng, n_entities)
    labels = list(RELATION_LABELS[:n_relations])
    relations: list[Triple] = []
    pages: dict[str, Page] = {}
    for e_idx, subject in enumerate(entities):
        for label in labels:
            o_idx = int(rng.integers(n_entities - 1))
            if o_idx >= e_idx:
                o_idx += 1
            triple = (subject, label, entities[o_idx])
            relations.append(triple)
            filler = " ".join(_FILLER[i] for i in rng.choice(len(_FILLER), size=3, replace=False))
            pid = page_id_for(subject, label)
            pages[pid] = Page(pid, f"{subject} {label}", (triple,), filler)
    return KnowledgeWorld(seed, entities, labels, relations, pages, (lo, hi))


def surface_form(start: str, chain: tuple[str, ...]) -> str:
    text = start
    for relation in chain:
        text = f"the {relation} of {text}"
    return f"What is {text}?"


def _valid_chains(world: KnowledgeWorld, hops: int) -> list[tuple[str, tuple[str, ...]]]:
    out = []
    for start in world.entities:
        for chain in product(world.relation_labels, repeat=hops):
            if world.follow(start, chain) != start:
                out.append((start, chain))
    return out


_ENUMERATION_LIMIT = 200_000


def _rejection_sample(world, hops, need, rng):
    # the chain space is large, so collisions and self-loops are rare
    seen: set = set()
    picked = []
    while len(picked) < need:
        start = world.entities[int(rng.integers(len(world.entities)))]
        chain = tuple(world.relation_labels[int(i)] for i in rng.integers(len(world.relation_labels), size=hops))
        if (start, chain) in seen or world.follow(start, chain) == start:
            continue
        seen.add((start, chain))
        picked.append((start, chain))
    return picked


def sample_queries(
    world: KnowledgeWorld,
    n: int,
    rng_seed: int,
    multi_hop_ratio: float = 0.75,
    id_prefix: str = "q",
) -> list[Query]:
    """Draw ``n`` distinct queries whose answers differ from their start entity.

    A ``multi_hop_ratio`` share (rounded) gets hop counts >= 2, spread evenly
    over the world's multi-hop depths; the rest are single hop.
    """
    if not world.entities:
        raise WorldConfigError("world has no entities")
    lo, hi = world.hop_depth_range
    depths = list(range(lo, hi + 1))
    single = [d for d in depths if d == 1]
    multi = [d for d in depths if d >= 2]
    if single and multi:
        n_multi = int(round(n * multi_hop_ratio))
        plan = [1] * (n - n_multi) + [multi[i % len(multi)] for i in range(n_multi)]
    else:
        plan = [depths[i % len(depths)] for i in range(n)]

    rng = np.random.default_rng(rng_seed)
    queries: list[Query] = []
    for hops in sorted(set(plan)):
        need = plan.count(hops)
        space = len(world.entities) * len(world.relation_labels) ** hops
        if space > _ENUMERATION_LIMIT and need <= space // 4:
            picked = _rejection_sample(world, hops, need, rng)
        else:
            pool = _valid_chains(world, hops)
            if need > len(pool):
                raise WorldConfigError(
                    f"requested {need} queries of {hops} hops but only {len(pool)} distinct chains exist"
                )
            picked = [pool[int(i)] for i in rng.choice(len(pool), size=need, replace=False)]
        for start, chain in picked:
            queries.append(Query("", surface_form(start, chain), start, chain, world.follow(start, chain)))
    order = rng.permutation(len(queries))
    return [
        Query(f"{id_prefix}{i:05d}", q.surface_form, q.start, q.hop_chain, q.answer)
        for i, q in enumerate(queries[int(j)] for j in order)
    ]


# -- tools -----------------------------------------------------------------


class SearchCache:
    """Per-worker memory of every search query and the ranked list it returned."""

    def __init__(self) -> None:
        self._store: dict[str, tuple[SearchResult, ...]] = {}
        self.history: list[str] = []

    @staticmethod
    def normalize(query: str) -> str:
        return " ".join(tokenize(query))

    def get(self, query: str) -> tuple[SearchResult, ...] | None:
        return self._store.get(self.normalize(query))

    def put(self, query: str, results: tuple[SearchResult, ...]) -> None:
        key = self.normalize(query)
        self._store[key] = results
        self.history.append(key)

    def last_query(self) -> str:
        return self.history[-1] if self.history else ""

    def __contains__(self, query: str) -> bool:
        return self.normalize(query) in self._store

    def __len__(self) -> int:
        return len(self._store)


def rank_pages(world: KnowledgeWorld, query: str, k: int) -> tuple[SearchResult, ...]:
    """Top-k pages by distinct-token overlap with title and snippet, ties by page id."""
    q_tokens = frozenset(tokenize(query))
    key = (" ".join(sorted(q_tokens)), k)
    hit = world._rank_memo.get(key)
    if hit is not None:
        return hit
    scored = sorted((-len(q_tokens & toks), pid) for pid, toks in world._page_tokens.items())
    out = []
    for _, pid in scored[:k]:
        page = world.pages[pid]
        out.append(SearchResult(page.title, pid, page.snippet))
    world._rank_memo[key] = tuple(out)
    return world._rank_memo[key]


def web_search(
    world: KnowledgeWorld,
    cache: SearchCache,
    queries: list[str],
    k: int = DEFAULT_TOP_K,
) -> list[SearchResponse]:
    if not queries:
        raise ValueError("web_search needs at least one query")
    if k < 1:
        raise ValueError("k must be >= 1")
    responses = []
    for query in queries:
        if not tokenize(query):
            responses.append(SearchResponse(query, (), error="empty search query"))
            continue
        hit = cache.get(query)
        if hit is None:
            hit = rank_pages(world, query, k)
        cache.put(query, hit)
        responses.append(SearchResponse(query, hit))
    return responses


NOT_FOUND = "page not found"


def read_page(world: KnowledgeWorld, url: str, originating_query: str) -> tuple[str, list[Triple]]:
    """Return the rendered page information and the facts it revealed."""
    page = world.pages.get(url)
    if page is None:
        return f"{url}: {NOT_FOUND}", []
    q_tokens = set(tokenize(originating_query))
    relevant = [f for f in page.facts if not q_tokens or q_tokens & set(tokenize(" ".join(f)))]
    lines = [page.title]
    if relevant:
        lines += [f"{s} {r} {o}." for s, r, o in relevant]
        for _, _, obj in relevant:
            lines.append("links: " + " ".join(world.pages_of(obj)))
    else:
        lines.append("no relevant information on this page")
    return "\n".join(lines), relevant


def web_browse(
    world: KnowledgeWorld,
    cache: SearchCache,
    url_list: list[str],
    originating_query: str,
) -> list[tuple[str, str]]:
    if not url_list:
        raise ValueError("web_browse needs at least one url")
    query = f"{originating_query} {cache.last_query()}".strip()
    return [(url, read_page(world, url, query)[0]) for url in url_list]


def load_world(path) -> KnowledgeWorld:
    with open(path, encoding="utf-8") as fh:
        return KnowledgeWorld.loads(fh.read())


def save_world(world: KnowledgeWorld, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(world.dumps())


def query_to_dict(q: Query) -> dict:
    return {
        "query_id": q.query_id,
        "surface_form": q.surface_form,
        "start": q.start,
        "hop_chain": list(q.hop_chain),
        "answer": q.answer,
    }


def query_from_dict(d: dict) -> Query:
    return Query(d["query_id"], d["surface_form"], d["start"], tuple(d["hop_chain"]), d["answer"])


def save_queries(queries: Iterable[Query], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(query_to_dict(q), sort_keys=True) + "\n")


def load_queries(path) -> list[Query]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(query_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise WorldConfigError(f"{path}: bad query on line {line_no}: {exc}") from None
    return out
