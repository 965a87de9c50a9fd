"""Closed token vocabulary and the feature buckets the tabular policy conditions on.

Argument tokens are pointers (``ent:last``, ``url:1``, ``rel:2`` ...) that the
agent loop resolves against the query and the latest tool responses, so one
parameter table serves every entity in the world.

Each bucket fixes its set of legal next tokens, so the grammar mask is a
function of the bucket alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from .trajectory import ActionToken, TokenKind

PREV_KINDS = ("start", "plan", "search", "browse")
SUMMARIES = ("none", "results", "found", "nothing")
PLAN_STATES = ("pending", "done")

ENT_START = "ent:start"
ENT_LAST = "ent:last"
REL_PLAN = "rel:plan"
URL_LINK = "url:link"


@dataclass(frozen=True)
class GrammarConfig:
    max_hops: int = 3
    n_think_symbols: int = 4
    n_plan_notes: int = 4
    n_url_slots: int = 3
    max_segment_tokens: int = 16

    def __post_init__(self) -> None:
        if not 1 <= self.max_hops <= 5:
            raise ValueError("max_hops must be in [1, 5]")
        if self.max_segment_tokens < 4:
            raise ValueError("max_segment_tokens must be >= 4")


class Vocabulary:
    def __init__(self, cfg: GrammarConfig):
        toks = [ActionToken(TokenKind.END_SEG)]
        toks += [ActionToken(TokenKind.THINK_TOK, f"t{i}") for i in range(cfg.n_think_symbols)]
        toks += [ActionToken(k) for k in (TokenKind.PLAN_TOK, TokenKind.SEARCH_TOK, TokenKind.BROWSE_TOK, TokenKind.ANSWER_TOK)]
        args = [f"rel:{j}" for j in range(1, cfg.max_hops + 1)]
        args += [f"note:{i}" for i in range(cfg.n_plan_notes)]
        args += [ENT_START, ENT_LAST, REL_PLAN]
        args += [f"url:{i}" for i in range(1, cfg.n_url_slots + 1)] + [URL_LINK]
        toks += [ActionToken(TokenKind.ARG_TOK, a) for a in args]
        self.tokens: tuple[ActionToken, ...] = tuple(toks)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: ActionToken) -> int:
        return self.index[token]

    def arg(self, name: str) -> int:
        return self.index[ActionToken(TokenKind.ARG_TOK, name)]

    def kind(self, kind: TokenKind) -> int:
        return self.index[ActionToken(kind)]

    @property
    def names(self) -> list[str]:
        return [str(t) for t in self.tokens]


class FeatureSpace:
    """Enumerates every (family, key) bucket and its legal-token mask."""

    def __init__(self, cfg: GrammarConfig | None = None):
        self.cfg = cfg = cfg or GrammarConfig()
        self.vocab = v = Vocabulary(cfg)
        H = cfg.max_hops
        END = v.kind(TokenKind.END_SEG)
        think = [v.id(ActionToken(TokenKind.THINK_TOK, f"t{i}")) for i in range(cfg.n_think_symbols)]
        heads_all = [v.kind(k) for k in (TokenKind.PLAN_TOK, TokenKind.SEARCH_TOK, TokenKind.BROWSE_TOK, TokenKind.ANSWER_TOK)]
        heads_no_browse = [h for h in heads_all if h != v.kind(TokenKind.BROWSE_TOK)]
        plan_items = [v.arg(f"rel:{j}") for j in range(1, H + 1)] + [v.arg(f"note:{i}") for i in range(cfg.n_plan_notes)]
        ents = [v.arg(ENT_START), v.arg(ENT_LAST)]
        urls = [v.arg(f"url:{i}") for i in range(1, cfg.n_url_slots + 1)]

        self.keys: list[tuple] = []
        legal: list[list[int]] = []

        def add(key, ids):
            self.keys.append(key)
            legal.append(sorted(ids))

        for prev, p in product(PREV_KINDS, range(cfg.max_segment_tokens)):
            add(("think", prev, p), think + [END])
        add(("head", "start"), [v.kind(TokenKind.PLAN_TOK)])
        for prev, summ, ps, browsable in product(PREV_KINDS[1:], SUMMARIES, PLAN_STATES, (False, True)):
            add(("head", prev, summ, ps, browsable), heads_all if browsable else heads_no_browse)
        for p, more in product(range(H + 2), (False, True)):
            add(("plan", p, more), plan_items + [END])
        for summ, ps in product(SUMMARIES, PLAN_STATES):
            add(("search_ent", summ, ps), ents)
        for ps in PLAN_STATES:
            add(("search_rel", ps), [v.arg(REL_PLAN), END])
        for prev, summ, ps, has_res, has_links in product(PREV_KINDS[1:], SUMMARIES, PLAN_STATES, (False, True), (False, True)):
            if not (has_res or has_links):
                continue
            add(("browse", prev, summ, ps, has_res, has_links), (urls if has_res else []) + ([v.arg(URL_LINK)] if has_links else []))
        for summ, ps in product(SUMMARIES, PLAN_STATES):
            add(("answer", summ, ps), ents)

        self.index = {k: i for i, k in enumerate(self.keys)}
        self.legal_ids: tuple[tuple[int, ...], ...] = tuple(tuple(ids) for ids in legal)
        mask = np.zeros((len(self.keys), len(v)), dtype=bool)
        for b, ids in enumerate(legal):
            mask[b, ids] = True
        mask.setflags(write=False)
        self.mask = mask

    @property
    def n_buckets(self) -> int:
        return len(self.keys)

    @property
    def n_tokens(self) -> int:
        return len(self.vocab)

    @cached_property
    def signature(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(repr(self.cfg).encode())
        h.update("|".join(self.vocab.names).encode())
        h.update(repr(self.keys).encode())
        return h.hexdigest()[:16]

    def bucket(self, *key) -> int:
        return self.index[key]

    def family(self, b: int) -> str:
        return self.keys[b][0]


def instruction_prior(space: FeatureSpace, strength: float, think_end: float = 0.0) -> np.ndarray:
    """Logit offsets for a policy that already follows the tool protocol.

    The offsets push execution tokens toward carrying out whatever plan was
    written (search, browse the hit, follow links, answer when the plan is
    used up). Plan tokens get no offset, so plan quality is left to training.
    """
    v = space.vocab
    bias = np.zeros(space.mask.shape)
    if strength == 0 and think_end == 0:
        return bias
    SEARCH, BROWSE, ANSWER = (v.kind(k) for k in (TokenKind.SEARCH_TOK, TokenKind.BROWSE_TOK, TokenKind.ANSWER_TOK))
    for b, key in enumerate(space.keys):
        fam = key[0]
        if fam == "think":
            bias[b, v.kind(TokenKind.END_SEG)] += think_end
        elif fam == "head" and len(key) > 2:
            _, prev, summ, ps, browsable = key
            if ps == "done":
                target = ANSWER
            elif browsable and summ in ("results", "found"):
                target = BROWSE
            else:
                target = SEARCH
            bias[b, target] += strength
        elif fam == "search_ent":
            bias[b, v.arg(ENT_LAST)] += strength
        elif fam == "search_rel" and key[1] == "pending":
            bias[b, v.arg(REL_PLAN)] += strength
        elif fam == "browse":
            _, prev, summ, ps, has_res, has_links = key
            target = v.arg(URL_LINK) if (prev == "browse" and has_links) or not has_res else v.arg("url:1")
            bias[b, target] += strength
        elif fam == "answer":
            bias[b, v.arg(ENT_LAST)] += strength
    return np.where(space.mask, bias, 0.0)
