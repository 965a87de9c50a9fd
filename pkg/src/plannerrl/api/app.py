"""FastAPI service: world generation, the two tools, shaping, scoring, training runs.

State lives in memory per app instance; runs train synchronously.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict

from fastapi import FastAPI, HTTPException

from ..metrics import analyze_rollouts
from ..policy import PolicyParams
from ..reward import score
from ..shaping import ShapingConfig, ShapingError, shape_arrays
from ..trainer import ConfigError, TrainConfig, TrainingAborted, evaluate, split_queries, train
from ..trajectory import TrajectoryError, parse_log, parse_rollout, validate_format
from ..world import (
    KnowledgeWorld,
    Query,
    SearchCache,
    WorldConfigError,
    generate_world,
    query_from_dict,
    query_to_dict,
    sample_queries,
    web_browse,
    web_search,
)
from . import schemas as S


def _shaping(p: S.ShapingParams) -> ShapingConfig:
    return ShapingConfig.for_mode(p.mode, alpha=p.alpha, kappa=p.kappa, lam=p.lam, complexity_c=p.complexity_c)


def _summary(world_id: str, w: KnowledgeWorld) -> S.WorldSummary:
    return S.WorldSummary(
        world_id=world_id,
        entities=len(w.entities),
        relations=len(w.relation_labels),
        facts=len(w.relations),
        hop_depth_range=w.hop_depth_range,
        sha256=w.digest(),
    )


class _Store:
    def __init__(self) -> None:
        self.worlds: dict[str, KnowledgeWorld] = {}
        self.caches: dict[str, SearchCache] = {}
        self.runs: dict[str, dict] = {}
        self._ids = itertools.count(1)

    def new_id(self, prefix: str) -> str:
        return f"{prefix}{next(self._ids)}"

    def world(self, world_id: str) -> KnowledgeWorld:
        if world_id not in self.worlds:
            raise HTTPException(404, f"unknown world {world_id}")
        return self.worlds[world_id]

    def run(self, run_id: str) -> dict:
        if run_id not in self.runs:
            raise HTTPException(404, f"unknown run {run_id}")
        return self.runs[run_id]


def create_app() -> FastAPI:
    app = FastAPI(title="plannerrl", version="0.1.0")
    store = _Store()
    app.state.store = store

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/worlds", response_model=S.WorldSummary, status_code=201)
    def create_world(req: S.WorldRequest):
        try:
            w = generate_world(req.seed, req.entities, req.relations, (req.min_hops, req.max_hops))
        except WorldConfigError as exc:
            raise HTTPException(422, str(exc))
        world_id = store.new_id("w")
        store.worlds[world_id] = w
        store.caches[world_id] = SearchCache()
        return _summary(world_id, w)

    @app.get("/worlds/{world_id}", response_model=S.WorldSummary)
    def get_world(world_id: str):
        return _summary(world_id, store.world(world_id))

    @app.post("/worlds/{world_id}/queries", response_model=list[S.QueryModel])
    def world_queries(world_id: str, req: S.QueriesRequest):
        w = store.world(world_id)
        try:
            qs = sample_queries(w, req.n, req.seed, req.multi_hop_ratio)
        except WorldConfigError as exc:
            raise HTTPException(422, str(exc))
        return [query_to_dict(q) for q in qs]

    @app.post("/worlds/{world_id}/search", response_model=list[S.SearchResponseModel])
    def search(world_id: str, req: S.SearchRequest):
        w = store.world(world_id)
        if not req.query:
            raise HTTPException(422, "query needs at least one item")
        out = web_search(w, store.caches[world_id], req.query, req.k)
        return [
            S.SearchResponseModel(query=r.query, results=[S.SearchHit(**asdict(h)) for h in r.results], error=r.error)
            for r in out
        ]

    @app.post("/worlds/{world_id}/browse", response_model=list[S.BrowsePage])
    def browse(world_id: str, req: S.BrowseRequest):
        w = store.world(world_id)
        pages = web_browse(w, store.caches[world_id], req.url_list, req.originating_query)
        return [S.BrowsePage(url=u, text=t) for u, t in pages]

    @app.post("/shaping", response_model=S.ShapingResponse)
    def shaping(req: S.ShapingRequest):
        try:
            sh = shape_arrays(req.rewards, req.entropies, req.tool_counts, _shaping(req.config))
        except ShapingError as exc:
            raise HTTPException(422, str(exc))
        return S.ShapingResponse(
            base=[a.tolist() for a in sh.base],
            sau_scaled=[a.tolist() for a in sh.sau_scaled],
            psi=[a.tolist() for a in sh.psi],
            final=[a.tolist() for a in sh.final],
            sau_selected=sh.sau_selected,
        )

    @app.post("/reward", response_model=S.RewardResponse)
    def reward(req: S.RewardRequest):
        try:
            rollout = parse_rollout(json.dumps(req.rollout))
        except TrajectoryError as exc:
            raise HTTPException(422, str(exc))
        q = query_from_dict(req.query.model_dump())
        verdict = score(rollout, q)
        _, violations = validate_format(rollout)
        return S.RewardResponse(**verdict.as_dict(), violations=[v.value for v in violations])

    @app.post("/runs", response_model=S.RunSummary, status_code=201)
    def create_run(req: S.TrainRequest):
        w = store.world(req.world_id)
        try:
            cfg = TrainConfig.from_flat(req.config)
            if req.mode:
                cfg = cfg.with_mode(req.mode)
            train_q, held_q = split_queries(w, cfg)
            params, rows = train(cfg, w, train_q)
        except (ConfigError, ShapingError, WorldConfigError, TypeError) as exc:
            raise HTTPException(422, str(exc))
        except TrainingAborted as exc:
            raise HTTPException(500, f"training aborted: {exc}")
        run_id = store.new_id("r")
        store.runs[run_id] = {"world_id": req.world_id, "config": cfg, "params": params, "metrics": rows, "heldout": held_q}
        return S.RunSummary(run_id=run_id, world_id=req.world_id, steps=len(rows), metrics=[asdict(r) for r in rows])

    @app.get("/runs/{run_id}", response_model=S.RunSummary)
    def get_run(run_id: str):
        run = store.run(run_id)
        rows = run["metrics"]
        return S.RunSummary(run_id=run_id, world_id=run["world_id"], steps=len(rows), metrics=[asdict(r) for r in rows])

    @app.post("/runs/{run_id}/eval", response_model=S.EvalResponse)
    def eval_run(run_id: str, req: S.EvalRequest):
        run = store.run(run_id)
        cfg: TrainConfig = run["config"]
        params: PolicyParams = run["params"]
        queries: list[Query] = (
            [query_from_dict(q.model_dump()) for q in req.queries] if req.queries is not None else run["heldout"]
        )
        if not queries:
            raise HTTPException(422, "no queries to evaluate")
        report = evaluate(params, store.world(run["world_id"]), queries, req.greedy, cfg.limits, req.seed, cfg.judge)
        return report.as_dict()

    @app.post("/analyze", response_model=S.AnalyzeResponse)
    def analyze(req: S.AnalyzeRequest):
        try:
            logs = {step: parse_log(text) for step, text in req.steps.items()}
            rows = analyze_rollouts(logs, _shaping(req.shaping), req.group_size)
        except (TrajectoryError, ShapingError) as exc:
            raise HTTPException(422, str(exc))
        return S.AnalyzeResponse(metrics=[asdict(r) for r in rows])

    return app

