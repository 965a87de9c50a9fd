"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

Mode = Literal["vanilla", "eas", "sau", "both"]


class WorldRequest(BaseModel):
    seed: int = 0
    entities: int = Field(ge=2)
    relations: int = Field(ge=1)
    min_hops: int = Field(1, ge=1)
    max_hops: int = Field(3, ge=1)


class WorldSummary(BaseModel):
    world_id: str
    entities: int
    relations: int
    facts: int
    hop_depth_range: tuple[int, int]
    sha256: str


class QueryModel(BaseModel):
    query_id: str
    surface_form: str
    start: str
    hop_chain: list[str]
    answer: str


class QueriesRequest(BaseModel):
    n: int = Field(ge=1)
    seed: int = 0
    multi_hop_ratio: float = Field(0.75, ge=0.0, le=1.0)


class SearchRequest(BaseModel):
    query: list[str]
    k: int = Field(10, ge=1)


class SearchHit(BaseModel):
    title: str
    url: str
    snippet: str


class SearchResponseModel(BaseModel):
    query: str
    results: list[SearchHit]
    error: Optional[str] = None


class BrowseRequest(BaseModel):
    url_list: list[str] = Field(min_length=1)
    originating_query: str = ""


class BrowsePage(BaseModel):
    url: str
    text: str


class ShapingParams(BaseModel):
    alpha: float = Field(0.1, ge=0.0)
    kappa: float = Field(2.0, gt=1.0)
    lam: float = Field(2.0, ge=1.0)
    complexity_c: int = 2
    mode: Mode = "both"


class ShapingRequest(BaseModel):
    rewards: list[float] = Field(min_length=2)
    entropies: list[list[float]]
    tool_counts: list[int]
    config: ShapingParams = ShapingParams()


class ShapingResponse(BaseModel):
    base: list[list[float]]
    sau_scaled: list[list[float]]
    psi: list[list[float]]
    final: list[list[float]]
    sau_selected: list[bool]


class RewardRequest(BaseModel):
    rollout: dict
    query: QueryModel


class RewardResponse(BaseModel):
    format_ok: bool
    answer_ok: bool
    total: float
    violations: list[str]


class TrainRequest(BaseModel):
    world_id: str
    config: dict = Field(default_factory=dict, description="flat config keys; unknown keys are rejected")
    mode: Optional[Mode] = None


class StepMetricsModel(BaseModel):
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


class RunSummary(BaseModel):
    run_id: str
    world_id: str
    steps: int
    metrics: list[StepMetricsModel]


class EvalRequest(BaseModel):
    greedy: bool = True
    queries: Optional[list[QueryModel]] = None
    seed: int = 0


class EvalResponse(BaseModel):
    n_queries: int
    accuracy: float
    mean_tool_calls: float
    mean_reward: float
    format_error_rate: float
    accuracy_by_hops: dict[str, float]


class AnalyzeRequest(BaseModel):
    steps: dict[int, str] = Field(description="step index -> JSON-lines trajectory text")
    group_size: int = Field(8, ge=2)
    shaping: ShapingParams = ShapingParams()


class AnalyzeResponse(BaseModel):
    metrics: list[StepMetricsModel]
