from __future__ import annotations

from pydantic import BaseModel, Field


class SearchRequest(BaseModel):
    query: str
    top_k: int | None = Field(None, ge=1)


class Hit(BaseModel):
    id: str
    score: float


class SearchResponse(BaseModel):
    hits: list[Hit]
    touched: int
    latency_ms: float


class StatsResponse(BaseModel):
    num_docs: int
    num_distinct_sids: int
    total_postings: int
    avg_postings_per_doc: float
    avg_retrieved_per_query: float
