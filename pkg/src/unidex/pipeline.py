"""End-to-end search (query -> SIDs -> union retrieval -> late-interaction ranking) and metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, FingerprintMismatchError, ValidationError
from .index import Fingerprint, InvertedIndex, build_index
from .ingest import MultiVector, hash_features
from .matcher import unirank_scores
from .quantizer import QuantizerHead, encode_tokens, sids_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchHit:
    doc_id: str
    score: float
    ordinal: int


@dataclass
class SearchOutcome:
    hits: list[SearchHit]
    touched: int
    truncated: bool = False
    query_sids: list[int] = field(default_factory=list)


@dataclass
class EvalReport:
    recall_at_k: dict[int, float]
    mrr_at_k: dict[int, float]
    avg_retrieved: float
    query_count: int
    rankings: list[list[str]] = field(default_factory=list, repr=False)


def recall_at_k(ranked_ids: Sequence[str], relevant_ids, k: int) -> float:
    """Fraction of the relevant ids found among the first ``k`` ranked ids."""
    if k <= 0:
        raise ConfigError(f"K must be positive, got {k}")
    relevant = set(relevant_ids)
    if not relevant:
        raise ValidationError("recall is undefined without relevant ids")
    return len(relevant.intersection(ranked_ids[:k])) / len(relevant)


def mrr_at_k(ranked_ids: Sequence[str], relevant_ids, k: int) -> float:
    """Reciprocal rank of the first relevant id within the first ``k``, else 0."""
    if k <= 0:
        raise ConfigError(f"K must be positive, got {k}")
    relevant = set(relevant_ids)
    for rank, doc_id in enumerate(ranked_ids[:k], start=1):
        if doc_id in relevant:
            return 1.0 / rank
    return 0.0


class RankStore:
    """In-memory late-interaction document vectors, aligned with index ordinals."""

    def __init__(self, doc_ids: Sequence[str], vectors: np.ndarray, present: np.ndarray | None = None) -> None:
        self.doc_ids = list(doc_ids)
        self.vectors = np.asarray(vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or len(self.vectors) != len(self.doc_ids):
            raise ValidationError("rank vectors must be (n_docs, tokens, dim) aligned with doc ids")
        self.present = np.ones(len(self.doc_ids), dtype=bool) if present is None else np.asarray(present, bool)

    @classmethod
    def from_mapping(cls, doc_ids: Sequence[str], mapping: dict[str, MultiVector | np.ndarray]) -> RankStore:
        shapes = {np.shape(getattr(v, "vectors", v)) for v in mapping.values()}
        if len(shapes) != 1:
            raise ValidationError(f"rank vectors need one common shape, got {sorted(shapes)}")
        shape = shapes.pop()
        vecs = np.zeros((len(doc_ids), *shape))
        present = np.zeros(len(doc_ids), dtype=bool)
        for i, doc_id in enumerate(doc_ids):
            if doc_id in mapping:
                vecs[i] = getattr(mapping[doc_id], "vectors", mapping[doc_id])
                present[i] = True
        return cls(doc_ids, vecs, present)


def _query_input(query, head: QuantizerHead) -> np.ndarray:
    if isinstance(query, str):
        return hash_features(query, head.config.d_base, head.config.hash_seed)[None, :]
    arr = np.asarray(getattr(query, "vectors", query), dtype=np.float64)
    return arr[None, ...]


def search(
    query,
    index: InvertedIndex,
    touch_head: QuantizerHead,
    rank_head: QuantizerHead,
    rank_store: RankStore,
    top_k: int = 10,
    *,
    max_candidates: int | None = None,
) -> SearchOutcome:
    """Retrieve by the union of the query's SIDs, then rank candidates by late interaction.

    ``query`` is text, a base feature vector, or a ``(touch_tokens,
    rank_tokens)`` pair of pre-computed token matrices. Hits are ordered by
    descending score with ties broken by ascending document id.
    """
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    if index.fingerprint != Fingerprint.of(touch_head):
        raise FingerprintMismatchError("index fingerprint does not match the touch head")
    if rank_store.doc_ids is not index.doc_table and rank_store.doc_ids != index.doc_table:
        raise ValidationError("rank store is not aligned with the index document table")
    if isinstance(query, tuple):
        touch_in, rank_in = (_query_input(q, touch_head) for q in query)
    else:
        touch_in = _query_input(query, touch_head)
        rank_in = _query_input(query, rank_head)
    q_sids = sids_for(touch_in, touch_head, "query")[0]
    result = index.retrieve(q_sids)
    cands = result.doc_ordinals
    touched = len(cands)
    truncated = False
    if max_candidates is not None and touched > max_candidates:
        logger.warning("candidate cap hit: %d retrieved, keeping the first %d ordinals", touched, max_candidates)
        cands = cands[:max_candidates]
        truncated = True
    missing = ~rank_store.present[cands]
    if np.any(missing):
        raise ValidationError(f"no rank embedding for document {index.doc_table[int(cands[missing][0])]!r}")
    q_rank = encode_tokens(rank_in, rank_head, "query")[0]
    scores = unirank_scores(q_rank, rank_store.vectors[cands])
    order = sorted(range(len(cands)), key=lambda i: (-scores[i], index.doc_table[cands[i]]))[:top_k]
    hits = [SearchHit(index.doc_table[cands[i]], float(scores[i]), int(cands[i])) for i in order]
    return SearchOutcome(hits, touched, truncated, [int(s) for s in q_sids])


class SearchEngine:
    """A frozen snapshot: index, both heads and the in-memory rank vectors."""

    def __init__(
        self,
        index: InvertedIndex,
        touch_head: QuantizerHead,
        rank_head: QuantizerHead,
        rank_store: RankStore,
        max_candidates: int | None = None,
    ) -> None:
        if index.fingerprint != Fingerprint.of(touch_head):
            raise FingerprintMismatchError("index fingerprint does not match the touch head")
        self.index = index
        self.touch_head = touch_head
        self.rank_head = rank_head
        self.rank_store = rank_store
        self.max_candidates = max_candidates

    @classmethod
    def build(
        cls,
        doc_ids: Sequence[str],
        doc_inputs: np.ndarray,
        touch_head: QuantizerHead,
        rank_head: QuantizerHead,
        *,
        n_doc_tokens: int | None = None,
        max_candidates: int | None = None,
    ) -> SearchEngine:
        """Encode every document with both heads and index the touch SIDs."""
        sids = sids_for(doc_inputs, touch_head, "document", n_doc_tokens)
        index = build_index(list(zip(doc_ids, sids)), Fingerprint.of(touch_head))
        vectors = encode_tokens(doc_inputs, rank_head, "document")
        return cls(index, touch_head, rank_head, RankStore(index.doc_table, vectors), max_candidates)

    def search(self, query, top_k: int = 10) -> SearchOutcome:
        return search(
            query, self.index, self.touch_head, self.rank_head, self.rank_store, top_k,
            max_candidates=self.max_candidates,
        )


def evaluate(
    test_queries: Sequence[tuple[object, Sequence[str]]],
    engine: SearchEngine,
    ks: Sequence[int] = (10, 300),
    *,
    keep_rankings: bool = False,
) -> EvalReport:
    """Average Recall@K and MRR@K over queries that have at least one relevant document."""
    if not test_queries:
        raise ValidationError("cannot evaluate an empty test set")
    ks = sorted(set(int(k) for k in ks))
    if ks[0] <= 0:
        raise ConfigError("every K must be positive")
    recall = {k: 0.0 for k in ks}
    mrr = {k: 0.0 for k in ks}
    touched = []
    rankings = []
    counted = 0
    for query, relevant in test_queries:
        for doc_id in relevant:
            if doc_id not in engine.index:
                raise ValidationError(f"relevant document {doc_id!r} is not indexed")
        outcome = engine.search(query, top_k=ks[-1])
        ranked = [h.doc_id for h in outcome.hits]
        touched.append(outcome.touched)
        if keep_rankings:
            rankings.append(ranked)
        if not relevant:
            continue
        counted += 1
        for k in ks:
            recall[k] += recall_at_k(ranked, relevant, k)
            mrr[k] += mrr_at_k(ranked, relevant, k)
    if counted == 0:
        raise ValidationError("no test query has a relevant document")
    return EvalReport(
        {k: v / counted for k, v in recall.items()},
        {k: v / counted for k, v in mrr.items()},
        float(np.mean(touched)),
        counted,
        rankings,
    )


def load_engine(
    index_path,
    touch_path,
    rank_path,
    corpus_path,
    embeddings_path=None,
    *,
    max_candidates: int | None = None,
) -> SearchEngine:
    """Assemble a serving snapshot from files on disk.

    The index must have been built by the touch checkpoint; document rank
    vectors are computed once from the corpus (stored embeddings first,
    hashed text otherwise) and held in memory.
    """
    from .index import load_index
    from .ingest import gather_inputs, load_corpus, load_embeddings
    from .quantizer import load_checkpoint

    touch = load_checkpoint(touch_path)
    rank = load_checkpoint(rank_path)
    if touch.config.mode != "touch" or rank.config.mode != "rank":
        raise ConfigError("expected a touch checkpoint and a rank checkpoint")
    index = load_index(index_path, expected_checksum=touch.checksum())
    records = {r.id: r for r in load_corpus(corpus_path)}
    embeddings = load_embeddings(embeddings_path) if embeddings_path else None
    rows = [records.get(doc_id) for doc_id in index.doc_table]
    present = np.array([r is not None for r in rows], dtype=bool)
    known = [r for r in rows if r is not None]
    vectors = np.zeros((len(rows), rank.config.n_doc, rank.config.d))
    if known:
        encoded = encode_tokens(gather_inputs(known, embeddings, rank.config.d_base, rank.config.hash_seed), rank, "document")
        vectors = np.zeros((len(rows), *encoded.shape[1:]))
        vectors[present] = encoded
    return SearchEngine(index, touch, rank, RankStore(index.doc_table, vectors, present), max_candidates)
