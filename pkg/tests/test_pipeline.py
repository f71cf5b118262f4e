import numpy as np
import pytest

from unidex.errors import ConfigError, FingerprintMismatchError, ValidationError
from unidex.index import Fingerprint, build_index
from unidex.matcher import unirank_score
from unidex.pipeline import RankStore, SearchEngine, evaluate, mrr_at_k, recall_at_k, search
from unidex.quantizer import QuantizerConfig, encode_tokens, init_head, sids_for


def oracle(query_feat, doc_ids, doc_feats, touch, rank, top_k):
    """Scan every document: keep those sharing a SID with the query, score all, sort."""
    q_sids = set(sids_for(query_feat[None], touch, "query")[0].tolist())
    d_sids = sids_for(doc_feats, touch, "document")
    q_rank = encode_tokens(query_feat[None], rank, "query")[0]
    d_rank = encode_tokens(doc_feats, rank, "document")
    hits = [
        (doc_ids[i], unirank_score(q_rank, d_rank[i]))
        for i in range(len(doc_ids))
        if q_sids & set(d_sids[i].tolist())
    ]
    hits.sort(key=lambda h: (-h[1], h[0]))
    return hits[:top_k]


@pytest.fixture
def small_engine(rng):
    touch = init_head(QuantizerConfig(d=16, d_q=5, d_base=8, m_query=2, n_doc=4), 1)
    rank = init_head(QuantizerConfig(d=8, d_q=1, d_base=8, m_query=3, n_doc=3, mode="rank"), 2)
    ids = [f"doc{i:03d}" for i in range(120)]
    feats = rng.normal(size=(120, 8))
    return SearchEngine.build(ids, feats, touch, rank), ids, feats


def test_search_matches_scan_oracle(small_engine, rng):
    engine, ids, feats = small_engine
    for _ in range(20):
        q = rng.normal(size=8)
        got = [(h.doc_id, h.score) for h in engine.search(q, top_k=15).hits]
        assert got == oracle(q, ids, feats, engine.touch_head, engine.rank_head, 15)


def test_top_k_prefix_property(small_engine, rng):
    engine, _, _ = small_engine
    q = rng.normal(size=8)
    short = engine.search(q, 3).hits
    longer = engine.search(q, 10).hits
    assert longer[: len(short)] == short


def test_ties_break_by_doc_id(rng):
    touch = init_head(QuantizerConfig(d=8, d_q=2, d_base=4, m_query=1, n_doc=1), 0)
    rank = init_head(QuantizerConfig(d=4, d_q=1, d_base=4, m_query=1, n_doc=1, mode="rank"), 0)
    feat = rng.normal(size=4)
    engine = SearchEngine.build(["b", "c", "a"], np.stack([feat] * 3), touch, rank)
    assert [h.doc_id for h in engine.search(feat, 3).hits] == ["a", "b", "c"]


def test_max_candidates_truncates_by_ordinal(small_engine, rng):
    engine, ids, feats = small_engine
    capped = SearchEngine(engine.index, engine.touch_head, engine.rank_head, engine.rank_store, max_candidates=2)
    for _ in range(20):
        q = rng.normal(size=8)
        full = engine.search(q, 200)
        out = capped.search(q, 200)
        if full.touched > 2:
            break
    assert out.truncated and out.touched == full.touched and len(out.hits) == 2


def test_fingerprint_mismatch_rejected(small_engine):
    engine, _, _ = small_engine
    other = init_head(engine.touch_head.config, 99)
    with pytest.raises(FingerprintMismatchError):
        search(np.zeros(8), engine.index, other, engine.rank_head, engine.rank_store)
    with pytest.raises(ConfigError):
        engine.search(np.zeros(8), top_k=0)


def test_missing_rank_vector_is_an_error(rng):
    touch = init_head(QuantizerConfig(d=8, d_q=2, d_base=4, m_query=1, n_doc=1), 0)
    rank = init_head(QuantizerConfig(d=4, d_q=1, d_base=4, m_query=1, n_doc=1, mode="rank"), 0)
    feat = rng.normal(size=4)
    index = build_index([("a", sids_for(feat[None], touch, "document")[0])], Fingerprint.of(touch))
    store = RankStore(["a"], np.zeros((1, 1, 4)), present=np.array([False]))
    with pytest.raises(ValidationError):
        search(feat, index, touch, rank, store)


def test_metric_hand_cases():
    ranked = ["x", "y", "r1", "r2"]
    assert mrr_at_k(ranked, {"r1"}, 10) == pytest.approx(1 / 3)
    assert mrr_at_k(ranked, {"zz"}, 10) == 0.0
    assert mrr_at_k(["r1"], {"r1"}, 10) == 1.0
    assert recall_at_k(ranked, {"r1", "r2", "r3", "r4"}, 10) == 0.5
    assert recall_at_k(ranked, {"r1", "r2"}, 2) == 0.0
    with pytest.raises(ConfigError):
        recall_at_k(ranked, {"r1"}, 0)
    with pytest.raises(ConfigError):
        mrr_at_k(ranked, {"r1"}, -1)


def test_evaluate_matches_recomputation(small_engine, rng):
    engine, ids, _ = small_engine
    queries = [(rng.normal(size=8), list(rng.choice(ids, 5, replace=False))) for _ in range(10)]
    rep = evaluate(queries, engine, ks=(5, 50), keep_rankings=True)
    for k in (5, 50):
        assert rep.recall_at_k[k] == pytest.approx(
            np.mean([len(set(r[:k]) & set(rel)) / len(rel) for r, (_, rel) in zip(rep.rankings, queries)])
        )
    assert rep.query_count == 10


def test_evaluate_errors(small_engine, rng):
    engine, _, _ = small_engine
    with pytest.raises(ValidationError):
        evaluate([], engine)
    with pytest.raises(ValidationError):
        evaluate([(rng.normal(size=8), ["nope"])], engine)
    with pytest.raises(ValidationError):
        evaluate([(rng.normal(size=8), [])], engine)


def test_zero_relevant_queries_excluded_from_means(small_engine, rng):
    engine, ids, _ = small_engine
    q = rng.normal(size=8)
    with_empty = evaluate([(q, [ids[0]]), (q, [])], engine)
    alone = evaluate([(q, [ids[0]])], engine)
    assert with_empty.recall_at_k == alone.recall_at_k and with_empty.query_count == 1
