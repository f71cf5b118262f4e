import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unidex.errors import ConfigError, ValidationError
from unidex.matcher import (
    MatchStrategy,
    cosine,
    match_matrix,
    sim_max_max,
    sim_max_mean,
    sim_max_sum,
    similarity,
    unirank_score,
    unirank_scores,
)


def test_cosine_basics():
    assert cosine([1, 0], [1, 0]) == 1.0
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 2], [-1, -2]) == -1.0
    assert cosine([0, 0], [1, 2]) == 0.0


def test_identical_vectors_score_exactly_one(rng):
    for _ in range(200):
        v = rng.normal(size=17) * rng.uniform(1e-3, 1e3)
        assert cosine(v, v) == 1.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ConfigError):
        cosine([1, 0], [1, 0, 0])


def test_strategies_on_hand_matrix():
    mm = np.array([[0.2, 0.9], [0.5, 0.1], [-0.3, 0.4]])
    assert sim_max_max(mm) == 0.9
    assert sim_max_sum(mm) == pytest.approx(0.9 + 0.5 + 0.4)
    assert sim_max_mean(mm) == pytest.approx(1.8 / 3)
    assert similarity(mm, "max-sum") == sim_max_sum(mm)
    assert similarity(mm, MatchStrategy.MAX_MEAN) == sim_max_mean(mm)


def test_match_matrix_shape_and_empty(rng):
    q, d = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    assert match_matrix(q, d).shape == (3, 4)
    with pytest.raises(ValidationError):
        match_matrix(np.zeros((0, 5)), d)


def test_shared_token_gives_similarity_one(rng):
    q = rng.normal(size=(3, 6))
    d = np.vstack([rng.normal(size=(2, 6)), q[1:2]])
    assert sim_max_max(match_matrix(q, d)) == 1.0


def test_unirank_batched_equals_scalar(rng):
    q = rng.normal(size=(4, 8))
    docs = rng.normal(size=(30, 4, 8))
    batched = unirank_scores(q, docs)
    assert batched.shape == (30,)
    for i in range(30):
        assert batched[i] == unirank_score(q, docs[i])


def test_unirank_score_bounds(rng):
    q = rng.normal(size=(4, 8))
    assert unirank_score(q, q) == 4.0
    assert -4.0 <= unirank_score(q, rng.normal(size=(5, 8))) <= 4.0


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1, 1)))
def test_strategy_identities(mm):
    assert sim_max_sum(mm) == pytest.approx(mm.shape[0] * sim_max_mean(mm), abs=1e-12)
    assert sim_max_max(mm) >= sim_max_mean(mm) - 1e-15
