import json

import numpy as np
import pytest

from unidex.errors import (
    ConfigError,
    MagicMismatchError,
    NonFiniteError,
    ParseError,
    TruncatedFileError,
    ValidationError,
)
from unidex.ingest import (
    DocumentRecord,
    MultiVector,
    gather_inputs,
    hash_features,
    load_corpus,
    load_embeddings,
    manifest_for,
    save_corpus,
    save_embeddings,
    toy_encode,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_corpus_round_trip(tmp_path):
    recs = [DocumentRecord("a", "hello"), DocumentRecord("b", "wörld"), DocumentRecord("c")]
    save_corpus(recs, tmp_path / "c.jsonl")
    assert load_corpus(tmp_path / "c.jsonl") == recs


def test_duplicate_id_names_both_lines(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [json.dumps({"id": "x", "text": "a"}), "", json.dumps({"id": "x"})])
    with pytest.raises(ValidationError, match="lines 1 and 3"):
        load_corpus(path)


def test_malformed_line_reports_line_number(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [json.dumps({"id": "a"}), "{not json"])
    with pytest.raises(ParseError) as err:
        load_corpus(path)
    assert err.value.line == 2


def test_record_without_id(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [json.dumps({"text": "orphan"})])
    with pytest.raises(ParseError):
        load_corpus(path)


def test_embeddings_round_trip(tmp_path, rng):
    embs = {f"d{i}": rng.normal(size=(3, 5)).astype(np.float32) for i in range(4)}
    save_embeddings(embs, tmp_path / "e.udxe")
    back = load_embeddings(tmp_path / "e.udxe")
    assert list(back) == list(embs)
    for k, v in embs.items():
        np.testing.assert_array_equal(back[k].vectors, v)


def test_embedding_file_errors(tmp_path, rng):
    path = tmp_path / "e.udxe"
    save_embeddings({"a": rng.normal(size=(2, 4)), "b": rng.normal(size=(2, 4))}, path)
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFileError):
        load_embeddings(tmp_path / "trunc")
    (tmp_path / "magic").write_bytes(b"UDXQ" + raw[4:])
    with pytest.raises(MagicMismatchError):
        load_embeddings(tmp_path / "magic")
    bad = bytearray(raw)
    bad[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    (tmp_path / "nan").write_bytes(bytes(bad))
    with pytest.raises(NonFiniteError):
        load_embeddings(tmp_path / "nan")
    with pytest.raises(ValidationError):
        save_embeddings({"a": np.zeros((2, 4)), "b": np.zeros((3, 4))}, tmp_path / "mixed")


def test_multivector_validation():
    with pytest.raises(ValidationError):
        MultiVector(np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        MultiVector(np.array([[np.inf]]))


def test_hash_features_properties():
    v = hash_features("Inverted Index", 64)
    assert v.shape == (64,)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    np.testing.assert_array_equal(v, hash_features("inverted index", 64))
    assert not np.array_equal(v, hash_features("inverted index", 64, seed=1))
    assert not np.any(hash_features("", 64))
    with pytest.raises(ConfigError):
        hash_features("x", 4)


def test_toy_encode_shapes(touch_head, rng):
    feat = rng.normal(size=touch_head.config.d_base)
    q = toy_encode(feat, touch_head, "query")
    d = toy_encode(feat, touch_head, "document")
    assert q.vectors.shape == (touch_head.config.m_query, touch_head.config.d)
    assert d.vectors.shape == (touch_head.config.n_doc, touch_head.config.d)
    np.testing.assert_array_equal(q.vectors, np.tanh(touch_head.W_enc[: touch_head.config.m_query] @ feat))
    with pytest.raises(ConfigError):
        toy_encode(np.zeros(3), touch_head, "query")


def test_gather_inputs_prefers_stored_features(rng):
    recs = [DocumentRecord("a", "alpha"), DocumentRecord("b", "beta")]
    stored = {"b": MultiVector(rng.normal(size=(1, 16)))}
    x = gather_inputs(recs, stored, 16, 0)
    assert x.shape == (2, 16)
    np.testing.assert_array_equal(x[0], hash_features("alpha", 16))
    np.testing.assert_array_equal(x[1], stored["b"].vectors[0])


def test_gather_inputs_rejects_mixed_shapes(rng):
    recs = [DocumentRecord("a", "alpha"), DocumentRecord("b", "beta")]
    with pytest.raises(ConfigError):
        gather_inputs(recs, {"b": MultiVector(rng.normal(size=(3, 16)))}, 16, 0)


def test_manifest(rng):
    recs = [DocumentRecord("a"), DocumentRecord("b")]
    assert manifest_for(recs, d_base=32).source == "toy-encoder"
    m = manifest_for(recs, {"a": MultiVector(rng.normal(size=(4, 6)))})
    assert (m.doc_count, m.tokens_per_doc, m.embedding_dim, m.source) == (2, 4, 6, "external")
