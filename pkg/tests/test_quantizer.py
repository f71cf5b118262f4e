import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unidex.errors import ConfigError, MagicMismatchError, RangeError, TruncatedFileError, ValidationError
from unidex.quantizer import (
    QuantizerConfig,
    QuantizerHead,
    down_project,
    encode_token,
    encode_tokens,
    ewgs_backward,
    fsq_quantize,
    init_head,
    load_checkpoint,
    pack_sid,
    pre_round,
    round_half_up,
    save_checkpoint,
    serialize_head,
    sids_for,
    unpack_sid,
    up_project,
)


def test_identity_down_projection_selects_leading_coordinates():
    cfg = QuantizerConfig(d=6, d_q=3, d_base=8)
    head = init_head(cfg)
    head.W_down = np.eye(6)[:3]
    head.b_down = np.zeros(3)
    np.testing.assert_array_equal(down_project(np.arange(1.0, 7.0), head), [1.0, 2.0, 3.0])


def test_down_projection_rejects_wrong_width(touch_head):
    with pytest.raises(ConfigError):
        down_project(np.zeros(touch_head.config.d + 1), touch_head)


def test_round_half_up_ties_go_up():
    np.testing.assert_array_equal(round_half_up(np.array([0.5, 1.5, 0.49999999, 2.0, 0.0])), [1, 2, 0, 2, 0])


def test_binary_codes_follow_sign_of_low():
    cfg = QuantizerConfig(d=4, d_q=4, K=2, d_base=8)
    np.testing.assert_array_equal(fsq_quantize(np.array([-3.0, -1e-9, 0.0, 2.0]), cfg), [0, 0, 1, 1])


def test_k3_codes_cover_three_levels():
    cfg = QuantizerConfig(d=4, d_q=3, K=3, d_base=8)
    np.testing.assert_array_equal(fsq_quantize(np.array([-10.0, 0.0, 10.0]), cfg), [0, 1, 2])


def test_pack_sid_low_dimension_is_least_significant():
    cfg = QuantizerConfig(d=4, d_q=3, K=2, d_base=8)
    assert pack_sid(np.array([0, 1, 1]), cfg) == 6
    assert pack_sid(np.array([1, 0, 0]), cfg) == 1


def test_pack_rejects_out_of_range_codes():
    cfg = QuantizerConfig(d=4, d_q=3, K=2, d_base=8)
    with pytest.raises(RangeError):
        pack_sid(np.array([0, 2, 0]), cfg)


def test_unpack_rejects_sid_outside_code_space():
    cfg = QuantizerConfig(d=4, d_q=3, K=2, d_base=8)
    with pytest.raises(RangeError):
        unpack_sid(8, cfg)


def test_exhaustive_round_trip_d10():
    cfg = QuantizerConfig(d=4, d_q=10, K=2, d_base=8)
    codes = unpack_sid(np.arange(2**10), cfg)
    np.testing.assert_array_equal(pack_sid(codes, cfg), np.arange(2**10, dtype=np.uint64))


def test_code_space_sizes():
    assert QuantizerConfig().code_space == 2**19
    assert QuantizerConfig(d_q=64).code_space == 2**64


@pytest.mark.parametrize("kw", [dict(K=1), dict(d_q=0), dict(d_q=70), dict(ewgs_delta=-1.0), dict(mode="dense")])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        QuantizerConfig(**kw)


@given(
    k=st.integers(2, 5),
    codes=st.lists(st.integers(0, 4), min_size=1, max_size=12),
)
def test_pack_unpack_bijection(k, codes):
    codes = np.array(codes) % k
    cfg = QuantizerConfig(d=4, d_q=len(codes), K=k, d_base=8)
    np.testing.assert_array_equal(unpack_sid(pack_sid(codes, cfg), cfg), codes)


@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=19, max_size=19))
def test_codes_and_sids_stay_in_range(low):
    cfg = QuantizerConfig()
    codes = fsq_quantize(np.array(low), cfg)
    assert codes.min() >= 0 and codes.max() <= cfg.K - 1
    assert 0 <= pack_sid(codes, cfg) < cfg.code_space


def test_up_projection_rows_are_batch_independent(touch_head):
    codes = np.array([[1, 0, 1, 1, 0, 0], [0, 0, 1, 0, 1, 1], [1, 0, 1, 1, 0, 0]])
    batch = up_project(codes, touch_head)
    assert np.array_equal(batch[0], batch[2])
    assert np.array_equal(batch[1], up_project(codes[1], touch_head))


def test_encode_token_is_consistent(touch_head, rng):
    tok = rng.normal(size=touch_head.config.d)
    sid, recon, parts = encode_token(tok, touch_head)
    np.testing.assert_array_equal(unpack_sid(sid, touch_head.config), parts["codes"])
    np.testing.assert_array_equal(recon, up_project(parts["codes"], touch_head))
    np.testing.assert_allclose(parts["pre_round"], pre_round(parts["low"], 2))


def test_sids_for_matches_single_token_path(touch_head, rng):
    feats = rng.normal(size=(5, touch_head.config.d_base))
    sids = sids_for(feats, touch_head, "document")
    tokens = encode_tokens(feats, touch_head, "document")
    assert sids.shape == (5, touch_head.config.n_doc)
    for i in range(5):
        for t in range(touch_head.config.n_doc):
            assert int(sids[i, t]) == encode_token(tokens[i, t], touch_head)[0]


def test_query_and_document_share_leading_slots(touch_head, rng):
    feat = rng.normal(size=(1, touch_head.config.d_base))
    q = encode_tokens(feat, touch_head, "query")
    d = encode_tokens(feat, touch_head, "document")
    np.testing.assert_array_equal(q[0], d[0, : touch_head.config.m_query])


def test_too_many_tokens_requested(touch_head):
    with pytest.raises(ConfigError):
        encode_tokens(np.zeros((1, touch_head.config.d_base)), touch_head, "document", n_tokens=99)


def test_init_is_prefix_nested_in_dq():
    small = init_head(QuantizerConfig(d=16, d_q=12, d_base=8), seed=3)
    big = init_head(QuantizerConfig(d=16, d_q=20, d_base=8), seed=3)
    np.testing.assert_array_equal(small.W_down, big.W_down[:12])
    np.testing.assert_array_equal(small.W_enc, big.W_enc)


def test_ewgs_examples():
    assert ewgs_backward(np.array([2.0]), np.array([0.7]), np.array([1]), 0.1)[0] == pytest.approx(1.94)
    g = np.array([0.3, -1.2, 0.0])
    np.testing.assert_array_equal(ewgs_backward(g, np.array([0.2, 0.9, 0.4]), np.array([0, 1, 0]), 0.0), g)
    assert ewgs_backward(np.array([0.0]), np.array([0.3]), np.array([0]), 0.5)[0] == 0.0


def test_checkpoint_round_trip_is_byte_identical(touch_head, tmp_path):
    head = touch_head.round_to_f32()
    path = tmp_path / "h.udxq"
    save_checkpoint(head, path)
    loaded = load_checkpoint(path)
    assert loaded.config == head.config
    for name in QuantizerHead.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(loaded, name), getattr(head, name))
    assert serialize_head(loaded) == path.read_bytes()
    assert loaded.checksum() == head.checksum()


def test_checkpoint_errors(touch_head, tmp_path):
    path = tmp_path / "h.udxq"
    save_checkpoint(touch_head, path)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MagicMismatchError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "long")


def test_checksum_changes_with_parameters(touch_head):
    other = touch_head.copy()
    other.b_up[0] += 1.0
    assert other.checksum() != touch_head.checksum()
