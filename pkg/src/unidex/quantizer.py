"""Token quantization: down-projection, FSQ rounding, SID packing, up-projection.

A token embedding ``x`` (dim ``d``) becomes ``low = W_down x + b_down``
(dim ``d_q``), then per-dimension codes ``round((K-1) * sigmoid(low))``.
The codes pack into one integer semantic ID (dimension 0 is the least
significant base-K digit) and map back to ``W_up codes + b_up``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigError,
    MagicMismatchError,
    RangeError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from .ingest import MultiVector

UDXQ_MAGIC = b"UDXQ"
UDXQ_VERSION = 1
_CONFIG_FIELDS = ("d", "d_q", "K", "ewgs_delta", "d_base", "m_query", "n_doc", "hash_seed", "mode")
_UDXQ_HEADER = struct.Struct("<4sI" + "d" * len(_CONFIG_FIELDS))
_MODES = ("touch", "rank")


@dataclass(frozen=True)
class QuantizerConfig:
    d: int = 64
    d_q: int = 19
    K: int = 2
    ewgs_delta: float = 1e-3
    d_base: int = 256
    m_query: int = 3
    n_doc: int = 8
    hash_seed: int = 0
    mode: str = "touch"

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.d_q < 1:
            raise ConfigError(f"d_q must be >= 1, got {self.d_q}")
        if self.K**self.d_q > 2**64:
            raise ConfigError(f"code space K^d_q = {self.K}^{self.d_q} does not fit in 64 bits")
        if self.K > 255 or self.d_q > 255:
            raise ConfigError("K and d_q must each fit in one byte")
        if not self.ewgs_delta >= 0:
            raise ConfigError(f"ewgs_delta must be >= 0, got {self.ewgs_delta}")
        if min(self.d, self.d_base, self.m_query, self.n_doc) < 1:
            raise ConfigError("d, d_base, m_query and n_doc must be positive")
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")

    @property
    def n_slots(self) -> int:
        return max(self.m_query, self.n_doc)

    @property
    def code_space(self) -> int:
        return self.K**self.d_q

    def tokens_for(self, role: str) -> int:
        return self.m_query if role == "query" else self.n_doc


@dataclass
class QuantizerHead:
    """Trainable parameters: per-slot encoder maps plus DownProj/UpProj."""

    config: QuantizerConfig
    W_enc: np.ndarray  # (n_slots, d, d_base)
    W_down: np.ndarray  # (d_q, d)
    b_down: np.ndarray  # (d_q,)
    W_up: np.ndarray  # (d, d_q)
    b_up: np.ndarray  # (d,)
    _checksum: bytes | None = field(default=None, repr=False, compare=False)

    PARAM_NAMES = ("W_enc", "W_down", "b_down", "W_up", "b_up")

    def __post_init__(self) -> None:
        c = self.config
        expected = {
            "W_enc": (c.n_slots, c.d, c.d_base),
            "W_down": (c.d_q, c.d),
            "b_down": (c.d_q,),
            "W_up": (c.d, c.d_q),
            "b_up": (c.d,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> QuantizerHead:
        return QuantizerHead(self.config, **{k: v.copy() for k, v in self.params().items()})

    def with_config(self, **changes) -> QuantizerHead:
        """Same parameters under a config differing in non-shape fields."""
        return QuantizerHead(replace(self.config, **changes), **{k: v.copy() for k, v in self.params().items()})

    def round_to_f32(self) -> QuantizerHead:
        return QuantizerHead(
            self.config, **{k: v.astype(np.float32).astype(np.float64) for k, v in self.params().items()}
        )

    def checksum(self) -> bytes:
        """SHA-256 of the serialized checkpoint; cached, so treat the head as frozen afterwards."""
        if self._checksum is None:
            self._checksum = hashlib.sha256(serialize_head(self)).digest()
        return self._checksum


def init_head(config: QuantizerConfig, seed: int = 0) -> QuantizerHead:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Each parameter has its own random stream and rows are drawn in order, so
    heads differing only in d_q share the leading rows of W_down, and heads
    differing only in slot count share the leading encoder slots.
    """
    c = config
    enc_ss, down_ss, up_ss = np.random.SeedSequence(seed).spawn(3)

    def uniform(ss, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return np.random.default_rng(ss).uniform(-bound, bound, size=shape)

    return QuantizerHead(
        config=c,
        W_enc=uniform(enc_ss, (c.n_slots, c.d, c.d_base), c.d_base),
        W_down=uniform(down_ss, (c.d_q, c.d), c.d),
        b_down=np.zeros(c.d_q),
        W_up=uniform(up_ss, (c.d, c.d_q), c.d_q),
        b_up=np.zeros(c.d),
    )


def _check_last_dim(x: np.ndarray, size: int, what: str) -> None:
    if x.shape[-1] != size:
        raise ConfigError(f"{what} has trailing dimension {x.shape[-1]}, expected {size}")


def down_project(token: np.ndarray, head: QuantizerHead) -> np.ndarray:
    token = np.asarray(token, dtype=np.float64)
    _check_last_dim(token, head.config.d, "token")
    return token @ head.W_down.T + head.b_down


def pre_round(low: np.ndarray, K: int) -> np.ndarray:
    """``(K-1) * sigmoid(low)``, the value FSQ rounds."""
    return (K - 1) * expit(np.asarray(low, dtype=np.float64))


def round_half_up(x: np.ndarray) -> np.ndarray:
    # floor(x + 0.5) can round x just below .5 upwards; compare the exact fraction instead
    fl = np.floor(x)
    return (fl + (x - fl >= 0.5)).astype(np.int64)


def fsq_quantize(low: np.ndarray, config: QuantizerConfig) -> np.ndarray:
    codes = round_half_up(pre_round(low, config.K))
    return np.clip(codes, 0, config.K - 1)


def _powers(config: QuantizerConfig) -> np.ndarray:
    return np.array([config.K**t for t in range(config.d_q)], dtype=np.uint64)


def pack_sid(codes: np.ndarray, config: QuantizerConfig):
    """Pack a code vector (or a stack of them) into semantic IDs.

    Returns a Python int for a single vector and a uint64 array otherwise.
    """
    codes = np.asarray(codes)
    _check_last_dim(codes, config.d_q, "codes")
    if codes.size and (codes.min() < 0 or codes.max() >= config.K):
        raise RangeError(f"codes must lie in [0, {config.K - 1}]")
    sids = (codes.astype(np.uint64) * _powers(config)).sum(axis=-1, dtype=np.uint64)
    return int(sids) if codes.ndim == 1 else sids


def unpack_sid(sid, config: QuantizerConfig) -> np.ndarray:
    arr = np.asarray(sid)
    if arr.ndim == 0:
        s = int(sid)
        if not 0 <= s < config.code_space:
            raise RangeError(f"SID {s} outside [0, {config.code_space})")
        out = np.empty(config.d_q, dtype=np.int64)
        for t in range(config.d_q):
            s, out[t] = divmod(s, config.K)
        return out
    return np.stack([unpack_sid(s, config) for s in arr.ravel()]).reshape(*arr.shape, config.d_q)


def check_sids(sids: np.ndarray, config_or_space) -> None:
    space = config_or_space.code_space if isinstance(config_or_space, QuantizerConfig) else config_or_space
    for s in np.asarray(sids, dtype=object).ravel():
        if not 0 <= int(s) < space:
            raise RangeError(f"SID {int(s)} outside [0, {space})")


def up_project(codes: np.ndarray, head: QuantizerHead) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    _check_last_dim(codes, head.config.d_q, "codes")
    # elementwise product + last-axis sum: equal codes give bitwise-equal rows regardless of batch shape
    return (codes[..., None, :] * head.W_up).sum(axis=-1) + head.b_up


def encode_token(token: np.ndarray, head: QuantizerHead):
    """Quantize one token: returns ``(sid, reconstruction, intermediates)``."""
    low = down_project(token, head)
    p = pre_round(low, head.config.K)
    codes = np.clip(round_half_up(p), 0, head.config.K - 1)
    recon = up_project(codes, head)
    return pack_sid(codes, head.config), recon, {"low": low, "pre_round": p, "codes": codes}


def encode_multivector(mv: MultiVector, head: QuantizerHead) -> list[tuple[int, np.ndarray]]:
    return [encode_token(tok, head)[:2] for tok in mv.vectors]


def encode_tokens(inputs: np.ndarray, head: QuantizerHead, role: str, n_tokens: int | None = None) -> np.ndarray:
    """Token embeddings for a batch of encoder inputs.

    ``inputs`` is either ``(n, d_base)`` base features, run through the toy
    encoder slots, or ``(n, T, d)`` pre-computed tokens returned as-is.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    c = head.config
    if inputs.ndim == 3:
        _check_last_dim(inputs, c.d, "token embeddings")
        return inputs
    _check_last_dim(inputs, c.d_base, "base features")
    count = n_tokens if n_tokens is not None else c.tokens_for(role)
    if count > c.n_slots:
        raise ConfigError(f"requested {count} tokens but the head has {c.n_slots} slots")
    return np.tanh(np.einsum("tdk,nk->ntd", head.W_enc[:count], inputs))


def sids_for(inputs: np.ndarray, head: QuantizerHead, role: str, n_tokens: int | None = None) -> np.ndarray:
    """``(n, T)`` uint64 semantic IDs for a batch of encoder inputs."""
    tokens = encode_tokens(inputs, head, role, n_tokens)
    codes = fsq_quantize(down_project(tokens, head), head.config)
    return pack_sid(codes, head.config).reshape(tokens.shape[0], tokens.shape[1])


def ewgs_backward(grad: np.ndarray, pre_round_value: np.ndarray, code: np.ndarray, delta: float) -> np.ndarray:
    """Element-wise gradient scaling through the rounding step.

    ``g_in * (1 + delta * sign(g_in) * (pre_round - code))``; ``delta=0`` is
    the straight-through estimator.
    """
    g = np.asarray(grad, dtype=np.float64)
    if delta == 0:
        return g.copy()
    return g * (1.0 + delta * np.sign(g) * (np.asarray(pre_round_value) - np.asarray(code)))


def serialize_head(head: QuantizerHead) -> bytes:
    c = head.config
    values = [float(getattr(c, f)) if f != "mode" else float(_MODES.index(c.mode)) for f in _CONFIG_FIELDS]
    parts = [_UDXQ_HEADER.pack(UDXQ_MAGIC, UDXQ_VERSION, *values)]
    parts += [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in head.params().values()]
    return b"".join(parts)


def save_checkpoint(head: QuantizerHead, path: str | Path) -> None:
    Path(path).write_bytes(serialize_head(head))


def load_checkpoint(path: str | Path) -> QuantizerHead:
    data = Path(path).read_bytes()
    if data[:4] != UDXQ_MAGIC:
        raise MagicMismatchError(f"{path}: not a UDXQ checkpoint")
    if len(data) < _UDXQ_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, *values = _UDXQ_HEADER.unpack_from(data, 0)
    if version != UDXQ_VERSION:
        raise VersionMismatchError(f"{path}: unsupported UDXQ version {version}")
    kw = dict(zip(_CONFIG_FIELDS, values))
    mode = _MODES[int(kw.pop("mode"))]
    delta = kw.pop("ewgs_delta")
    config = QuantizerConfig(**{k: int(v) for k, v in kw.items()}, ewgs_delta=delta, mode=mode)
    c = config
    shapes = [(c.n_slots, c.d, c.d_base), (c.d_q, c.d), (c.d_q,), (c.d, c.d_q), (c.d,)]
    off = _UDXQ_HEADER.size
    params = {}
    for name, shape in zip(QuantizerHead.PARAM_NAMES, shapes):
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise TruncatedFileError(f"{path}: parameter {name} truncated")
        params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 4 * n
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes after the parameters")
    return QuantizerHead(config, **params)
