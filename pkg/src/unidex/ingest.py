"""Corpus and embedding ingestion, feature hashing and the toy token encoder.

Documents arrive either as text (turned into a dense base feature by
character 3-gram sign hashing) or as pre-computed vectors stored in the
UDXE binary format. A record stored with a single token row is treated as a
base feature and goes through the toy encoder; records with several rows are
already token embeddings and bypass it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np

from .errors import (
    ConfigError,
    MagicMismatchError,
    NonFiniteError,
    ParseError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)

if TYPE_CHECKING:
    from .quantizer import QuantizerHead

ROLES = ("query", "document", "rank-query", "rank-document")

UDXE_MAGIC = b"UDXE"
UDXE_VERSION = 1
_UDXE_HEADER = struct.Struct("<4sIQHH")


@dataclass(frozen=True)
class DocumentRecord:
    id: str
    text: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("document id must be a nonempty string")


@dataclass
class MultiVector:
    """T token embeddings of one query or document, shape ``(T, dim)``."""

    vectors: np.ndarray
    role: str = "document"

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"MultiVector needs shape (T>=1, dim>=1), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("MultiVector contains non-finite values")
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        self.vectors = v

    @property
    def tokens(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class CorpusManifest:
    doc_count: int
    embedding_dim: int
    tokens_per_doc: int
    source: str  # "external" | "toy-encoder"


def load_corpus(path: str | Path) -> list[DocumentRecord]:
    """Read a JSONL corpus of ``{"id", "text"}`` objects in file order."""
    records: list[DocumentRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) or not obj["id"]:
                raise ParseError("record needs a nonempty string 'id'", lineno)
            text = obj.get("text", "")
            if not isinstance(text, str):
                raise ParseError("'text' must be a string", lineno)
            doc_id = obj["id"]
            if doc_id in seen:
                raise ValidationError(
                    f"duplicate document id {doc_id!r} (lines {seen[doc_id]} and {lineno})"
                )
            seen[doc_id] = lineno
            records.append(DocumentRecord(doc_id, text))
    return records


def save_corpus(records: Iterable[DocumentRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "text": rec.text}, ensure_ascii=False) + "\n")


def save_embeddings(embeddings: Mapping[str, MultiVector | np.ndarray], path: str | Path) -> None:
    """Write embeddings in UDXE layout; every entry must share (tokens, dim)."""
    items = [(k, np.atleast_2d(getattr(v, "vectors", v))) for k, v in embeddings.items()]
    shapes = {a.shape for _, a in items}
    if len(shapes) > 1:
        raise ValidationError(f"inconsistent embedding shapes: {sorted(shapes)}")
    tokens, dim = shapes.pop() if shapes else (1, 1)
    if tokens > 0xFFFF or dim > 0xFFFF:
        raise ConfigError("tokens and dim must fit in u16")
    with open(path, "wb") as fh:
        fh.write(_UDXE_HEADER.pack(UDXE_MAGIC, UDXE_VERSION, len(items), tokens, dim))
        for key, arr in items:
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"embedding {key!r} has non-finite values")
            raw = key.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_embeddings(path: str | Path, role: str = "document") -> dict[str, MultiVector]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != UDXE_MAGIC:
        raise MagicMismatchError(f"{path}: not a UDXE file")
    if len(data) < _UDXE_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, count, tokens, dim = _UDXE_HEADER.unpack_from(data, 0)
    if version != UDXE_VERSION:
        raise VersionMismatchError(f"{path}: unsupported UDXE version {version}")
    off = _UDXE_HEADER.size
    payload = tokens * dim * 4
    out: dict[str, MultiVector] = {}
    for i in range(count):
        if off + 8 > len(data):
            raise TruncatedFileError(f"{path}: record {i} truncated")
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + n + payload > len(data):
            raise TruncatedFileError(f"{path}: record {i} truncated")
        key = data[off : off + n].decode("utf-8")
        off += n
        arr = np.frombuffer(data, dtype="<f4", count=tokens * dim, offset=off).reshape(tokens, dim)
        off += payload
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{path}: embedding {key!r} has non-finite values")
        if key in out:
            raise ValidationError(f"{path}: duplicate id {key!r}")
        out[key] = MultiVector(arr.astype(np.float64), role)
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    return out


@lru_cache(maxsize=1 << 16)
def _gram_slot(gram: str, d_base: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        gram.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little", signed=True)
    ).digest()
    h = int.from_bytes(digest, "little")
    return h % d_base, 1.0 if (h >> 63) & 1 else -1.0


def hash_features(text: str, d_base: int = 256, seed: int = 0) -> np.ndarray:
    """L2-normalized signed-hash histogram of character 3-grams.

    The text is lowercased and wrapped in ``^``/``$`` boundary markers, so
    short words still produce grams while the empty string yields none and
    maps to the zero vector.
    """
    if d_base < 8:
        raise ConfigError(f"d_base must be >= 8, got {d_base}")
    padded = f"^{text.lower()}$"
    vec = np.zeros(d_base, dtype=np.float64)
    for i in range(len(padded) - 2):
        slot, sign = _gram_slot(padded[i : i + 3], d_base, seed)
        vec[slot] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def toy_encode(feature: np.ndarray, head: QuantizerHead, role: str) -> MultiVector:
    """Token t of the output is ``tanh(W_enc[t] @ feature)``.

    Queries use the first M encoder slots and documents the first N, so the
    two towers share slots below min(M, N).
    """
    feature = np.asarray(feature, dtype=np.float64)
    cfg = head.config
    if feature.shape != (cfg.d_base,):
        raise ConfigError(f"feature shape {feature.shape} does not match d_base={cfg.d_base}")
    if role not in ("query", "document"):
        raise ConfigError(f"role must be 'query' or 'document', got {role!r}")
    count = cfg.m_query if role == "query" else cfg.n_doc
    tokens = np.tanh(head.W_enc[:count] @ feature)
    tag = role if cfg.mode == "touch" else f"rank-{role}"
    return MultiVector(tokens, tag)


def manifest_for(
    records: list[DocumentRecord], embeddings: Mapping[str, MultiVector] | None = None, *, d_base: int = 256
) -> CorpusManifest:
    if embeddings:
        shapes = {embeddings[r.id].vectors.shape for r in records if r.id in embeddings}
        if len(shapes) > 1:
            raise ValidationError(f"inconsistent embedding shapes: {sorted(shapes)}")
        tokens, dim = shapes.pop() if shapes else (1, d_base)
        return CorpusManifest(len(records), dim, tokens, "external")
    return CorpusManifest(len(records), d_base, 1, "toy-encoder")


def gather_inputs(
    records: list[DocumentRecord],
    embeddings: Mapping[str, MultiVector] | None,
    d_base: int,
    seed: int,
) -> np.ndarray:
    """Stack the encoder inputs for ``records``.

    Ids found in ``embeddings`` use the stored vectors, everything else is
    feature-hashed from its text. Returns ``(n, d_base)`` base features, or
    ``(n, T, d)`` token embeddings when the stored records carry more than one
    row each.
    """
    rows = []
    for rec in records:
        mv = embeddings.get(rec.id) if embeddings else None
        if mv is None:
            rows.append(hash_features(rec.text, d_base, seed)[None, :])
        else:
            rows.append(mv.vectors)
    if not rows:
        return np.zeros((0, d_base))
    shapes = {r.shape for r in rows}
    if len(shapes) > 1:
        raise ConfigError(f"mixed input shapes {sorted(shapes)}; hashed text has shape (1, {d_base})")
    stacked = np.stack(rows)
    if stacked.shape[1] == 1:
        return stacked[:, 0, :]
    return stacked
