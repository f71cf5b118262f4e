"""Semantic inverted index: SID -> sorted posting list of document ordinals."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    FingerprintMismatchError,
    MagicMismatchError,
    RangeError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)

UDXI_MAGIC = b"UDXI"
UDXI_VERSION = 1
_UDXI_HEADER = struct.Struct("<4sIBB32s")


@dataclass(frozen=True)
class Fingerprint:
    """Identity of the quantizer whose SIDs populate an index."""

    d_q: int
    K: int
    checksum: bytes = bytes(32)

    @classmethod
    def of(cls, head) -> Fingerprint:
        return cls(head.config.d_q, head.config.K, head.checksum())

    @property
    def code_space(self) -> int:
        return self.K**self.d_q


@dataclass(frozen=True)
class IndexStats:
    num_docs: int = 0
    num_distinct_sids: int = 0
    total_postings: int = 0
    avg_postings_per_doc: float = 0.0
    avg_retrieved_per_query: float = 0.0


@dataclass
class RetrievalResult:
    doc_ordinals: np.ndarray
    per_sid_counts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.doc_ordinals)


def _as_sid_array(sids, space: int) -> np.ndarray:
    arr = np.asarray(sids)
    if arr.size == 0:
        return np.zeros(0, dtype=np.uint64)
    if arr.dtype.kind not in "iu":
        vals = [int(s) for s in arr.ravel()]
        bad = [v for v in vals if not 0 <= v < space]
        if bad:
            raise RangeError(f"SID {bad[0]} outside [0, {space})")
        return np.array(vals, dtype=np.uint64)
    if arr.dtype.kind == "i" and arr.min() < 0:
        raise RangeError(f"SID {int(arr.min())} outside [0, {space})")
    arr = arr.astype(np.uint64).ravel()
    if space < 2**64 and arr.max() >= np.uint64(space):
        raise RangeError(f"SID {int(arr.max())} outside [0, {space})")
    return arr


class InvertedIndex:
    """Posting lists keyed by semantic ID, with an ordinal -> external id table.

    Ordinals are dense: removing a document shifts every later ordinal down,
    so an index is always identical to one rebuilt from its current documents
    in order. Retrieval only reads; mutations need exclusive access.
    """

    def __init__(self, fingerprint: Fingerprint) -> None:
        self.fingerprint = fingerprint
        self.postings: dict[int, np.ndarray] = {}
        self.doc_table: list[str] = []
        self._ordinal: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.doc_table)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.doc_table == other.doc_table
            and self.postings.keys() == other.postings.keys()
            and all(np.array_equal(v, other.postings[k]) for k, v in self.postings.items())
        )

    def ordinal(self, doc_id: str) -> int:
        return self._ordinal[doc_id]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._ordinal

    def copy(self) -> InvertedIndex:
        out = InvertedIndex(self.fingerprint)
        out.postings = {k: v.copy() for k, v in self.postings.items()}
        out.doc_table = list(self.doc_table)
        out._ordinal = dict(self._ordinal)
        return out

    def doc_sids(self, ordinal: int) -> set[int]:
        """Linear scan; intended for tests and debugging."""
        return {sid for sid, post in self.postings.items() if np.any(post == ordinal)}

    def insert_doc(self, doc_id: str, sids) -> int:
        if doc_id in self._ordinal:
            raise ValidationError(f"document {doc_id!r} already indexed")
        if not doc_id:
            raise ValidationError("document id must be nonempty")
        arr = np.unique(_as_sid_array(sids, self.fingerprint.code_space))
        ordinal = len(self.doc_table)
        if ordinal >= 2**32:
            raise ValidationError("index is full (u32 ordinals)")
        self.doc_table.append(doc_id)
        self._ordinal[doc_id] = ordinal
        for sid in arr.tolist():
            post = self.postings.get(sid)
            # new ordinal is the largest, so appending keeps the list sorted
            self.postings[sid] = (
                np.array([ordinal], dtype=np.uint32) if post is None else np.append(post, np.uint32(ordinal))
            )
        return ordinal

    def remove_doc(self, doc_id: str) -> None:
        if doc_id not in self._ordinal:
            raise ValidationError(f"document {doc_id!r} is not indexed")
        ordinal = self._ordinal.pop(doc_id)
        del self.doc_table[ordinal]
        for later in self.doc_table[ordinal:]:
            self._ordinal[later] -= 1
        for sid in list(self.postings):
            post = self.postings[sid]
            pos = np.searchsorted(post, ordinal)
            if pos < len(post) and post[pos] == ordinal:
                post = np.delete(post, pos)
            else:
                post = post.copy()
            post[pos:] -= 1
            if len(post):
                self.postings[sid] = post
            else:
                del self.postings[sid]

    def retrieve(self, query_sids) -> RetrievalResult:
        """Union of the posting lists of the (deduplicated) query SIDs."""
        arr = np.unique(_as_sid_array(query_sids, self.fingerprint.code_space))
        counts: dict[int, int] = {}
        lists = []
        for sid in arr.tolist():
            post = self.postings.get(sid)
            counts[sid] = 0 if post is None else len(post)
            if post is not None:
                lists.append(post)
        if not lists:
            return RetrievalResult(np.zeros(0, dtype=np.uint32), counts)
        if len(lists) == 1:
            return RetrievalResult(lists[0].copy(), counts)
        return RetrievalResult(np.unique(np.concatenate(lists)), counts)

    def stats(self, query_log: Iterable[Sequence[int]] | None = None) -> IndexStats:
        total = sum(len(p) for p in self.postings.values())
        n = len(self.doc_table)
        avg_q = 0.0
        if query_log is not None:
            sizes = [len(self.retrieve(q)) for q in query_log]
            avg_q = float(np.mean(sizes)) if sizes else 0.0
        return IndexStats(
            num_docs=n,
            num_distinct_sids=len(self.postings),
            total_postings=total,
            avg_postings_per_doc=total / n if n else 0.0,
            avg_retrieved_per_query=avg_q,
        )


def build_index(docs: Sequence[tuple[str, Sequence[int]]], fingerprint: Fingerprint) -> InvertedIndex:
    """Index each document under each of its distinct SIDs; ordinals follow input order."""
    index = InvertedIndex(fingerprint)
    space = fingerprint.code_space
    all_sids, all_ords = [], []
    for ordinal, (doc_id, sids) in enumerate(docs):
        if not doc_id:
            raise ValidationError("document id must be nonempty")
        if doc_id in index._ordinal:
            raise ValidationError(f"duplicate document id {doc_id!r}")
        index._ordinal[doc_id] = ordinal
        index.doc_table.append(doc_id)
        arr = _as_sid_array(sids, space).ravel()
        all_sids.append(arr)
        all_ords.append(np.full(len(arr), ordinal, dtype=np.uint32))
    if len(index.doc_table) >= 2**32:
        raise ValidationError("too many documents for u32 ordinals")
    if not all_sids:
        return index
    sids = np.concatenate(all_sids)
    ords = np.concatenate(all_ords)
    order = np.lexsort((ords, sids))
    sids, ords = sids[order], ords[order]
    keep = np.ones(len(sids), dtype=bool)
    keep[1:] = (sids[1:] != sids[:-1]) | (ords[1:] != ords[:-1])
    sids, ords = sids[keep], ords[keep]
    bounds = np.flatnonzero(np.diff(sids)) + 1
    starts = np.concatenate([[0], bounds])
    for start, chunk in zip(starts, np.split(ords, bounds)):
        if len(chunk):
            index.postings[int(sids[start])] = chunk.copy()
    return index


def serialize_index(index: InvertedIndex) -> bytes:
    fp = index.fingerprint
    parts = [_UDXI_HEADER.pack(UDXI_MAGIC, UDXI_VERSION, fp.d_q, fp.K, fp.checksum)]
    parts.append(struct.pack("<Q", len(index.doc_table)))
    for doc_id in index.doc_table:
        raw = doc_id.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<Q", len(index.postings)))
    for sid in sorted(index.postings):
        post = index.postings[sid]
        parts.append(struct.pack("<QI", sid, len(post)))
        parts.append(np.ascontiguousarray(post, dtype="<u4").tobytes())
    return b"".join(parts)


def save_index(index: InvertedIndex, path: str | Path) -> None:
    Path(path).write_bytes(serialize_index(index))


def load_index(path: str | Path, expected_checksum: bytes | None = None) -> InvertedIndex:
    """Decode a UDXI file; with ``expected_checksum`` also verify the quantizer fingerprint."""
    data = Path(path).read_bytes()
    if data[:4] != UDXI_MAGIC:
        raise MagicMismatchError(f"{path}: not a UDXI index")
    if len(data) < _UDXI_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, d_q, K, checksum = _UDXI_HEADER.unpack_from(data, 0)
    if version != UDXI_VERSION:
        raise VersionMismatchError(f"{path}: unsupported UDXI version {version}")
    if expected_checksum is not None and checksum != expected_checksum:
        raise FingerprintMismatchError(f"{path}: index was built with a different quantizer head")
    off = _UDXI_HEADER.size

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(data):
            raise TruncatedFileError(f"{path}: unexpected end of file")
        chunk = memoryview(data)[off : off + n]
        off += n
        return chunk

    index = InvertedIndex(Fingerprint(d_q, K, checksum))
    (n_docs,) = struct.unpack("<Q", take(8))
    for ordinal in range(n_docs):
        (n,) = struct.unpack("<Q", take(8))
        doc_id = bytes(take(n)).decode("utf-8")
        if doc_id in index._ordinal:
            raise ValidationError(f"{path}: duplicate document id {doc_id!r}")
        index.doc_table.append(doc_id)
        index._ordinal[doc_id] = ordinal
    (n_post,) = struct.unpack("<Q", take(8))
    prev = -1
    for _ in range(n_post):
        sid, n = struct.unpack("<QI", take(12))
        if sid <= prev:
            raise ValidationError(f"{path}: postings not sorted by SID")
        prev = sid
        post = np.frombuffer(take(4 * n), dtype="<u4").astype(np.uint32)
        if n == 0 or np.any(np.diff(post.astype(np.int64)) <= 0) or post[-1] >= n_docs:
            raise ValidationError(f"{path}: malformed posting list for SID {sid}")
        index.postings[sid] = post
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes")
    return index
