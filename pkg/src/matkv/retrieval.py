"""Toy vector index with ingestion that eagerly materializes KV caches.

Search is exact brute-force cosine over every record; at desk scale an ANN
structure would only blur the oracles. Embeddings are deterministic: each
token id seeds a pseudo-random unit vector, the (sorted) token multiset is
summed in float64 and the result L2-normalized, so identical multisets map to
bitwise-identical embeddings regardless of token order.

Reads (search) may run concurrently; mutations (ingest/remove) must be
serialized by the caller.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

from .errors import ChunkNotFoundError, IngestError, PreconditionError, StorageError
from .kvstore import KvStore, validate_chunk_id
from .model import Model, TokenSequence, prefill
from .policy import AdmissionPolicy, IngestDecision, on_ingest

DEFAULT_EMBED_DIM = 64
DEFAULT_CHUNK_SIZE = 1024


def chunk_document(tokens: TokenSequence, chunk_size: int) -> list[list[int]]:
    """Slice ``tokens`` into consecutive chunks of ``chunk_size`` (last may be
    shorter); concatenating the chunks reproduces the input."""
    if chunk_size < 1:
        raise PreconditionError(f"chunk_size must be >= 1, got {chunk_size}")
    ids = [int(t) for t in tokens]
    return [ids[i : i + chunk_size] for i in range(0, len(ids), chunk_size)]


@lru_cache(maxsize=65536)
def _token_unit_vector(token_id: int, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(f"embed:{token_id}:{dim}".encode(), digest_size=16).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
    vec = rng.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    vec.flags.writeable = False
    return vec


def embed(tokens: TokenSequence, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Deterministic unit-norm embedding of a token multiset."""
    ids = sorted(int(t) for t in tokens)
    if not ids:
        raise PreconditionError("cannot embed an empty token sequence")
    if dim < 1:
        raise PreconditionError(f"embedding dim must be >= 1, got {dim}")
    acc = np.zeros(dim, dtype=np.float64)
    for token_id in ids:
        acc += _token_unit_vector(token_id, dim)
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        acc = _token_unit_vector(ids[0], dim)
        norm = 1.0
    return (acc / norm).astype(np.float32)


@dataclass
class ChunkRecord:
    """A document chunk as the index sees it."""

    id: str
    tokens: tuple
    embedding: np.ndarray
    materialized: bool = False


@dataclass(frozen=True)
class RetrievalResult:
    ids: tuple
    scores: tuple

    def __len__(self) -> int:
        return len(self.ids)


class VectorIndex:
    """Brute-force cosine index over chunk records."""

    def __init__(self, embed_dim: int = DEFAULT_EMBED_DIM):
        self.embed_dim = embed_dim
        self._records: dict[str, ChunkRecord] = {}
        self._doc_counter = 0

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._records

    def get(self, chunk_id: str) -> ChunkRecord | None:
        return self._records.get(chunk_id)

    def records(self) -> Iterable[ChunkRecord]:
        return self._records.values()

    def tokens_of(self, chunk_id: str) -> tuple:
        record = self._records.get(chunk_id)
        if record is None:
            raise ChunkNotFoundError(f"unknown chunk id {chunk_id!r}")
        return record.tokens

    def add(self, record: ChunkRecord) -> None:
        validate_chunk_id(record.id)
        self._records[record.id] = record

    def pop(self, chunk_id: str) -> ChunkRecord | None:
        return self._records.pop(chunk_id, None)

    def next_doc_id(self) -> str:
        doc_id = f"doc{self._doc_counter:06d}"
        self._doc_counter += 1
        return doc_id

    def search(self, query_tokens: TokenSequence, k: int) -> RetrievalResult:
        """Exact top-k by cosine similarity; ties broken by ascending id."""
        if k < 1:
            raise PreconditionError(f"k must be >= 1, got {k}")
        if not self._records:
            return RetrievalResult(ids=(), scores=())
        query = embed(query_tokens, self.embed_dim)
        scored = [
            (float(record.embedding @ query), record.id)
            for record in self._records.values()
        ]
        scored.sort(key=lambda pair: (-pair[0], pair[1]))
        top = scored[:k]
        return RetrievalResult(
            ids=tuple(chunk_id for _, chunk_id in top),
            scores=tuple(score for score, _ in top),
        )


def search(index: VectorIndex, query_tokens: TokenSequence, k: int) -> RetrievalResult:
    return index.search(query_tokens, k)


def _chunk_ids_for(doc_id: str, n_chunks: int) -> list[str]:
    if n_chunks == 1:
        return [validate_chunk_id(doc_id)]
    ids = [f"{doc_id}-c{i:04d}" for i in range(n_chunks)]
    for chunk_id in ids:
        validate_chunk_id(chunk_id)
    return ids


def ingest(
    index: VectorIndex,
    store: KvStore,
    model: Model,
    policy: AdmissionPolicy,
    tokens: TokenSequence,
    doc_id: str | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> list[str]:
    """Chunk a document, register each chunk, and materialize per policy.

    Single-chunk documents reuse ``doc_id`` as the chunk id so corpus ids and
    trace ids line up; multi-chunk documents get ``-c####`` suffixes.
    Re-ingesting a doc id overwrites both records and stored caches. On a
    store failure the remaining chunks are abandoned and an IngestError
    reports which chunks had already committed.
    """
    chunks = chunk_document(tokens, chunk_size)
    if not chunks:
        return []
    if doc_id is None:
        doc_id = index.next_doc_id()
    chunk_ids = _chunk_ids_for(doc_id, len(chunks))

    committed: list[str] = []
    for chunk_id, chunk_tokens in zip(chunk_ids, chunks):
        record = ChunkRecord(
            id=chunk_id,
            tokens=tuple(chunk_tokens),
            embedding=embed(chunk_tokens, index.embed_dim),
            materialized=False,
        )
        index.add(record)
        if on_ingest(policy, chunk_id) is IngestDecision.MATERIALIZE_NOW:
            cache, _ = prefill(model, chunk_tokens, 0)
            try:
                store.store_kv(chunk_id, cache)
            except StorageError as exc:
                raise IngestError(committed, chunk_id, exc) from exc
            record.materialized = True
        committed.append(chunk_id)
    return committed


def remove(index: VectorIndex, store: KvStore, chunk_id: str) -> bool:
    """Drop a chunk from the index and delete its materialized cache.

    If the cache deletion fails, the index removal is rolled back so the two
    never silently diverge.
    """
    record = index.pop(chunk_id)
    if record is None:
        return False
    try:
        store.delete_kv(chunk_id)
    except StorageError:
        index.add(record)
        raise
    return True
