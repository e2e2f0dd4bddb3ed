"""Synthetic corpus and Zipf-skewed access-trace generation.

Access sets are drawn directly from a Zipf rank distribution over document
indices rather than through embedding similarity: the phenomenon under study
is retrieval *frequency* skew, and direct generation keeps the skew exponent
an actual knob. End-to-end runs that want real similarity search can replay
the corpus through the index instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PreconditionError


def _stream_rng(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"workload:{seed}:{label}".encode(), digest_size=16).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class WorkloadSpec:
    n_docs: int
    n_queries: int
    doc_len_tokens: int = 128
    top_k: int = 10
    zipf_s: float = 1.0
    seed: int = 0
    vocab_size: int = 256

    def __post_init__(self):
        for name in ("n_docs", "n_queries", "doc_len_tokens", "top_k", "vocab_size"):
            if getattr(self, name) <= 0:
                raise PreconditionError(f"{name} must be positive, got {getattr(self, name)}")
        if self.zipf_s <= 0:
            raise PreconditionError(f"zipf_s must be > 0, got {self.zipf_s}")
        if self.top_k > self.n_docs:
            raise PreconditionError(
                f"top_k ({self.top_k}) cannot exceed n_docs ({self.n_docs})"
            )

    @classmethod
    def from_json_dict(cls, data: dict) -> "WorkloadSpec":
        return cls(
            n_docs=int(data["n_docs"]),
            n_queries=int(data["n_queries"]),
            doc_len_tokens=int(data.get("doc_len_tokens", 128)),
            top_k=int(data.get("top_k", 10)),
            zipf_s=float(data.get("zipf_s", 1.0)),
            seed=int(data.get("seed", 0)),
            vocab_size=int(data.get("vocab_size", 256)),
        )


def doc_id_for(index: int) -> str:
    return f"doc{index:06d}"


def generate_corpus(spec: WorkloadSpec) -> list[dict]:
    """Deterministic corpus: each doc is ``doc_len_tokens`` uniform token ids."""
    rng = _stream_rng(spec.seed, "corpus")
    docs = []
    for i in range(spec.n_docs):
        tokens = rng.integers(0, spec.vocab_size, size=spec.doc_len_tokens)
        docs.append({"id": doc_id_for(i), "tokens": [int(t) for t in tokens]})
    return docs


def zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    weights = ranks ** (-s)
    return weights / weights.sum()


def generate_accesses(spec: WorkloadSpec) -> list[list[int]]:
    """Per query, ``top_k`` distinct doc indices drawn by Zipf rank weight."""
    weights = zipf_weights(spec.n_docs, spec.zipf_s)
    rng = _stream_rng(spec.seed, "accesses")
    return [
        [int(d) for d in rng.choice(spec.n_docs, size=spec.top_k, replace=False, p=weights)]
        for _ in range(spec.n_queries)
    ]


@dataclass(frozen=True)
class SkewReport:
    counts: np.ndarray
    total_accesses: int
    n_accessed_ge2: int
    fraction_ge2: float

    def to_json_dict(self) -> dict:
        return {
            "total_accesses": self.total_accesses,
            "n_docs": int(self.counts.size),
            "n_accessed_ge1": int(np.count_nonzero(self.counts)),
            "n_accessed_ge2": self.n_accessed_ge2,
            "fraction_ge2": self.fraction_ge2,
            "max_count": int(self.counts.max()) if self.counts.size else 0,
        }


def skew_report(accesses: list[list[int]], n_docs: int) -> SkewReport:
    """Exact per-doc access counts and the accessed-twice-or-more fraction."""
    counts = np.zeros(n_docs, dtype=np.int64)
    total = 0
    for access_set in accesses:
        for doc in access_set:
            if not 0 <= doc < n_docs:
                raise PreconditionError(f"doc index {doc} outside [0, {n_docs})")
            counts[doc] += 1
            total += 1
    ge2 = int(np.count_nonzero(counts >= 2))
    return SkewReport(
        counts=counts,
        total_accesses=total,
        n_accessed_ge2=ge2,
        fraction_ge2=ge2 / n_docs,
    )


def write_corpus_jsonl(docs: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, separators=(",", ":"), sort_keys=True))
            fh.write("\n")


def read_corpus_jsonl(path: str | Path) -> list[dict]:
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                doc_id = obj["id"]
                tokens = obj["tokens"]
                if not isinstance(doc_id, str) or not isinstance(tokens, list):
                    raise ValueError("expected string `id` and array `tokens`")
                tokens = [int(t) for t in tokens]
            except (ValueError, KeyError, TypeError) as exc:
                raise PreconditionError(f"{path}: malformed corpus line {line_no}: {exc}") from exc
            docs.append({"id": doc_id, "tokens": tokens})
    return docs


def write_trace_jsonl(accesses: list[list[int]], path: str | Path) -> None:
    """Trace lines are ``{"query_index": i, "ids": [...doc ids...]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, access_set in enumerate(accesses):
            record = {"query_index": i, "ids": [doc_id_for(d) for d in access_set]}
            fh.write(json.dumps(record, separators=(",", ":"), sort_keys=True))
            fh.write("\n")
