"""Engine wiring: configuration, persistence, and policy-aware serving.

The engine owns one model, one store, one index, and the access statistics
that drive admission and eviction. Index records and access stats persist as
JSON sidecars inside the store directory (embeddings are recomputed on load;
they are deterministic), so separate CLI invocations see the same state.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .costmodel import CostParams
from .errors import ConfigurationError
from .kvstore import KvStore
from .model import Model, ModelConfig, build_model
from .pipeline import (
    InferenceOutput,
    Mode,
    PositioningRule,
    Request,
    SimulatedTimes,
    run_matkv,
    run_vanilla,
)
from .policy import (
    AccessDecision,
    AccessStats,
    AdmissionKind,
    AdmissionPolicy,
    EvictionKind,
    EvictionPolicy,
    maybe_evict,
    on_access,
)
from .retrieval import DEFAULT_EMBED_DIM, ChunkRecord, VectorIndex, embed, ingest
from .workload import read_corpus_jsonl

SCHEMA_VERSION = 1

INDEX_FILE = "index.json"
STATS_FILE = "stats.json"

DEFAULT_MODEL = ModelConfig(
    n_layers=2, n_heads=2, head_dim=8, vocab_size=256, ffn_dim=64, seed=0,
    max_position=4096,
)


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = DEFAULT_MODEL
    store_dir: str = "matkv-store"
    chunk_size: int = 128
    top_k: int = 4
    positioning: PositioningRule = PositioningRule.AFTER_SUM
    admission: AdmissionPolicy = field(default_factory=AdmissionPolicy)
    eviction: EvictionPolicy = field(default_factory=EvictionPolicy)
    cost_params: CostParams = field(default_factory=CostParams)
    embed_dim: int = DEFAULT_EMBED_DIM
    load_parallelism: int = 4
    max_new_tokens: int = 8
    query_len: int = 12
    out_format: str = "json"
    simulated: SimulatedTimes | None = None

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigurationError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.top_k < 1:
            raise ConfigurationError(f"top_k must be >= 1, got {self.top_k}")
        if self.out_format not in ("json", "csv"):
            raise ConfigurationError(f"out_format must be json or csv, got {self.out_format!r}")

    @classmethod
    def from_json_dict(cls, data: dict) -> "EngineConfig":
        try:
            kwargs = {}
            if "model" in data:
                kwargs["model"] = ModelConfig(**{k: int(v) for k, v in data["model"].items()})
            for key in ("store_dir", "out_format"):
                if key in data:
                    kwargs[key] = str(data[key])
            for key in ("chunk_size", "top_k", "embed_dim", "load_parallelism",
                        "max_new_tokens", "query_len"):
                if key in data:
                    kwargs[key] = int(data[key])
            if "positioning" in data:
                kwargs["positioning"] = PositioningRule(data["positioning"])
            if "admission" in data:
                block = data["admission"]
                kwargs["admission"] = AdmissionPolicy(
                    kind=AdmissionKind(block.get("kind", "eager-all")),
                    threshold_interval_s=block.get("threshold_interval_s"),
                )
            if "eviction" in data:
                block = data["eviction"]
                kwargs["eviction"] = EvictionPolicy(
                    kind=EvictionKind(block.get("kind", "none")),
                    capacity_bytes=block.get("capacity_bytes"),
                )
            if "cost_params" in data:
                kwargs["cost_params"] = CostParams.from_json_dict(data["cost_params"])
            if "simulated" in data and data["simulated"] is not None:
                kwargs["simulated"] = SimulatedTimes(
                    load_s=data["simulated"]["load_s"],
                    compute_s=data["simulated"]["compute_s"],
                )
            return cls(**kwargs)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"invalid engine config: {exc}") from exc

    def with_seed(self, seed: int) -> "EngineConfig":
        return replace(self, model=replace(self.model, seed=seed))


class Engine:
    """One model + store + index + policy state, ready to serve."""

    def __init__(self, config: EngineConfig, clock=time.time):
        self.config = config
        self.clock = clock
        self.model: Model = build_model(config.model)
        self.store = KvStore(config.store_dir, config_hash=config.model.config_hash())
        self.index = VectorIndex(embed_dim=config.embed_dim)
        self.stats = AccessStats()
        self._load_sidecars()

    # -- persistence ----------------------------------------------------

    def _sidecar(self, name: str) -> Path:
        return Path(self.config.store_dir) / name

    def _load_sidecars(self) -> None:
        index_path = self._sidecar(INDEX_FILE)
        if index_path.is_file():
            data = json.loads(index_path.read_text())
            for entry in data.get("records", []):
                tokens = tuple(int(t) for t in entry["tokens"])
                self.index.add(ChunkRecord(
                    id=entry["id"],
                    tokens=tokens,
                    embedding=embed(tokens, self.config.embed_dim),
                    materialized=bool(entry["materialized"]),
                ))
        stats_path = self._sidecar(STATS_FILE)
        if stats_path.is_file():
            self.stats = AccessStats.from_json_dict(json.loads(stats_path.read_text()))

    def save(self) -> None:
        records = [
            {"id": r.id, "tokens": list(r.tokens), "materialized": r.materialized}
            for r in sorted(self.index.records(), key=lambda r: r.id)
        ]
        self._sidecar(INDEX_FILE).write_text(
            json.dumps({"schema_version": SCHEMA_VERSION, "records": records})
        )
        self._sidecar(STATS_FILE).write_text(json.dumps(self.stats.to_json_dict()))

    # -- operations -----------------------------------------------------

    def ingest_corpus(self, corpus_path: str | Path) -> dict:
        """Ingest a JSONL corpus; returns chunk/materialization/byte counts."""
        docs = read_corpus_jsonl(corpus_path)
        total_chunks = 0
        for doc in docs:
            chunk_ids = ingest(
                self.index, self.store, self.model, self.config.admission,
                doc["tokens"], doc_id=doc["id"], chunk_size=self.config.chunk_size,
            )
            total_chunks += len(chunk_ids)
        evicted = maybe_evict(self.config.eviction, self.stats, self.store, self.index)
        self.save()
        stats = self.store.stats()
        return {
            "chunks": total_chunks,
            "materialized": stats.files,
            "bytes": stats.bytes,
            "evicted": len(evicted),
        }

    def resolve_request(self, query_tokens, k: int | None = None,
                        max_new_tokens: int | None = None) -> Request:
        result = self.index.search(query_tokens, k or self.config.top_k)
        return Request(
            query_tokens=tuple(query_tokens),
            retrieved_ids=result.ids,
            max_new_tokens=max_new_tokens or self.config.max_new_tokens,
        )

    def serve(self, request: Request, mode: Mode) -> InferenceOutput:
        """Serve a resolved request, applying admission and eviction policy.

        A single request has no batch to overlap with, so ``MATKV_OVERLAP``
        runs the plain cache-reuse path; the output still reports the
        requested mode.
        """
        if mode is Mode.VANILLA:
            return run_vanilla(self.model, self.index, request)
        now = self.clock()
        admit = {}
        for chunk_id in request.retrieved_ids:
            decision = on_access(self.config.admission, self.stats, chunk_id, now)
            admit[chunk_id] = decision is AccessDecision.MATERIALIZE
        output = run_matkv(
            self.model, self.store, request,
            positioning=self.config.positioning,
            records=self.index,
            materialize_cold=admit,
            parallelism=self.config.load_parallelism,
        )
        if mode is not output.mode:
            output = replace(output, mode=mode)
        for chunk_id, allowed in admit.items():
            if allowed and self.store.exists(chunk_id):
                record = self.index.get(chunk_id)
                if record is not None:
                    record.materialized = True
        maybe_evict(self.config.eviction, self.stats, self.store, self.index)
        return output

    def query(self, query_tokens, mode: Mode, k: int | None = None,
              max_new_tokens: int | None = None) -> InferenceOutput:
        request = self.resolve_request(query_tokens, k, max_new_tokens)
        output = self.serve(request, mode)
        self.save()
        return output
