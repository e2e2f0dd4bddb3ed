"""Inference modes and the two-stage batch pipeline.

Three ways to serve a retrieval-augmented request:

* ``VANILLA``: concatenate retrieved document tokens and the query, prefill
  everything from position 0 (full cross-document self-attention), decode.
* ``MATKV``: load the documents' materialized caches, stack them in retrieval
  order, prefill only the query on top (the "subprefill"), decode. Cold
  chunks fall back to prefill-on-the-fly, optionally materializing.
* ``MATKV_OVERLAP``: same arithmetic as ``MATKV``, but batches flow through a
  two-worker pipeline where the loader prepares batch i+1 while the computer
  works on batch i. Scheduling never changes the produced tokens, only the
  makespan.

Timing is wall-clock (monotonic). In overlap mode each stage's time is
attributed to the stage that did the work, and the makespan is reported
separately. ``SimulatedTimes`` pads stage durations to configured values so
pipeline behavior can be tested independently of machine speed.
"""

from __future__ import annotations

import enum
import queue
import threading
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ChunkNotFoundError, PreconditionError
from .kvstore import KvStore
from .model import KvCache, Model, concat_caches, decode_step, greedy_token, prefill


class Mode(enum.Enum):
    VANILLA = "vanilla"
    MATKV = "matkv"
    MATKV_OVERLAP = "matkv-overlap"


class PositioningRule(enum.Enum):
    """Where query rotary positions start when documents all start at 0.

    ``AFTER_SUM`` places the query after the combined document length, which
    reproduces the vanilla layout's query positions. ``AFTER_MAX`` places it
    after the longest single document. With one retrieved document the two
    coincide (and coincide with vanilla).
    """

    AFTER_SUM = "after-sum"
    AFTER_MAX = "after-max"


@dataclass(frozen=True)
class Request:
    query_tokens: tuple
    retrieved_ids: tuple = ()
    max_new_tokens: int = 8

    def __post_init__(self):
        object.__setattr__(self, "query_tokens", tuple(int(t) for t in self.query_tokens))
        object.__setattr__(self, "retrieved_ids", tuple(self.retrieved_ids))
        if not self.query_tokens:
            raise PreconditionError("request needs a non-empty query")
        if self.max_new_tokens < 1:
            raise PreconditionError(
                f"max_new_tokens must be >= 1, got {self.max_new_tokens}"
            )


@dataclass(frozen=True)
class LatencyBreakdown:
    load_s: float = 0.0
    prefill_s: float = 0.0
    decode_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.load_s + self.prefill_s + self.decode_s


@dataclass(frozen=True)
class InferenceOutput:
    generated: tuple
    breakdown: LatencyBreakdown
    mode: Mode


def _tokens_of(records, chunk_id: str) -> tuple:
    """Resolve a chunk id to its token sequence via an index or a mapping."""
    if records is None:
        raise ChunkNotFoundError(
            f"chunk {chunk_id!r} is not materialized and no token source was given"
        )
    if hasattr(records, "tokens_of"):
        return tuple(records.tokens_of(chunk_id))
    if isinstance(records, Mapping):
        try:
            return tuple(records[chunk_id])
        except KeyError:
            raise ChunkNotFoundError(f"unknown chunk id {chunk_id!r}") from None
    raise PreconditionError(f"unsupported token source {type(records)!r}")


def _greedy_decode(model: Model, cache: KvCache, logits: np.ndarray,
                   next_position: int, max_new_tokens: int) -> list[int]:
    generated = []
    for step in range(max_new_tokens):
        token = greedy_token(logits)
        generated.append(token)
        if step + 1 == max_new_tokens:
            break
        cache, logits = decode_step(model, cache, token, next_position + step)
    return generated


def run_vanilla(model: Model, records, request: Request) -> InferenceOutput:
    """Full-prefill baseline: documents and query share one causal context."""
    doc_tokens: list[int] = []
    for chunk_id in request.retrieved_ids:
        doc_tokens.extend(_tokens_of(records, chunk_id))
    full = doc_tokens + list(request.query_tokens)

    start = time.perf_counter()
    cache, logits = prefill(model, full, 0)
    prefill_s = time.perf_counter() - start

    start = time.perf_counter()
    generated = _greedy_decode(model, cache, logits, len(full), request.max_new_tokens)
    decode_s = time.perf_counter() - start

    return InferenceOutput(
        generated=tuple(generated),
        breakdown=LatencyBreakdown(load_s=0.0, prefill_s=prefill_s, decode_s=decode_s),
        mode=Mode.VANILLA,
    )


@dataclass
class _PreparedRequest:
    """Stage-A product: document caches in retrieval order plus stage timings."""

    request: Request
    doc_caches: list
    load_s: float = 0.0
    cold_prefill_s: float = 0.0


def _should_materialize(materialize_cold, chunk_id: str) -> bool:
    if callable(materialize_cold):
        return bool(materialize_cold(chunk_id))
    if isinstance(materialize_cold, Mapping):
        return bool(materialize_cold.get(chunk_id, True))
    return bool(materialize_cold)


def _prepare_request(
    model: Model,
    store: KvStore,
    records,
    request: Request,
    materialize_cold=True,
    parallelism: int = 4,
) -> _PreparedRequest:
    """Load materialized caches; recompute cold chunks on the fly."""
    warm = [cid for cid in request.retrieved_ids if store.exists(cid)]
    start = time.perf_counter()
    loaded = dict(zip(warm, store.load_many(warm, parallelism=parallelism)))
    load_s = time.perf_counter() - start

    cold_prefill_s = 0.0
    doc_caches = []
    for chunk_id in request.retrieved_ids:
        cache = loaded.get(chunk_id)
        if cache is None:
            tokens = _tokens_of(records, chunk_id)
            start = time.perf_counter()
            cache, _ = prefill(model, tokens, 0)
            if _should_materialize(materialize_cold, chunk_id):
                store.store_kv(chunk_id, cache)
            cold_prefill_s += time.perf_counter() - start
        doc_caches.append(cache)
    return _PreparedRequest(
        request=request, doc_caches=doc_caches, load_s=load_s,
        cold_prefill_s=cold_prefill_s,
    )


def query_base_position(doc_caches: Sequence[KvCache], rule: PositioningRule) -> int:
    lengths = [cache.n_tokens for cache in doc_caches]
    if rule is PositioningRule.AFTER_SUM:
        return sum(lengths)
    return max(lengths, default=0)


def _compute_request(
    model: Model,
    prepared: _PreparedRequest,
    positioning: PositioningRule,
    mode: Mode,
) -> InferenceOutput:
    """Stage B: query subprefill over the stacked caches, then greedy decode."""
    request = prepared.request
    past = concat_caches(prepared.doc_caches) if prepared.doc_caches else None
    base = query_base_position(prepared.doc_caches, positioning)

    start = time.perf_counter()
    cache, logits = prefill(model, request.query_tokens, base, past=past)
    prefill_s = time.perf_counter() - start

    start = time.perf_counter()
    generated = _greedy_decode(
        model, cache, logits, base + len(request.query_tokens), request.max_new_tokens
    )
    decode_s = time.perf_counter() - start

    return InferenceOutput(
        generated=tuple(generated),
        breakdown=LatencyBreakdown(
            load_s=prepared.load_s,
            prefill_s=prepared.cold_prefill_s + prefill_s,
            decode_s=decode_s,
        ),
        mode=mode,
    )


def run_matkv(
    model: Model,
    store: KvStore,
    request: Request,
    positioning: PositioningRule = PositioningRule.AFTER_SUM,
    records=None,
    materialize_cold=True,
    parallelism: int = 4,
) -> InferenceOutput:
    """Serve one request from materialized caches (cold chunks recomputed)."""
    prepared = _prepare_request(
        model, store, records, request, materialize_cold, parallelism
    )
    return _compute_request(model, prepared, positioning, Mode.MATKV)


# --- two-stage batch pipeline ------------------------------------------------


@dataclass(frozen=True)
class SimulatedTimes:
    """Per-batch stage durations; each stage is padded up to its figure."""

    load_s: tuple
    compute_s: tuple

    def __post_init__(self):
        object.__setattr__(self, "load_s", tuple(float(x) for x in self.load_s))
        object.__setattr__(self, "compute_s", tuple(float(x) for x in self.compute_s))
        if len(self.load_s) != len(self.compute_s):
            raise PreconditionError("load_s and compute_s must have equal lengths")
        if any(x < 0 for x in self.load_s + self.compute_s):
            raise PreconditionError("simulated stage times must be non-negative")


@dataclass(frozen=True)
class BatchResult:
    outputs: tuple
    load_stage_s: float
    compute_stage_s: float

    @property
    def breakdown(self) -> LatencyBreakdown:
        return LatencyBreakdown(
            load_s=sum(o.breakdown.load_s for o in self.outputs),
            prefill_s=sum(o.breakdown.prefill_s for o in self.outputs),
            decode_s=sum(o.breakdown.decode_s for o in self.outputs),
        )


@dataclass(frozen=True)
class BatchReport:
    mode: Mode
    overlapped: bool
    batches: tuple
    makespan_s: float


def _pad_stage(stage_start: float, target_s: float | None) -> None:
    if target_s is None:
        return
    remaining = target_s - (time.perf_counter() - stage_start)
    if remaining > 0:
        time.sleep(remaining)


def run_batches(
    model: Model,
    store: KvStore,
    records,
    batches: Sequence[Sequence[Request]],
    mode: Mode,
    positioning: PositioningRule = PositioningRule.AFTER_SUM,
    simulated: SimulatedTimes | None = None,
    parallelism: int = 4,
    materialize_cold=True,
) -> BatchReport:
    """Run batches serialized or overlapped; tokens are mode-invariant.

    Serialized execution runs load_i then compute_i strictly in order.
    Overlap execution (``MATKV_OVERLAP``) runs the load stage of batch i+1
    concurrently with the compute stage of batch i, joined by a handoff
    queue of depth 1.
    """
    if not batches:
        raise PreconditionError("run_batches requires at least one batch")
    batches = [list(batch) for batch in batches]
    if simulated is not None and len(simulated.load_s) != len(batches):
        raise PreconditionError(
            f"simulated stage times cover {len(simulated.load_s)} batches "
            f"but {len(batches)} were given"
        )

    def load_stage(index: int) -> tuple[list[_PreparedRequest], float]:
        stage_start = time.perf_counter()
        if mode is Mode.VANILLA:
            # no load stage: tokens are prefilled from scratch in compute
            prepared = [
                _PreparedRequest(request=request, doc_caches=[])
                for request in batches[index]
            ]
        else:
            prepared = [
                _prepare_request(model, store, records, request,
                                 materialize_cold, parallelism)
                for request in batches[index]
            ]
            _pad_stage(stage_start, simulated.load_s[index] if simulated else None)
        return prepared, time.perf_counter() - stage_start

    def compute_stage(index: int, prepared: list[_PreparedRequest]) -> tuple[list, float]:
        stage_start = time.perf_counter()
        if mode is Mode.VANILLA:
            outputs = [run_vanilla(model, records, item.request) for item in prepared]
        else:
            outputs = [
                _compute_request(model, item, positioning, mode) for item in prepared
            ]
        _pad_stage(stage_start, simulated.compute_s[index] if simulated else None)
        return outputs, time.perf_counter() - stage_start

    results: list[BatchResult] = []
    run_start = time.perf_counter()

    if mode is Mode.MATKV_OVERLAP:
        handoff: queue.Queue = queue.Queue(maxsize=1)
        cancel = threading.Event()

        def hand_over(item) -> None:
            # poll so the loader can exit if the consumer died mid-run
            while not cancel.is_set():
                try:
                    handoff.put(item, timeout=0.05)
                    return
                except queue.Full:
                    continue

        def producer():
            try:
                for index in range(len(batches)):
                    if cancel.is_set():
                        return
                    hand_over((index, *load_stage(index)))
            except BaseException as exc:  # surfaced by the consumer
                hand_over(exc)

        loader = threading.Thread(target=producer, name="matkv-loader", daemon=True)
        loader.start()
        try:
            for _ in range(len(batches)):
                item = handoff.get()
                if isinstance(item, BaseException):
                    raise item
                index, prepared, load_stage_s = item
                outputs, compute_stage_s = compute_stage(index, prepared)
                results.append(BatchResult(
                    outputs=tuple(outputs),
                    load_stage_s=load_stage_s,
                    compute_stage_s=compute_stage_s,
                ))
        finally:
            cancel.set()
            loader.join()
    else:
        for index in range(len(batches)):
            prepared, load_stage_s = load_stage(index)
            outputs, compute_stage_s = compute_stage(index, prepared)
            results.append(BatchResult(
                outputs=tuple(outputs),
                load_stage_s=load_stage_s,
                compute_stage_s=compute_stage_s,
            ))

    return BatchReport(
        mode=mode,
        overlapped=mode is Mode.MATKV_OVERLAP,
        batches=tuple(results),
        makespan_s=time.perf_counter() - run_start,
    )


def predict_makespan(a: Sequence[float], b: Sequence[float], overlapped: bool) -> float:
    """Makespan of n batches with load times ``a`` and compute times ``b``.

    Serialized is the plain sum. Overlapped follows the two-stage pipeline
    recurrence: loads run back to back, and compute of batch i starts once
    both its load and the previous compute have finished.
    """
    if len(a) != len(b):
        raise PreconditionError(f"stage vectors differ in length: {len(a)} vs {len(b)}")
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    if any(x < 0 for x in a + b):
        raise PreconditionError("stage times must be non-negative")
    if not a:
        return 0.0
    if not overlapped:
        return sum(a) + sum(b)
    finish_a = 0.0
    finish_b = 0.0
    for a_i, b_i in zip(a, b):
        finish_a += a_i
        finish_b = max(finish_a, finish_b) + b_i
    return finish_b
