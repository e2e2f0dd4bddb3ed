"""Exception hierarchy shared across the engine."""


class MatKVError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(MatKVError):
    """A model or engine configuration violates its invariants."""


class PreconditionError(MatKVError):
    """An operation was called with arguments outside its contract."""


class CapacityError(MatKVError):
    """A token position exceeds the model's positional range."""


class IncompatibilityError(MatKVError):
    """Caches or files built against a different model configuration."""


class StorageError(MatKVError):
    """An I/O failure in the on-disk KV store."""


class ChunkNotFoundError(StorageError):
    """No materialized cache exists for the requested chunk (cold start)."""


class CorruptionError(StorageError):
    """A stored cache failed its checksum verification."""


class FormatError(StorageError):
    """A stored file is not a recognizable cache file."""


class BatchLoadError(StorageError):
    """One or more chunks in a batched load failed.

    Carries a mapping of chunk id to the underlying exception so callers
    can report exactly which loads went wrong.
    """

    def __init__(self, failures):
        self.failures = dict(failures)
        ids = ", ".join(sorted(self.failures))
        super().__init__(f"failed to load chunk(s): {ids}")


class IngestError(MatKVError):
    """Ingestion aborted partway; reports which chunks were committed.

    ``committed_ids`` lists chunks fully registered (and materialized when
    the policy asked for it) before the failure; ``failed_id`` is the chunk
    whose store operation raised.
    """

    def __init__(self, committed_ids, failed_id, cause):
        self.committed_ids = list(committed_ids)
        self.failed_id = failed_id
        self.cause = cause
        super().__init__(
            f"ingest aborted at chunk {failed_id!r} after committing "
            f"{len(self.committed_ids)} chunk(s): {cause}"
        )
