"""MatKV: trade GPU prefill compute for storage by materializing per-document
KV caches on disk and reusing them at retrieval time."""

__version__ = "0.1.0"
