"""Deterministic desk-scale decoder-only transformer exposing its KV cache.

The model is the ground-truth oracle for every cache-equivalence property in
this project, so reproducibility is treated as a hard contract rather than a
nice-to-have:

* Weights are a pure function of the config (seeded per-tensor PRNG), so two
  builds of the same config are bitwise identical.
* Every dense operation is evaluated one position at a time as a float32
  vector-matrix product. Batched prefill and token-by-token decoding
  therefore execute the exact same arithmetic in the exact same order, which
  makes their outputs bitwise equal instead of merely close. (NumPy dispatches
  (n, d) @ (d, k) and (d,) @ (d, k) to different BLAS kernels whose results
  differ in the last bits, so the batch path must not vectorize across
  positions.)
* Softmax subtracts the running max, attention is reduced per head with a
  fixed summation order, and greedy argmax breaks ties toward the lowest
  token id.

Architecture: pre-norm decoder blocks, RMS normalization, rotary position
encoding on Q and K, GELU feed-forward, untied output projection. Cached keys
are stored post-rotation, so a cache is only ever valid for the positions it
was computed at; concatenating caches preserves each constituent's rotations.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    CapacityError,
    ConfigurationError,
    IncompatibilityError,
    PreconditionError,
)

_WEIGHT_SCALE = 0.08
_RMS_EPS = np.float32(1e-5)
_GELU_C0 = np.float32(0.7978845608028654)  # sqrt(2 / pi)
_GELU_C1 = np.float32(0.044715)
_ROPE_THETA = 10000.0


def _derived_rng(seed: int, label: str) -> np.random.Generator:
    """Split a named, platform-independent PRNG stream off a 64-bit seed."""
    digest = hashlib.blake2b(
        f"{seed:#x}:{label}".encode("utf-8"), digest_size=16
    ).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions, seed, and positional range of the toy transformer."""

    n_layers: int
    n_heads: int
    head_dim: int
    vocab_size: int
    ffn_dim: int
    seed: int = 0
    max_position: int = 4096

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "ffn_dim",
                     "max_position"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.head_dim % 2 != 0:
            raise ConfigurationError(
                f"head_dim must be even for rotary encoding, got {self.head_dim}"
            )
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim

    def config_hash(self) -> int:
        """64-bit digest of all fields; equal configs hash equal."""
        canonical = (
            f"v1|layers={self.n_layers}|heads={self.n_heads}|hd={self.head_dim}"
            f"|vocab={self.vocab_size}|ffn={self.ffn_dim}|seed={self.seed}"
            f"|maxpos={self.max_position}"
        )
        digest = hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class KvCache:
    """Per-layer key/value tensors for a span of tokens.

    ``keys`` and ``values`` have shape (n_layers, n_tokens, n_heads, head_dim)
    in float32. Keys are stored after rotary encoding. ``base_position`` is
    the rotary position assigned to the first cached token; materialized
    document caches always use 0.
    """

    config_hash: int
    keys: np.ndarray
    values: np.ndarray
    base_position: int = 0

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[1]

    def validate(self) -> None:
        if self.keys.shape != self.values.shape:
            raise PreconditionError(
                f"keys shape {self.keys.shape} != values shape {self.values.shape}"
            )
        if self.keys.dtype != np.float32 or self.values.dtype != np.float32:
            raise PreconditionError("cache tensors must be float32")
        if self.keys.ndim != 4:
            raise PreconditionError(f"cache tensors must be 4-D, got {self.keys.ndim}-D")
        if self.base_position < 0:
            raise PreconditionError("base_position must be non-negative")
        if self.n_tokens and not (
            np.isfinite(self.keys).all() and np.isfinite(self.values).all()
        ):
            raise PreconditionError("cache contains non-finite values")


TokenSequence = Sequence[int]


@dataclass(frozen=True)
class Model:
    """An immutable built model: config plus seeded weights and rope tables."""

    config: ModelConfig
    weights: dict = field(repr=False)
    rope_cos: np.ndarray = field(repr=False)
    rope_sin: np.ndarray = field(repr=False)

    def empty_cache(self) -> KvCache:
        cfg = self.config
        shape = (cfg.n_layers, 0, cfg.n_heads, cfg.head_dim)
        return KvCache(
            config_hash=cfg.config_hash(),
            keys=np.zeros(shape, dtype=np.float32),
            values=np.zeros(shape, dtype=np.float32),
            base_position=0,
        )


def build_model(config: ModelConfig) -> Model:
    """Build a model whose weights are a pure function of the config."""
    d = config.hidden_dim
    weights = {}

    def uniform(name, shape):
        rng = _derived_rng(config.seed, name)
        weights[name] = rng.uniform(-_WEIGHT_SCALE, _WEIGHT_SCALE, size=shape).astype(
            np.float32
        )

    uniform("embed", (config.vocab_size, d))
    for layer in range(config.n_layers):
        for proj in ("wq", "wk", "wv", "wo"):
            uniform(f"layer{layer}.{proj}", (d, d))
        uniform(f"layer{layer}.ffn_in", (d, config.ffn_dim))
        uniform(f"layer{layer}.ffn_out", (config.ffn_dim, d))
        # Norm gains start at identity; drawing them from the weight
        # distribution would crush the residual stream at this scale.
        weights[f"layer{layer}.attn_norm"] = np.ones(d, dtype=np.float32)
        weights[f"layer{layer}.ffn_norm"] = np.ones(d, dtype=np.float32)
    weights["final_norm"] = np.ones(d, dtype=np.float32)
    uniform("lm_head", (d, config.vocab_size))

    half = config.head_dim // 2
    inv_freq = _ROPE_THETA ** (-np.arange(0, half, dtype=np.float64) * 2.0 / config.head_dim)
    angles = np.arange(config.max_position, dtype=np.float64)[:, None] * inv_freq[None, :]
    rope_cos = np.cos(angles).astype(np.float32)
    rope_sin = np.sin(angles).astype(np.float32)

    return Model(config=config, weights=weights, rope_cos=rope_cos, rope_sin=rope_sin)


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    mean_sq = np.mean(x * x)
    inv = np.float32(1.0) / np.sqrt(mean_sq + _RMS_EPS)
    return x * inv * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def _rotate(vec: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = vec[0::2]
    odd = vec[1::2]
    out = np.empty_like(vec)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


class _SeqState:
    """Mutable per-(layer, head) K/V buffers used while running tokens.

    Buffers are contiguous (capacity, head_dim) arrays so that the growing
    key matrix seen by attention is always a plain leading-axis slice; this
    keeps the BLAS call identical no matter how the cache was accumulated.
    """

    def __init__(self, model: Model, past: KvCache, extra_capacity: int):
        cfg = model.config
        self.n = past.n_tokens
        capacity = self.n + extra_capacity
        self.keys = [
            [np.empty((capacity, cfg.head_dim), dtype=np.float32) for _ in range(cfg.n_heads)]
            for _ in range(cfg.n_layers)
        ]
        self.values = [
            [np.empty((capacity, cfg.head_dim), dtype=np.float32) for _ in range(cfg.n_heads)]
            for _ in range(cfg.n_layers)
        ]
        if self.n:
            for layer in range(cfg.n_layers):
                for head in range(cfg.n_heads):
                    self.keys[layer][head][: self.n] = past.keys[layer, :, head, :]
                    self.values[layer][head][: self.n] = past.values[layer, :, head, :]

    def export(self, model: Model, base_position: int) -> KvCache:
        cfg = model.config
        keys = np.empty((cfg.n_layers, self.n, cfg.n_heads, cfg.head_dim), dtype=np.float32)
        values = np.empty_like(keys)
        for layer in range(cfg.n_layers):
            for head in range(cfg.n_heads):
                keys[layer, :, head, :] = self.keys[layer][head][: self.n]
                values[layer, :, head, :] = self.values[layer][head][: self.n]
        return KvCache(
            config_hash=cfg.config_hash(),
            keys=keys,
            values=values,
            base_position=base_position,
        )


def _forward_token(model: Model, state: _SeqState, token: int, position: int,
                   want_logits: bool) -> np.ndarray | None:
    """Run one token through all layers, appending its K/V to ``state``.

    The token attends to every entry already in ``state`` plus itself.
    Returns final-position logits when requested, else None (skipping the
    vocab projection for positions nobody reads keeps long prefills cheap).
    """
    cfg = model.config
    w = model.weights
    hd = cfg.head_dim
    scale = np.float32(1.0 / math.sqrt(hd))
    cos = model.rope_cos[position]
    sin = model.rope_sin[position]

    x = w["embed"][token].copy()
    new_n = state.n + 1
    for layer in range(cfg.n_layers):
        normed = _rms_norm(x, w[f"layer{layer}.attn_norm"])
        q = normed @ w[f"layer{layer}.wq"]
        k = normed @ w[f"layer{layer}.wk"]
        v = normed @ w[f"layer{layer}.wv"]

        context = np.empty(cfg.hidden_dim, dtype=np.float32)
        for head in range(cfg.n_heads):
            lo = head * hd
            q_h = _rotate(q[lo : lo + hd], cos, sin)
            k_h = _rotate(k[lo : lo + hd], cos, sin)
            k_buf = state.keys[layer][head]
            v_buf = state.values[layer][head]
            k_buf[state.n] = k_h
            v_buf[state.n] = v[lo : lo + hd]
            scores = (k_buf[:new_n] @ q_h) * scale
            attn = _softmax(scores)
            context[lo : lo + hd] = attn @ v_buf[:new_n]
        x = x + context @ w[f"layer{layer}.wo"]

        normed = _rms_norm(x, w[f"layer{layer}.ffn_norm"])
        x = x + _gelu(normed @ w[f"layer{layer}.ffn_in"]) @ w[f"layer{layer}.ffn_out"]

    state.n = new_n
    if not want_logits:
        return None
    return _rms_norm(x, w["final_norm"]) @ w["lm_head"]


def _check_tokens(model: Model, tokens: TokenSequence) -> list[int]:
    ids = [int(t) for t in tokens]
    for t in ids:
        if not 0 <= t < model.config.vocab_size:
            raise PreconditionError(
                f"token {t} outside vocabulary [0, {model.config.vocab_size})"
            )
    return ids


def _check_positions(model: Model, base_position: int, n_tokens: int) -> None:
    if base_position < 0:
        raise PreconditionError(f"base_position must be non-negative, got {base_position}")
    if base_position + n_tokens > model.config.max_position:
        raise CapacityError(
            f"positions {base_position}..{base_position + n_tokens - 1} exceed "
            f"max_position {model.config.max_position}"
        )


def _check_past(model: Model, past: KvCache) -> KvCache:
    cfg = model.config
    if past.n_tokens == 0:
        return model.empty_cache()
    if past.config_hash != cfg.config_hash():
        raise IncompatibilityError(
            f"cache config_hash {past.config_hash:#x} does not match model "
            f"{cfg.config_hash():#x}"
        )
    expected = (cfg.n_layers, past.n_tokens, cfg.n_heads, cfg.head_dim)
    if past.keys.shape != expected:
        raise IncompatibilityError(
            f"cache shape {past.keys.shape} does not match model shape {expected}"
        )
    return past


def prefill(
    model: Model,
    tokens: TokenSequence,
    base_position: int = 0,
    past: KvCache | None = None,
) -> tuple[KvCache, np.ndarray]:
    """Run ``tokens`` at positions base_position.. and return (cache, logits).

    With ``past`` given, the new tokens attend to the past entries as well
    (the retrieval-time "subprefill" over loaded document caches); the
    returned cache is the past extended by the new tokens. Logits are for the
    final input position. Causal within the new span: token i attends to
    past + new tokens 0..i.
    """
    ids = _check_tokens(model, tokens)
    if not ids:
        raise PreconditionError("prefill requires a non-empty token sequence")
    _check_positions(model, base_position, len(ids))
    past = _check_past(model, past) if past is not None else model.empty_cache()

    state = _SeqState(model, past, extra_capacity=len(ids))
    logits = None
    for offset, token in enumerate(ids):
        last = offset == len(ids) - 1
        logits = _forward_token(model, state, token, base_position + offset, want_logits=last)
    cache = state.export(model, past.base_position if past.n_tokens else base_position)
    return cache, logits


def decode_step(
    model: Model,
    past: KvCache,
    token: int,
    position: int,
) -> tuple[KvCache, np.ndarray]:
    """Extend ``past`` by one token and return (new cache, next-token logits)."""
    cache, logits = prefill(model, [token], position, past=past)
    return cache, logits


def greedy_token(logits: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest token id."""
    return int(np.argmax(logits))


def concat_caches(caches: Sequence[KvCache]) -> KvCache:
    """Stack caches along the token axis in list order.

    Each constituent keeps its original rotary positions (keys are stored
    post-rotation and are not re-rotated), which is exactly the semantics of
    reusing independently prefetched per-document caches: no cross-document
    attention existed when they were computed, and none is introduced here.
    Zero-token caches are compatible with everything.
    """
    non_empty = [c for c in caches if c.n_tokens > 0]
    if not non_empty:
        if caches:
            return caches[0]
        empty = np.zeros((0, 0, 0, 0), dtype=np.float32)
        return KvCache(config_hash=0, keys=empty, values=empty, base_position=0)
    first = non_empty[0]
    for other in non_empty[1:]:
        if other.config_hash != first.config_hash:
            raise IncompatibilityError(
                f"cannot concatenate caches with config hashes "
                f"{first.config_hash:#x} and {other.config_hash:#x}"
            )
        same_layout = (
            other.keys.shape[0] == first.keys.shape[0]
            and other.keys.shape[2:] == first.keys.shape[2:]
        )
        if not same_layout:
            raise IncompatibilityError(
                f"cannot concatenate caches with shapes {first.keys.shape} "
                f"and {other.keys.shape}"
            )
    keys = np.concatenate([c.keys for c in non_empty], axis=1)
    values = np.concatenate([c.values for c in non_empty], axis=1)
    return KvCache(
        config_hash=first.config_hash,
        keys=keys,
        values=values,
        base_position=first.base_position,
    )
