import numpy as np
import pytest

from matkv.errors import (
    CapacityError,
    ConfigurationError,
    IncompatibilityError,
    PreconditionError,
)
from matkv.model import (
    KvCache,
    ModelConfig,
    build_model,
    concat_caches,
    decode_step,
    greedy_token,
    prefill,
)

from conftest import TINY


def test_equal_configs_build_identical_weights():
    cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=8, vocab_size=64, ffn_dim=16, seed=7)
    m1, m2 = build_model(cfg), build_model(cfg)
    assert set(m1.weights) == set(m2.weights)
    for name in m1.weights:
        assert np.array_equal(m1.weights[name], m2.weights[name])


def test_identical_logits_across_builds(tiny_model):
    other = build_model(TINY)
    _, l1 = prefill(tiny_model, [3, 250, 17], 0)
    _, l2 = prefill(other, [3, 250, 17], 0)
    assert np.array_equal(l1, l2)


def test_different_seeds_differ():
    base = ModelConfig(n_layers=1, n_heads=2, head_dim=4, vocab_size=32, ffn_dim=8, seed=1)
    m1 = build_model(base)
    m2 = build_model(ModelConfig(n_layers=1, n_heads=2, head_dim=4, vocab_size=32,
                                 ffn_dim=8, seed=2))
    assert not np.array_equal(m1.weights["embed"], m2.weights["embed"])
    assert base.config_hash() != m2.config.config_hash()


@pytest.mark.parametrize("bad", [
    dict(n_layers=2, n_heads=2, head_dim=3, vocab_size=64, ffn_dim=16),  # odd head_dim
    dict(n_layers=0, n_heads=2, head_dim=4, vocab_size=64, ffn_dim=16),
    dict(n_layers=2, n_heads=2, head_dim=4, vocab_size=0, ffn_dim=16),
    dict(n_layers=2, n_heads=2, head_dim=4, vocab_size=64, ffn_dim=-1),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigurationError):
        ModelConfig(**bad)


def test_config_hash_pure_function_of_fields():
    a = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=64, ffn_dim=16, seed=9)
    b = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=64, ffn_dim=16, seed=9)
    assert a.config_hash() == b.config_hash()
    assert 0 <= a.config_hash() < 2**64


def test_prefill_cache_shape():
    cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=64, ffn_dim=16, seed=1)
    model = build_model(cfg)
    cache, logits = prefill(model, [5], 0)
    assert cache.keys.shape == (2, 1, 2, 4)
    assert cache.values.shape == (2, 1, 2, 4)
    assert cache.n_tokens == 1
    assert logits.shape == (64,)


def test_prefill_preconditions(tiny_model):
    with pytest.raises(PreconditionError):
        prefill(tiny_model, [], 0)
    with pytest.raises(PreconditionError):
        prefill(tiny_model, [9999], 0)
    with pytest.raises(CapacityError):
        prefill(tiny_model, [1, 2, 3], TINY.max_position - 1)
    with pytest.raises(PreconditionError):
        prefill(tiny_model, [1], -1)


def test_incremental_equals_batch_sampled(tiny_model, rng):
    """Token-by-token decoding reproduces batch prefill logits bitwise."""
    for _ in range(50):
        length = int(rng.integers(1, 9))
        seq = [int(t) for t in rng.integers(0, 16, size=length)]
        cache = tiny_model.empty_cache()
        for t, token in enumerate(seq):
            cache, logits_step = decode_step(tiny_model, cache, token, t)
            _, logits_batch = prefill(tiny_model, seq[: t + 1], 0)
            assert np.array_equal(logits_step, logits_batch)
        batch_cache, _ = prefill(tiny_model, seq, 0)
        assert np.array_equal(cache.keys, batch_cache.keys)
        assert np.array_equal(cache.values, batch_cache.values)


def test_incremental_equals_batch_at_nonzero_base(tiny_model, rng):
    base = 37
    seq = [int(t) for t in rng.integers(0, 256, size=6)]
    batch_cache, batch_logits = prefill(tiny_model, seq, base)
    cache = tiny_model.empty_cache()
    logits = None
    for offset, token in enumerate(seq):
        cache, logits = decode_step(tiny_model, cache, token, base + offset)
    assert np.array_equal(logits, batch_logits)
    assert np.array_equal(cache.keys, batch_cache.keys)


def test_decode_on_empty_cache_equals_single_prefill(tiny_model):
    cache_d, logits_d = decode_step(tiny_model, tiny_model.empty_cache(), 42, 0)
    cache_p, logits_p = prefill(tiny_model, [42], 0)
    assert np.array_equal(logits_d, logits_p)
    assert np.array_equal(cache_d.keys, cache_p.keys)


def test_causal_prefix_property(tiny_model, rng):
    """Appending tokens never changes the cache of the prefix (tolerance 0)."""
    for _ in range(20):
        n1 = int(rng.integers(1, 12))
        n2 = int(rng.integers(1, 12))
        d1 = [int(t) for t in rng.integers(0, 256, size=n1)]
        d2 = [int(t) for t in rng.integers(0, 256, size=n2)]
        joint, _ = prefill(tiny_model, d1 + d2, 0)
        alone, _ = prefill(tiny_model, d1, 0)
        assert np.array_equal(joint.keys[:, :n1], alone.keys)
        assert np.array_equal(joint.values[:, :n1], alone.values)


def test_greedy_continuation_deterministic(tiny_model):
    def continuation():
        cache, logits = prefill(tiny_model, [10, 20, 30], 0)
        out = []
        pos = 3
        for i in range(5):
            token = greedy_token(logits)
            out.append(token)
            cache, logits = decode_step(tiny_model, cache, token, pos + i)
        return out

    assert continuation() == continuation()


def test_finiteness_on_random_inputs(tiny_model, rng):
    for _ in range(10):
        seq = [int(t) for t in rng.integers(0, 256, size=int(rng.integers(1, 40)))]
        cache, logits = prefill(tiny_model, seq, 0)
        assert np.isfinite(cache.keys).all()
        assert np.isfinite(cache.values).all()
        assert np.isfinite(logits).all()


def test_greedy_token_tie_breaks_low():
    logits = np.array([0.5, 1.0, 1.0, 0.2], dtype=np.float32)
    assert greedy_token(logits) == 1


def test_concat_empty_list():
    empty = concat_caches([])
    assert empty.n_tokens == 0


def test_concat_singleton_bitwise(tiny_model):
    cache, _ = prefill(tiny_model, [1, 2, 3], 0)
    out = concat_caches([cache])
    assert np.array_equal(out.keys, cache.keys)
    assert np.array_equal(out.values, cache.values)
    assert out.config_hash == cache.config_hash


def test_concat_length_additivity_and_order(tiny_model):
    c1, _ = prefill(tiny_model, [1, 2, 3], 0)
    c2, _ = prefill(tiny_model, [4, 5], 0)
    out = concat_caches([c1, c2])
    assert out.n_tokens == c1.n_tokens + c2.n_tokens
    assert np.array_equal(out.keys[:, :3], c1.keys)
    assert np.array_equal(out.keys[:, 3:], c2.keys)


def test_concat_preserves_rotations(tiny_model):
    """Constituents keep their original positions: concat of two caches both
    prefilled at base 0 differs from one joint prefill (which rotates the
    second document at shifted positions)."""
    c1, _ = prefill(tiny_model, [1, 2, 3], 0)
    c2, _ = prefill(tiny_model, [4, 5, 6], 0)
    stacked = concat_caches([c1, c2])
    joint, _ = prefill(tiny_model, [1, 2, 3, 4, 5, 6], 0)
    assert not np.array_equal(stacked.keys, joint.keys)


def test_concat_mixed_hash_rejected(tiny_model):
    other = build_model(ModelConfig(n_layers=2, n_heads=2, head_dim=8,
                                    vocab_size=256, ffn_dim=32, seed=8,
                                    max_position=512))
    c1, _ = prefill(tiny_model, [1], 0)
    c2, _ = prefill(other, [1], 0)
    with pytest.raises(IncompatibilityError):
        concat_caches([c1, c2])


def test_concat_skips_empty_members(tiny_model):
    c1, _ = prefill(tiny_model, [1, 2], 0)
    out = concat_caches([tiny_model.empty_cache(), c1, concat_caches([])])
    assert out.n_tokens == 2
    assert np.array_equal(out.keys, c1.keys)


def test_decode_with_foreign_cache_rejected(tiny_model):
    other = build_model(ModelConfig(n_layers=2, n_heads=2, head_dim=8,
                                    vocab_size=256, ffn_dim=32, seed=8,
                                    max_position=512))
    cache, _ = prefill(other, [1, 2], 0)
    with pytest.raises(IncompatibilityError):
        decode_step(tiny_model, cache, 3, 2)


def test_kvcache_validate_rejects_nan(tiny_model):
    cache, _ = prefill(tiny_model, [1, 2], 0)
    bad_keys = cache.keys.copy()
    bad_keys[0, 0, 0, 0] = np.nan
    broken = KvCache(config_hash=cache.config_hash, keys=bad_keys, values=cache.values)
    with pytest.raises(PreconditionError):
        broken.validate()
