from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamreason.cache import CacheConfig, CacheEntry, KVShape, evict_oldest_visual, new_cache
from streamreason.core import Role, Token
from streamreason.errors import CapacityError, ConfigError, DimError, EmptyWindowError, PositionError

SHAPE = KVShape(1, 2)


def entry(tok_id, role, pos, tag=0):
    return CacheEntry(Token(tok_id, role, pos), np.full((1, 2), pos, float), np.full((1, 2), -pos, float), tag)


class Feeder:
    """Appends chunks and generated tokens with increasing positions."""

    def __init__(self, cache):
        self.cache, self.pos = cache, 0

    def chunk(self, tag, n):
        self.cache.append_entries([entry(128, Role.VISUAL, self.pos + i, tag) for i in range(n)])
        self.pos += n

    def generated(self, n, role=Role.REASONING):
        self.cache.append_entries([entry(40, role, self.pos + i) for i in range(n)])
        self.pos += n


def test_window_keeps_last_w_chunks():
    cache = new_cache(CacheConfig(window_chunks=2, capacity_slots=100, chunk_tokens=3), SHAPE)
    f = Feeder(cache)
    for tag in (1, 2, 3):
        if len(cache.active_visual_chunks) >= cache.window:
            rep = cache.evict_oldest_visual()
            assert rep.evicted_chunk == 1 and rep.evicted_token_count == 3
        f.chunk(tag, 3)
        f.generated(2)
    assert cache.active_visual_chunks == [2, 3]
    assert cache.retained_visual_tokens == 6 and cache.retained_generated_tokens == 6
    # stored positions are the original ones, not renumbered
    assert cache.positions[:cache.live_count].tolist() == list(range(3, 15))


def test_payload_moves_with_entries():
    cache = new_cache(CacheConfig(window_chunks=1, capacity_slots=20, chunk_tokens=2), SHAPE)
    f = Feeder(cache)
    f.chunk(1, 2)
    f.generated(1)
    cache.evict_oldest_visual()
    n = cache.live_count
    assert np.array_equal(cache.keys[0, :n, 0], cache.positions[:n].astype(float))
    assert np.array_equal(cache.values[0, :n, 0], -cache.positions[:n].astype(float))


def test_debug_dump_golden():
    cache = new_cache(CacheConfig(window_chunks=1, capacity_slots=20, chunk_tokens=2), SHAPE, instruction_tokens=1)
    cache.append_entries([entry(100, Role.INSTRUCTION, 0)])
    f = Feeder(cache)
    f.pos = 1
    f.chunk(1, 2)
    f.generated(1, Role.CONTROL)
    f.generated(1, Role.ACTION_MARKER)
    evict_oldest_visual(cache)
    f.chunk(2, 1)
    assert cache.debug_dump() == (
        "0 0 INSTRUCTION 0\n"
        "1 3 CONTROL 0\n"
        "2 4 ACTION_MARKER 0\n"
        "3 5 VISUAL 2\n")


def test_errors():
    with pytest.raises(ConfigError):
        CacheConfig(window_chunks=0)
    with pytest.raises(ConfigError):
        new_cache(CacheConfig(window_chunks=4, capacity_slots=10, chunk_tokens=3), SHAPE)
    cache = new_cache(CacheConfig(window_chunks=1, capacity_slots=4, chunk_tokens=2), SHAPE)
    with pytest.raises(EmptyWindowError):
        cache.evict_oldest_visual()
    f = Feeder(cache)
    f.chunk(1, 2)
    with pytest.raises(PositionError):
        cache.append_entries([entry(40, Role.REASONING, 1)])
    with pytest.raises(DimError):
        cache.append_entries([CacheEntry(Token(40, Role.REASONING, 9), np.zeros((2, 2)), np.zeros((2, 2)))])
    with pytest.raises(CapacityError):
        f.generated(3)
    assert cache.live_count == 2  # failed appends leave the cache untouched


def test_late_chunk_rejected():
    cache = new_cache(CacheConfig(window_chunks=3, capacity_slots=20, chunk_tokens=2), SHAPE)
    f = Feeder(cache)
    f.chunk(2, 1)
    with pytest.raises(PositionError):
        f.chunk(1, 1)


@settings(max_examples=150, deadline=None)
@given(window=st.integers(1, 4),
       ops=st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), min_size=1, max_size=40))
def test_window_invariants(window, ops):
    k_v = 4
    cache = new_cache(CacheConfig(window_chunks=window, capacity_slots=2000, chunk_tokens=k_v), SHAPE)
    f = Feeder(cache)
    generated_before = Counter()
    for tag, (n_vis, n_gen) in enumerate(ops, start=1):
        if len(cache.active_visual_chunks) >= window:
            cache.evict_oldest_visual()
        f.chunk(tag, n_vis)
        f.generated(n_gen)
        n = cache.live_count
        roles = cache.roles[:n]
        kept = Counter(int(p) for p, r in zip(cache.positions[:n], roles) if r != int(Role.VISUAL))
        assert not generated_before - kept  # nothing generated is ever dropped
        generated_before = kept
        assert len(cache.active_visual_chunks) <= window
        assert cache.retained_visual_tokens == int((roles == int(Role.VISUAL)).sum()) <= window * k_v
        assert np.all(np.diff(cache.positions[:n]) > 0)
