"""Block pool tests: blocking arithmetic, LRU, budget, isolation."""

import numpy as np
import pytest

from agentkv.block_pool import BlockPool
from agentkv.blocks import CacheState
from agentkv.codec import q4_bytes
from agentkv.errors import (
    InvalidArgumentError,
    NotFoundError,
    ShapeError,
)

from .helpers import append_random, cache_checksum, random_kv_chunk, tiny_spec
from .oracles import simulate_block_fill


@pytest.fixture
def pool(tmp_path):
    return BlockPool(tiny_spec(block=256), tmp_path, budget_bytes=1 << 30)


def big_pool(tmp_path, budget):
    return BlockPool(tiny_spec(block=256), tmp_path, budget_bytes=budget)


def test_append_300_tokens_makes_blocks_256_44(pool):
    rng = np.random.default_rng(0)
    total = append_random(pool, "a", 300, rng)
    assert total == 300
    cache = pool.get_cache("a")
    assert cache.block_token_counts() == [256, 44]


def test_append_fills_tail_before_new_block(pool):
    rng = np.random.default_rng(1)
    append_random(pool, "a", 300, rng)
    append_random(pool, "a", 212, rng)
    cache = pool.get_cache("a")
    assert cache.block_token_counts() == [256, 256]
    assert cache.token_count == 512


@pytest.mark.parametrize("sizes", [[1], [256], [257], [5, 3, 250], [300, 212, 100]])
def test_block_fill_matches_simulation(tmp_path, sizes):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(2)
    for s in sizes:
        append_random(pool, "a", s, rng)
    cache = pool.get_cache("a")
    assert cache.block_token_counts() == simulate_block_fill(sizes, 256)
    cache.validate(pool.spec.num_layers, pool.spec.block_tokens)


def test_refill_is_bit_identical_to_single_append(tmp_path):
    # appending [a; b] in one call or two must give identical block bytes
    spec = tiny_spec(block=8)
    rng = np.random.default_rng(3)
    kv_a = random_kv_chunk(spec, 5, rng)
    kv_b = random_kv_chunk(spec, 7, rng)
    joined = [
        (np.concatenate([ka, kb], axis=1), np.concatenate([va, vb], axis=1))
        for (ka, va), (kb, vb) in zip(kv_a, kv_b)
    ]
    p1 = BlockPool(spec, tmp_path / "p1", budget_bytes=1 << 30)
    p2 = BlockPool(spec, tmp_path / "p2", budget_bytes=1 << 30)
    p1.append_tokens("a", kv_a, list(range(5)), "aaaaa", list(range(5)))
    p1.append_tokens("a", kv_b, list(range(7)), "bbbbbbb", list(range(7)))
    p2.append_tokens("a", joined, list(range(5)) + list(range(7)), "aaaaabbbbbbb",
                     list(range(5)) + [5 + i for i in range(7)])
    assert cache_checksum(p1.get_cache("a")) == cache_checksum(p2.get_cache("a"))


def test_shape_mismatch_rejected(pool):
    rng = np.random.default_rng(4)
    kv = random_kv_chunk(pool.spec, 4, rng)
    bad = [(k[:, :, :8], v) for k, v in kv]
    with pytest.raises(ShapeError):
        pool.append_tokens("a", bad, [1, 2, 3, 4], "text")
    with pytest.raises(ShapeError):
        pool.append_tokens("a", kv[:-1], [1, 2, 3, 4], "text")
    with pytest.raises(ShapeError):
        pool.append_tokens("a", kv, [1, 2, 3], "text")  # t_new mismatch


def test_get_unknown_agent_raises(pool):
    with pytest.raises(NotFoundError):
        pool.get_cache("ghost")


def test_resident_bytes_match_codec_accounting(pool):
    rng = np.random.default_rng(5)
    append_random(pool, "a", 300, rng)
    append_random(pool, "b", 512, rng)
    expected = q4_bytes(pool.spec, 300) + q4_bytes(pool.spec, 512)
    assert pool.stats().resident_bytes == expected


def test_lru_evicts_least_recently_touched(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(6)
    for agent in ("a", "b", "c"):
        append_random(pool, agent, 16, rng)
    assert pool.evict_lru() == "a"
    # touching b's cache makes... a already evicted; next LRU is b unless touched
    pool.get_cache("b")
    assert pool.evict_lru() == "c"


def test_lru_tie_breaks_lexicographically(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(7)
    append_random(pool, "z", 4, rng)
    append_random(pool, "m", 4, rng)
    # force equal ticks
    za = pool.get_cache("z")
    ma = pool.get_cache("m")
    za.last_touched = ma.last_touched = 999
    assert pool.evict_lru() == "m"


def test_eviction_and_reload_round_trip(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(8)
    append_random(pool, "a", 300, rng)
    before = cache_checksum(pool.get_cache("a"))
    bytes_before = pool.stats().resident_bytes
    assert pool.evict_lru() == "a"
    st = pool.stats()
    assert st.resident_bytes == 0
    assert st.agents_warm == 1 and st.agents_hot == 0
    assert pool.agent_state("a") is CacheState.WARM

    cache = pool.get_cache("a")
    assert cache.state is CacheState.HOT
    assert cache_checksum(cache) == before
    st = pool.stats()
    assert st.reloads == 1 and st.evictions == 1
    assert st.resident_bytes == bytes_before


def test_budget_enforced_by_auto_eviction(tmp_path):
    spec = tiny_spec(block=256)
    per_agent = q4_bytes(spec, 128)
    pool = BlockPool(spec, tmp_path, budget_bytes=int(per_agent * 2.5))
    rng = np.random.default_rng(9)
    for agent in ("a", "b", "c", "d"):
        append_random(pool, agent, 128, rng)
        assert pool.stats().resident_bytes <= pool.budget_bytes
    st = pool.stats()
    assert st.agents_hot == 2 and st.agents_warm == 2
    assert st.evictions == 2


def test_single_oversized_agent_evicts_itself(tmp_path):
    spec = tiny_spec(block=256)
    pool = BlockPool(spec, tmp_path, budget_bytes=q4_bytes(spec, 64))
    rng = np.random.default_rng(10)
    append_random(pool, "big", 512, rng)
    st = pool.stats()
    assert st.resident_bytes == 0
    assert pool.agent_state("big") is CacheState.WARM


def test_drop_with_delete_disk(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(11)
    append_random(pool, "a", 32, rng)
    pool.save_agent("a")
    pool.drop_agent("a", delete_disk=True)
    with pytest.raises(NotFoundError):
        pool.get_cache("a")
    assert pool.stats().resident_bytes == 0


def test_drop_without_delete_reloads_from_disk(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(12)
    append_random(pool, "a", 32, rng)
    before = cache_checksum(pool.get_cache("a"))
    pool.save_agent("a")
    pool.drop_agent("a", delete_disk=False)
    assert "a" not in pool.known_agents()
    cache = pool.get_cache("a")  # rediscovered from disk
    assert cache_checksum(cache) == before
    assert pool.stats().reloads == 1


def test_drop_unknown_raises(pool):
    with pytest.raises(NotFoundError):
        pool.drop_agent("ghost")


def test_truncate_drops_whole_blocks(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(13)
    append_random(pool, "a", 600, rng)
    cache = pool.get_cache("a")
    assert cache.block_token_counts() == [256, 256, 88]
    pool.truncate_agent("a", 256)
    assert cache.block_token_counts() == [256]
    assert cache.token_count == 256
    assert len(cache.transcript_text) == cache.char_offsets[-1] + 2  # 2 chars per token
    assert pool.stats().resident_bytes == q4_bytes(pool.spec, 256)
    with pytest.raises(InvalidArgumentError):
        pool.truncate_agent("a", 100)  # not block-aligned
    with pytest.raises(InvalidArgumentError):
        pool.truncate_agent("a", 512)  # beyond cached count


def test_truncate_to_zero_empties_agent(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(14)
    append_random(pool, "a", 300, rng)
    pool.truncate_agent("a", 0)
    cache = pool.get_cache("a")
    assert cache.token_count == 0
    assert cache.transcript_text == ""
    assert pool.stats().resident_bytes == 0


def test_isolation_under_mutations(tmp_path):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(15)
    for agent in ("a", "b", "c"):
        append_random(pool, agent, 40, rng)
    sums = {agent: cache_checksum(pool.get_cache(agent)) for agent in ("b", "c")}
    for _ in range(10):
        append_random(pool, "a", 17, rng)
        for agent, digest in sums.items():
            assert cache_checksum(pool.get_cache(agent)) == digest


def test_eviction_failure_keeps_agent_hot(tmp_path, monkeypatch):
    pool = big_pool(tmp_path, 1 << 30)
    rng = np.random.default_rng(16)
    append_random(pool, "a", 16, rng)

    from agentkv import persistence
    from agentkv.errors import EvictionFailedError, PersistenceError

    def boom(*args, **kwargs):
        raise PersistenceError("disk full")

    monkeypatch.setattr(persistence, "save_agent", boom)
    with pytest.raises(EvictionFailedError):
        pool.evict_lru()
    assert pool.agent_state("a") is CacheState.HOT
    assert pool.stats().evictions == 0


def test_cache_from_other_spec_rejected_on_reload(tmp_path):
    store = tmp_path / "shared"
    spec_a = tiny_spec(layers=2)
    pool_a = BlockPool(spec_a, store, budget_bytes=1 << 30)
    rng = np.random.default_rng(18)
    append_random(pool_a, "agent", 12, rng)
    pool_a.save_agent("agent")

    from agentkv.errors import SpecMismatchError

    spec_b = tiny_spec(layers=2, k_dim=32, v_dim=32)
    pool_b = BlockPool(spec_b, store, budget_bytes=1 << 30)
    with pytest.raises(SpecMismatchError):
        pool_b.get_cache("agent")


def test_bad_agent_id_rejected(pool):
    rng = np.random.default_rng(17)
    kv = random_kv_chunk(pool.spec, 1, rng)
    with pytest.raises(InvalidArgumentError):
        pool.append_tokens("../evil", kv, [1], "t", [0])
    with pytest.raises(InvalidArgumentError):
        pool.append_tokens("", kv, [1], "t", [0])
