"""Per-agent isolated block storage with a byte budget and LRU paging.

The pool owns every resident agent cache. Appends quantize incoming
float32 K/V tensors and pack them into fixed-size blocks; when resident
bytes exceed the budget, least-recently-used agents are persisted to disk
and dropped from memory (Hot -> Warm). Reads transparently reload Warm
agents. All public operations run under one reentrant guard, mirroring
the single-lane constraint of the serving layer; disk writes triggered by
eviction hold the same guard.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import persistence
from .blocks import AgentCache, CacheState, KVBlock
from .codec import concat_tokens, quantize_tensor, slice_tokens
from .errors import (
    EvictionFailedError,
    InvalidArgumentError,
    NotFoundError,
    PersistenceError,
    ShapeError,
    SpecMismatchError,
)
from .model_spec import ModelCacheSpec, spec_fingerprint

__all__ = ["BlockPool", "PoolStats", "DEFAULT_BUDGET_BYTES"]

# mirrors the evaluated device's cache budget: 10.2 binary GB
DEFAULT_BUDGET_BYTES = round(10.2 * 2**30)

_EVENT_SAVED = "saved"
_EVENT_LOADED = "loaded"
_EVENT_EVICTED = "evicted"


@dataclass(frozen=True)
class PoolStats:
    resident_bytes: int
    budget_bytes: int
    agents_hot: int
    agents_warm: int
    evictions: int
    reloads: int


def _valid_agent_id(agent_id: str) -> bool:
    return bool(agent_id) and all(c.isalnum() or c in "._-" for c in agent_id)


class BlockPool:
    """Registry of per-agent quantized caches under one byte budget."""

    def __init__(
        self,
        spec: ModelCacheSpec,
        cache_dir: Path | str,
        budget_bytes: int = DEFAULT_BUDGET_BYTES,
        on_event: Callable[[str, str, int], None] | None = None,
    ) -> None:
        if budget_bytes <= 0:
            raise InvalidArgumentError("budget_bytes must be positive")
        self.spec = spec
        self.fingerprint = spec_fingerprint(spec)
        self.cache_dir = Path(cache_dir)
        self.budget_bytes = budget_bytes
        self._agents: dict[str, AgentCache] = {}
        self._resident_bytes = 0
        self._clock = 0
        self._evictions = 0
        self._reloads = 0
        self._on_event = on_event
        # reentrant: eviction-triggered saves run under the same guard
        self.io_guard = threading.RLock()

    def set_event_sink(self, on_event: Callable[[str, str, int], None] | None) -> None:
        """Wire an observer for saved/loaded/evicted notifications."""
        self._on_event = on_event

    # -- internals ---------------------------------------------------------

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _touch(self, cache: AgentCache) -> None:
        cache.last_touched = self._tick()

    def _emit(self, kind: str, agent_id: str, nbytes: int) -> None:
        if self._on_event is not None:
            self._on_event(kind, agent_id, nbytes)

    def _new_agent(self, agent_id: str) -> AgentCache:
        if not _valid_agent_id(agent_id):
            raise InvalidArgumentError(
                f"agent id {agent_id!r} must be non-empty and use only [A-Za-z0-9._-]"
            )
        cache = AgentCache(
            agent_id=agent_id,
            spec_fingerprint=self.fingerprint,
            blocks=[[] for _ in range(self.spec.num_layers)],
        )
        self._agents[agent_id] = cache
        return cache

    def _ensure_resident(self, agent_id: str) -> AgentCache:
        cache = self._agents.get(agent_id)
        if cache is not None and cache.state is CacheState.HOT:
            return cache
        pair = persistence.discover_pair(self.cache_dir, agent_id)
        if pair is None:
            if cache is not None:
                # registered as warm but its files vanished
                del self._agents[agent_id]
            raise NotFoundError(f"unknown agent {agent_id!r}")
        loaded = persistence.load_agent(pair, self.fingerprint)
        loaded.state = CacheState.HOT
        self._agents[agent_id] = loaded
        self._resident_bytes += loaded.nbytes
        self._reloads += 1
        self._emit(_EVENT_LOADED, agent_id, loaded.nbytes)
        self._touch(loaded)  # before budget eviction, or it is its own victim
        self._evict_to_budget()
        return loaded

    def _evict_to_budget(self) -> None:
        while self._resident_bytes > self.budget_bytes:
            if not any(c.state is CacheState.HOT for c in self._agents.values()):
                break
            try:
                self.evict_lru()
            except EvictionFailedError:
                break  # stays over budget; visible in stats

    def _save(self, cache: AgentCache) -> persistence.CacheFilePair:
        try:
            return persistence.save_agent(cache, self.cache_dir, self.spec)
        except PersistenceError:
            raise
        except OSError as exc:
            raise PersistenceError(str(exc)) from exc

    # -- public operations --------------------------------------------------

    def append_tokens(
        self,
        agent_id: str,
        per_layer_kv: list[tuple[np.ndarray, np.ndarray]],
        new_token_ids: list[int],
        new_text: str,
        new_char_offsets: list[int] | None = None,
    ) -> int:
        """Quantize and append one chunk of K/V to an agent's blocks.

        ``per_layer_kv`` holds one (K, V) float32 pair per layer with shapes
        (kv_heads, t_new, k_head_dim) and (kv_heads, t_new, v_head_dim).
        ``new_char_offsets`` are per-token offsets into ``new_text``
        (defaults to all tokens starting at offset 0). Returns the agent's
        total token count. Creates the agent when unknown; runs LRU
        eviction before returning if the pool went over budget.
        """
        with self.io_guard:
            spec = self.spec
            t_new = len(new_token_ids)
            if new_char_offsets is None:
                new_char_offsets = [0] * t_new
            if len(new_char_offsets) != t_new:
                raise ShapeError("new_char_offsets length must match new_token_ids")
            if len(per_layer_kv) != spec.num_layers and not (
                t_new == 0 and len(per_layer_kv) == 0
            ):
                raise ShapeError(
                    f"expected {spec.num_layers} layer K/V pairs, got {len(per_layer_kv)}"
                )
            for layer, (k, v) in enumerate(per_layer_kv):
                if k.shape != (spec.num_kv_heads, t_new, spec.k_head_dim):
                    raise ShapeError(f"layer {layer} K shape {k.shape} inconsistent with spec")
                if v.shape != (spec.num_kv_heads, t_new, spec.v_head_dim):
                    raise ShapeError(f"layer {layer} V shape {v.shape} inconsistent with spec")

            cache = self._agents.get(agent_id)
            if cache is None:
                try:
                    cache = self._ensure_resident(agent_id)
                except NotFoundError:
                    cache = self._new_agent(agent_id)
            elif cache.state is not CacheState.HOT:
                cache = self._ensure_resident(agent_id)
            if cache.spec_fingerprint != self.fingerprint:
                raise SpecMismatchError(
                    f"agent {agent_id!r} cache was produced under a different spec"
                )

            if t_new > 0:
                base_offset = len(cache.transcript_text)
                added = 0
                for layer, (k, v) in enumerate(per_layer_kv):
                    qk = quantize_tensor(np.asarray(k, dtype=np.float32), spec)
                    qv = quantize_tensor(np.asarray(v, dtype=np.float32), spec)
                    added += self._append_layer(cache, layer, qk, qv)
                self._resident_bytes += added
                cache.token_ids.extend(int(t) for t in new_token_ids)
                cache.char_offsets.extend(base_offset + int(o) for o in new_char_offsets)
                cache.transcript_text += new_text

            cache.state = CacheState.HOT
            self._touch(cache)
            self._evict_to_budget()
            return cache.token_count

    def _append_layer(self, cache: AgentCache, layer: int, qk, qv) -> int:
        """Fill the layer's tail block, then open new blocks. Returns bytes added."""
        block_tokens = self.spec.block_tokens
        layer_blocks = cache.blocks[layer]
        added = 0
        consumed = 0
        total = qk.tokens
        if layer_blocks and layer_blocks[-1].token_count < block_tokens:
            tail = layer_blocks[-1]
            take = min(block_tokens - tail.token_count, total)
            added -= tail.nbytes
            tail.k = concat_tokens(tail.k, slice_tokens(qk, 0, take))
            tail.v = concat_tokens(tail.v, slice_tokens(qv, 0, take))
            tail.token_count += take
            added += tail.nbytes
            consumed = take
        while consumed < total:
            take = min(block_tokens, total - consumed)
            block = KVBlock(
                layer=layer,
                block_index=len(layer_blocks),
                token_count=take,
                k=slice_tokens(qk, consumed, consumed + take),
                v=slice_tokens(qv, consumed, consumed + take),
            )
            layer_blocks.append(block)
            added += block.nbytes
            consumed += take
        return added

    def get_cache(self, agent_id: str) -> AgentCache:
        """Return an agent's cache, reloading it from disk when Warm.

        The returned object is the pool's live record: treat it as a
        read-only view and mutate only through pool operations.
        """
        with self.io_guard:
            cache = self._ensure_resident(agent_id)
            self._touch(cache)
            self._evict_to_budget()
            return cache

    def evict_lru(self) -> str | None:
        """Persist and drop the least-recently-used Hot agent."""
        with self.io_guard:
            hot = [c for c in self._agents.values() if c.state is CacheState.HOT]
            if not hot:
                return None
            victim = min(hot, key=lambda c: (c.last_touched, c.agent_id))
            try:
                self._save(victim)
            except PersistenceError as exc:
                raise EvictionFailedError(
                    f"could not persist {victim.agent_id!r}: {exc}"
                ) from exc
            freed = victim.nbytes
            self._emit(_EVENT_SAVED, victim.agent_id, freed)
            victim.blocks = [[] for _ in range(self.spec.num_layers)]
            victim.state = CacheState.WARM
            self._resident_bytes -= freed
            self._evictions += 1
            self._emit(_EVENT_EVICTED, victim.agent_id, freed)
            return victim.agent_id

    def save_agent(self, agent_id: str) -> persistence.CacheFilePair:
        """Persist a Hot agent without evicting it."""
        with self.io_guard:
            cache = self._agents.get(agent_id)
            if cache is None or cache.state is not CacheState.HOT:
                raise NotFoundError(f"agent {agent_id!r} is not resident")
            pair = self._save(cache)
            self._emit(_EVENT_SAVED, agent_id, cache.nbytes)
            return pair

    def drop_agent(self, agent_id: str, delete_disk: bool = False) -> None:
        """Free an agent's resident blocks and registry entry.

        Without ``delete_disk`` the persisted files survive, so a later
        ``get_cache`` reloads the agent from disk (Cold -> Hot).
        """
        with self.io_guard:
            cache = self._agents.get(agent_id)
            known_on_disk = persistence.discover_pair(self.cache_dir, agent_id) is not None
            if cache is None and not known_on_disk:
                raise NotFoundError(f"unknown agent {agent_id!r}")
            if cache is not None:
                if cache.state is CacheState.HOT:
                    self._resident_bytes -= cache.nbytes
                del self._agents[agent_id]
            if delete_disk:
                persistence.remove_agent_files(self.cache_dir, agent_id)
            self._tick()

    def truncate_agent(self, agent_id: str, keep_tokens: int) -> None:
        """Drop cache content beyond ``keep_tokens`` (a whole-block multiple)."""
        with self.io_guard:
            if keep_tokens % self.spec.block_tokens != 0:
                raise InvalidArgumentError(
                    f"keep_tokens ({keep_tokens}) must be a multiple of "
                    f"block_tokens ({self.spec.block_tokens})"
                )
            cache = self._ensure_resident(agent_id)
            if keep_tokens > cache.token_count:
                raise InvalidArgumentError("cannot truncate beyond the cached token count")
            if keep_tokens == cache.token_count:
                self._touch(cache)
                return
            keep_blocks = keep_tokens // self.spec.block_tokens
            removed = 0
            for layer_blocks in cache.blocks:
                for block in layer_blocks[keep_blocks:]:
                    removed += block.nbytes
                del layer_blocks[keep_blocks:]
            self._resident_bytes -= removed
            del cache.token_ids[keep_tokens:]
            if keep_tokens:
                cut = cache.char_offsets[keep_tokens]
                del cache.char_offsets[keep_tokens:]
                cache.transcript_text = cache.transcript_text[:cut]
            else:
                cache.char_offsets.clear()
                cache.transcript_text = ""
            self._touch(cache)

    def stats(self) -> PoolStats:
        with self.io_guard:
            hot = sum(1 for c in self._agents.values() if c.state is CacheState.HOT)
            warm = sum(1 for c in self._agents.values() if c.state is CacheState.WARM)
            return PoolStats(
                resident_bytes=self._resident_bytes,
                budget_bytes=self.budget_bytes,
                agents_hot=hot,
                agents_warm=warm,
                evictions=self._evictions,
                reloads=self._reloads,
            )

    def agent_state(self, agent_id: str) -> CacheState:
        """Lifecycle state without touching the LRU clock."""
        with self.io_guard:
            cache = self._agents.get(agent_id)
            if cache is not None:
                return cache.state
            if persistence.discover_pair(self.cache_dir, agent_id) is not None:
                return CacheState.WARM
            return CacheState.COLD

    def known_agents(self) -> list[str]:
        with self.io_guard:
            return sorted(self._agents)

    def hot_agents(self) -> list[str]:
        with self.io_guard:
            return sorted(
                a for a, c in self._agents.items() if c.state is CacheState.HOT
            )
