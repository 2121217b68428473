"""Streaming memory: a sliding window of visual chunks plus every generated token.

Entries live in one contiguous, preallocated slot array in chronological
order. Eviction removes the oldest in-window visual chunk and shifts the
remaining entries down in place; stored positions are never rewritten.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import GENERATED_ROLES, Role, Token
from .errors import CapacityError, ConfigError, DimError, EmptyWindowError, PositionError

_VISUAL = int(Role.VISUAL)
_INSTRUCTION = int(Role.INSTRUCTION)


@dataclass(frozen=True)
class CacheConfig:
    window_chunks: int = 20
    capacity_slots: int = 8192
    chunk_seconds: float = 1.0
    chunk_tokens: int = 32  # largest visual chunk the window must hold

    def __post_init__(self):
        if self.window_chunks < 1:
            raise ConfigError("window_chunks must be >= 1")
        if self.capacity_slots < 1 or self.chunk_seconds <= 0 or self.chunk_tokens < 0:
            raise ConfigError("capacity_slots, chunk_seconds and chunk_tokens must be positive")


@dataclass(frozen=True)
class KVShape:
    """Per-token payload geometry: ``num_layers`` rows of ``width`` floats for keys and for values."""

    num_layers: int
    width: int


@dataclass(frozen=True)
class CacheEntry:
    token: Token
    keys: np.ndarray    # (num_layers, width)
    values: np.ndarray  # (num_layers, width)
    chunk_tag: int = 0


@dataclass(frozen=True)
class EvictReport:
    evicted_chunk: int
    evicted_token_count: int
    moved_entry_count: int


class CacheState:
    """Mutable slot array. Owned by a single session; not safe for concurrent mutation."""

    def __init__(self, config: CacheConfig, kv_shape: KVShape, instruction_tokens: int = 0):
        need = config.window_chunks * config.chunk_tokens + instruction_tokens
        if config.capacity_slots < max(need, config.chunk_tokens, 1):
            raise ConfigError(
                f"capacity {config.capacity_slots} cannot hold a full window "
                f"({config.window_chunks} x {config.chunk_tokens}) plus {instruction_tokens} instruction tokens")
        self.config = config
        self.kv_shape = kv_shape
        cap = config.capacity_slots
        self.token_ids = np.zeros(cap, dtype=np.int64)
        self.roles = np.zeros(cap, dtype=np.int8)
        self.positions = np.zeros(cap, dtype=np.int64)
        self.chunk_tags = np.zeros(cap, dtype=np.int64)
        # layer-major so one layer's live keys are a contiguous (n, width) block
        self.keys = np.zeros((kv_shape.num_layers, cap, kv_shape.width))
        self.values = np.zeros((kv_shape.num_layers, cap, kv_shape.width))
        self.live_count = 0
        self.active_visual_chunks: list[int] = []
        self.retained_visual_tokens = 0
        self.retained_generated_tokens = 0
        self.retained_instruction_tokens = 0

    # -- probes -------------------------------------------------------------

    @property
    def window(self) -> int:
        return self.config.window_chunks

    def visible_count(self) -> int:
        return self.live_count

    def last_position(self) -> int:
        return int(self.positions[self.live_count - 1]) if self.live_count else -1

    def memory_state(self) -> list[tuple[int, Role, int]]:
        n = self.live_count
        return [(int(p), Role(int(r)), int(c))
                for p, r, c in zip(self.positions[:n], self.roles[:n], self.chunk_tags[:n])]

    def retained_tokens(self) -> list[Token]:
        n = self.live_count
        return [Token(int(t), Role(int(r)), int(p))
                for t, r, p in zip(self.token_ids[:n], self.roles[:n], self.positions[:n])]

    def retained_sequence(self) -> tuple[np.ndarray, np.ndarray]:
        """Copies of the live (token ids, positions) in chronological order."""
        n = self.live_count
        return self.token_ids[:n].copy(), self.positions[:n].copy()

    def live_visual_ids(self) -> np.ndarray:
        n = self.live_count
        return self.token_ids[:n][self.roles[:n] == _VISUAL]

    def debug_dump(self) -> str:
        """One ``slot position role chunk_tag`` line per live entry."""
        lines = [f"{slot} {pos} {role.name} {tag}" for slot, (pos, role, tag) in enumerate(self.memory_state())]
        return "\n".join(lines) + ("\n" if lines else "")

    # -- mutation -----------------------------------------------------------

    def append_entries(self, entries: Sequence[CacheEntry]) -> "CacheState":
        if not entries:
            return self
        L, D = self.kv_shape.num_layers, self.kv_shape.width
        keys = np.stack([e.keys for e in entries])
        values = np.stack([e.values for e in entries])
        if keys.shape[1:] != (L, D) or values.shape[1:] != (L, D):
            raise DimError(f"kv payload shape {keys.shape[1:]} does not match cache ({L}, {D})")
        return self.append_block(
            np.array([e.token.id for e in entries], dtype=np.int64),
            np.array([int(e.token.role) for e in entries], dtype=np.int8),
            np.array([e.token.position for e in entries], dtype=np.int64),
            np.array([e.chunk_tag for e in entries], dtype=np.int64),
            keys, values)

    def append_block(self, token_ids, roles, positions, chunk_tags, keys, values) -> "CacheState":
        """Array form of append_entries used by the engine's prefill and decode paths."""
        k = len(token_ids)
        if k == 0:
            return self
        n = self.live_count
        if n + k > self.config.capacity_slots:
            raise CapacityError(f"{n} live + {k} new entries exceed capacity {self.config.capacity_slots}")
        positions = np.asarray(positions, dtype=np.int64)
        if positions[0] <= self.last_position() or (k > 1 and np.any(np.diff(positions) <= 0)):
            raise PositionError("appended positions must strictly increase past the last cached position")
        roles = np.asarray(roles, dtype=np.int8)
        tags = np.asarray(chunk_tags, dtype=np.int64)
        visual = roles == _VISUAL
        if visual.any():
            for tag in np.unique(tags[visual]):
                tag = int(tag)
                if tag in self.active_visual_chunks:
                    continue
                if self.active_visual_chunks and tag < self.active_visual_chunks[-1]:
                    raise PositionError(f"visual chunk {tag} arrives after chunk {self.active_visual_chunks[-1]}")
                self.active_visual_chunks.append(tag)
        tags = np.where(visual, tags, 0)

        sl = slice(n, n + k)
        self.token_ids[sl] = token_ids
        self.roles[sl] = roles
        self.positions[sl] = positions
        self.chunk_tags[sl] = tags
        self.keys[:, sl] = np.swapaxes(keys, 0, 1)
        self.values[:, sl] = np.swapaxes(values, 0, 1)
        self.live_count = n + k

        n_vis = int(visual.sum())
        n_instr = int((roles == _INSTRUCTION).sum())
        self.retained_visual_tokens += n_vis
        self.retained_instruction_tokens += n_instr
        self.retained_generated_tokens += k - n_vis - n_instr
        return self

    def evict_oldest_visual(self) -> EvictReport:
        """Drop every visual entry of the oldest active chunk and compact in place."""
        if not self.active_visual_chunks:
            raise EmptyWindowError("no visual chunk is active")
        chunk = self.active_visual_chunks.pop(0)
        n = self.live_count
        doomed = (self.roles[:n] == _VISUAL) & (self.chunk_tags[:n] == chunk)
        idx = np.flatnonzero(doomed)
        if idx.size == 0:
            return EvictReport(chunk, 0, 0)
        first = int(idx[0])
        keep = ~doomed[first:n]
        n_keep = int(keep.sum())
        for arr in (self.token_ids, self.roles, self.positions, self.chunk_tags):
            arr[first:first + n_keep] = arr[first:n][keep]
        for arr in (self.keys, self.values):
            arr[:, first:first + n_keep] = arr[:, first:n][:, keep]
        self.live_count = first + n_keep
        self.retained_visual_tokens -= idx.size
        return EvictReport(chunk, int(idx.size), n_keep)


def new_cache(config: CacheConfig, kv_shape: KVShape, instruction_tokens: int = 0) -> CacheState:
    return CacheState(config, kv_shape, instruction_tokens)


def append_entries(cache: CacheState, entries: Iterable[CacheEntry]) -> CacheState:
    return cache.append_entries(list(entries))


def evict_oldest_visual(cache: CacheState) -> tuple[CacheState, EvictReport]:
    report = cache.evict_oldest_visual()
    return cache, report


def memory_state(cache: CacheState) -> list[tuple[int, Role, int]]:
    return cache.memory_state()


def visible_count(cache: CacheState) -> int:
    return cache.live_count


def is_generated(role: Role) -> bool:
    return role in GENERATED_ROLES
