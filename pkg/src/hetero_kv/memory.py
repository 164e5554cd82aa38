"""Page pools and allocators for each memory-management strategy, plus the
byte census that classifies every byte of the budget each step.

Strategies:

- ``lcm``: one pool of LCM-sized large pages shared by per-group allocators.
- ``max``: large page = largest small page; smaller pages are padded.
- ``gcd``: large page = GCD of small pages; a small page spans several.
- ``static``: a separate pool per group, sized by a fixed ratio vector.
- ``uniform``: one page type charging every token all groups' bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

from .config import (ConfigError, LayerGroupSpec, LayerKind, ModelSpec, PageSizeStrategy,
                     compatible_page_size, small_page_size)
from .policies import FullAttentionPolicy, LayerPolicy, make_policy
from .pool import LargePagePool
from .prefix_cache import GroupTable
from .type_allocator import TypeAllocator

UNIFORM_GROUP = "uniform"


class Strategy(str, enum.Enum):
    LCM = "lcm"
    UNIFORM = "uniform"
    STATIC = "static"
    MAX = "max"
    GCD = "gcd"


@dataclass
class ManagedGroup:
    name: str
    spec: LayerGroupSpec
    policy: LayerPolicy
    allocator: TypeAllocator


@dataclass(frozen=True)
class Census:
    used: dict[str, int]
    evictable: int
    wasted: int
    unallocated: int
    reserved: int

    @property
    def used_total(self) -> int:
        return sum(self.used.values())

    @property
    def total(self) -> int:
        return self.used_total + self.evictable + self.wasted + self.unallocated + self.reserved


class MemorySystem:
    def __init__(self, spec: ModelSpec, strategy, budget: int, *,
                 static_ratios: Optional[dict[str, float]] = None, request_aware: bool = True):
        if budget <= 0:
            raise ConfigError("memory budget must be positive")
        self.spec = spec
        self.strategy = Strategy(strategy)
        self.budget = budget
        self.has_cross = spec.has_cross_attention
        self.pools: list[LargePagePool] = []
        self.managed: dict[str, ManagedGroup] = {}
        s = self.strategy
        if s is Strategy.UNIFORM:
            self._build_uniform(request_aware)
        elif s is Strategy.STATIC:
            self._build_static(static_ratios, request_aware)
        else:
            large = compatible_page_size(spec, PageSizeStrategy(s.value))
            pool = LargePagePool(budget, large)
            self.pools.append(pool)
            for g in spec.groups:
                small = small_page_size(g)
                slots = 1 if s is Strategy.MAX else None
                alloc = TypeAllocator(g.name, small, pool, slots_per_large=slots, request_aware=request_aware)
                self.managed[g.name] = ManagedGroup(g.name, g, make_policy(g, self.has_cross), alloc)
        self.unpooled = budget - sum(p.capacity_bytes for p in self.pools)

    def _build_uniform(self, request_aware: bool) -> None:
        attn = [g.tokens_per_page for g in self.spec.groups if g.kind is not LayerKind.MAMBA]
        tpp = max(attn) if attn else 1
        per_token = sum(g.bytes_per_token for g in self.spec.groups)
        pseudo = LayerGroupSpec(UNIFORM_GROUP, LayerKind.FULL, 1, per_token, tokens_per_page=tpp)
        pool = LargePagePool(self.budget, small_page_size(pseudo))
        self.pools.append(pool)
        alloc = TypeAllocator(UNIFORM_GROUP, small_page_size(pseudo), pool, request_aware=request_aware)
        self.managed[UNIFORM_GROUP] = ManagedGroup(UNIFORM_GROUP, pseudo, FullAttentionPolicy(True), alloc)

    def _build_static(self, ratios: Optional[dict[str, float]], request_aware: bool) -> None:
        names = self.spec.group_names
        if ratios is None:
            ratios = {n: 1.0 / len(names) for n in names}
        if set(ratios) != set(names):
            raise ConfigError(f"static ratios must name every group exactly: {names}")
        total = sum(ratios.values())
        if total <= 0 or min(ratios.values()) < 0:
            raise ConfigError("static ratios must be nonnegative with a positive sum")
        for g in self.spec.groups:
            small = small_page_size(g)
            pool = LargePagePool(int(self.budget * ratios[g.name] / total), small)
            self.pools.append(pool)
            alloc = TypeAllocator(g.name, small, pool, request_aware=request_aware)
            self.managed[g.name] = ManagedGroup(g.name, g, make_policy(g, self.has_cross), alloc)

    @property
    def is_uniform(self) -> bool:
        return self.strategy is Strategy.UNIFORM

    def new_tables(self) -> dict[str, GroupTable]:
        return {name: GroupTable(name, m.policy, m.spec.tokens_per_page) for name, m in self.managed.items()}

    def fits(self, demand: dict[str, int]) -> bool:
        """Whether ``demand`` (small pages per group) fits in free plus
        evictable memory, pool by pool."""
        need: dict[int, int] = {}
        avail: dict[int, int] = {}
        for name, pages in demand.items():
            a = self.managed[name].allocator
            key = id(a.pool)
            need[key] = need.get(key, 0) + -(-pages // a.slots_per_large) * a.span
            avail[key] = avail.get(key, a.pool.free_count) + (a.n_evictable // a.slots_per_large) * a.span
        return all(need[k] <= avail[k] for k in need)

    def allocated_bytes(self) -> int:
        return sum(m.allocator.owned_bytes for m in self.managed.values())

    def check_invariants(self) -> None:
        for p in self.pools:
            p.check_invariants()
        for m in self.managed.values():
            m.allocator.check_invariants()

    # -- census ---------------------------------------------------------------

    def census(self, running: Iterable = ()) -> Census:
        """Classify every byte of the budget.

        ``running`` yields objects with ``tables`` and ``computed`` (only the
        uniform strategy needs them, to tell needed bytes from waste).
        """
        evictable = 0
        owned = 0
        for m in self.managed.values():
            a = m.allocator
            evictable += a.n_evictable * a.small_page_size
            owned += a.owned_bytes
        if self.is_uniform:
            used = self._uniform_needed(list(running))
        else:
            used = {}
            for m in self.managed.values():
                a = m.allocator
                if m.spec.kind is LayerKind.MAMBA:
                    used[m.name] = a.n_used * a.small_page_size
                else:
                    used[m.name] = a.used_tokens * m.spec.bytes_per_token
        unallocated = sum(p.free_count * p.large_page_bytes for p in self.pools)
        reserved = sum(p.reserved_bytes for p in self.pools) + self.unpooled
        wasted = owned - sum(used.values()) - evictable
        return Census(used, evictable, wasted, unallocated, reserved)

    def _uniform_needed(self, running: list) -> dict[str, int]:
        a = self.managed[UNIFORM_GROUP].allocator
        text = a.used_tokens - a.used_image_tokens
        out = {}
        for g in self.spec.groups:
            kind = g.kind
            if kind is LayerKind.FULL:
                tokens = text if self.has_cross else a.used_tokens
                out[g.name] = int(tokens * g.keep_ratio) * g.bytes_per_token
            elif kind is LayerKind.CROSS_ATTENTION:
                out[g.name] = a.used_image_tokens * g.bytes_per_token
            elif kind is LayerKind.SLIDING_WINDOW:
                out[g.name] = self._window_tokens(running, g) * g.bytes_per_token
            elif kind is LayerKind.MAMBA:
                out[g.name] = sum(1 for r in running if r.computed > 0) * g.bytes_per_token
            else:
                out[g.name] = 0
        return out

    def _window_tokens(self, running: list, g: LayerGroupSpec) -> int:
        # tokens inside some running request's window, counted once per page
        W = g.window_tokens
        if self.managed[UNIFORM_GROUP].spec.tokens_per_page == 1 and not self.has_cross:
            pages = set()
            for r in running:
                t = r.tables[UNIFORM_GROUP]
                b = t.blocks_in_range(max(0, r.computed - W), r.computed)
                pages.update(t.pages[b.start:b.stop])
            pages.discard(None)
            return len(pages)
        per_page: dict = {}
        for r in running:
            t = r.tables[UNIFORM_GROUP]
            lo = max(0, r.computed - W)
            hi = r.computed
            tpp = t.tokens_per_page
            for b in t.blocks_in_range(lo, hi):
                page = t.pages[b]
                if page is None:
                    continue
                first = b * tpp
                last = min(len(t.positions), first + tpp)
                n = sum(1 for i in range(first, last) if lo <= t.positions[i] < hi and self._stores(g, r, t.positions[i]))
                if n > per_page.get(page, 0):
                    per_page[page] = n
        return sum(per_page.values())

    def _stores(self, g: LayerGroupSpec, r, position: int) -> bool:
        return not (self.has_cross and r.is_image(position))
