"""First-level allocator: a pool of equally sized large pages.

Large pages are handed to per-group allocators, which carve them into small
pages. A page whose small pages are all evictable is registered here as an
eviction candidate so the pool can pick the least recently used one across
every group.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional, Protocol


class AllocatorError(RuntimeError):
    pass


class DoubleFree(AllocatorError):
    pass


class NoFreePage(AllocatorError):
    pass


class NothingEvictable(AllocatorError):
    pass


class LargePageOwner(Protocol):
    def evict_large_page(self, index: int) -> None: ...


@dataclass
class LargePageRecord:
    id: int
    owner: Optional[str] = None

    @property
    def is_free(self) -> bool:
        return self.owner is None


class LargePagePool:
    """Fixed set of ``capacity_bytes // large_page_bytes`` large pages.

    Allocation is lowest-index-first. Bytes that do not fill a whole page are
    kept as ``reserved_bytes`` and never handed out.
    """

    def __init__(self, capacity_bytes: int, large_page_bytes: int):
        if large_page_bytes <= 0:
            raise ValueError("large_page_bytes must be positive")
        if capacity_bytes < 0:
            raise ValueError("capacity_bytes must be nonnegative")
        self.capacity_bytes = capacity_bytes
        self.large_page_bytes = large_page_bytes
        self.num_pages = capacity_bytes // large_page_bytes
        self.reserved_bytes = capacity_bytes - self.num_pages * large_page_bytes
        self.records = [LargePageRecord(i) for i in range(self.num_pages)]
        self._free = list(range(self.num_pages))  # already a valid heap
        self._owners: dict[str, LargePageOwner] = {}
        # eviction candidates: index -> (lru timestamp, max prefix length, version)
        self._cand: dict[int, tuple[int, int, int]] = {}
        self._cand_heap: list[tuple[int, int, int, int]] = []
        self._version = 0

    def register_owner(self, name: str, owner: LargePageOwner) -> None:
        self._owners[name] = owner

    @property
    def free_count(self) -> int:
        return len(self._free)

    @property
    def owned_count(self) -> int:
        return self.num_pages - len(self._free)

    def free_pages(self) -> list[int]:
        return sorted(self._free)

    def request_large_page(self, owner: str) -> int:
        if not self._free:
            raise NoFreePage(f"no free large page for {owner}")
        index = heapq.heappop(self._free)
        self.records[index].owner = owner
        return index

    def return_large_page(self, index: int) -> None:
        rec = self.records[index]
        if rec.owner is None:
            raise DoubleFree(f"large page {index} is already free")
        rec.owner = None
        self._cand.pop(index, None)
        heapq.heappush(self._free, index)

    # -- eviction candidates ------------------------------------------------

    def set_evictable(self, index: int, lru_timestamp: int, max_prefix_length: int) -> None:
        self._version += 1
        if len(self._cand_heap) > 2 * len(self._cand) + 1024:
            self._cand_heap = [e for e in self._cand_heap
                               if self._cand.get(e[2], (0, 0, -1))[2] == e[3]]
            heapq.heapify(self._cand_heap)
        self._cand[index] = (lru_timestamp, max_prefix_length, self._version)
        heapq.heappush(self._cand_heap, (lru_timestamp, -max_prefix_length, index, self._version))

    def clear_evictable(self, index: int) -> None:
        self._cand.pop(index, None)

    def is_evictable(self, index: int) -> bool:
        return index in self._cand

    def lru_timestamp(self, index: int) -> Optional[int]:
        c = self._cand.get(index)
        return None if c is None else c[0]

    def peek_lru_large_page(self) -> Optional[int]:
        heap = self._cand_heap
        while heap:
            ts, neg_len, index, version = heap[0]
            cur = self._cand.get(index)
            if cur is not None and cur[2] == version:
                return index
            heapq.heappop(heap)
        return None

    def evict_lru_large_page(self) -> int:
        """Evict the least recently used fully-evictable large page.

        Ties on timestamp go to the page holding the longest prefix, then to
        the lowest index. The page comes back Free.
        """
        index = self.peek_lru_large_page()
        if index is None:
            raise NothingEvictable("no fully evictable large page")
        heapq.heappop(self._cand_heap)
        owner = self.records[index].owner
        self._owners[owner].evict_large_page(index)
        assert self.records[index].owner is None, "owner did not release the evicted page"
        return index

    def check_invariants(self) -> None:
        free = set(self._free)
        assert len(free) == len(self._free), "duplicate entry in free list"
        for rec in self.records:
            assert (rec.id in free) == (rec.owner is None), f"page {rec.id} free-list/owner mismatch"
        for index in self._cand:
            assert self.records[index].owner is not None, f"free page {index} marked evictable"
        owned = sum(rec.owner is not None for rec in self.records)
        assert len(self._free) + owned == self.num_pages
