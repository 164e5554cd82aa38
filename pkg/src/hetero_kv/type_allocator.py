"""Second-level allocator: small pages of one layer group carved from large pages.

Every small page is Empty, Evictable (cached content, no user) or Used. Small
pages are associated with the request that caused their large page to be
taken, so a request's pages tend to share large pages and free them together.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Hashable, NamedTuple, Optional

from .pool import AllocatorError, DoubleFree, LargePagePool, NothingEvictable


class OutOfMemory(AllocatorError):
    """All five allocation steps failed; the scheduler has to preempt."""


class PageState(str, enum.Enum):
    EMPTY = "empty"
    EVICTABLE = "evictable"
    USED = "used"


ALLOWED_TRANSITIONS = {
    (PageState.EMPTY, PageState.USED),
    (PageState.USED, PageState.EMPTY),
    (PageState.USED, PageState.EVICTABLE),
    (PageState.EVICTABLE, PageState.EMPTY),
    (PageState.EVICTABLE, PageState.USED),
}


class SmallPageId(NamedTuple):
    large_page: int
    slot: int


@dataclass(eq=False)
class SmallPageRecord:
    id: SmallPageId
    global_index: int
    large_pages: tuple[int, ...]
    state: PageState = PageState.EMPTY
    associated_request: Optional[str] = None
    ref_count: int = 0
    last_access: int = 0
    prefix_length: int = 0
    cache_key: Optional[Hashable] = None
    tokens: int = 0
    image_tokens: int = 0
    version: int = 0
    live: bool = True


@dataclass(frozen=True)
class FragmentationReport:
    used: int
    evictable: int
    empty_stranded: int
    padding: int = 0

    @property
    def owned(self) -> int:
        return self.used + self.evictable + self.empty_stranded + self.padding


class TypeAllocator:
    """Small-page allocator for one layer group.

    ``request_aware=False`` turns off request association and always takes the
    lowest free slot; it exists only as the naive baseline.
    """

    def __init__(self, group: str, small_page_size: int, pool: LargePagePool, *,
                 slots_per_large: Optional[int] = None, request_aware: bool = True):
        large = pool.large_page_bytes
        self.group = group
        self.small_page_size = small_page_size
        self.pool = pool
        self.request_aware = request_aware
        if small_page_size > large:
            if small_page_size % large:
                raise ValueError(f"{group}: small page {small_page_size} is not a multiple of {large}")
            self.span = small_page_size // large
            self.slots_per_large = 1
        else:
            self.span = 1
            self.slots_per_large = slots_per_large or large // small_page_size
            if self.slots_per_large * small_page_size > large:
                raise ValueError(f"{group}: {self.slots_per_large} slots do not fit a large page")
        self.padding_per_large = 0 if self.span > 1 else large - self.slots_per_large * small_page_size
        pool.register_owner(group, self)

        self.pages: dict[SmallPageId, SmallPageRecord] = {}
        self.cached: dict[Hashable, SmallPageRecord] = {}
        self._lp_slots: dict[int, list[SmallPageRecord]] = {}
        self._lp_evictable: Counter = Counter()
        self._lp_empty: Counter = Counter()
        self._empty_by_req: dict[Optional[str], set[SmallPageRecord]] = {}
        self._empty_heap: list[tuple[int, int, SmallPageRecord]] = []
        self._evict_heap: list[tuple[int, int, int, int, int, SmallPageRecord]] = []
        self._seq = itertools.count()
        self.n_used = 0
        self.n_evictable = 0
        self.n_empty = 0
        self.used_tokens = 0
        self.used_image_tokens = 0
        self.step_counts: Counter = Counter()
        self.last_step: Optional[int] = None
        self.on_transition: Optional[Callable[[SmallPageRecord, PageState, PageState], None]] = None

    # -- helpers --------------------------------------------------------------

    def record(self, page: SmallPageId) -> SmallPageRecord:
        try:
            return self.pages[page]
        except KeyError:
            raise AllocatorError(f"{self.group}: unknown small page {page}") from None

    def global_index(self, page: SmallPageId) -> int:
        return page.large_page * self.slots_per_large + page.slot

    @property
    def owned_large_pages(self) -> list[int]:
        return sorted(self._lp_slots)

    def _take_large_page(self, index: int, request: Optional[str]) -> None:
        indices = (index,)
        if self.span > 1:
            indices = (index,) + tuple(self.pool.request_large_page(self.group) for _ in range(self.span - 1))
        slots = []
        for s in range(self.slots_per_large):
            pid = SmallPageId(index, s)
            rec = SmallPageRecord(pid, self.global_index(pid), indices,
                                  associated_request=request if self.request_aware else None)
            self.pages[pid] = rec
            slots.append(rec)
            self.n_empty += 1
            self._push_empty(rec)
        for lp in indices:
            self._lp_slots[lp] = slots
            self._lp_empty[lp] = len(slots)

    def _release_large_page(self, slots: list[SmallPageRecord]) -> None:
        lps = slots[0].large_pages
        for rec in slots:
            assert rec.state is PageState.EMPTY
            rec.live = False
            del self.pages[rec.id]
            self.n_empty -= 1
            self._drop_empty_index(rec)
        for lp in lps:
            del self._lp_slots[lp]
            del self._lp_empty[lp]
            self._lp_evictable.pop(lp, None)
            self.pool.return_large_page(lp)

    def _push_empty(self, rec: SmallPageRecord) -> None:
        self._empty_by_req.setdefault(rec.associated_request, set()).add(rec)
        heap = self._empty_heap
        if len(heap) > 2 * self.n_empty + 1024:
            heap[:] = [e for e in heap if e[2].live and e[2].state is PageState.EMPTY and e[2] is not rec]
            heapq.heapify(heap)
        heapq.heappush(heap, (rec.global_index, next(self._seq), rec))

    def _drop_empty_index(self, rec: SmallPageRecord) -> None:
        bucket = self._empty_by_req.get(rec.associated_request)
        if bucket is not None:
            bucket.discard(rec)
            if not bucket:
                del self._empty_by_req[rec.associated_request]

    def _large_page_priority(self, lp: int) -> tuple[int, int]:
        slots = self._lp_slots[lp]
        return max(r.last_access for r in slots), max(r.prefix_length for r in slots)

    def _refresh_candidate(self, rec: SmallPageRecord) -> None:
        for lp in rec.large_pages:
            if self._lp_evictable[lp] == self.slots_per_large:
                self.pool.set_evictable(lp, *self._large_page_priority(lp))

    def _push_evictable(self, rec: SmallPageRecord) -> None:
        rec.version += 1
        heap = self._evict_heap
        if len(heap) > 2 * self.n_evictable + 1024:
            heap[:] = [e for e in heap if e[5].live and e[5].state is PageState.EVICTABLE and e[3] == e[5].version]
            heapq.heapify(heap)
        heapq.heappush(heap, (rec.last_access, -rec.prefix_length, rec.global_index, rec.version,
                              next(self._seq), rec))

    def _set_state(self, rec: SmallPageRecord, new: PageState) -> None:
        old = rec.state
        if (old, new) not in ALLOWED_TRANSITIONS:
            raise AllocatorError(f"{self.group}: illegal transition {old.value} -> {new.value} for {rec.id}")
        if old is PageState.USED:
            self.n_used -= 1
            self.used_tokens -= rec.tokens
            self.used_image_tokens -= rec.image_tokens
        elif old is PageState.EVICTABLE:
            self.n_evictable -= 1
            rec.version += 1
            for lp in rec.large_pages:
                self._lp_evictable[lp] -= 1
                self.pool.clear_evictable(lp)
        else:
            self.n_empty -= 1
            self._drop_empty_index(rec)
            for lp in rec.large_pages:
                self._lp_empty[lp] -= 1
        rec.state = new
        if new is PageState.USED:
            self.n_used += 1
            self.used_tokens += rec.tokens
            self.used_image_tokens += rec.image_tokens
        elif new is PageState.EVICTABLE:
            self.n_evictable += 1
            for lp in rec.large_pages:
                self._lp_evictable[lp] += 1
            self._push_evictable(rec)
            self._refresh_candidate(rec)
        else:
            self.n_empty += 1
            if rec.cache_key is not None:
                if self.cached.get(rec.cache_key) is rec:
                    del self.cached[rec.cache_key]
                rec.cache_key = None
            rec.tokens = rec.image_tokens = 0
            rec.ref_count = 0
            rec.last_access = rec.prefix_length = 0
            for lp in rec.large_pages:
                self._lp_empty[lp] += 1
            self._push_empty(rec)
        if self.on_transition is not None:
            self.on_transition(rec, old, new)

    def _use(self, rec: SmallPageRecord, request: str, step: int) -> SmallPageId:
        if rec.associated_request != request:
            self._drop_empty_index(rec)
            rec.associated_request = request
        self._set_state(rec, PageState.USED)
        rec.ref_count = 1
        self.step_counts[step] += 1
        self.last_step = step
        return rec.id

    def _pop_empty(self, request: Optional[str]) -> Optional[SmallPageRecord]:
        if request is not None:
            bucket = self._empty_by_req.get(request)
            if not bucket:
                return None
            return min(bucket, key=lambda r: r.global_index)
        heap = self._empty_heap
        while heap:
            rec = heap[0][2]
            if rec.live and rec.state is PageState.EMPTY:
                return rec
            heapq.heappop(heap)
        return None

    def _pop_evictable(self) -> Optional[SmallPageRecord]:
        heap = self._evict_heap
        while heap:
            _, _, _, version, _, rec = heap[0]
            heapq.heappop(heap)
            if rec.live and rec.state is PageState.EVICTABLE and rec.version == version:
                return rec
        return None

    # -- public API -----------------------------------------------------------

    def has_associated_empty(self, request: str) -> bool:
        return bool(self._empty_by_req.get(request))

    def allocate(self, request: str) -> SmallPageId:
        """Hand out one small page, trying the five steps in order."""
        # 1. an empty slot already associated with this request
        rec = self._pop_empty(request if self.request_aware else None)
        if rec is not None:
            return self._use(rec, request, 1)
        # 2. a free large page
        if self.pool.free_count >= self.span:
            index = self.pool.request_large_page(self.group)
            self._take_large_page(index, request)
            return self._use(self.pages[SmallPageId(index, 0)], request, 2)
        # 3. evict a whole large page (any group) by LRU
        try:
            while self.pool.free_count < self.span:
                self.pool.evict_lru_large_page()
        except NothingEvictable:
            pass
        else:
            index = self.pool.request_large_page(self.group)
            self._take_large_page(index, request)
            return self._use(self.pages[SmallPageId(index, 0)], request, 3)
        # 4. any empty slot of this group, whoever it is associated with
        rec = self._pop_empty(None)
        if rec is not None:
            return self._use(rec, request, 4)
        # 5. evict one evictable small page of this group
        rec = self._pop_evictable()
        if rec is not None:
            self._set_state(rec, PageState.EMPTY)
            return self._use(rec, request, 5)
        raise OutOfMemory(f"{self.group}: no page for request {request}")

    def free(self, page: SmallPageId, cache_key: Optional[Hashable] = None) -> None:
        """Drop one reference. The last reference leaves the page Evictable
        when ``cache_key`` is given, otherwise Empty."""
        rec = self.record(page)
        if rec.state is PageState.EMPTY:
            raise DoubleFree(f"{self.group}: page {page} is already free")
        if rec.state is PageState.EVICTABLE:
            raise DoubleFree(f"{self.group}: page {page} is cached, not in use")
        rec.ref_count -= 1
        if rec.ref_count > 0:
            return
        if cache_key is not None and self._claim_key(rec, cache_key):
            self._set_state(rec, PageState.EVICTABLE)
            return
        self._set_state(rec, PageState.EMPTY)
        lp = rec.large_pages[0]
        if self._lp_empty[lp] == self.slots_per_large:
            self._release_large_page(self._lp_slots[lp])

    def _claim_key(self, rec: SmallPageRecord, key: Hashable) -> bool:
        holder = self.cached.get(key)
        if holder is rec:
            return True
        if holder is not None:
            return False  # same content already cached in another page
        if rec.cache_key is not None and self.cached.get(rec.cache_key) is rec:
            del self.cached[rec.cache_key]
        rec.cache_key = key
        self.cached[key] = rec
        return True

    def register_key(self, page: SmallPageId, key: Hashable) -> bool:
        """Publish the content key of a Used page so other requests can share it."""
        rec = self.record(page)
        if rec.state is not PageState.USED:
            raise AllocatorError(f"{self.group}: only used pages get keys at fill time")
        holder = self.cached.get(key)
        if holder is not None and holder.state is PageState.EVICTABLE:
            # a live copy supersedes an idle duplicate, so the key survives
            # as long as someone still uses the content
            self._drop(holder)
        return self._claim_key(rec, key)

    def _drop(self, rec: SmallPageRecord) -> None:
        self._set_state(rec, PageState.EMPTY)
        lp = rec.large_pages[0]
        if self._lp_empty[lp] == self.slots_per_large:
            self._release_large_page(self._lp_slots[lp])

    def lookup(self, key: Hashable) -> Optional[SmallPageId]:
        rec = self.cached.get(key)
        return None if rec is None else rec.id

    def pin(self, page: SmallPageId, request: str) -> None:
        """Take a reference on a cached page (cache hit)."""
        rec = self.record(page)
        if rec.state is PageState.USED:
            rec.ref_count += 1
            return
        if rec.state is not PageState.EVICTABLE:
            raise AllocatorError(f"{self.group}: cannot pin empty page {page}")
        self._drop_empty_index(rec)
        rec.associated_request = request
        self._set_state(rec, PageState.USED)
        rec.ref_count = 1

    def add_tokens(self, page: SmallPageId, tokens: int, image_tokens: int = 0) -> None:
        rec = self.record(page)
        if rec.state is not PageState.USED:
            raise AllocatorError(f"{self.group}: writing into a {rec.state.value} page")
        rec.tokens += tokens
        rec.image_tokens += image_tokens
        self.used_tokens += tokens
        self.used_image_tokens += image_tokens

    def touch(self, page: SmallPageId, time: int) -> None:
        rec = self.pages[page]
        if time <= rec.last_access:
            return
        rec.last_access = time
        if rec.state is PageState.EVICTABLE:
            self._push_evictable(rec)
            self._refresh_candidate(rec)

    def set_prefix_length(self, page: SmallPageId, value: int) -> None:
        rec = self.pages[page]
        if rec.prefix_length == value:
            return
        rec.prefix_length = value
        if rec.state is PageState.EVICTABLE:
            self._push_evictable(rec)
            self._refresh_candidate(rec)

    def evict_small_page(self) -> Optional[SmallPageId]:
        """Evict the LRU evictable small page of this group (leaves it Empty)."""
        rec = self._pop_evictable()
        if rec is None:
            return None
        self._drop(rec)
        return rec.id

    def evict_large_page(self, index: int) -> None:
        slots = self._lp_slots[index]
        for rec in slots:
            if rec.state is not PageState.EVICTABLE:
                raise AllocatorError(f"{self.group}: large page {index} holds a {rec.state.value} page")
        for rec in slots:
            self._set_state(rec, PageState.EMPTY)
        self._release_large_page(slots)

    # -- accounting -----------------------------------------------------------

    def fragmentation_report(self) -> FragmentationReport:
        slot_bytes = self.small_page_size
        padding = (len(self._lp_slots) // self.span) * self.padding_per_large
        return FragmentationReport(
            used=self.n_used * slot_bytes,
            evictable=self.n_evictable * slot_bytes,
            empty_stranded=self.n_empty * slot_bytes,
            padding=padding,
        )

    @property
    def owned_bytes(self) -> int:
        return len(self._lp_slots) * self.pool.large_page_bytes

    def stranded_large_pages(self) -> list[int]:
        """Owned large pages holding at least one Empty slot."""
        return sorted(lp for lp, n in self._lp_empty.items() if n > 0)

    def check_invariants(self) -> None:
        counts = Counter(r.state for r in self.pages.values())
        assert counts[PageState.USED] == self.n_used
        assert counts[PageState.EVICTABLE] == self.n_evictable
        assert counts[PageState.EMPTY] == self.n_empty
        assert sum(r.tokens for r in self.pages.values() if r.state is PageState.USED) == self.used_tokens
        for rec in self.pages.values():
            for lp in rec.large_pages:
                assert lp in self._lp_slots, f"{rec.id} outside an owned large page"
                assert self.pool.records[lp].owner == self.group
            if rec.state is PageState.USED:
                assert rec.associated_request is not None and rec.ref_count >= 1
            elif rec.state is PageState.EVICTABLE:
                assert rec.cache_key is not None and self.cached.get(rec.cache_key) is rec
            else:
                assert rec.cache_key is None
        for key, rec in self.cached.items():
            assert rec.live and rec.cache_key == key and rec.state is not PageState.EMPTY
        for lp, slots in self._lp_slots.items():
            empties = sum(r.state is PageState.EMPTY for r in slots)
            evictables = sum(r.state is PageState.EVICTABLE for r in slots)
            assert empties == self._lp_empty[lp] and evictables == self._lp_evictable[lp]
            assert empties < len(slots), f"large page {lp} is all empty but still owned"
            assert self.pool.is_evictable(lp) == (evictables == len(slots))
