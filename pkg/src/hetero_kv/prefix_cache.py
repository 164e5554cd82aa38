"""Prefix caching across layer groups with different dependency patterns.

Each group answers "which prefix lengths could I serve from cache" through its
policy; the hit length is the largest length every group agrees on. Cached
pages are identified by a chained content digest of the whole prefix up to the
page's last token, so two requests share a page only if everything before it
matches too.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Hashable, Iterable, Iterator, Optional, Sequence

if TYPE_CHECKING:
    from .config import LayerGroupSpec
    from .policies import ImageSpan, LayerPolicy
    from .type_allocator import SmallPageId, TypeAllocator

ROOT_DIGEST = b"\x00" * 16


@dataclass(frozen=True)
class PrefixSet:
    """Set of prefix lengths stored as sorted, disjoint, inclusive ranges."""
    ranges: tuple[tuple[int, int], ...] = ()

    @classmethod
    def from_range(cls, lo: int, hi: int) -> "PrefixSet":
        return cls(((lo, hi),)) if lo <= hi else cls()

    @classmethod
    def from_lengths(cls, lengths: Iterable[int]) -> "PrefixSet":
        out: list[list[int]] = []
        for p in sorted(set(lengths)):
            if out and out[-1][1] + 1 == p:
                out[-1][1] = p
            else:
                out.append([p, p])
        return cls(tuple((lo, hi) for lo, hi in out))

    def __contains__(self, p: int) -> bool:
        return any(lo <= p <= hi for lo, hi in self.ranges)

    def __iter__(self) -> Iterator[int]:
        for lo, hi in self.ranges:
            yield from range(lo, hi + 1)

    def __len__(self) -> int:
        return sum(hi - lo + 1 for lo, hi in self.ranges)

    def __bool__(self) -> bool:
        return bool(self.ranges)

    def max(self) -> int:
        return self.ranges[-1][1] if self.ranges else 0

    def intersect(self, other: "PrefixSet") -> "PrefixSet":
        a, b = self.ranges, other.ranges
        i = j = 0
        out = []
        while i < len(a) and j < len(b):
            lo = max(a[i][0], b[j][0])
            hi = min(a[i][1], b[j][1])
            if lo <= hi:
                out.append((lo, hi))
            if a[i][1] < b[j][1]:
                i += 1
            else:
                j += 1
        return PrefixSet(tuple(out))

    def descending(self) -> Iterator[int]:
        for lo, hi in reversed(self.ranges):
            yield from range(hi, lo - 1, -1)


def get_possible_prefix(policy: "LayerPolicy", is_hit: Sequence[bool]) -> PrefixSet:
    return policy.get_possible_prefix(is_hit)


def find_longest_common_prefix(hit_vectors: dict[str, Sequence[bool]],
                               policies: dict[str, "LayerPolicy"],
                               limit: Optional[int] = None,
                               accept=None) -> int:
    """Largest prefix length valid for every group (0 when none is).

    ``accept(p)`` can veto lengths, e.g. ones that split a multi-token page.
    """
    common: Optional[PrefixSet] = None
    for name, vec in hit_vectors.items():
        s = policies[name].get_possible_prefix(vec)
        common = s if common is None else common.intersect(s)
        if not common:
            return 0
    if common is None:
        return 0
    for p in common.descending():
        if limit is not None and p > limit:
            continue
        if accept is None or accept(p):
            return p
    return 0


# --- content keys -------------------------------------------------------------


def token_digest(parent: bytes, token: Hashable) -> bytes:
    return hashlib.blake2b(parent + repr(token).encode(), digest_size=16).digest()


def extend_digests(digests: list[bytes], stream: Sequence[Hashable]) -> list[bytes]:
    """Append chained digests for tokens of ``stream`` not yet covered."""
    prev = digests[-1] if digests else ROOT_DIGEST
    for i in range(len(digests), len(stream)):
        prev = token_digest(prev, stream[i])
        digests.append(prev)
    return digests


@dataclass(frozen=True)
class BlockKey:
    """Identity of the cached content ending at one page.

    Equality also compares the parent digest and the raw tokens, so a digest
    collision can never alias two different prefixes.
    """
    group: str
    digest: bytes
    parent: bytes
    tokens: tuple

    def __hash__(self):
        return hash((self.group, self.digest))


def block_key(group: str, stream: Sequence[Hashable], digests: Sequence[bytes],
              start: int, end: int) -> BlockKey:
    """Key for a page whose tokens end at stream position ``end - 1``; the
    previous page of the same group ended at ``start - 1``."""
    parent = digests[start - 1] if start > 0 else ROOT_DIGEST
    return BlockKey(group, digests[end - 1], parent, tuple(stream[start:end]))


# --- per-request page tables --------------------------------------------------


@dataclass
class GroupTable:
    """Pages one request holds in one layer group.

    ``positions`` lists the stream positions this group stores; every
    ``tokens_per_page`` of them form one block backed by one small page.
    Mamba groups keep a running state page plus checkpoint pages instead.
    """
    group: str
    policy: "LayerPolicy"
    tokens_per_page: int = 1
    positions: list[int] = field(default_factory=list)
    pages: list[Optional["SmallPageId"]] = field(default_factory=list)
    checkpoints: dict[int, "SmallPageId"] = field(default_factory=dict)
    state_page: Optional["SmallPageId"] = None
    released: int = 0  # leading blocks already handed back
    registered: int = 0  # leading blocks whose content key is published

    def count_below(self, position: int) -> int:
        return bisect_left(self.positions, position)

    def block_span(self, block: int) -> tuple[int, int]:
        """Stream interval (start, end) of a full block for keying."""
        tpp = self.tokens_per_page
        first = block * tpp
        start = self.positions[first - 1] + 1 if first > 0 else 0
        return start, self.positions[first + tpp - 1] + 1

    def block_last_position(self, block: int) -> int:
        return self.positions[min(len(self.positions), (block + 1) * self.tokens_per_page) - 1]

    def blocks_in_range(self, lo: int, hi: int) -> range:
        a = self.count_below(lo)
        b = self.count_below(hi)
        if a >= b:
            return range(0)
        tpp = self.tokens_per_page
        return range(a // tpp, (b - 1) // tpp + 1)

    def accessed_pages(self, length: int, image_spans: Sequence["ImageSpan"] = ()) -> list["SmallPageId"]:
        ranges = self.policy.accessed_ranges(length, image_spans)
        out = []
        if self.state_page is not None:
            out.append(self.state_page)
        if self.checkpoints:
            for lo, hi in ranges:
                page = self.checkpoints.get(hi)
                if page is not None:
                    out.append(page)
            return out
        for lo, hi in ranges:
            for b in self.blocks_in_range(lo, hi):
                if b < len(self.pages) and self.pages[b] is not None:
                    out.append(self.pages[b])
        return out

    def held_pages(self) -> list["SmallPageId"]:
        out = [p for p in self.pages if p is not None]
        out.extend(self.checkpoints.values())
        if self.state_page is not None:
            out.append(self.state_page)
        return out


def update_last_access(table: GroupTable, allocator: "TypeAllocator", time: int, length: int,
                       image_spans: Sequence["ImageSpan"] = ()) -> None:
    """Stamp every page the request reads at this step."""
    for page in table.accessed_pages(length, image_spans):
        allocator.touch(page, time)


def set_prefix_length(table: GroupTable, allocator: "TypeAllocator",
                      image_spans: Sequence["ImageSpan"] = (), blocks: Optional[Iterable[int]] = None) -> None:
    """Record, per page, how long a prefix must be to need it."""
    if blocks is None:
        blocks = range(len(table.pages))
    for b in blocks:
        page = table.pages[b]
        if page is not None:
            pos = table.block_last_position(b)
            allocator.set_prefix_length(page, table.policy.prefix_length(pos, image_spans))
    for p, page in table.checkpoints.items():
        allocator.set_prefix_length(page, p)


class PrefixCache:
    """Cross-group lookup that turns content keys into a shared hit length."""

    def __init__(self, groups: dict[str, "LayerGroupSpec"], policies: dict[str, "LayerPolicy"],
                 allocators: dict[str, "TypeAllocator"]):
        self.groups = groups
        self.policies = policies
        self.allocators = allocators
        self.lookups = 0
        self.hit_tokens = 0

    def checkpoint_key(self, group: str, stream: Sequence[Hashable], digests: Sequence[bytes], p: int) -> BlockKey:
        k = self.policies[group].interval
        return block_key(group, stream, digests, max(0, p - k), p)

    def hit_vector(self, table: GroupTable, stream: Sequence[Hashable], digests: Sequence[bytes],
                   n: int) -> list[bool]:
        from .config import LayerKind
        kind = self.groups[table.group].kind
        alloc = self.allocators[table.group]
        if kind is LayerKind.VISION_EMBEDDING:
            return [True] * n
        if kind is LayerKind.MAMBA:
            vec = [False] * n
            k = self.policies[table.group].interval
            for p in range(k, n + 1, k):
                vec[p - 1] = self.checkpoint_key(table.group, stream, digests, p) in alloc.cached
            return vec
        vec = [True] * n
        tpp = table.tokens_per_page
        stored = table.count_below(n)
        for b in range((stored + tpp - 1) // tpp):
            lo = b * tpp
            hi = min(stored, lo + tpp)
            hit = hi - lo == tpp and block_key(table.group, stream, digests, *table.block_span(b)) in alloc.cached
            if not hit:
                for i in range(lo, hi):
                    vec[table.positions[i]] = False
        return vec

    def page_aligned(self, tables: dict[str, GroupTable], p: int) -> bool:
        for t in tables.values():
            if t.tokens_per_page > 1 and t.count_below(p) % t.tokens_per_page:
                return False
        return True

    def longest_hit(self, tables: dict[str, GroupTable], stream: Sequence[Hashable],
                    digests: Sequence[bytes], n: int) -> int:
        vectors = {g: self.hit_vector(t, stream, digests, n) for g, t in tables.items()}
        return find_longest_common_prefix(vectors, self.policies, limit=n,
                                          accept=lambda p: self.page_aligned(tables, p))

    def lookup_and_pin(self, request: str, tables: dict[str, GroupTable], stream: Sequence[Hashable],
                       digests: Sequence[bytes], n: int, time: int) -> int:
        """Find the hit length for a new request, take references on the
        pages it needs and install them in ``tables``. Returns the hit length."""
        from .config import LayerKind
        self.lookups += 1
        h = self.longest_hit(tables, stream, digests, n)
        if h <= 0:
            return 0
        for g, t in tables.items():
            kind = self.groups[g].kind
            alloc = self.allocators[g]
            if kind is LayerKind.VISION_EMBEDDING:
                continue
            if kind is LayerKind.MAMBA:
                key = self.checkpoint_key(g, stream, digests, h)
                page = alloc.lookup(key)
                alloc.pin(page, request)
                alloc.touch(page, time)
                t.checkpoints[h] = page
                continue
            nblocks = t.count_below(h) // t.tokens_per_page
            first = 0
            if kind is LayerKind.SLIDING_WINDOW:
                first = t.count_below(t.policy.retained_from(h)) // t.tokens_per_page
            t.pages = [None] * nblocks
            t.released = first
            for b in range(first, nblocks):
                page = alloc.lookup(block_key(g, stream, digests, *t.block_span(b)))
                alloc.pin(page, request)
                alloc.touch(page, time)
                t.pages[b] = page
        self.hit_tokens += h
        return h
