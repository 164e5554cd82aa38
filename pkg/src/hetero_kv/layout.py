"""Byte layout of the page pool and the per-layer views paged kernels consume.

A large page is split into small pages, and each small page is split into one
contiguous chunk per layer. A kernel for one layer then sees an ordinary paged
cache: a base offset, a fixed page stride, and page ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Union

from .config import ModelSpec, PageSizeStrategy, compatible_page_size, small_page_size
from .type_allocator import SmallPageId


@dataclass(frozen=True)
class GroupGeometry:
    num_layers: int
    small_page_size: int
    per_layer_bytes: int
    slots_per_large: int

    def __post_init__(self):
        assert self.small_page_size == self.per_layer_bytes * self.num_layers


@dataclass(frozen=True)
class AddressMap:
    large_page_bytes: int
    num_large_pages: int
    groups: dict[str, GroupGeometry]
    pool_base: int = 0

    @property
    def pool_end(self) -> int:
        return self.pool_base + self.num_large_pages * self.large_page_bytes


@dataclass(frozen=True)
class LayerView:
    start_offset: int
    page_stride: int
    exec_page_size: int

    def address(self, exec_page_id: int) -> tuple[int, int]:
        start = self.start_offset + exec_page_id * self.page_stride
        return start, start + self.exec_page_size


def build_address_map(spec: ModelSpec, num_large_pages: int,
                      strategy: Union[PageSizeStrategy, str] = PageSizeStrategy.LCM,
                      large_page_bytes: Optional[int] = None) -> AddressMap:
    large = large_page_bytes or compatible_page_size(spec, strategy)
    groups = {}
    for g in spec.groups:
        small = small_page_size(g)
        if large % small:
            raise ValueError(f"{g.name}: small page {small} does not tile a {large}-byte large page")
        groups[g.name] = GroupGeometry(g.num_layers, small, g.per_layer_page_bytes, large // small)
    return AddressMap(large, num_large_pages, groups)


def address_of(amap: AddressMap, group: str, layer: int, page: SmallPageId) -> tuple[int, int]:
    """Byte range [start, end) of one layer's chunk inside a small page."""
    geo = amap.groups[group]
    if not 0 <= layer < geo.num_layers:
        raise ValueError(f"{group}: layer {layer} out of range")
    if not (0 <= page.large_page < amap.num_large_pages and 0 <= page.slot < geo.slots_per_large):
        raise ValueError(f"{group}: page {page} out of bounds")
    start = (amap.pool_base + page.large_page * amap.large_page_bytes
             + page.slot * geo.small_page_size + layer * geo.per_layer_bytes)
    return start, start + geo.per_layer_bytes


def exec_page_id(amap: AddressMap, group: str, page: SmallPageId) -> int:
    return page.large_page * amap.groups[group].slots_per_large + page.slot


def layer_view(amap: AddressMap, group: str, layer: int) -> LayerView:
    geo = amap.groups[group]
    if not 0 <= layer < geo.num_layers:
        raise ValueError(f"{group}: layer {layer} out of range")
    return LayerView(amap.pool_base + layer * geo.per_layer_bytes, geo.small_page_size, geo.per_layer_bytes)


def iter_ranges(amap: AddressMap, group: str, pages=None) -> Iterator[tuple[int, SmallPageId, int, int]]:
    """Yield (layer, page, start, end) for every layer of the given pages
    (all pages of the pool when ``pages`` is None)."""
    geo = amap.groups[group]
    if pages is None:
        pages = (SmallPageId(lp, s) for lp in range(amap.num_large_pages) for s in range(geo.slots_per_large))
    for page in pages:
        for layer in range(geo.num_layers):
            yield (layer, page) + address_of(amap, group, layer, page)


def find_overlap(ranges: list[tuple[int, int]]) -> Optional[tuple[tuple[int, int], tuple[int, int]]]:
    """Return two overlapping ranges, or None if all are disjoint."""
    ordered = sorted(ranges)
    for a, b in zip(ordered, ordered[1:]):
        if b[0] < a[1]:
            return a, b
    return None


def dump_layout(amap: AddressMap, large_pages: Optional[int] = None) -> str:
    n = amap.num_large_pages if large_pages is None else min(large_pages, amap.num_large_pages)
    lines = [f"# large_page_bytes={amap.large_page_bytes} num_large_pages={amap.num_large_pages}",
             "group\tlayer\tlarge_page\tslot\texec_page\tstart\tend"]
    for name, geo in amap.groups.items():
        pages = [SmallPageId(lp, s) for lp in range(n) for s in range(geo.slots_per_large)]
        for layer, page, start, end in iter_ranges(amap, name, pages):
            lines.append(f"{name}\t{layer}\t{page.large_page}\t{page.slot}\t"
                         f"{exec_page_id(amap, name, page)}\t{start}\t{end}")
    return "\n".join(lines) + "\n"
