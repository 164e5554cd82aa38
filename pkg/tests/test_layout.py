import random

import pytest
from hypothesis import given, settings, strategies as st

from hetero_kv.config import LayerGroupSpec, ModelSpec, bundled_configs, load_model_config
from hetero_kv.layout import (address_of, build_address_map, dump_layout, exec_page_id, find_overlap, iter_ranges,
                              layer_view)
from hetero_kv.type_allocator import SmallPageId


def mllama_like():
    # image pages of 2 x 128 B layers, text pages of 3 x 128 B layers
    return ModelSpec("fig", (LayerGroupSpec("cross", "cross_attention", 2, 128),
                             LayerGroupSpec("self", "full", 3, 128)))


@pytest.fixture
def amap():
    return build_address_map(mllama_like(), 4)


def test_geometry(amap):
    assert amap.large_page_bytes == 768
    assert amap.groups["cross"].slots_per_large == 3
    assert amap.groups["self"].slots_per_large == 2


def test_image_layer_address(amap):
    assert address_of(amap, "cross", 1, SmallPageId(0, 1)) == (384, 512)


def test_origin(amap):
    assert address_of(amap, "cross", 0, SmallPageId(0, 0)) == (0, 128)


def test_text_layer_address(amap):
    assert address_of(amap, "self", 2, SmallPageId(1, 0)) == (768 + 256, 768 + 384)


def test_layer_view_of_image_layer(amap):
    view = layer_view(amap, "cross", 1)
    assert (view.start_offset, view.page_stride, view.exec_page_size) == (128, 256, 128)


def test_single_layer_view():
    spec = ModelSpec("one", (LayerGroupSpec("g", "full", 1, 96),))
    view = layer_view(build_address_map(spec, 2), "g", 0)
    assert (view.start_offset, view.page_stride) == (0, 96)


def test_bounds_checked(amap):
    with pytest.raises(ValueError):
        address_of(amap, "cross", 2, SmallPageId(0, 0))
    with pytest.raises(ValueError):
        address_of(amap, "cross", 0, SmallPageId(4, 0))
    with pytest.raises(ValueError):
        address_of(amap, "self", 0, SmallPageId(0, 2))
    with pytest.raises(ValueError):
        layer_view(amap, "self", 3)


def test_gcd_pages_do_not_tile():
    with pytest.raises(ValueError):
        build_address_map(mllama_like(), 2, "gcd")


def _check_map(amap, rng):
    """Hand each large page to a random group and check the byte ranges."""
    names = list(amap.groups)
    ranges = []
    for lp in range(amap.num_large_pages):
        g = rng.choice(names)
        geo = amap.groups[g]
        pages = [SmallPageId(lp, s) for s in range(geo.slots_per_large)]
        page_ranges = [(a, b) for _, _, a, b in iter_ranges(amap, g, pages)]
        # coverage: the group's chunks tile the large page exactly
        lo = lp * amap.large_page_bytes
        assert sorted(page_ranges)[0][0] == lo
        assert sum(b - a for a, b in page_ranges) == amap.large_page_bytes
        assert max(b for _, b in page_ranges) == lo + amap.large_page_bytes
        ranges.extend(page_ranges)
    assert find_overlap(ranges) is None
    assert all(0 <= a < b <= amap.pool_end for a, b in ranges)
    # view equivalence on every page and layer
    for g, geo in amap.groups.items():
        for layer in range(geo.num_layers):
            view = layer_view(amap, g, layer)
            for _, page, a, b in iter_ranges(amap, g):
                if _ == layer:
                    assert view.address(exec_page_id(amap, g, page)) == (a, b)


@pytest.mark.parametrize("name", bundled_configs())
def test_bundled_layouts_are_disjoint(name):
    spec = load_model_config(name)
    amap = build_address_map(spec, 3)
    _check_map(amap, random.Random(name))


GEOMETRY = st.lists(st.tuples(st.integers(1, 4), st.integers(1, 48), st.integers(1, 3)), min_size=1, max_size=3)


@settings(max_examples=100, deadline=None)
@given(GEOMETRY, st.integers(1, 4), st.integers(0, 2**32))
def test_random_geometries(groups, num_large, seed):
    spec = ModelSpec("r", tuple(LayerGroupSpec(f"g{i}", "full", layers, bpl, tokens_per_page=tpp)
                                for i, (layers, bpl, tpp) in enumerate(groups)))
    _check_map(build_address_map(spec, num_large), random.Random(seed))


def test_find_overlap_reports_a_pair():
    assert find_overlap([(0, 4), (10, 12), (3, 6)]) == ((0, 4), (3, 6))
    assert find_overlap([(0, 4), (4, 6)]) is None


def test_dump_lists_every_chunk(amap):
    text = dump_layout(amap, 1)
    lines = text.splitlines()
    assert lines[0] == "# large_page_bytes=768 num_large_pages=4"
    assert len(lines) == 2 + 3 * 2 + 2 * 3
    assert "cross\t1\t0\t1\t1\t384\t512" in lines
