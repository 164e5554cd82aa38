"""Heterogeneous KV-cache memory management: two-level page allocation for
models whose layers keep differently sized and differently shaped caches."""

from .config import (ConfigError, LayerGroupSpec, LayerKind, ModelSpec, PageSizeStrategy, WorkloadProfile,
                     compatible_page_size, lcm_blowup_ratio, load_model_config, predict_uniform_waste,
                     small_page_size)
from .pool import DoubleFree, LargePagePool, NoFreePage, NothingEvictable
from .type_allocator import OutOfMemory, PageState, SmallPageId, TypeAllocator
from .prefix_cache import PrefixSet, find_longest_common_prefix, get_possible_prefix
from .policies import make_policy
from .simulator import Engine, EngineConfig, RunGuardError, SpeculativeConfig, simulate

__all__ = [
    "ConfigError", "LayerGroupSpec", "LayerKind", "ModelSpec", "PageSizeStrategy", "WorkloadProfile",
    "compatible_page_size", "lcm_blowup_ratio", "load_model_config", "predict_uniform_waste",
    "small_page_size", "DoubleFree", "LargePagePool", "NoFreePage", "NothingEvictable", "OutOfMemory",
    "PageState", "SmallPageId", "TypeAllocator", "PrefixSet", "find_longest_common_prefix",
    "get_possible_prefix", "make_policy", "Engine", "EngineConfig", "RunGuardError", "SpeculativeConfig",
    "simulate",
]
