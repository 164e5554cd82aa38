"""Model architecture descriptions and page-size arithmetic.

A model is an ordered list of layer groups. Each group shares one per-token
KV size and one dependency kind. Everything downstream (allocators, policies,
simulator) is driven from a :class:`ModelSpec`.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from functools import reduce
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import yaml

logger = logging.getLogger(__name__)

U64_MAX = 2**64 - 1
LCM_RATIO_WARN = 128


class ConfigError(ValueError):
    """Invalid model description or byte arithmetic overflow."""


class LayerKind(str, enum.Enum):
    FULL = "full"
    SLIDING_WINDOW = "sliding_window"
    MAMBA = "mamba"
    CROSS_ATTENTION = "cross_attention"
    VISION_EMBEDDING = "vision_embedding"


class PageSizeStrategy(str, enum.Enum):
    LCM = "lcm"
    GCD = "gcd"
    MAX = "max"
    UNIFORM = "uniform"


def _check_u64(value: int, what: str) -> int:
    if value > U64_MAX:
        raise ConfigError(f"{what} overflows 64-bit byte arithmetic ({value})")
    return value


@dataclass(frozen=True)
class LayerGroupSpec:
    name: str
    kind: LayerKind
    num_layers: int
    bytes_per_token_per_layer: int
    tokens_per_page: int = 1
    window_tokens: Optional[int] = None
    checkpoint_interval_tokens: Optional[int] = None
    # static token-dropping stand-in for PyramidKV-like layers; full groups only
    keep_ratio: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if not self.name:
            raise ConfigError("layer group needs a name")
        for attr in ("num_layers", "bytes_per_token_per_layer", "tokens_per_page"):
            v = getattr(self, attr)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{self.name}: {attr} must be an integer, got {v!r}")
        if self.num_layers <= 0:
            raise ConfigError(f"{self.name}: num_layers must be > 0")
        if self.bytes_per_token_per_layer <= 0:
            raise ConfigError(f"{self.name}: bytes_per_token_per_layer must be > 0")
        if self.tokens_per_page < 1:
            raise ConfigError(f"{self.name}: tokens_per_page must be >= 1")
        if self.kind is LayerKind.SLIDING_WINDOW:
            if self.window_tokens is None or self.window_tokens < 1:
                raise ConfigError(f"{self.name}: sliding_window needs window_tokens >= 1")
        if self.kind is LayerKind.MAMBA:
            if self.checkpoint_interval_tokens is None:
                object.__setattr__(self, "checkpoint_interval_tokens", 512)
            if self.checkpoint_interval_tokens < 1:
                raise ConfigError(f"{self.name}: checkpoint_interval_tokens must be >= 1")
            if self.tokens_per_page != 1:
                raise ConfigError(f"{self.name}: a mamba state page holds one state, tokens_per_page must be 1")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"{self.name}: keep_ratio must be in (0, 1]")
        if self.keep_ratio != 1.0 and self.kind is not LayerKind.FULL:
            raise ConfigError(f"{self.name}: keep_ratio only applies to full attention groups")
        _check_u64(small_page_size(self), f"{self.name} small page")

    @property
    def bytes_per_token(self) -> int:
        """Bytes one token occupies across all layers of the group."""
        return self.bytes_per_token_per_layer * self.num_layers

    @property
    def per_layer_page_bytes(self) -> int:
        return self.bytes_per_token_per_layer * self.tokens_per_page


@dataclass(frozen=True)
class ModelSpec:
    name: str
    groups: tuple[LayerGroupSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise ConfigError(f"model {self.name!r} has no layer groups")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ConfigError(f"model {self.name!r} has duplicate group names: {names}")

    def group(self, name: str) -> LayerGroupSpec:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    @property
    def group_names(self) -> list[str]:
        return [g.name for g in self.groups]

    @property
    def has_cross_attention(self) -> bool:
        return any(g.kind is LayerKind.CROSS_ATTENTION for g in self.groups)

    def groups_of(self, kind: LayerKind) -> list[LayerGroupSpec]:
        return [g for g in self.groups if g.kind is kind]

    def scaled(self, factor: float) -> "ModelSpec":
        """Shrink window and checkpoint lengths by ``factor`` (token counts only)."""
        groups = []
        for g in self.groups:
            if g.window_tokens is not None:
                g = replace(g, window_tokens=max(1, round(g.window_tokens * factor)))
            if g.checkpoint_interval_tokens is not None:
                g = replace(g, checkpoint_interval_tokens=max(1, round(g.checkpoint_interval_tokens * factor)))
            groups.append(g)
        return ModelSpec(self.name, tuple(groups))

    def prefixed(self, prefix: str) -> "ModelSpec":
        return ModelSpec(f"{prefix}{self.name}", tuple(replace(g, name=f"{prefix}{g.name}") for g in self.groups))


def combine(name: str, *specs: ModelSpec) -> ModelSpec:
    """Concatenate several models' groups into one spec sharing a pool."""
    return ModelSpec(name, tuple(g for s in specs for g in s.groups))


@dataclass(frozen=True)
class WorkloadProfile:
    text_tokens_per_request: float
    image_tokens_per_request: float = 0.0
    # when > 0, every group is charged this many bytes per layer per token
    per_layer_embedding_bytes: float = 0.0

    def __post_init__(self):
        if min(self.text_tokens_per_request, self.image_tokens_per_request,
               self.per_layer_embedding_bytes) < 0:
            raise ConfigError("workload profile values must be nonnegative")


def small_page_size(group: LayerGroupSpec) -> int:
    return group.bytes_per_token_per_layer * group.num_layers * group.tokens_per_page


def compatible_page_size(spec: ModelSpec, strategy: Union[PageSizeStrategy, str]) -> int:
    strategy = PageSizeStrategy(strategy)
    sizes = [small_page_size(g) for g in spec.groups]
    if strategy is PageSizeStrategy.LCM:
        value = 1
        for s in sizes:
            value = _check_u64(value * s // math.gcd(value, s), "LCM page size")
        return value
    if strategy is PageSizeStrategy.GCD:
        return reduce(math.gcd, sizes)
    if strategy is PageSizeStrategy.MAX:
        return max(sizes)
    # one PagedAttention slot holds every layer of every group
    return _check_u64(sum(sizes), "uniform page size")


def lcm_blowup_ratio(spec: ModelSpec) -> float:
    sizes = [small_page_size(g) for g in spec.groups]
    ratio = compatible_page_size(spec, PageSizeStrategy.LCM) / min(sizes)
    if ratio > LCM_RATIO_WARN:
        logger.warning("model %s: LCM page is %.0fx the smallest page", spec.name, ratio)
    return ratio


def stored_tokens(group: LayerGroupSpec, text: float, image: float, has_cross: bool) -> float:
    """Tokens a group must hold for a request with ``text`` + ``image`` tokens."""
    seq = text if has_cross else text + image
    kind = group.kind
    if kind is LayerKind.FULL:
        return seq * group.keep_ratio
    if kind is LayerKind.SLIDING_WINDOW:
        return min(group.window_tokens, seq)
    if kind is LayerKind.MAMBA:
        return 1.0 if seq > 0 else 0.0
    if kind is LayerKind.CROSS_ATTENTION:
        return image
    return 0.0  # vision embeddings are consumed by prefill


def predict_uniform_waste(spec: ModelSpec, profile: WorkloadProfile) -> float:
    """Fraction of PagedAttention-style allocation that holds no needed KV.

    Uniform allocation charges every token (text and image) the bytes of every
    layer; the ideal charges each group only for the tokens it keeps.
    """
    text = profile.text_tokens_per_request
    image = profile.image_tokens_per_request
    if text + image <= 0:
        raise ConfigError("empty workload")
    has_cross = spec.has_cross_attention

    def per_token(g: LayerGroupSpec) -> float:
        if profile.per_layer_embedding_bytes > 0:
            return profile.per_layer_embedding_bytes * g.num_layers
        return g.bytes_per_token

    uniform = (text + image) * sum(per_token(g) for g in spec.groups)
    ideal = sum(stored_tokens(g, text, image, has_cross) * per_token(g) for g in spec.groups)
    return max(0.0, 1.0 - ideal / uniform)


# --- config files -----------------------------------------------------------

_GROUP_KEYS = {"name", "kind", "num_layers", "bytes_per_token_per_layer", "tokens_per_page",
               "window_tokens", "checkpoint_interval_tokens", "keep_ratio"}


def parse_model_config(data: dict) -> ModelSpec:
    if not isinstance(data, dict):
        raise ConfigError("model config must be a mapping")
    if "name" not in data or "groups" not in data:
        raise ConfigError("model config needs 'name' and 'groups'")
    groups = []
    for raw in data["groups"] or []:
        if not isinstance(raw, dict):
            raise ConfigError(f"group entry must be a mapping, got {raw!r}")
        unknown = set(raw) - _GROUP_KEYS
        if unknown:
            raise ConfigError(f"unknown group keys: {sorted(unknown)}")
        try:
            kind = LayerKind(raw.get("kind", "full"))
        except ValueError:
            raise ConfigError(f"unknown layer kind {raw.get('kind')!r}") from None
        try:
            groups.append(LayerGroupSpec(
                name=str(raw["name"]),
                kind=kind,
                num_layers=raw["num_layers"],
                bytes_per_token_per_layer=raw["bytes_per_token_per_layer"],
                tokens_per_page=raw.get("tokens_per_page", 1),
                window_tokens=raw.get("window_tokens"),
                checkpoint_interval_tokens=raw.get("checkpoint_interval_tokens"),
                keep_ratio=float(raw.get("keep_ratio", 1.0)),
            ))
        except KeyError as e:
            raise ConfigError(f"group missing required key {e}") from None
    return ModelSpec(str(data["name"]), tuple(groups))


def dump_model_config(spec: ModelSpec) -> str:
    groups = []
    for g in spec.groups:
        entry = {"name": g.name, "kind": g.kind.value, "num_layers": g.num_layers,
                 "bytes_per_token_per_layer": g.bytes_per_token_per_layer}
        if g.tokens_per_page != 1:
            entry["tokens_per_page"] = g.tokens_per_page
        if g.window_tokens is not None:
            entry["window_tokens"] = g.window_tokens
        if g.checkpoint_interval_tokens is not None:
            entry["checkpoint_interval_tokens"] = g.checkpoint_interval_tokens
        if g.keep_ratio != 1.0:
            entry["keep_ratio"] = g.keep_ratio
        groups.append(entry)
    return yaml.safe_dump({"name": spec.name, "groups": groups}, sort_keys=False)


def bundled_configs() -> list[str]:
    root = resources.files("hetero_kv") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def load_model_config(path: Union[str, Path]) -> ModelSpec:
    """Load a model config from a file path or a bundled config name."""
    p = Path(path)
    if p.exists():
        text = p.read_text()
    else:
        name = p.name if p.name.endswith(".cfg") else f"{p.name}.cfg"
        res = resources.files("hetero_kv") / "configs" / name
        if not res.is_file():
            raise ConfigError(f"no such model config: {path}")
        text = res.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    return parse_model_config(data)
