"""Per-layer-kind rules for which tokens are stored, touched and required.

Positions handed to these methods are 0-based stream positions; prefix
lengths ``p`` are 1-based (the prefix of length ``p`` ends at position
``p - 1``). Policies are immutable and hold no request state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .config import LayerGroupSpec, LayerKind
from .prefix_cache import PrefixSet

# (start, end, ordinal): an image occupying stream positions [start, end)
ImageSpan = tuple[int, int, int]


def _leading_run(is_hit: Sequence[bool]) -> int:
    for i, hit in enumerate(is_hit):
        if not hit:
            return i
    return len(is_hit)


class LayerPolicy:
    kind: LayerKind

    def stores(self, position: int, is_image: bool) -> bool:
        raise NotImplementedError

    def required_tokens(self, p: int, image_spans: Sequence[ImageSpan] = ()) -> Optional[set[int]]:
        """1-based positions that must be cached for a hit of length ``p``.

        ``None`` marks a prefix length the layer can never hit.
        """
        raise NotImplementedError

    def get_possible_prefix(self, is_hit: Sequence[bool]) -> PrefixSet:
        raise NotImplementedError

    def accessed_ranges(self, length: int, image_spans: Sequence[ImageSpan] = ()) -> list[tuple[int, int]]:
        """Position ranges [lo, hi) whose KV the next token reads."""
        raise NotImplementedError

    def prefix_length(self, position: int, image_spans: Sequence[ImageSpan] = ()) -> int:
        return position + 1

    def retained_from(self, length: int) -> int:
        """Positions below this are no longer needed by the running request."""
        return 0


@dataclass(frozen=True)
class FullAttentionPolicy(LayerPolicy):
    stores_images: bool = True
    keep_ratio: float = 1.0
    kind = LayerKind.FULL

    def kept(self, position: int) -> bool:
        if self.keep_ratio >= 1.0:
            return True
        r = self.keep_ratio
        return math.floor((position + 1) * r) > math.floor(position * r)

    def stores(self, position, is_image):
        return (self.stores_images or not is_image) and self.kept(position)

    def required_tokens(self, p, image_spans=()):
        if p < 1:
            raise ValueError("prefix length must be >= 1")
        return {i for i in range(1, p + 1) if self.kept(i - 1)}

    def get_possible_prefix(self, is_hit):
        if self.keep_ratio >= 1.0:
            return PrefixSet.from_range(1, _leading_run(is_hit))
        # dropped positions hold nothing, so a miss there does not matter
        end = len(is_hit)
        for i, hit in enumerate(is_hit):
            if not hit and self.kept(i):
                end = i
                break
        return PrefixSet.from_range(1, end)

    def accessed_ranges(self, length, image_spans=()):
        return [(0, length)]


@dataclass(frozen=True)
class SlidingWindowPolicy(LayerPolicy):
    window: int
    stores_images: bool = True
    kind = LayerKind.SLIDING_WINDOW

    def stores(self, position, is_image):
        return self.stores_images or not is_image

    def required_tokens(self, p, image_spans=()):
        if p < 1:
            raise ValueError("prefix length must be >= 1")
        return set(range(max(1, p - self.window + 1), p + 1))

    def get_possible_prefix(self, is_hit):
        # p is valid when the run of hits ending at p covers min(window, p)
        valid = []
        run = 0
        for i, hit in enumerate(is_hit):
            run = run + 1 if hit else 0
            p = i + 1
            if run >= min(self.window, p):
                valid.append(p)
        return PrefixSet.from_lengths(valid)

    def accessed_ranges(self, length, image_spans=()):
        return [(max(0, length - self.window), length)]

    def retained_from(self, length):
        return max(0, length - self.window)


@dataclass(frozen=True)
class MambaPolicy(LayerPolicy):
    interval: int = 512
    stores_images: bool = True
    kind = LayerKind.MAMBA

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("checkpoint interval must be >= 1")

    def stores(self, position, is_image):
        return self.stores_images or not is_image

    def required_tokens(self, p, image_spans=()):
        if p < 1:
            raise ValueError("prefix length must be >= 1")
        if p % self.interval:
            return None
        return {p}

    def get_possible_prefix(self, is_hit):
        k = self.interval
        return PrefixSet.from_lengths(p for p in range(k, len(is_hit) + 1, k) if is_hit[p - 1])

    def latest_checkpoint(self, length: int) -> int:
        return (length // self.interval) * self.interval

    def accessed_ranges(self, length, image_spans=()):
        p = self.latest_checkpoint(length)
        return [(p - 1, p)] if p else []

    def retained_from(self, length):
        return length  # the recurrent state replaces every past token


@dataclass(frozen=True)
class CrossAttentionPolicy(LayerPolicy):
    """Encoder KV of image tokens; an image is read by every later text token."""
    kind = LayerKind.CROSS_ATTENTION

    def stores(self, position, is_image):
        return is_image

    def required_tokens(self, p, image_spans=()):
        if p < 1:
            raise ValueError("prefix length must be >= 1")
        return {i + 1 for s, e, _ in image_spans for i in range(s, min(e, p))}

    def get_possible_prefix(self, is_hit):
        # positions this layer does not store are reported as hits
        return PrefixSet.from_range(1, _leading_run(is_hit))

    def accessed_ranges(self, length, image_spans=()):
        return [(s, min(e, length)) for s, e, _ in image_spans if s < length]

    def prefix_length(self, position, image_spans=()):
        for s, e, ordinal in image_spans:
            if s <= position < e:
                return ordinal
        return position + 1


@dataclass(frozen=True)
class VisionEmbeddingPolicy(LayerPolicy):
    """Vision-encoder output waiting to be consumed by prefill.

    Consumed embeddings live on as KV, so a cached prefix never needs them.
    """
    kind = LayerKind.VISION_EMBEDDING

    def stores(self, position, is_image):
        return is_image

    def required_tokens(self, p, image_spans=()):
        if p < 1:
            raise ValueError("prefix length must be >= 1")
        return set()

    def get_possible_prefix(self, is_hit):
        return PrefixSet.from_range(1, len(is_hit))

    def accessed_ranges(self, length, image_spans=()):
        return [(max(s, length), e) for s, e, _ in image_spans if e > length]

    def prefix_length(self, position, image_spans=()):
        for s, e, ordinal in image_spans:
            if s <= position < e:
                return ordinal
        return position + 1

    def retained_from(self, length):
        return length


def make_policy(group: LayerGroupSpec, has_cross_attention: bool = False) -> LayerPolicy:
    stores_images = not has_cross_attention
    kind = group.kind
    if kind is LayerKind.FULL:
        return FullAttentionPolicy(stores_images, group.keep_ratio)
    if kind is LayerKind.SLIDING_WINDOW:
        return SlidingWindowPolicy(group.window_tokens, stores_images)
    if kind is LayerKind.MAMBA:
        return MambaPolicy(group.checkpoint_interval_tokens, stores_images)
    if kind is LayerKind.CROSS_ATTENTION:
        return CrossAttentionPolicy()
    return VisionEmbeddingPolicy()


def possible_prefix_by_enumeration(policy: LayerPolicy, is_hit: Sequence[bool],
                                   image_spans: Sequence[ImageSpan] = ()) -> PrefixSet:
    """Check every prefix length against ``required_tokens`` one by one."""
    valid = []
    for p in range(1, len(is_hit) + 1):
        req = policy.required_tokens(p, image_spans)
        if req is not None and all(is_hit[i - 1] for i in req):
            valid.append(p)
    return PrefixSet.from_lengths(valid)
