"""Discrete-step serving simulator.

Each step admits arrivals, runs one decode token for every decoding request,
fills the rest of the token budget with chunked prefill, and then records a
byte census. Running out of pages preempts the most recently arrived running
request, which later recomputes from scratch (or from the prefix cache).
"""

from __future__ import annotations

import csv
import io
import json
import random
from bisect import insort
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

from .config import ConfigError, LayerKind, ModelSpec, combine
from .memory import MemorySystem, Strategy
from .prefix_cache import GroupTable, PrefixCache, block_key, extend_digests, set_prefix_length
from .trace import Request
from .type_allocator import OutOfMemory, SmallPageId

VISION_MODES = ("on_demand", "reuse")
STAMPING_MODES = ("step", "request")


class RunGuardError(RuntimeError):
    """The run did not finish within ``max_steps`` or cannot make progress."""


@dataclass(frozen=True)
class SpeculativeConfig:
    draft: ModelSpec
    propose_k: int = 4
    acceptance: float = 0.7

    def __post_init__(self):
        if self.propose_k < 1:
            raise ConfigError("propose_k must be >= 1")
        if not 0.0 <= self.acceptance <= 1.0:
            raise ConfigError("acceptance must be in [0, 1]")


@dataclass
class EngineConfig:
    memory_bytes: int
    strategy: str = "lcm"
    chunk_size: int = 512
    prefix_caching: bool = False
    vision_mode: str = "on_demand"
    static_ratios: Optional[dict[str, float]] = None
    speculative: Optional[SpeculativeConfig] = None
    seed: int = 0
    max_steps: int = 1_000_000
    # when prefill stamps last_access: every step it runs, or once when it ends
    access_stamping: str = "step"
    request_aware: bool = True
    check_invariants: bool = False
    record_events: bool = False

    def __post_init__(self):
        if self.memory_bytes <= 0:
            raise ConfigError("memory budget must be > 0")
        if self.chunk_size < 1:
            raise ConfigError("chunk size must be >= 1")
        Strategy(self.strategy)
        if self.vision_mode not in VISION_MODES:
            raise ConfigError(f"vision mode must be one of {VISION_MODES}")
        if self.access_stamping not in STAMPING_MODES:
            raise ConfigError(f"access stamping must be one of {STAMPING_MODES}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


@dataclass(frozen=True)
class StepMetrics:
    step: int
    used: dict[str, int]
    evictable: int
    wasted: int
    unallocated: int
    reserved: int
    batch: int
    prefill_tokens: int
    preemptions: int
    hits: int
    running: int
    waiting: int

    @property
    def used_total(self) -> int:
        return sum(self.used.values())

    @property
    def allocated(self) -> int:
        return self.used_total + self.evictable + self.wasted

    @property
    def waste_fraction(self) -> float:
        denom = self.used_total + self.wasted
        return self.wasted / denom if denom else 0.0


@dataclass
class Event:
    step: int
    request: str
    action: str  # encode, prefill, free_vision, decode, preempt, finish
    positions: tuple[int, ...] = ()


class _Preempted(Exception):
    pass


class RequestState:
    def __init__(self, req: Request, order: int, ordinals: list[int]):
        self.req = req
        self.id = req.id
        self.order = order
        self.prompt = req.prompt_tokens
        self.stream: list[Hashable] = req.token_stream()
        spans = req.image_spans()
        self.image_spans = [(s, e, o) for (s, e), o in zip(spans, ordinals)]
        self._image = bytearray(len(self.stream))
        for s, e in spans:
            self._image[s:e] = b"\x01" * (e - s)
        self.digests: list[bytes] = []
        self.generated = 0
        self.computed = 0
        self.allocated = 0
        self.tables: dict[str, GroupTable] = {}
        self.encoded = False
        self.admitted_once = False
        self.hit = 0
        self.finish_step: Optional[int] = None
        self.fresh = False
        self.stamp = 0
        self.demand: Optional[tuple[int, dict[str, int]]] = None
        self.peak_kv = 0
        self.peak_total = 0

    @property
    def sort_key(self):
        return (self.req.arrival_step, self.order)

    def is_image(self, position: int) -> bool:
        return position < len(self._image) and bool(self._image[position])

    @property
    def prefill_target(self) -> int:
        return self.prompt + self.generated

    @property
    def prefilling(self) -> bool:
        return self.computed < self.prefill_target

    @property
    def done(self) -> bool:
        return self.generated >= self.req.output_tokens


@dataclass
class RunReport:
    groups: list[str]
    steps: list[StepMetrics]
    summary: dict
    events: list[Event] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.groups, self.steps)

    def summary_json(self) -> str:
        return json.dumps(self.summary, sort_keys=True, indent=1) + "\n"


CSV_TAIL = ["evictable", "wasted", "unallocated", "reserved", "batch", "prefill_tokens", "preemptions", "hits"]


def metrics_to_csv(groups: Sequence[str], steps: Sequence[StepMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"used_{g}" for g in groups] + CSV_TAIL)
    for m in steps:
        w.writerow([m.step] + [m.used[g] for g in groups]
                   + [m.evictable, m.wasted, m.unallocated, m.reserved, m.batch,
                      m.prefill_tokens, m.preemptions, m.hits])
    return buf.getvalue()


class Engine:
    def __init__(self, spec: ModelSpec, config: EngineConfig, trace: Sequence[Request] = ()):
        self.config = config
        self.target_spec = spec
        if config.speculative is not None:
            if Strategy(config.strategy) is Strategy.UNIFORM:
                raise ConfigError("speculative decoding needs per-model page types, not uniform")
            spec = combine(spec.name, config.speculative.draft.prefixed("draft."), spec.prefixed("target."))
        self.spec = spec
        self.mem = MemorySystem(spec, config.strategy, config.memory_bytes,
                                static_ratios=config.static_ratios, request_aware=config.request_aware)
        self.groups = spec.group_names
        self.rng = random.Random(config.seed)
        self.accept_rng = random.Random(config.seed + 1)
        self.cache: Optional[PrefixCache] = None
        if config.prefix_caching:
            m = self.mem.managed
            self.cache = PrefixCache({n: g.spec for n, g in m.items()}, {n: g.policy for n, g in m.items()},
                                     {n: g.allocator for n, g in m.items()})
        self._vision = [n for n, g in self.mem.managed.items() if g.spec.kind is LayerKind.VISION_EMBEDDING]
        if config.vision_mode == "reuse" and self._vision:
            self._check_reuse_fits()
        self.time = 0
        self.pending: list[RequestState] = []
        self.waiting: list[RequestState] = []
        self.running: list[RequestState] = []
        self.finished: list[RequestState] = []
        self.steps: list[StepMetrics] = []
        self.events: list[Event] = []
        self.alloc_counts: Counter = Counter()
        self.peak_used: Counter = Counter()
        self.preemptions = 0
        self._step_preemptions = 0
        self._step_hits = 0
        self.hit_tokens = 0
        self.prompt_tokens_seen = 0
        for i, req in enumerate(sorted(trace, key=lambda r: r.arrival_step)):
            self.add_request(req, i)

    def _check_reuse_fits(self) -> None:
        vision_bpt = sum(self.mem.managed[n].spec.bytes_per_token for n in self._vision)
        kv_bpt = sum(m.spec.bytes_per_token for m in self.mem.managed.values()
                     if m.spec.kind not in (LayerKind.VISION_EMBEDDING, LayerKind.MAMBA)
                     and m.policy.stores(0, True))
        if vision_bpt > kv_bpt:
            raise ConfigError("vision embeddings are larger than the KV they would be hosted in")

    def add_request(self, req: Request, order: Optional[int] = None) -> None:
        order = len(self.pending) + len(self.waiting) + len(self.running) + len(self.finished) if order is None else order
        ordinals = [self.rng.randrange(1, 2**31) for _ in req.image_spans()]
        insort(self.pending, RequestState(req, order, ordinals), key=lambda r: r.sort_key)

    # -- bookkeeping helpers ----------------------------------------------------

    def _log(self, r: RequestState, action: str, positions=()) -> None:
        if self.config.record_events:
            self.events.append(Event(self.time, r.id, action, tuple(positions)))

    def _alloc(self, r: RequestState, group: str) -> SmallPageId:
        alloc = self.mem.managed[group].allocator
        while True:
            try:
                page = alloc.allocate(r.id)
                self.alloc_counts[group] += 1
                return page
            except OutOfMemory:
                victim = max(self.running, key=lambda x: x.sort_key)
                if victim is r and len(self.running) == 1:
                    self._preempt(r, count=False)
                    raise RunGuardError(f"request {r.id} does not fit in memory on its own") from None
                self._preempt(victim, count=not (victim is r and r.fresh))
                if victim is r:
                    raise _Preempted from None

    def _key(self, r: RequestState, group: str, t: GroupTable, block: int):
        start, end = t.block_span(block)
        if len(r.digests) < end:
            extend_digests(r.digests, r.stream[:end])
        return block_key(group, r.stream, r.digests, start, end)

    def _checkpoint_key(self, r: RequestState, group: str, p: int):
        if len(r.digests) < p:
            extend_digests(r.digests, r.stream[:p])
        return self.cache.checkpoint_key(group, r.stream, r.digests, p)

    def _block_complete(self, r: RequestState, t: GroupTable, block: int) -> bool:
        tpp = t.tokens_per_page
        if (block + 1) * tpp > len(t.positions):
            return False
        return t.positions[(block + 1) * tpp - 1] < r.computed

    def _free_block(self, r: RequestState, name: str, t: GroupTable, block: int, cache: bool) -> None:
        page = t.pages[block]
        if page is None:
            return
        alloc = self.mem.managed[name].allocator
        key = None
        if cache and self.cache is not None and self._block_complete(r, t, block) \
                and self.mem.managed[name].spec.kind is not LayerKind.VISION_EMBEDDING:
            key = self._key(r, name, t, block)
        alloc.touch(page, r.stamp)
        alloc.free(page, key)
        t.pages[block] = None

    def _release_all(self, r: RequestState, cache: bool) -> None:
        for name, t in r.tables.items():
            alloc = self.mem.managed[name].allocator
            for b in range(len(t.pages)):
                self._free_block(r, name, t, b, cache)
            for p, page in sorted(t.checkpoints.items()):
                key = self._checkpoint_key(r, name, p) if cache and self.cache is not None and p <= r.computed else None
                alloc.touch(page, r.stamp)
                alloc.free(page, key)
            t.checkpoints.clear()
            if t.state_page is not None:
                alloc.free(t.state_page)
                t.state_page = None

    def _preempt(self, r: RequestState, count: bool = True) -> None:
        self._release_all(r, cache=True)
        self.running.remove(r)
        r.computed = r.allocated = 0
        r.tables = {}
        r.encoded = False
        if count:
            self.preemptions += 1
            self._step_preemptions += 1
            self._log(r, "preempt")
        insort(self.waiting, r, key=lambda x: x.sort_key)

    # -- allocation for a range of positions ----------------------------------------

    def _alloc_positions(self, r: RequestState, a: int, b: int, groups: Optional[Sequence[str]] = None) -> None:
        caching = self.cache is not None
        for name in groups if groups is not None else r.tables:
            t = r.tables[name]
            m = self.mem.managed[name]
            kind = m.spec.kind
            if kind is LayerKind.VISION_EMBEDDING:
                continue
            if kind is LayerKind.MAMBA:
                if t.state_page is None:
                    t.state_page = self._alloc(r, name)
                if caching:
                    k = t.policy.interval
                    for p in range((a // k + 1) * k, b + 1, k):
                        t.checkpoints[p] = self._alloc(r, name)
                continue
            alloc = m.allocator
            tpp = t.tokens_per_page
            pol = t.policy
            for pos in range(a, b):
                img = r.is_image(pos)
                if not pol.stores(pos, img):
                    continue
                if len(t.positions) % tpp == 0:
                    t.pages.append(self._alloc(r, name))
                t.positions.append(pos)
                alloc.add_tokens(t.pages[-1], 1, 1 if img else 0)

    def _truncate(self, r: RequestState, name: str, length: int) -> None:
        """Drop positions >= length from one table (rejected draft tokens)."""
        t = r.tables[name]
        alloc = self.mem.managed[name].allocator
        tpp = t.tokens_per_page
        while t.positions and t.positions[-1] >= length:
            pos = t.positions.pop()
            block = len(t.positions) // tpp
            page = t.pages[block]
            if len(t.positions) % tpp == 0:
                alloc.free(page)
                t.pages.pop()
            else:
                alloc.add_tokens(page, -1, -1 if r.is_image(pos) else 0)

    def _encode_images(self, r: RequestState) -> None:
        """Run the vision encoder: allocate embedding pages for every image
        token not yet consumed."""
        if r.encoded or not self._vision or self.config.vision_mode == "reuse":
            return
        r.encoded = True
        todo = [p for s, e, _ in r.image_spans for p in range(max(s, r.computed), e)]
        if not todo:
            return
        for name in self._vision:
            t = r.tables[name]
            alloc = self.mem.managed[name].allocator
            tpp = t.tokens_per_page
            for pos in todo:
                if len(t.positions) % tpp == 0:
                    t.pages.append(self._alloc(r, name))
                t.positions.append(pos)
                alloc.add_tokens(t.pages[-1], 1, 1)
        self._log(r, "encode", todo)

    def _held_bytes(self, r: RequestState) -> tuple[int, int]:
        kv = vision = 0
        for name, t in r.tables.items():
            a = self.mem.managed[name].allocator
            n = sum(1 for p in t.pages if p is not None) + len(t.checkpoints) + (t.state_page is not None)
            if name in self._vision:
                vision += n * a.small_page_size * a.span
            else:
                kv += n * a.small_page_size * a.span
        return kv, vision

    def _census_request(self, r: RequestState) -> None:
        kv, vision = self._held_bytes(r)
        r.peak_kv = max(r.peak_kv, kv)
        r.peak_total = max(r.peak_total, kv + vision)

    # -- post-processing after a request computes --------------------------------

    def _after_compute(self, r: RequestState, first_new: dict[str, int], stamp: bool) -> None:
        caching = self.cache is not None
        if stamp:
            # Every page a request reads while scheduled would be stamped with
            # this step; the stamp is applied when the page stops being read
            # (freed), the only point where an eviction could observe it.
            r.stamp = self.time
        for name, t in r.tables.items():
            m = self.mem.managed[name]
            alloc = m.allocator
            kind = m.spec.kind
            if kind is LayerKind.MAMBA:
                if caching and t.checkpoints:
                    live = [p for p in t.checkpoints if p <= r.computed]
                    for p in sorted(live):
                        page = t.checkpoints[p]
                        if alloc.record(page).cache_key is None:
                            alloc.register_key(page, self._checkpoint_key(r, name, p))
                        alloc.set_prefix_length(page, p)
                    for p in sorted(live)[:-1]:
                        page = t.checkpoints.pop(p)
                        alloc.touch(page, self.time)
                        alloc.free(page, self._checkpoint_key(r, name, p))
            else:
                start = first_new.get(name, 0)
                # the previously last page may have grown, so its ordinal can change
                set_prefix_length(t, alloc, r.image_spans, range(max(0, start - 1), len(t.pages)))
                if caching and kind is not LayerKind.VISION_EMBEDDING:
                    b = t.registered
                    while b < len(t.pages) and self._block_complete(r, t, b):
                        page = t.pages[b]
                        if page is not None:
                            alloc.register_key(page, self._key(r, name, t, b))
                        b += 1
                    t.registered = b
        # out-of-window pages and consumed vision embeddings
        for name, t in r.tables.items():
            kind = self.mem.managed[name].spec.kind
            if kind is LayerKind.SLIDING_WINDOW or kind is LayerKind.VISION_EMBEDDING:
                keep_from = t.policy.retained_from(r.computed)
                freed = []
                b = t.released
                while b < len(t.pages) and t.block_last_position(b) < keep_from \
                        and (b + 1) * t.tokens_per_page <= len(t.positions):
                    if kind is LayerKind.VISION_EMBEDDING:
                        freed.extend(t.positions[b * t.tokens_per_page:(b + 1) * t.tokens_per_page])
                    self._free_block(r, name, t, b, cache=True)
                    b += 1
                t.released = b
                if freed:
                    self._log(r, "free_vision", freed)

    def _new_block_marks(self, r: RequestState) -> dict[str, int]:
        return {name: len(t.pages) for name, t in r.tables.items()}

    # -- scheduling --------------------------------------------------------------

    def _prefill(self, r: RequestState, n: int) -> None:
        a = r.computed
        b = a + n
        marks = self._new_block_marks(r)
        if self.config.vision_mode == "reuse" and r.allocated < r.prefill_target:
            # fully allocated KV: every prefill position gets its pages now
            self._alloc_positions(r, r.allocated, r.prefill_target)
            r.allocated = r.prefill_target
        if r.image_spans:
            self._encode_images(r)
        if r.allocated < b:
            self._alloc_positions(r, r.allocated, b)
            r.allocated = b
        self._census_request(r)
        r.computed = b
        self._log(r, "prefill", range(a, b))
        stamp = self.config.access_stamping == "step" or not r.prefilling
        self._after_compute(r, marks, stamp)

    def _decode(self, r: RequestState) -> None:
        marks = self._new_block_marks(r)
        if self.config.speculative is not None:
            self._speculative_decode(r)
        else:
            p = r.computed
            if r.allocated <= p:
                self._alloc_positions(r, p, p + 1)
                r.allocated = p + 1
            r.computed = p + 1
            r.generated += 1
            self._log(r, "decode", (p,))
        self._census_request(r)
        self._after_compute(r, marks, True)

    def _speculative_decode(self, r: RequestState) -> None:
        spec = self.config.speculative
        k = spec.propose_k
        L = r.computed
        accepted = 0
        while accepted < k and self.accept_rng.random() < spec.acceptance:
            accepted += 1
        accepted = min(accepted, r.req.output_tokens - r.generated - 1)
        draft = [n for n in r.tables if n.startswith("draft.")]
        target = [n for n in r.tables if n.startswith("target.")]
        self._alloc_positions(r, L, L + k, draft)
        self._alloc_positions(r, L, L + accepted + 1, target)
        if accepted + 1 < k:
            for n in draft:
                self._truncate(r, n, L + accepted + 1)
        elif accepted + 1 > k:
            self._alloc_positions(r, L + k, L + accepted + 1, draft)
        r.computed = r.allocated = L + accepted + 1
        r.generated += accepted + 1
        self._log(r, "decode", range(L, L + accepted + 1))

    def _prefill_demand(self, r: RequestState) -> dict[str, int]:
        """Pages per group the whole prefill of ``r`` would need, ignoring hits."""
        n = r.prefill_target
        if r.demand is not None and r.demand[0] == n:
            return r.demand[1]
        out = {}
        for name, m in self.mem.managed.items():
            g = m.spec
            kind = g.kind
            if kind is LayerKind.MAMBA:
                pages = 2 if self.cache is not None else 1
            elif kind is LayerKind.VISION_EMBEDDING:
                images = r.req.image_tokens if self.config.vision_mode == "on_demand" else 0
                pages = -(-images // g.tokens_per_page)
            else:
                stored = sum(1 for p in range(n) if m.policy.stores(p, r.is_image(p)))
                if kind is LayerKind.SLIDING_WINDOW:
                    stored = min(stored, g.window_tokens + self.config.chunk_size + g.tokens_per_page)
                pages = -(-stored // g.tokens_per_page)
            out[name] = pages
        r.demand = (n, out)
        return out

    def _admit(self, r: RequestState) -> None:
        r.tables = self.mem.new_tables()
        r.stamp = self.time
        self.running.append(r)
        if not r.admitted_once:
            r.admitted_once = True
            self.prompt_tokens_seen += r.prompt
            first = True
        else:
            first = False
        if self.cache is not None:
            n = r.prefill_target
            if len(r.digests) < n:
                extend_digests(r.digests, r.stream[:n])
            for name, t in r.tables.items():
                if self.mem.managed[name].spec.kind is not LayerKind.MAMBA:
                    pol = t.policy
                    t.positions = [p for p in range(n) if pol.stores(p, r.is_image(p))]
            h = self.cache.lookup_and_pin(r.id, r.tables, r.stream, r.digests, n, self.time)
            for name, t in r.tables.items():
                # keep only the positions the hit actually covers
                if name in self._vision:
                    t.positions.clear()
                else:
                    del t.positions[t.count_below(h):]
                t.registered = len(t.pages)
            r.computed = r.allocated = h
            if first:
                r.hit = h
                self.hit_tokens += h
            self._step_hits += h

    def step(self) -> StepMetrics:
        t = self.time
        self._step_preemptions = 0
        self._step_hits = 0
        while self.pending and self.pending[0].req.arrival_step <= t:
            r = self.pending.pop(0)
            insort(self.waiting, r, key=lambda x: x.sort_key)
        budget = self.config.chunk_size
        decoded: list[RequestState] = []
        prefill_tokens = 0
        for r in sorted(self.running, key=lambda x: x.sort_key):
            if budget <= 0:
                break
            if r not in self.running or r.prefilling:
                continue
            try:
                self._decode(r)
            except _Preempted:
                continue
            budget -= 1
            decoded.append(r)
            if r.done:
                self._finish(r)
        for r in sorted(self.running, key=lambda x: x.sort_key):
            if budget <= 0:
                break
            if r not in self.running or not r.prefilling:
                continue
            n = min(budget, r.prefill_target - r.computed)
            try:
                self._prefill(r, n)
            except _Preempted:
                continue
            budget -= n
            prefill_tokens += n
        while self.waiting and budget > 0:
            if self.running and not self.mem.fits(self._prefill_demand(self.waiting[0])):
                break
            r = self.waiting.pop(0)
            r.fresh = True
            self._admit(r)
            n = min(budget, r.prefill_target - r.computed)
            try:
                self._prefill(r, n)
            except _Preempted:
                break
            finally:
                r.fresh = False
            budget -= n
            prefill_tokens += n
        if self.config.check_invariants:
            self.mem.check_invariants()
        c = self.mem.census(self.running)
        for g, v in c.used.items():
            self.peak_used[g] = max(self.peak_used[g], v)
        metrics = StepMetrics(
            step=t, used=self._used_by_group(c.used), evictable=c.evictable, wasted=c.wasted,
            unallocated=c.unallocated, reserved=c.reserved,
            batch=sum(1 for r in decoded if r in self.running or r.finish_step == t),
            prefill_tokens=prefill_tokens, preemptions=self._step_preemptions, hits=self._step_hits,
            running=len(self.running), waiting=len(self.waiting))
        self.steps.append(metrics)
        self.time += 1
        return metrics

    def _used_by_group(self, used: dict[str, int]) -> dict[str, int]:
        return {g: used.get(g, 0) for g in self.groups}

    def _finish(self, r: RequestState) -> None:
        self._release_all(r, cache=True)
        self.running.remove(r)
        r.finish_step = self.time
        self.finished.append(r)
        self._log(r, "finish")

    @property
    def idle(self) -> bool:
        return not (self.pending or self.waiting or self.running)

    def run(self) -> RunReport:
        while not self.idle:
            if self.time >= self.config.max_steps:
                raise RunGuardError(f"run did not finish within {self.config.max_steps} steps")
            self.step()
        return RunReport(self.groups, self.steps, self.summary(), self.events)

    # -- summary -------------------------------------------------------------------

    def summary(self) -> dict:
        steps = self.steps
        batches = [m.batch for m in steps if m.batch > 0]
        steady = [m for m in steps if m.prefill_tokens == 0 and m.batch > 0 and m.allocated > 0]
        total_used = sum(m.used_total for m in steps)
        total_wasted = sum(m.wasted for m in steps)
        out = {
            "model": self.spec.name,
            "strategy": Strategy(self.config.strategy).value,
            "memory_bytes": self.config.memory_bytes,
            "chunk_size": self.config.chunk_size,
            "prefix_caching": self.config.prefix_caching,
            "steps": len(steps),
            "requests": len(self.finished),
            "mean_decode_batch": sum(batches) / len(batches) if batches else 0.0,
            "steady_waste_fraction": (sum(m.waste_fraction for m in steady) / len(steady)) if steady else 0.0,
            "waste_fraction": total_wasted / (total_used + total_wasted) if total_used + total_wasted else 0.0,
            "preemptions": self.preemptions,
            "hit_tokens": self.hit_tokens,
            "prompt_tokens": self.prompt_tokens_seen,
            "hit_rate": self.hit_tokens / self.prompt_tokens_seen if self.prompt_tokens_seen else 0.0,
            "peak_allocated_bytes": max((m.allocated for m in steps), default=0),
            "peak_used_bytes": {g: self.peak_used[g] for g in self.groups},
        }
        if self._vision:
            out["vision_peak_extra_bytes"] = max((r.peak_total - r.peak_kv for r in self.finished), default=0)
        if self.config.speculative is not None:
            per_model = {}
            for prefix in ("draft.", "target."):
                names = [g for g in self.groups if g.startswith(prefix)]
                per_model[prefix[:-1]] = {
                    "allocated_pages": sum(self.alloc_counts[g] for g in names),
                    "allocated_bytes": sum(self.alloc_counts[g] * self._page_bytes(g) for g in names),
                    "peak_used_bytes": sum(self.peak_used[g] for g in names),
                }
            out["per_model"] = per_model
        return out

    def _page_bytes(self, group: str) -> int:
        a = self.mem.managed[group].allocator
        return a.small_page_size


def simulate(spec: ModelSpec, trace: Sequence[Request], config: EngineConfig) -> RunReport:
    return Engine(spec, config, trace).run()


def run_speculative(target: ModelSpec, draft: ModelSpec, trace: Sequence[Request], config: EngineConfig,
                    propose_k: int = 4, acceptance: float = 0.7) -> RunReport:
    from dataclasses import replace
    cfg = replace(config, speculative=SpeculativeConfig(draft, propose_k, acceptance))
    return simulate(target, trace, cfg)


def run_vision(spec: ModelSpec, trace: Sequence[Request], config: EngineConfig, mode: str) -> RunReport:
    from dataclasses import replace
    return simulate(spec, trace, replace(config, vision_mode=mode))
