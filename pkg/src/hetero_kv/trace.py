"""Request traces: the on-disk JSONL format and synthetic workload generators."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Optional, Union


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    kind: str  # "text" or "image"
    tokens: int
    # segments with equal content share token identities (prefix sharing)
    content: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise TraceError(f"unknown segment kind {self.kind!r}")
        if not isinstance(self.tokens, int) or self.tokens < 0:
            raise TraceError(f"segment token count must be a nonnegative int, got {self.tokens!r}")


@dataclass(frozen=True)
class Request:
    id: str
    arrival_step: int
    segments: tuple[Segment, ...]
    output_tokens: int
    prefix_group: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.arrival_step < 0:
            raise TraceError(f"{self.id}: arrival_step must be >= 0")
        if self.output_tokens < 1:
            raise TraceError(f"{self.id}: output_tokens must be >= 1")

    @property
    def prompt_tokens(self) -> int:
        return sum(s.tokens for s in self.segments)

    @property
    def image_tokens(self) -> int:
        return sum(s.tokens for s in self.segments if s.kind == "image")

    @property
    def text_tokens(self) -> int:
        return self.prompt_tokens - self.image_tokens

    def token_stream(self) -> list[Hashable]:
        """Token identities of prompt followed by generated tokens."""
        out: list[Hashable] = []
        for i, seg in enumerate(self.segments):
            content = seg.content if seg.content is not None else f"{self.id}#{i}"
            out.extend((content, j) for j in range(seg.tokens))
        gen = f"{self.id}/gen"
        out.extend((gen, j) for j in range(self.output_tokens))
        return out

    def image_spans(self) -> list[tuple[int, int]]:
        spans = []
        pos = 0
        for seg in self.segments:
            if seg.kind == "image" and seg.tokens:
                spans.append((pos, pos + seg.tokens))
            pos += seg.tokens
        return spans


def request_to_dict(r: Request) -> dict:
    segs = []
    for s in r.segments:
        d = {"kind": s.kind, "tokens": s.tokens}
        if s.content is not None:
            d["content"] = s.content
        segs.append(d)
    d = {"id": r.id, "arrival_step": r.arrival_step, "segments": segs, "output_tokens": r.output_tokens}
    if r.prefix_group is not None:
        d["prefix_group"] = r.prefix_group
    return d


def request_from_dict(d: dict) -> Request:
    try:
        segs = tuple(Segment(s["kind"], s["tokens"], s.get("content")) for s in d["segments"])
        return Request(str(d["id"]), int(d["arrival_step"]), segs, int(d["output_tokens"]),
                       d.get("prefix_group"))
    except (KeyError, TypeError) as e:
        raise TraceError(f"malformed trace record {d!r}: {e}") from None


def read_trace(path: Union[str, Path]) -> list[Request]:
    requests = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise TraceError(f"cannot read trace {path}: {e}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceError(f"{path}:{n}: {e}") from None
        requests.append(request_from_dict(d))
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise TraceError(f"{path}: duplicate request ids")
    return requests


def dumps_trace(requests: Iterable[Request]) -> str:
    return "".join(json.dumps(request_to_dict(r), sort_keys=True) + "\n" for r in requests)


def write_trace(requests: Iterable[Request], path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_trace(requests))


def load_bundled_trace(name: str) -> list[Request]:
    from importlib import resources
    fname = name if name.endswith(".jsonl") else f"{name}.jsonl"
    res = resources.files("hetero_kv") / "traces" / fname
    if not res.is_file():
        raise TraceError(f"no bundled trace {name!r}")
    requests = []
    for line in res.read_text().splitlines():
        if line.strip():
            requests.append(request_from_dict(json.loads(line)))
    return requests


# --- generators ---------------------------------------------------------------


def _scaled(n: float, scale: float) -> int:
    return max(1, round(n * scale))


def _check_range(lo, hi, what):
    if lo < 0 or hi < lo:
        raise TraceError(f"invalid {what} range [{lo}, {hi}]")


def long_doc_qa(num_requests: int = 20, input_min: int = 55_000, input_max: int = 110_000,
                output_min: int = 50, output_max: int = 100, scale: float = 1.0,
                seed: int = 0) -> list[Request]:
    """Long single-document prompts, all arriving at step 0."""
    _check_range(input_min, input_max, "input")
    _check_range(output_min, output_max, "output")
    if output_min < 1 or num_requests < 0:
        raise TraceError("need output_min >= 1 and num_requests >= 0")
    rng = random.Random(seed)
    lo, hi = _scaled(input_min, scale), _scaled(input_max, scale)
    out = []
    for i in range(num_requests):
        n = rng.randint(lo, hi)
        o = rng.randint(output_min, output_max)
        out.append(Request(f"doc{i}", 0, (Segment("text", n),), o))
    return out


def multi_article_prefix(num_articles: int = 8, questions: int = 4, article_tokens: int = 8000,
                         question_tokens: int = 32, output_tokens: int = 16, order: str = "shuffled",
                         arrival_gap: int = 4, scale: float = 1.0, seed: int = 0) -> list[Request]:
    """Questions about shared articles; each request is article + question.

    ``order`` is "round-robin" (cycle through articles) or "shuffled".
    """
    if num_articles < 1 or questions < 1:
        raise TraceError("need at least one article and one question")
    if order not in ("round-robin", "shuffled"):
        raise TraceError(f"unknown order {order!r}")
    if arrival_gap < 0 or output_tokens < 1:
        raise TraceError("arrival_gap must be >= 0 and output_tokens >= 1")
    rng = random.Random(seed)
    a_len = _scaled(article_tokens, scale)
    q_len = _scaled(question_tokens, scale)
    pairs = [(a, q) for q in range(questions) for a in range(num_articles)]
    if order == "shuffled":
        rng.shuffle(pairs)
    out = []
    for i, (a, q) in enumerate(pairs):
        segs = (Segment("text", a_len, f"article{a}"), Segment("text", q_len, f"question{a}.{q}"))
        out.append(Request(f"a{a}q{q}", i * arrival_gap, segs, output_tokens, f"article{a}"))
    return out


def dynamic_length(num_requests: int = 200, short_tokens: int = 1000, long_tokens: int = 16000,
                   output_min: int = 32, output_max: int = 128, arrival_gap: int = 2,
                   periods: int = 2, spread: float = 0.5, scale: float = 1.0, seed: int = 0) -> list[Request]:
    """Prompt lengths whose mean sweeps between short and long over time.

    The mean follows a triangle wave with ``periods`` cycles over the trace and
    each prompt is drawn uniformly within +-``spread`` of the current mean.
    """
    _check_range(short_tokens, long_tokens, "length")
    _check_range(output_min, output_max, "output")
    if not 0 <= spread < 1 or periods < 1 or output_min < 1:
        raise TraceError("invalid dynamic-length parameters")
    rng = random.Random(seed)
    lo, hi = _scaled(short_tokens, scale), _scaled(long_tokens, scale)
    out = []
    for i in range(num_requests):
        phase = (i * periods / max(1, num_requests)) % 1.0
        tri = 2 * phase if phase < 0.5 else 2 * (1 - phase)
        mean = lo + (hi - lo) * tri
        n = max(1, round(rng.uniform(mean * (1 - spread), mean * (1 + spread))))
        out.append(Request(f"dyn{i}", i * arrival_gap, (Segment("text", n),),
                           rng.randint(output_min, output_max)))
    return out


def vision_mmmu_like(num_requests: int = 20, text_mean: int = 43, image_mean: int = 6193,
                     max_images: int = 3, output_min: int = 16, output_max: int = 64,
                     arrival_gap: int = 1, scale: float = 1.0, seed: int = 0) -> list[Request]:
    """Image-heavy prompts: text, then 1..max_images images, then text.

    Per-request text and image totals are uniform on [0.5, 1.5] x their means.
    """
    if max_images < 1 or text_mean < 0 or image_mean < 0:
        raise TraceError("invalid vision trace parameters")
    _check_range(output_min, output_max, "output")
    rng = random.Random(seed)
    out = []
    for i in range(num_requests):
        text = max(2, round(rng.uniform(0.5, 1.5) * text_mean * scale))
        image = max(1, round(rng.uniform(0.5, 1.5) * image_mean * scale))
        k = min(rng.randint(1, max_images), image)
        cuts = sorted(rng.sample(range(1, image), k - 1)) if k > 1 else []
        sizes = [b - a for a, b in zip([0] + cuts, cuts + [image])]
        head = text // 2
        segs = [Segment("text", head)]
        segs += [Segment("image", s, f"img{i}.{j}") for j, s in enumerate(sizes)]
        segs.append(Segment("text", text - head))
        out.append(Request(f"vis{i}", i * arrival_gap, tuple(segs), rng.randint(output_min, output_max)))
    return out


def static_trace(num_requests: int = 8, prompt_tokens: int = 8192, output_tokens: int = 16,
                 arrival_step: int = 0, scale: float = 1.0) -> list[Request]:
    """Identical-length requests all arriving together."""
    n = _scaled(prompt_tokens, scale)
    return [Request(f"s{i}", arrival_step, (Segment("text", n),), output_tokens) for i in range(num_requests)]


GENERATORS = {
    "long-doc-qa": long_doc_qa,
    "multi-article-prefix": multi_article_prefix,
    "dynamic-length": dynamic_length,
    "vision-mmmu-like": vision_mmmu_like,
    "static": static_trace,
}
