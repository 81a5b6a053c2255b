"""Position-aware probe inputs: relocated-passage documents, uniform token
segments, and single-span corruption instances with T5-style sentinels."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document, PassageAlignment
from .errors import ValidationError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

KIND_DEFAULT = "default"
KIND_INSERTION = "insertion"
KIND_SEGMENT = "segment"
KIND_SPAN_WINDOW = "span_window"


@dataclass(frozen=True)
class Token:
    surface: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class InsertionPlan:
    doc_id: str
    l_d: int
    l_p: int
    points: tuple[int, ...]  # ten offsets, points[0] == 0, points[9] == l_d - l_p


@dataclass(frozen=True)
class ProbeVariant:
    kind: str
    doc_id: str
    text: str
    position_index: int


@dataclass(frozen=True)
class SpanCorruptionInstance:
    doc_id: str
    window: tuple[int, int]
    input_with_sentinels: str
    target_spans: tuple[str, ...]
    span_len: int = 3


def sentinel(index: int) -> str:
    return f"<extra_id_{index}>"


def tokenize(text: str) -> list[Token]:
    """Split on whitespace runs and punctuation boundaries.

    Tokens are maximal word-character runs or single punctuation characters;
    the gaps between them are whitespace only, so the source text can be
    reconstructed exactly from offsets.
    """
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def _round_half_down(num: int, den: int) -> int:
    # round(num/den) with exact rational arithmetic, ties toward the smaller value
    return -((den - 2 * num) // (2 * den))


def insertion_points(l_d: int, l_p: int, doc_id: str = "") -> InsertionPlan:
    """Ten uniform insertion offsets: the i-th is (i-1)*(l_d-l_p)/9, rounded
    half-down, for i in 1..10."""
    if not 0 < l_p < l_d:
        raise ValidationError(f"need 0 < l_p < l_d, got l_p={l_p}, l_d={l_d}")
    span = l_d - l_p
    points = tuple(_round_half_down((i - 1) * span, 9) for i in range(1, 11))
    return InsertionPlan(doc_id=doc_id, l_d=l_d, l_p=l_p, points=points)


def _snap_offsets(residual: str) -> list[int]:
    # candidate insertion offsets: string ends plus every token start, so the
    # inserted passage never splits a token
    offsets = {0, len(residual)}
    offsets.update(t.char_start for t in tokenize(residual))
    return sorted(offsets)


def relocate_passage(
    doc: Document,
    alignment: PassageAlignment,
    target_offset: int,
    position_index: int = 0,
) -> ProbeVariant:
    """Delete the aligned passage and re-insert it at the token boundary of the
    residual text nearest to target_offset (ties toward the smaller offset)."""
    if alignment.doc_id != doc.id:
        raise ValidationError(
            f"alignment is for document {alignment.doc_id!r}, not {doc.id!r}"
        )
    if alignment.char_end > doc.char_len:
        raise ValidationError(f"alignment span exceeds document {doc.id!r}")
    passage = doc.text[alignment.char_start : alignment.char_end]
    residual = doc.text[: alignment.char_start] + doc.text[alignment.char_end :]
    if not 0 <= target_offset <= len(residual):
        raise ValidationError(
            f"target offset {target_offset} outside [0, {len(residual)}] for {doc.id!r}"
        )
    snapped = min(_snap_offsets(residual), key=lambda b: (abs(b - target_offset), b))
    return ProbeVariant(
        kind=KIND_INSERTION,
        doc_id=doc.id,
        text=residual[:snapped] + passage + residual[snapped:],
        position_index=position_index,
    )


def segment_uniform(
    doc: Document, k: int = 10, tokens: Sequence[Token] | None = None
) -> list[ProbeVariant]:
    """Partition the document's tokens into k contiguous segments of uniform
    size (the first n%k segments take one extra token); each variant's text is
    the exact substring from its first token's start to its last token's end."""
    if tokens is None:
        tokens = tokenize(doc.text)
    n = len(tokens)
    if n < k:
        raise ValidationError(f"document {doc.id!r} has {n} tokens, need >= {k}")
    base, rem = divmod(n, k)
    variants: list[ProbeVariant] = []
    start = 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        seg = tokens[start : start + size]
        variants.append(
            ProbeVariant(
                kind=KIND_SEGMENT,
                doc_id=doc.id,
                text=doc.text[seg[0].char_start : seg[-1].char_end],
                position_index=i + 1,
            )
        )
        start += size
    return variants


def token_windows(
    tokens: Sequence[Token], window_len: int = 256, max_len: int = 2048
) -> list[tuple[int, int]]:
    """Consecutive half-open windows of width window_len over the first
    min(len(tokens), max_len) tokens; a final short window is kept if nonempty."""
    if window_len <= 0:
        raise ValidationError(f"window_len must be positive, got {window_len}")
    n = min(len(tokens), max_len)
    return [(start, min(start + window_len, n)) for start in range(0, n, window_len)]


def corrupt_spans(
    doc: Document,
    window: tuple[int, int],
    num_spans: int,
    span_len: int = 3,
    seed: int = 0,
    tokens: Sequence[Token] | None = None,
) -> list[SpanCorruptionInstance]:
    """Independently corrupt num_spans single spans of span_len tokens inside
    the window, each instance replacing its span with one sentinel marker."""
    if tokens is None:
        tokens = tokenize(doc.text)
    w_start, w_end = window
    if not 0 <= w_start < w_end <= len(tokens):
        raise ValidationError(f"window {window} invalid for {len(tokens)} tokens")
    if w_end - w_start < span_len:
        raise ValidationError(
            f"window {window} narrower than span length {span_len}"
        )
    rng = np.random.default_rng(seed)
    starts = rng.integers(w_start, w_end - span_len + 1, size=num_spans)
    instances: list[SpanCorruptionInstance] = []
    for s in starts:
        s = int(s)
        a = tokens[s].char_start
        b = tokens[s + span_len - 1].char_end
        instances.append(
            SpanCorruptionInstance(
                doc_id=doc.id,
                window=(w_start, w_end),
                input_with_sentinels=doc.text[:a] + sentinel(0) + doc.text[b:],
                target_spans=(doc.text[a:b],),
                span_len=span_len,
            )
        )
    return instances


# ---------------------------------------------------------------------------
# serialization


def write_variants_jsonl(variants: Sequence[ProbeVariant], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in variants:
            fh.write(
                json.dumps(
                    {
                        "doc_id": v.doc_id,
                        "kind": v.kind,
                        "position_index": v.position_index,
                        "text": v.text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_variants_jsonl(path: str | Path) -> list[ProbeVariant]:
    out: list[ProbeVariant] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                ProbeVariant(
                    kind=rec["kind"],
                    doc_id=rec["doc_id"],
                    text=rec["text"],
                    position_index=int(rec["position_index"]),
                )
            )
    return out


def write_span_instances_jsonl(
    instances: Sequence[SpanCorruptionInstance], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(
                json.dumps(
                    {
                        "doc_id": inst.doc_id,
                        "window": list(inst.window),
                        "input_with_sentinels": inst.input_with_sentinels,
                        "target_spans": list(inst.target_spans),
                        "span_len": inst.span_len,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
