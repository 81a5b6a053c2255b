"""Deterministic span-filling test doubles implementing the fill_spans
protocol in-process, so the span probe can be exercised and calibrated
without any model service.

The echo and cutoff mocks recover the masked span by matching the text
around the sentinel against a known document collection; they never see the
probe's targets directly.
"""

from __future__ import annotations

from typing import Sequence

from .corpus import Document
from .errors import ValidationError
from .probes import sentinel, tokenize

_SENTINEL = sentinel(0)


def _split_at_sentinel(text: str) -> tuple[str, str]:
    at = text.find(_SENTINEL)
    if at < 0:
        raise ValidationError(f"input has no {_SENTINEL!r} marker")
    return text[:at], text[at + len(_SENTINEL) :]


def _reconstruct(prefix: str, suffix: str, docs: Sequence[Document]) -> str:
    for doc in docs:
        t = doc.text
        if (
            len(t) > len(prefix) + len(suffix)
            and t.startswith(prefix)
            and t.endswith(suffix)
        ):
            return t[len(prefix) : len(t) - len(suffix)]
    raise ValidationError("no known document matches the masked input")


class EchoTargetsFiller:
    """Always answers with the exact masked span (accuracy 1.0 everywhere)."""

    def __init__(self, docs: Sequence[Document]):
        self.docs = list(docs)

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        out = []
        for text in inputs:
            prefix, suffix = _split_at_sentinel(text)
            out.append([_reconstruct(prefix, suffix, self.docs)] * spans_per_input)
        return out


class EmptyFiller:
    """Always answers with empty strings (accuracy 0.0 everywhere)."""

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        return [[""] * spans_per_input for _ in inputs]


class PositionCutoffFiller:
    """Answers correctly iff the masked span starts before token `cutoff`,
    otherwise with an empty string; accuracy is 1.0 on windows fully below
    the cutoff and 0.0 beyond it."""

    def __init__(self, docs: Sequence[Document], cutoff: int):
        if cutoff <= 0:
            raise ValidationError(f"cutoff must be > 0, got {cutoff}")
        self.docs = list(docs)
        self.cutoff = cutoff

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        out = []
        for text in inputs:
            prefix, suffix = _split_at_sentinel(text)
            # the sentinel replaces whole tokens, so the prefix's token count
            # is the masked span's start index in the original document
            span_start = len(tokenize(prefix))
            if span_start < self.cutoff:
                answer = _reconstruct(prefix, suffix, self.docs)
            else:
                answer = ""
            out.append([answer] * spans_per_input)
        return out


def make_filler(mode: str, docs: Sequence[Document] | None = None):
    """Parse a mock spec: 'echo_targets', 'empty', or 'position_cutoff:N'."""
    if mode == "empty":
        return EmptyFiller()
    if docs is None:
        raise ValidationError(f"mock mode {mode!r} needs the document collection")
    if mode == "echo_targets":
        return EchoTargetsFiller(docs)
    if mode.startswith("position_cutoff:"):
        try:
            cutoff = int(mode.split(":", 1)[1])
        except ValueError:
            raise ValidationError(f"bad cutoff in mock mode {mode!r}") from None
        return PositionCutoffFiller(docs, cutoff)
    raise ValidationError(f"unknown mock mode {mode!r}")
