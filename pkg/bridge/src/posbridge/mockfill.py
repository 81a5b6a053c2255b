"""Canned span-filling behaviors for mock serving.

The echo and cutoff modes reconstruct a masked span by matching the text
around the sentinel against a known document collection (a corpus.jsonl file
in the toolkit's wire format: one {"id", "text"} object per line). They
deliberately reimplement that matching here so the bridge stays free of any
dependency on the toolkit's internals; the JSONL file and the sentinel
surface form are the only shared contract.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .protocol import ProtocolError, sentinel

_SENTINEL = sentinel(0)


def load_doc_texts(path: str | Path) -> list[str]:
    texts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                texts.append(record["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ProtocolError(f"{path}:{lineno}: bad corpus line ({exc})") from exc
    return texts


def _split_at_sentinel(text: str) -> tuple[str, str]:
    at = text.find(_SENTINEL)
    if at < 0:
        raise ProtocolError(f"input has no {_SENTINEL!r} marker")
    return text[:at], text[at + len(_SENTINEL) :]


def _reconstruct(prefix: str, suffix: str, texts: Sequence[str]) -> str:
    for t in texts:
        if (
            len(t) > len(prefix) + len(suffix)
            and t.startswith(prefix)
            and t.endswith(suffix)
        ):
            return t[len(prefix) : len(t) - len(suffix)]
    raise ProtocolError("no known document matches the masked input")


class EchoFiller:
    """Always answers with the exact masked span."""

    def __init__(self, doc_texts: Sequence[str]):
        self.doc_texts = list(doc_texts)

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        out = []
        for text in inputs:
            prefix, suffix = _split_at_sentinel(text)
            out.append([_reconstruct(prefix, suffix, self.doc_texts)] * spans_per_input)
        return out


class EmptyFiller:
    """Always answers with empty strings."""

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        return [[""] * spans_per_input for _ in inputs]


class CutoffFiller:
    """Answers correctly iff the masked span starts before token `cutoff`.
    The sentinel replaces whole whitespace tokens, so the prefix's token
    count is the span's start index in the original document."""

    def __init__(self, doc_texts: Sequence[str], cutoff: int):
        if cutoff <= 0:
            raise ProtocolError(f"cutoff must be > 0, got {cutoff}")
        self.doc_texts = list(doc_texts)
        self.cutoff = cutoff

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        out = []
        for text in inputs:
            prefix, suffix = _split_at_sentinel(text)
            if len(prefix.split()) < self.cutoff:
                answer = _reconstruct(prefix, suffix, self.doc_texts)
            else:
                answer = ""
            out.append([answer] * spans_per_input)
        return out


def make_mock_filler(mode: str, doc_texts: Sequence[str] | None = None):
    """Parse a mock spec: 'echo_targets', 'empty', or 'position_cutoff:N'."""
    if mode == "empty":
        return EmptyFiller()
    if mode != "echo_targets" and not mode.startswith("position_cutoff:"):
        raise ProtocolError(f"unknown mock mode {mode!r}")
    if doc_texts is None:
        raise ProtocolError(f"mock mode {mode!r} needs a document collection")
    if mode == "echo_targets":
        return EchoFiller(doc_texts)
    try:
        cutoff = int(mode.split(":", 1)[1])
    except ValueError:
        raise ProtocolError(f"bad cutoff in mock mode {mode!r}") from None
    return CutoffFiller(doc_texts, cutoff)
