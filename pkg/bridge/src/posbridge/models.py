"""Model adapters behind the service: a dependency-free deterministic stand-in
for protocol tests, plus helpers shared by the transformer-backed adapters.
"""

from __future__ import annotations

import hashlib
import re
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .protocol import SENTINEL_PREFIX, ProtocolError


@runtime_checkable
class ModelAdapter(Protocol):
    dim: int
    poolings: tuple[str, ...]
    max_input_tokens: int

    def embed(self, texts: Sequence[str], pooling: str) -> np.ndarray: ...

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]: ...


def check_pooling(pooling: str, supported: Sequence[str]) -> None:
    if pooling not in supported:
        raise ProtocolError(
            f"pooling {pooling!r} is not supported by this model "
            f"(advertised: {sorted(supported)})"
        )


_SENTINEL_RE = re.compile(re.escape(SENTINEL_PREFIX) + r"\d+>")


def parse_sentinel_spans(text: str, spans_per_input: int) -> list[str]:
    """Split a seq2seq decode like '<extra_id_0> foo <extra_id_1> bar' into
    span strings, padded with empties / truncated to spans_per_input."""
    pieces = _SENTINEL_RE.split(text)
    if len(pieces) > 1:
        spans = [p.strip() for p in pieces[1:]]
    else:
        spans = [text.strip()]
    spans = spans[:spans_per_input]
    return spans + [""] * (spans_per_input - len(spans))


class HashModel:
    """Deterministic hash-based embedder: each whitespace token maps to a
    fixed pseudo-random vector, pooled by mean or first. Stands in for a real
    checkpoint wherever only the protocol is under test."""

    def __init__(self, dim: int = 16, seed: int = 0, max_input_tokens: int = 512):
        if dim <= 0:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.seed = seed
        self.poolings = ("mean", "first")
        self.max_input_tokens = max_input_tokens

    def _token_vector(self, token: str) -> np.ndarray:
        need = self.dim * 8
        material = b""
        counter = 0
        while len(material) < need:
            material += hashlib.sha256(
                f"{self.seed}:{counter}:{token}".encode("utf-8")
            ).digest()
            counter += 1
        words = np.frombuffer(material[:need], dtype="<u8")
        return words.astype(np.float64) / np.float64(2**63) - 1.0

    def embed(self, texts: Sequence[str], pooling: str = "mean") -> np.ndarray:
        check_pooling(pooling, self.poolings)
        rows = []
        for text in texts:
            tokens = text.split()[: self.max_input_tokens] or [""]
            if pooling == "first":
                rows.append(self._token_vector(tokens[0]))
            else:
                rows.append(
                    np.mean([self._token_vector(t) for t in tokens], axis=0)
                )
        return np.vstack(rows) if rows else np.zeros((0, self.dim))

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        out = []
        for text in inputs:
            digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
            out.append(
                [f"w{int.from_bytes(digest[j : j + 2], 'big') % 10000:04d}"
                 for j in range(spans_per_input)]
            )
        return out
