"""Embedding backends: a deterministic trainable toy encoder (hashed token
table + mean or exponentially position-weighted pooling) and a remote client
speaking the JSON-over-HTTP bridge protocol."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .errors import TransportError, ValidationError
from .probes import tokenize

POOLING_MEAN = "mean"
POOLING_POSITION_WEIGHTED = "position_weighted"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_MAGIC = b"PBTOYENC"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIBBHd")
_POOLING_CODES = {POOLING_MEAN: 0, POOLING_POSITION_WEIGHTED: 1}
_POOLING_NAMES = {v: k for k, v in _POOLING_CODES.items()}


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass
class ToyEncoderParams:
    dim: int
    vocab_hash_buckets: int
    token_table: np.ndarray  # [vocab_hash_buckets, dim] float64
    pooling: str = POOLING_MEAN
    decay: float = 0.0
    normalize: bool = False

    def __post_init__(self):
        if self.dim <= 0 or self.vocab_hash_buckets <= 0:
            raise ValidationError(
                f"dim and vocab_hash_buckets must be positive, got "
                f"({self.dim}, {self.vocab_hash_buckets})"
            )
        if self.pooling not in _POOLING_CODES:
            raise ValidationError(f"unknown pooling {self.pooling!r}")
        if self.decay < 0:
            raise ValidationError(f"decay must be >= 0, got {self.decay}")
        if self.token_table.shape != (self.vocab_hash_buckets, self.dim):
            raise ValidationError(
                f"token_table shape {self.token_table.shape} != "
                f"({self.vocab_hash_buckets}, {self.dim})"
            )

    def copy(self) -> "ToyEncoderParams":
        return replace(self, token_table=self.token_table.copy())


def init_params(
    dim: int,
    vocab_hash_buckets: int,
    seed: int = 0,
    pooling: str = POOLING_MEAN,
    decay: float = 0.0,
    normalize: bool = False,
) -> ToyEncoderParams:
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((vocab_hash_buckets, dim)) / np.sqrt(dim)
    return ToyEncoderParams(
        dim=dim,
        vocab_hash_buckets=vocab_hash_buckets,
        token_table=table,
        pooling=pooling,
        decay=decay,
        normalize=normalize,
    )


def pooling_weights(n_tokens: int, pooling: str, decay: float) -> np.ndarray:
    """Per-position weights; position_weighted uses exp(-decay * t / n_tokens)
    so decay 0 reproduces mean pooling exactly."""
    if pooling == POOLING_MEAN:
        return np.ones(n_tokens)
    return np.exp(-decay * np.arange(n_tokens) / n_tokens)


def toy_forward(params: ToyEncoderParams, token_surfaces: Sequence[str]) -> np.ndarray:
    """Weighted average of hashed token-table rows."""
    if len(token_surfaces) == 0:
        raise ValidationError("cannot embed an empty token sequence")
    idx = bucket_indices(token_surfaces, params.vocab_hash_buckets)
    w = pooling_weights(len(idx), params.pooling, params.decay)
    v = (w[:, None] * params.token_table[idx]).sum(axis=0) / w.sum()
    if params.normalize:
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValidationError("zero-norm embedding cannot be normalized")
        v = v / norm
    return v


_BUCKET_CACHE: dict[tuple[int, str], int] = {}


def bucket_indices(surfaces: Sequence[str], buckets: int) -> np.ndarray:
    out = np.empty(len(surfaces), dtype=np.int64)
    cache = _BUCKET_CACHE
    for i, s in enumerate(surfaces):
        key = (buckets, s)
        b = cache.get(key)
        if b is None:
            b = fnv1a_64(s.encode("utf-8")) % buckets
            cache[key] = b
        out[i] = b
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine of a zero vector is undefined")
    return float(np.clip(a.dot(b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# backends


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str  # "native" | "remote"
    params_path: str | None = None
    endpoint_url: str | None = None
    pooling_name: str = POOLING_MEAN
    max_input_tokens: int = 2048

    def __post_init__(self):
        if self.max_input_tokens <= 0:
            raise ValidationError("max_input_tokens must be > 0")
        if self.kind == "native":
            if not self.params_path:
                raise ValidationError("native backend needs params_path")
        elif self.kind == "remote":
            if not self.endpoint_url:
                raise ValidationError("remote backend needs endpoint_url")
        else:
            raise ValidationError(f"unknown backend kind {self.kind!r}")


class NativeBackend:
    """Immutable after construction; embed_batch is a pure function of
    (params, texts) so concurrent calls are safe."""

    def __init__(self, params: ToyEncoderParams, max_input_tokens: int = 2048):
        self.params = params
        self.max_input_tokens = max_input_tokens

    @property
    def pooling_label(self) -> str:
        if self.params.pooling == POOLING_POSITION_WEIGHTED:
            return f"{self.params.pooling}(decay={self.params.decay:g})"
        return self.params.pooling

    def embed_text(self, text: str) -> np.ndarray:
        surfaces = [t.surface for t in tokenize(text)[: self.max_input_tokens]]
        return toy_forward(self.params, surfaces)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            return np.zeros((0, self.params.dim))
        return np.stack([self.embed_text(t) for t in texts])


class RemoteBackend:
    """Client for the bridge protocol: POST /embed, POST /fill_spans,
    GET /capabilities. One POST per sub-batch; every request has a timeout."""

    def __init__(
        self,
        endpoint_url: str,
        pooling_name: str = POOLING_MEAN,
        max_input_tokens: int = 2048,
        timeout: float = 60.0,
        request_batch_size: int = 32,
    ):
        self.endpoint_url = endpoint_url.rstrip("/")
        self.pooling_name = pooling_name
        self.max_input_tokens = max_input_tokens
        self.timeout = timeout
        self.request_batch_size = request_batch_size

    @property
    def pooling_label(self) -> str:
        return self.pooling_name

    def _post(self, route: str, payload: dict, batch_index: int) -> dict:
        url = f"{self.endpoint_url}{route}"
        try:
            resp = requests.post(url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise TransportError(
                f"{url} failed for batch {batch_index}: {exc}",
                endpoint=self.endpoint_url,
                batch_index=batch_index,
            ) from exc

    def _truncate(self, text: str) -> str:
        tokens = tokenize(text)
        if len(tokens) <= self.max_input_tokens:
            return text
        return text[: tokens[self.max_input_tokens - 1].char_end]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        rows: list[list[float]] = []
        for bi, lo in enumerate(range(0, len(texts), self.request_batch_size)):
            chunk = [self._truncate(t) for t in texts[lo : lo + self.request_batch_size]]
            reply = self._post(
                "/embed", {"texts": chunk, "pooling": self.pooling_name}, bi
            )
            vectors = reply.get("vectors")
            if not isinstance(vectors, list) or len(vectors) != len(chunk):
                raise TransportError(
                    f"/embed returned {0 if vectors is None else len(vectors)} "
                    f"vectors for {len(chunk)} texts",
                    endpoint=self.endpoint_url,
                    batch_index=bi,
                )
            rows.extend(vectors)
        return np.asarray(rows, dtype=np.float64)

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        out: list[list[str]] = []
        for bi, lo in enumerate(range(0, len(inputs), self.request_batch_size)):
            chunk = list(inputs[lo : lo + self.request_batch_size])
            reply = self._post(
                "/fill_spans",
                {"inputs": chunk, "spans_per_input": spans_per_input},
                bi,
            )
            preds = reply.get("predictions")
            if not isinstance(preds, list) or len(preds) != len(chunk):
                raise TransportError(
                    "/fill_spans reply malformed",
                    endpoint=self.endpoint_url,
                    batch_index=bi,
                )
            out.extend([list(p) for p in preds])
        return out

    def capabilities(self) -> dict:
        url = f"{self.endpoint_url}/capabilities"
        try:
            resp = requests.get(url, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise TransportError(f"{url} failed: {exc}", endpoint=self.endpoint_url) from exc


def load_backend(descriptor: BackendDescriptor) -> NativeBackend | RemoteBackend:
    if descriptor.kind == "native":
        params = load_params(descriptor.params_path)
        return NativeBackend(params, max_input_tokens=descriptor.max_input_tokens)
    return RemoteBackend(
        descriptor.endpoint_url,
        pooling_name=descriptor.pooling_name,
        max_input_tokens=descriptor.max_input_tokens,
    )


def embed_batch(backend, texts: Sequence[str]) -> np.ndarray:
    """One vector per text, order-preserving."""
    for i, t in enumerate(texts):
        if not t:
            raise ValidationError(f"text {i} is empty")
    return backend.embed_batch(texts)


# ---------------------------------------------------------------------------
# persistence


def save_params(params: ToyEncoderParams, path: str | Path) -> None:
    header = _HEADER.pack(
        _MAGIC,
        _FORMAT_VERSION,
        params.dim,
        params.vocab_hash_buckets,
        _POOLING_CODES[params.pooling],
        1 if params.normalize else 0,
        0,
        params.decay,
    )
    table = np.ascontiguousarray(params.token_table, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(table.tobytes())


def load_params(path: str | Path) -> ToyEncoderParams:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"params file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"params file {path} truncated")
    magic, version, dim, buckets, pooling_code, normalize, _pad, decay = _HEADER.unpack(
        raw[: _HEADER.size]
    )
    if magic != _MAGIC:
        raise ValidationError(f"{path} is not a toy-encoder params file")
    if version != _FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {version}")
    if pooling_code not in _POOLING_NAMES:
        raise ValidationError(f"{path}: unknown pooling code {pooling_code}")
    expected = _HEADER.size + buckets * dim * 8
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    table = np.frombuffer(raw[_HEADER.size :], dtype="<f8").reshape(buckets, dim).copy()
    return ToyEncoderParams(
        dim=dim,
        vocab_hash_buckets=buckets,
        token_table=table,
        pooling=_POOLING_NAMES[pooling_code],
        decay=decay,
        normalize=bool(normalize),
    )
