"""HTTP service speaking the toolkit's wire protocol.

Routes: POST /embed, POST /fill_spans, GET /capabilities. Stateless between
requests; protocol violations answer 400, oversize batches 413.
"""

from __future__ import annotations

from pathlib import Path

import uvicorn
from fastapi import FastAPI, HTTPException

from .mockfill import load_doc_texts, make_mock_filler
from .models import HashModel
from .protocol import (
    Capabilities,
    EmbedRequest,
    EmbedResponse,
    FillSpansRequest,
    FillSpansResponse,
    ProtocolError,
)

DEFAULT_MAX_BATCH = 256


def build_app(model, max_batch_size: int = DEFAULT_MAX_BATCH, filler=None) -> FastAPI:
    """Wrap a model adapter (and optionally a separate span filler) in the
    protocol routes. The filler defaults to the model itself."""
    if max_batch_size <= 0:
        raise ValueError(f"max_batch_size must be positive, got {max_batch_size}")
    span_filler = filler if filler is not None else model
    app = FastAPI(title="posbridge", docs_url=None, redoc_url=None)

    def _check_batch(size: int) -> None:
        if size > max_batch_size:
            raise HTTPException(
                status_code=413,
                detail=f"batch of {size} exceeds the limit of {max_batch_size}",
            )

    @app.post("/embed", response_model=EmbedResponse)
    def embed(request: EmbedRequest) -> EmbedResponse:
        _check_batch(len(request.texts))
        try:
            vectors = model.embed(request.texts, request.pooling)
        except ProtocolError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return EmbedResponse(vectors=vectors.tolist(), dim=model.dim)

    @app.post("/fill_spans", response_model=FillSpansResponse)
    def fill_spans(request: FillSpansRequest) -> FillSpansResponse:
        _check_batch(len(request.inputs))
        try:
            predictions = span_filler.fill_spans(
                request.inputs, request.spans_per_input
            )
        except ProtocolError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return FillSpansResponse(predictions=predictions)

    @app.get("/capabilities", response_model=Capabilities)
    def capabilities() -> Capabilities:
        return Capabilities(
            dim=model.dim,
            poolings=list(model.poolings),
            max_input_tokens=model.max_input_tokens,
        )

    return app


def build_mock_app(
    mode: str,
    docs_path: str | Path | None = None,
    dim: int = 16,
    seed: int = 0,
    max_batch_size: int = DEFAULT_MAX_BATCH,
) -> FastAPI:
    """Canned-behavior service: hash-based embeddings plus an echo_targets /
    empty / position_cutoff:N span filler over an optional corpus.jsonl."""
    doc_texts = load_doc_texts(docs_path) if docs_path else None
    filler = make_mock_filler(mode, doc_texts)
    return build_app(
        HashModel(dim=dim, seed=seed), max_batch_size=max_batch_size, filler=filler
    )


def serve(
    model_ref: str,
    port: int,
    host: str = "127.0.0.1",
    max_input_tokens: int = 512,
    max_batch_size: int = DEFAULT_MAX_BATCH,
) -> None:
    """Load a checkpoint and answer the protocol until interrupted."""
    from .hf import load_model

    model = load_model(model_ref, max_input_tokens=max_input_tokens)
    app = build_app(model, max_batch_size=max_batch_size)
    uvicorn.run(app, host=host, port=port, log_level="info")


def mock_serve(
    mode: str,
    port: int,
    host: str = "127.0.0.1",
    docs_path: str | Path | None = None,
    dim: int = 16,
    seed: int = 0,
    max_batch_size: int = DEFAULT_MAX_BATCH,
) -> None:
    """Serve the canned behaviors over the identical protocol."""
    app = build_mock_app(
        mode, docs_path=docs_path, dim=dim, seed=seed, max_batch_size=max_batch_size
    )
    uvicorn.run(app, host=host, port=port, log_level="info")
