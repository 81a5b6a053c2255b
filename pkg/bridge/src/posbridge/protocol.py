"""Wire protocol schemas: JSON over HTTP, one POST per batch.

The shapes mirror the evaluation toolkit's remote-backend client exactly;
both sides validate, so a malformed payload fails loudly at the boundary
instead of corrupting a probe run.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, model_validator

SENTINEL_PREFIX = "<extra_id_"


def sentinel(index: int) -> str:
    return f"{SENTINEL_PREFIX}{index}>"


class ProtocolError(Exception):
    """Request is well-formed JSON but violates the protocol contract."""


class EmbedRequest(BaseModel):
    texts: list[str]
    pooling: Literal["mean", "first", "decoder"] = "mean"


class EmbedResponse(BaseModel):
    vectors: list[list[float]]
    dim: int = Field(ge=1)

    @model_validator(mode="after")
    def _rows_match_dim(self):
        for i, row in enumerate(self.vectors):
            if len(row) != self.dim:
                raise ValueError(
                    f"vector {i} has length {len(row)}, advertised dim is {self.dim}"
                )
        return self


class FillSpansRequest(BaseModel):
    inputs: list[str]
    spans_per_input: int = Field(ge=1)


class FillSpansResponse(BaseModel):
    predictions: list[list[str]]


class Capabilities(BaseModel):
    dim: int = Field(ge=1)
    poolings: list[str]
    max_input_tokens: int = Field(ge=1)


def check_embed_pair(request: EmbedRequest, response: EmbedResponse) -> None:
    if len(response.vectors) != len(request.texts):
        raise ProtocolError(
            f"{len(response.vectors)} vectors for {len(request.texts)} texts"
        )


def check_fill_pair(request: FillSpansRequest, response: FillSpansResponse) -> None:
    if len(response.predictions) != len(request.inputs):
        raise ProtocolError(
            f"{len(response.predictions)} predictions for {len(request.inputs)} inputs"
        )
    for i, spans in enumerate(response.predictions):
        if len(spans) != request.spans_per_input:
            raise ProtocolError(
                f"prediction {i} has {len(spans)} spans, "
                f"expected {request.spans_per_input}"
            )
