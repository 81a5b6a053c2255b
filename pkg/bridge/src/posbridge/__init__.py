"""posbridge: serve embedding and span-filling checkpoints behind the
posbench wire protocol (POST /embed, POST /fill_spans, GET /capabilities)."""

from .models import HashModel, parse_sentinel_spans
from .protocol import (
    Capabilities,
    EmbedRequest,
    EmbedResponse,
    FillSpansRequest,
    FillSpansResponse,
    ProtocolError,
    check_embed_pair,
    check_fill_pair,
    sentinel,
)
from .service import build_app, build_mock_app, mock_serve, serve

__all__ = [
    "Capabilities",
    "EmbedRequest",
    "EmbedResponse",
    "FillSpansRequest",
    "FillSpansResponse",
    "HashModel",
    "ProtocolError",
    "build_app",
    "build_mock_app",
    "check_embed_pair",
    "check_fill_pair",
    "load_model",
    "mock_serve",
    "parse_sentinel_spans",
    "sentinel",
    "serve",
]


def load_model(model_ref, max_input_tokens: int = 512):
    """Lazy re-export: importing torch/transformers only when needed."""
    from .hf import load_model as _load

    return _load(model_ref, max_input_tokens=max_input_tokens)
