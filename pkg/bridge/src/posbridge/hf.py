"""Transformer-checkpoint adapters (torch + transformers, the `models` extra).

Pooling conventions:
- mean: attention-mask-weighted mean of the final hidden states.
- first: the first token's final hidden state (CLS for BERT-style models).
- decoder: encoder-decoder checkpoints only. The decoder runs one step from
  its start token over the encoded input and its output vector is the pooled
  representation (the T5-family convention); encoder-only models reject it
  rather than silently substituting.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .models import check_pooling, parse_sentinel_spans
from .protocol import ProtocolError


class ModelLoadError(Exception):
    """The checkpoint could not be loaded at startup."""


def _require_hf():
    try:
        import torch  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:  # pragma: no cover - depends on install
        raise ModelLoadError(
            "transformer checkpoints need the `models` extra "
            "(pip install posbridge[models])"
        ) from exc


def _hidden_size(config) -> int:
    for name in ("hidden_size", "d_model"):
        value = getattr(config, name, None)
        if value:
            return int(value)
    raise ModelLoadError(f"cannot determine hidden size for {config.model_type}")


class HFEncoderModel:
    """Encoder-only checkpoint (BERT-style): mean and first pooling."""

    def __init__(self, model, tokenizer, max_input_tokens: int = 512):
        import torch

        self._torch = torch
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.dim = _hidden_size(model.config)
        self.poolings = ("mean", "first")
        self.max_input_tokens = max_input_tokens

    def _encode(self, texts: Sequence[str]):
        return self.tokenizer(
            list(texts),
            padding=True,
            truncation=True,
            max_length=self.max_input_tokens,
            return_tensors="pt",
        )

    def _pool(self, hidden, mask, pooling: str) -> np.ndarray:
        if pooling == "first":
            pooled = hidden[:, 0]
        else:
            weights = mask.unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * weights).sum(dim=1) / weights.sum(dim=1)
        return pooled.double().cpu().numpy()

    def embed(self, texts: Sequence[str], pooling: str = "mean") -> np.ndarray:
        check_pooling(pooling, self.poolings)
        if not texts:
            return np.zeros((0, self.dim))
        enc = self._encode(texts)
        with self._torch.no_grad():
            hidden = self.model(**enc).last_hidden_state
        return self._pool(hidden, enc["attention_mask"], pooling)

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        raise ProtocolError("span filling needs an encoder-decoder checkpoint")


class HFSeq2SeqModel:
    """Encoder-decoder checkpoint (T5-style): adds decoder pooling and
    sentinel span filling via greedy generation."""

    def __init__(self, model, tokenizer, max_input_tokens: int = 512):
        import torch

        self._torch = torch
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.dim = _hidden_size(model.config)
        self.poolings = ("mean", "first", "decoder")
        self.max_input_tokens = max_input_tokens

    def _encode(self, texts: Sequence[str]):
        return self.tokenizer(
            list(texts),
            padding=True,
            truncation=True,
            max_length=self.max_input_tokens,
            return_tensors="pt",
        )

    def embed(self, texts: Sequence[str], pooling: str = "mean") -> np.ndarray:
        check_pooling(pooling, self.poolings)
        if not texts:
            return np.zeros((0, self.dim))
        enc = self._encode(texts)
        torch = self._torch
        with torch.no_grad():
            if pooling == "decoder":
                config = self.model.config
                start = getattr(config, "decoder_start_token_id", None)
                if start is None:
                    start = getattr(config, "pad_token_id", None)
                if start is None:
                    raise ProtocolError(
                        "checkpoint advertises no decoder start token; "
                        "decoder pooling is unavailable"
                    )
                decoder_input_ids = torch.full(
                    (enc["input_ids"].shape[0], 1), start, dtype=torch.long
                )
                out = self.model(
                    input_ids=enc["input_ids"],
                    attention_mask=enc["attention_mask"],
                    decoder_input_ids=decoder_input_ids,
                    output_hidden_states=True,
                )
                pooled = out.decoder_hidden_states[-1][:, 0]
                return pooled.double().cpu().numpy()
            hidden = self.model.get_encoder()(
                input_ids=enc["input_ids"], attention_mask=enc["attention_mask"]
            ).last_hidden_state
        if pooling == "first":
            pooled = hidden[:, 0]
        else:
            weights = enc["attention_mask"].unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * weights).sum(dim=1) / weights.sum(dim=1)
        return pooled.double().cpu().numpy()

    def fill_spans(self, inputs: Sequence[str], spans_per_input: int) -> list[list[str]]:
        if not inputs:
            return []
        enc = self._encode(inputs)
        with self._torch.no_grad():
            generated = self.model.generate(
                input_ids=enc["input_ids"],
                attention_mask=enc["attention_mask"],
                do_sample=False,
                num_beams=1,
                max_new_tokens=8 * spans_per_input,
            )
        decoded = self.tokenizer.batch_decode(generated, skip_special_tokens=False)
        return [parse_sentinel_spans(text, spans_per_input) for text in decoded]


def load_model(model_ref: str | Path, max_input_tokens: int = 512):
    """Load a checkpoint (local path or hub name) behind the right adapter,
    picked by whether its config declares an encoder-decoder architecture."""
    _require_hf()
    from transformers import (
        AutoConfig,
        AutoModel,
        AutoModelForSeq2SeqLM,
        AutoTokenizer,
    )

    ref = str(model_ref)
    try:
        config = AutoConfig.from_pretrained(ref)
        tokenizer = AutoTokenizer.from_pretrained(ref)
        if getattr(config, "is_encoder_decoder", False):
            model = AutoModelForSeq2SeqLM.from_pretrained(ref)
            return HFSeq2SeqModel(model, tokenizer, max_input_tokens=max_input_tokens)
        model = AutoModel.from_pretrained(ref)
        return HFEncoderModel(model, tokenizer, max_input_tokens=max_input_tokens)
    except ModelLoadError:
        raise
    except Exception as exc:
        raise ModelLoadError(f"cannot load checkpoint {ref!r}: {exc}") from exc
