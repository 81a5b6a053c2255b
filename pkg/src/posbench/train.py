"""Desk-scale contrastive training for the toy encoder.

Loss: for query q_i with positive d_i, hard negatives d-_ij, temperature tau,
    L = -(1/n) sum_i log[ exp(cos(q_i,d_i)/tau) / sum_c exp(cos(q_i,c)/tau) ]
where candidate c ranges over d_i plus q_i's own hard negatives, extended by
the other queries' positives and hard negatives when in-batch negatives are
on. Gradients w.r.t. the token table are analytic. A chunked mode embeds and
scatters a few examples at a time (re-deriving per-text state on the backward
pass instead of holding it) and reproduces the full-batch gradient bitwise,
so memory, not math, is the only difference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, Query
from .embed import ToyEncoderParams, bucket_indices, pooling_weights
from .errors import ConfigError, ValidationError
from .probes import Token, tokenize
from .retrieval import VectorIndex, build_index, search

CROP_MIN_FRACTION = 0.10
CROP_MAX_FRACTION = 0.50

_SURFACE_CACHE: dict[str, tuple[str, ...]] = {}
_SURFACE_CACHE_CAP = 100_000


def _surfaces(text: str) -> tuple[str, ...]:
    cached = _SURFACE_CACHE.get(text)
    if cached is None:
        if len(_SURFACE_CACHE) >= _SURFACE_CACHE_CAP:
            _SURFACE_CACHE.clear()
        cached = tuple(t.surface for t in tokenize(text))
        _SURFACE_CACHE[text] = cached
    return cached


# ---------------------------------------------------------------------------
# batches and configuration


@dataclass(frozen=True)
class CropPair:
    doc_id: str
    query_span: tuple[int, int]  # half-open token ranges
    doc_span: tuple[int, int]


@dataclass(frozen=True)
class TrainBatch:
    queries: tuple[str, ...]
    positives: tuple[str, ...]
    hard_negatives: tuple[tuple[str, ...], ...]  # [n][k], k uniform

    def __post_init__(self):
        n = len(self.queries)
        if n == 0:
            raise ValidationError("batch is empty")
        if len(self.positives) != n or len(self.hard_negatives) != n:
            raise ValidationError("queries/positives/negatives lengths disagree")
        k = len(self.hard_negatives[0])
        if any(len(row) != k for row in self.hard_negatives):
            raise ValidationError("ragged negatives: every query needs the same k")
        for t in self._all_texts():
            if not _surfaces(t):
                raise ValidationError("batch contains a text with no tokens")

    def _all_texts(self):
        yield from self.queries
        yield from self.positives
        for row in self.hard_negatives:
            yield from row

    @property
    def n(self) -> int:
        return len(self.queries)

    @property
    def k(self) -> int:
        return len(self.hard_negatives[0])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    hard_negatives_per_query: int = 9
    epochs: int = 8
    learning_rate: float = 5e-6
    lr_schedule: str = "linear"  # decay to 0, or "constant"
    chunk_size: int = 24  # examples embedded/scattered per chunk
    refresh_every_epochs: int = 2
    in_batch_negatives: bool = True
    temperature: float = 1.0
    mining_depth: int = 50
    seed: int = 0
    max_input_tokens: int = 2048

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size and epochs must be > 0")
        if not 0 < self.chunk_size <= self.batch_size:
            raise ConfigError(
                f"need 0 < chunk_size <= batch_size, got {self.chunk_size}"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.hard_negatives_per_query < 0:
            raise ConfigError("hard_negatives_per_query must be >= 0")
        if self.refresh_every_epochs <= 0:
            raise ConfigError("refresh_every_epochs must be > 0")
        if self.mining_depth <= self.hard_negatives_per_query:
            raise ConfigError("mining_depth must exceed hard_negatives_per_query")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


def denominator_term_count(n: int, k: int, in_batch: bool) -> int:
    """Softmax denominator size per query: own positive + other positives
    (when in-batch) + hard negatives (everyone's when in-batch, else own)."""
    return 1 + (n - 1) + n * k if in_batch else 1 + k


@dataclass(frozen=True)
class LossStats:
    loss: float
    denominator_terms: tuple[int, ...]  # realized per-query term counts


# ---------------------------------------------------------------------------
# loss core


def _loss_forward_backward(
    E: np.ndarray, n: int, k: int, temperature: float, in_batch: bool
) -> tuple[LossStats, np.ndarray]:
    """Loss and dL/dE for rows laid out as [queries | positives | negatives
    row-major]; candidate columns are positives first, then negatives."""
    Eq, Ec = E[:n], E[n:]
    m = Ec.shape[0]
    qn = np.linalg.norm(Eq, axis=1)
    cn = np.linalg.norm(Ec, axis=1)
    if np.any(qn == 0.0) or np.any(cn == 0.0):
        raise ValidationError("zero-norm embedding in training batch")
    Qhat = Eq / qn[:, None]
    Chat = Ec / cn[:, None]
    logits = (Qhat @ Chat.T) / temperature  # [n, m]

    allowed = np.ones((n, m), dtype=bool)
    if not in_batch:
        allowed[:] = False
        allowed[np.arange(n), np.arange(n)] = True
        for i in range(n):
            allowed[i, n + i * k : n + (i + 1) * k] = True

    masked = np.where(allowed, logits, -np.inf)
    row_max = masked.max(axis=1)
    shifted = np.exp(masked - row_max[:, None])  # exp(-inf) -> 0 on masked cols
    lse = row_max + np.log(shifted.sum(axis=1))
    label = logits[np.arange(n), np.arange(n)]
    per_query = lse - label  # exactly 0 when the label is the only allowed term
    loss = float(per_query.sum() / n)

    probs = shifted / shifted.sum(axis=1)[:, None]
    dlogits = probs
    dlogits[np.arange(n), np.arange(n)] -= 1.0
    dS = dlogits / (n * temperature)

    dQhat = dS @ Chat
    dChat = dS.T @ Qhat
    dEq = (dQhat - (dQhat * Qhat).sum(axis=1)[:, None] * Qhat) / qn[:, None]
    dEc = (dChat - (dChat * Chat).sum(axis=1)[:, None] * Chat) / cn[:, None]

    stats = LossStats(
        loss=loss, denominator_terms=tuple(int(c) for c in allowed.sum(axis=1))
    )
    return stats, np.vstack([dEq, dEc])


def contrastive_loss(
    q_vecs: np.ndarray,
    pos_vecs: np.ndarray,
    neg_vecs_per_query: Sequence[Sequence[np.ndarray]] | np.ndarray | None = None,
    in_batch: bool = True,
    temperature: float = 1.0,
) -> float:
    """Vector-level loss over precomputed embeddings (backend-agnostic)."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    Q = np.asarray(q_vecs, dtype=np.float64)
    P = np.asarray(pos_vecs, dtype=np.float64)
    if Q.ndim != 2 or P.shape != Q.shape:
        raise ValidationError(
            f"query/positive shape mismatch: {Q.shape} vs {P.shape}"
        )
    n, d = Q.shape
    if neg_vecs_per_query is None:
        N = np.zeros((n, 0, d))
    else:
        N = np.asarray(neg_vecs_per_query, dtype=np.float64)
        if N.size == 0:
            N = N.reshape(n, 0, d)
    if N.ndim != 3 or N.shape[0] != n or N.shape[2] != d:
        raise ValidationError(
            f"negatives must be [n, k, dim] = [{n}, k, {d}], got {N.shape}"
        )
    k = N.shape[1]
    E = np.vstack([Q, P, N.reshape(n * k, d)])
    stats, _ = _loss_forward_backward(E, n, k, temperature, in_batch)
    return stats.loss


def _tape(params: ToyEncoderParams, text: str, max_tokens: int):
    surfaces = _surfaces(text)[:max_tokens]
    idx = bucket_indices(surfaces, params.vocab_hash_buckets)
    w = pooling_weights(len(idx), params.pooling, params.decay)
    return idx, w / w.sum()


def _example_layout(i: int, n: int, k: int) -> list[int]:
    # E-row indices for example i's texts [query, positive, negatives...]
    return [i, n + i] + [2 * n + i * k + j for j in range(k)]


def loss_gradient(
    batch: TrainBatch,
    params: ToyEncoderParams,
    temperature: float = 1.0,
    in_batch: bool = True,
    chunk_size: int | None = None,
    max_input_tokens: int = 2048,
) -> tuple[LossStats, np.ndarray]:
    """Analytic (loss stats, dL/dtoken_table) for one batch.

    chunk_size limits how many examples are embedded (and scattered) at a
    time; the scatter sequence is example-major either way, so chunked and
    full-batch results are bitwise identical.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    if chunk_size is not None and chunk_size <= 0:
        raise ValidationError(f"chunk_size must be > 0, got {chunk_size}")
    n, k = batch.n, batch.k
    step = chunk_size or n

    def texts_of(i: int):
        return (batch.queries[i], batch.positives[i], *batch.hard_negatives[i])

    E = np.empty((2 * n + n * k, params.dim))
    for lo in range(0, n, step):
        for i in range(lo, min(lo + step, n)):
            for row, text in zip(_example_layout(i, n, k), texts_of(i)):
                idx, w_hat = _tape(params, text, max_input_tokens)
                E[row] = w_hat @ params.token_table[idx]

    stats, dE = _loss_forward_backward(E, n, k, temperature, in_batch)

    grad = np.zeros_like(params.token_table)
    for lo in range(0, n, step):
        for i in range(lo, min(lo + step, n)):
            for row, text in zip(_example_layout(i, n, k), texts_of(i)):
                idx, w_hat = _tape(params, text, max_input_tokens)
                np.add.at(grad, idx, w_hat[:, None] * dE[row])
    return stats, grad


# ---------------------------------------------------------------------------
# crop sampling


def sample_crop_pair(
    tokens: Sequence[Token], rng: np.random.Generator, doc_id: str = ""
) -> CropPair:
    """Two spans sampled from independent child streams; each length is
    uniform over the integers [ceil(0.10 n), floor(0.50 n)], each start
    uniform over the legal offsets."""
    n = len(tokens)
    if n < 10:
        raise ValidationError(
            f"document {doc_id!r} has {n} tokens; cropping needs at least 10"
        )
    lo = math.ceil(CROP_MIN_FRACTION * n)
    hi = math.floor(CROP_MAX_FRACTION * n)
    spans = []
    for stream in rng.spawn(2):
        span_len = int(stream.integers(lo, hi + 1))
        start = int(stream.integers(0, n - span_len + 1))
        spans.append((start, start + span_len))
    return CropPair(doc_id=doc_id, query_span=spans[0], doc_span=spans[1])


def crop_text(text: str, tokens: Sequence[Token], span: tuple[int, int]) -> str:
    start, end = span
    return text[tokens[start].char_start : tokens[end - 1].char_end]


# ---------------------------------------------------------------------------
# negative mining


def mine_negatives(
    params: ToyEncoderParams,
    corpus_index: VectorIndex,
    queries: Sequence[Query],
    qrels: Mapping[str, set[str]],
    depth: int,
    k: int,
    rng: np.random.Generator,
    max_input_tokens: int = 2048,
) -> dict[str, list[str]]:
    """k docs sampled uniformly without replacement from each query's
    top-depth retrieved docs, judged-relevant ones excluded."""
    negatives: dict[str, list[str]] = {}
    for q in queries:
        relevant = qrels.get(q.id, set())
        idx, w_hat = _tape(params, q.text, max_input_tokens)
        q_vec = w_hat @ params.token_table[idx]
        ranked = search(corpus_index, q_vec, k=min(depth, len(corpus_index)))
        eligible = [sd.doc_id for sd in ranked if sd.doc_id not in relevant]
        if len(eligible) < k:
            raise ValidationError(
                f"query {q.id!r}: only {len(eligible)} eligible negatives in "
                f"top {depth}; raise depth or lower k"
            )
        picked = rng.choice(np.asarray(eligible), size=k, replace=False)
        negatives[q.id] = [str(d) for d in picked]
    return negatives


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: ToyEncoderParams
    loss_log: list[tuple[int, int, float]] = field(default_factory=list)  # epoch, step, loss
    epoch_losses: list[float] = field(default_factory=list)
    negative_pools: list[tuple[int, dict[str, list[str]]]] = field(default_factory=list)
    checkpoints: list[tuple[int, ToyEncoderParams]] = field(default_factory=list)
    n_docs_skipped_short: int = 0


def _snapshot(result: TrainResult, config: TrainConfig, epoch: int) -> None:
    # one checkpoint per refresh window, plus the final state
    if (epoch + 1) % config.refresh_every_epochs == 0 or epoch == config.epochs - 1:
        result.checkpoints.append((epoch, result.params.copy()))


def _lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "constant":
        return config.learning_rate
    return config.learning_rate * (1.0 - step / total_steps)


def _index_from_params(params: ToyEncoderParams, corpus: Corpus, max_tokens: int) -> VectorIndex:
    vecs = np.empty((len(corpus.documents), params.dim))
    for i, doc in enumerate(corpus.documents):
        idx, w_hat = _tape(params, doc.text, max_tokens)
        vecs[i] = w_hat @ params.token_table[idx]
    return build_index([d.id for d in corpus.documents], vecs)


def crop_pretrain(
    params: ToyEncoderParams, corpus: Corpus, config: TrainConfig
) -> TrainResult:
    """Unsupervised stage: per epoch each document contributes one fresh
    (crop, crop) positive pair, trained with in-batch negatives only.
    Documents under 10 tokens cannot be cropped and are set aside (counted)."""
    docs = []
    skipped = 0
    for d in corpus.documents:
        if len(_surfaces(d.text)) >= 10:
            docs.append(d)
        else:
            skipped += 1
    if not docs:
        raise ValidationError("no document has the >= 10 tokens cropping needs")

    rng = np.random.default_rng(config.seed)
    result = TrainResult(params=params.copy(), n_docs_skipped_short=skipped)
    steps_per_epoch = math.ceil(len(docs) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        crop_rng = rng.spawn(1)[0]
        pairs = []
        for d in docs:
            tokens = tokenize(d.text)
            cp = sample_crop_pair(tokens, crop_rng, doc_id=d.id)
            pairs.append(
                (crop_text(d.text, tokens, cp.query_span),
                 crop_text(d.text, tokens, cp.doc_span))
            )
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo : lo + config.batch_size]
            batch = TrainBatch(
                queries=tuple(pairs[i][0] for i in sel),
                positives=tuple(pairs[i][1] for i in sel),
                hard_negatives=tuple(() for _ in sel),
            )
            stats, grad = loss_gradient(
                batch,
                result.params,
                temperature=config.temperature,
                in_batch=True,
                chunk_size=min(config.chunk_size, batch.n),
                max_input_tokens=config.max_input_tokens,
            )
            result.params.token_table -= _lr_at(config, step, total_steps) * grad
            result.loss_log.append((epoch, step, stats.loss))
            epoch_loss += stats.loss
            step += 1
        result.epoch_losses.append(epoch_loss / steps_per_epoch)
        _snapshot(result, config, epoch)
    return result


def supervised_finetune(
    params: ToyEncoderParams,
    corpus: Corpus,
    qrels: Mapping[str, set[str]],
    config: TrainConfig,
) -> TrainResult:
    """Supervised stage: contrastive training on (query, judged doc) pairs
    with mined hard negatives, re-mined every refresh_every_epochs epochs
    (epoch 0 included) with the model under training."""
    qids = sorted(q.id for q in corpus.queries if q.id in qrels)
    if not qids:
        raise ValidationError("no queries with relevance judgments")
    for qid in qids:
        if not qrels[qid]:
            raise ValidationError(f"query {qid!r} has an empty relevant set")
    queries = [corpus.query(qid) for qid in qids]
    positives = {qid: sorted(qrels[qid])[0] for qid in qids}

    rng = np.random.default_rng(config.seed)
    result = TrainResult(params=params.copy())
    steps_per_epoch = math.ceil(len(qids) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    negatives: dict[str, list[str]] = {qid: [] for qid in qids}
    k = config.hard_negatives_per_query
    for epoch in range(config.epochs):
        if k > 0 and epoch % config.refresh_every_epochs == 0:
            index = _index_from_params(result.params, corpus, config.max_input_tokens)
            negatives = mine_negatives(
                result.params,
                index,
                queries,
                qrels,
                depth=config.mining_depth,
                k=k,
                rng=rng.spawn(1)[0],
                max_input_tokens=config.max_input_tokens,
            )
            result.negative_pools.append((epoch, negatives))
        order = rng.permutation(len(qids))
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            sel = [qids[i] for i in order[lo : lo + config.batch_size]]
            batch = TrainBatch(
                queries=tuple(corpus.query(qid).text for qid in sel),
                positives=tuple(corpus.doc(positives[qid]).text for qid in sel),
                hard_negatives=tuple(
                    tuple(corpus.doc(nid).text for nid in negatives[qid])
                    for qid in sel
                ),
            )
            stats, grad = loss_gradient(
                batch,
                result.params,
                temperature=config.temperature,
                in_batch=config.in_batch_negatives,
                chunk_size=min(config.chunk_size, batch.n),
                max_input_tokens=config.max_input_tokens,
            )
            result.params.token_table -= _lr_at(config, step, total_steps) * grad
            result.loss_log.append((epoch, step, stats.loss))
            epoch_loss += stats.loss
            step += 1
        result.epoch_losses.append(epoch_loss / steps_per_epoch)
        _snapshot(result, config, epoch)
    return result


MODE_CROP_PRETRAIN = "crop_pretrain"
MODE_SUPERVISED_FINETUNE = "supervised_finetune"


def train_contrastive(
    params: ToyEncoderParams,
    corpus: Corpus,
    config: TrainConfig,
    mode: str,
    qrels: Mapping[str, set[str]] | None = None,
) -> TrainResult:
    if mode == MODE_CROP_PRETRAIN:
        return crop_pretrain(params, corpus, config)
    if mode == MODE_SUPERVISED_FINETUNE:
        if qrels is None:
            raise ValidationError("supervised_finetune requires qrels")
        return supervised_finetune(params, corpus, qrels, config)
    raise ValidationError(f"unknown training mode {mode!r}")


# ---------------------------------------------------------------------------
# artifact formats


def write_loss_log(result: TrainResult, path: str | Path) -> None:
    lines = ["epoch,step,loss\n"]
    for epoch, step, loss in result.loss_log:
        lines.append(f"{epoch},{step},{repr(loss)}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def write_negative_pool(pool: Mapping[str, list[str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(pool):
            fh.write(json.dumps({"query_id": qid, "negatives": pool[qid]}) + "\n")


def read_negative_pool(path: str | Path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"negative pool not found: {path}")
    pool: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "query_id" not in rec or "negatives" not in rec:
                raise ValidationError(
                    f"{path}:{lineno}: need 'query_id' and 'negatives'"
                )
            pool[str(rec["query_id"])] = [str(d) for d in rec["negatives"]]
    return pool
