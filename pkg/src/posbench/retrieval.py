"""Exact brute-force dense retrieval plus MRR@k / Recall@k and a TREC-style
run file format with lossless float round-tripping.

Search is a full cosine scan in double precision; ties are broken by ascending
doc id so ranked lists are reproducible across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_K = 100


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float


Run = dict[str, list[ScoredDoc]]


@dataclass(frozen=True)
class Metrics:
    mrr_at_k: float
    recall_at_k: float
    k: int = DEFAULT_K

    def __post_init__(self):
        if self.k <= 0:
            raise ValidationError(f"k must be positive, got {self.k}")
        if not (0.0 <= self.mrr_at_k <= 1.0 and 0.0 <= self.recall_at_k <= 1.0):
            raise ValidationError(
                f"metrics out of range: mrr={self.mrr_at_k}, recall={self.recall_at_k}"
            )


@dataclass(frozen=True)
class VectorIndex:
    """Immutable after build; concurrent searches are safe."""

    doc_ids: tuple[str, ...]
    matrix: np.ndarray  # [n_docs, dim]
    norms: np.ndarray = field(init=False, repr=False)
    _ids_arr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "norms", np.linalg.norm(self.matrix, axis=1))
        object.__setattr__(self, "_ids_arr", np.asarray(self.doc_ids))

    def __len__(self) -> int:
        return len(self.doc_ids)


def build_index(doc_ids: Sequence[str], vectors: np.ndarray) -> VectorIndex:
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim != 2:
        if len(doc_ids) == 0 and matrix.size == 0:
            matrix = matrix.reshape(0, 0)
        else:
            raise ValidationError(f"vectors must be 2-D, got shape {matrix.shape}")
    if len(doc_ids) != matrix.shape[0]:
        raise ValidationError(
            f"{len(doc_ids)} doc ids but {matrix.shape[0]} vectors"
        )
    if len(set(doc_ids)) != len(doc_ids):
        dupes = sorted({d for d in doc_ids if list(doc_ids).count(d) > 1})
        raise ValidationError(f"duplicate doc ids: {dupes[:5]}")
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        bad = doc_ids[int(np.argmax(norms == 0.0))]
        raise ValidationError(f"zero vector for document {bad!r}")
    return VectorIndex(doc_ids=tuple(doc_ids), matrix=matrix)


def score_documents(index: VectorIndex, q_vec: np.ndarray) -> np.ndarray:
    """Cosine of the query against every indexed document."""
    q = np.asarray(q_vec, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValidationError("zero query vector")
    if len(index) == 0:
        return np.zeros(0)
    return np.clip((index.matrix @ (q / qn)) / index.norms, -1.0, 1.0)


def rank_scores(index: VectorIndex, scores: np.ndarray, k: int) -> list[ScoredDoc]:
    """Top-k by descending score, ties broken by ascending doc id."""
    order = np.lexsort((index._ids_arr, -scores))[: min(k, len(scores))]
    return [ScoredDoc(str(index._ids_arr[j]), float(scores[j])) for j in order]


def search(index: VectorIndex, q_vec: np.ndarray, k: int = DEFAULT_K) -> list[ScoredDoc]:
    """Exact top-k over the whole index."""
    if k <= 0:
        raise ValidationError(f"k must be > 0, got {k}")
    if len(index) == 0:
        np.asarray(q_vec)  # still validate the query
        if np.linalg.norm(np.asarray(q_vec, dtype=np.float64)) == 0.0:
            raise ValidationError("zero query vector")
        return []
    return rank_scores(index, score_documents(index, q_vec), k)


def search_all(
    index: VectorIndex,
    query_ids: Sequence[str],
    q_vecs: np.ndarray,
    k: int = DEFAULT_K,
) -> Run:
    if len(query_ids) != len(q_vecs):
        raise ValidationError("query_ids and q_vecs disagree on length")
    return {qid: search(index, q_vecs[i], k) for i, qid in enumerate(query_ids)}


# ---------------------------------------------------------------------------
# metrics


def _reciprocal_rank(ranked: Sequence[ScoredDoc], relevant: set[str], k: int) -> float:
    for pos, sd in enumerate(ranked[:k], start=1):
        if sd.doc_id in relevant:
            return 1.0 / pos
    return 0.0


def _recall(ranked: Sequence[ScoredDoc], relevant: set[str], k: int) -> float:
    hits = sum(1 for sd in ranked[:k] if sd.doc_id in relevant)
    return hits / len(relevant)


def per_query_metrics(
    run: Run, qrels: Mapping[str, set[str]], k: int = DEFAULT_K
) -> tuple[dict[str, float], dict[str, float]]:
    """(reciprocal rank, recall) per query; every run query must be judged."""
    if not run:
        raise ValidationError("cannot evaluate an empty run")
    rr: dict[str, float] = {}
    rec: dict[str, float] = {}
    for qid, ranked in run.items():
        relevant = qrels.get(qid)
        if relevant is None:
            raise ValidationError(f"query {qid!r} missing from qrels")
        if not relevant:
            raise ValidationError(f"query {qid!r} has zero judged-relevant docs")
        rr[qid] = _reciprocal_rank(ranked, relevant, k)
        rec[qid] = _recall(ranked, relevant, k)
    return rr, rec


def mrr_at_k(run: Run, qrels: Mapping[str, set[str]], k: int = DEFAULT_K) -> float:
    rr, _ = per_query_metrics(run, qrels, k)
    return sum(rr.values()) / len(rr)


def recall_at_k(run: Run, qrels: Mapping[str, set[str]], k: int = DEFAULT_K) -> float:
    _, rec = per_query_metrics(run, qrels, k)
    return sum(rec.values()) / len(rec)


def compute_metrics(run: Run, qrels: Mapping[str, set[str]], k: int = DEFAULT_K) -> Metrics:
    rr, rec = per_query_metrics(run, qrels, k)
    return Metrics(
        mrr_at_k=sum(rr.values()) / len(rr),
        recall_at_k=sum(rec.values()) / len(rec),
        k=k,
    )


# ---------------------------------------------------------------------------
# TREC-style run files: "qid Q0 doc_id rank score tag", rank 1-based.
# Scores are serialized with repr() so float64 values survive round trips.


def write_run(run: Run, path: str | Path, tag: str = "posbench") -> None:
    if any(ch.isspace() for ch in tag):
        raise ValidationError(f"run tag {tag!r} must not contain whitespace")
    lines = []
    for qid in sorted(run):
        for rank, sd in enumerate(run[qid], start=1):
            lines.append(f"{qid} Q0 {sd.doc_id} {rank} {repr(sd.score)} {tag}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_run(path: str | Path) -> Run:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"run file not found: {path}")
    run: Run = {}
    seen: dict[str, set[str]] = {}
    last_rank: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValidationError(
                    f"{path}:{lineno}: expected 6 fields, found {len(parts)}"
                )
            qid, _q0, doc_id, rank_s, score_s, _tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            prev = last_rank.get(qid, 0)
            if rank != prev + 1:
                raise ValidationError(
                    f"{path}:{lineno}: rank {rank} for query {qid} is not {prev + 1}"
                )
            if doc_id in seen.setdefault(qid, set()):
                raise ValidationError(
                    f"{path}:{lineno}: duplicate doc {doc_id!r} for query {qid}"
                )
            seen[qid].add(doc_id)
            last_rank[qid] = rank
            run.setdefault(qid, []).append(ScoredDoc(doc_id, score))
    return run
