"""Position-sensitivity experiments: run the insertion, segment, and span
probes end-to-end against an embedding backend and aggregate position-indexed
results. This module produces tables and statistics only; rendering lives in
the figures module.

Every runner is a deterministic function of (backend params, corpus, seed).
Report files serialize floats with repr() so values survive round trips
exactly, and JSON emission is canonical: emit -> parse -> re-emit is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, Document, PassageAlignment, lower_quantile
from .embed import embed_batch
from .errors import ProbeError, TransportError, ValidationError
from .probes import (
    corrupt_spans,
    insertion_points,
    relocate_passage,
    segment_uniform,
    token_windows,
    tokenize,
)
from .retrieval import DEFAULT_K, Metrics

NUM_POSITIONS = 10


# ---------------------------------------------------------------------------
# report types


@dataclass(frozen=True)
class DeltaMetrics:
    mrr: float
    recall: float


@dataclass
class PositionReport:
    probe_kind: str
    k: int
    n_queries: int
    baseline: Metrics
    per_position: dict[int, Metrics]  # keys exactly 1..10
    deltas: dict[int, DeltaMetrics]
    # per-query reciprocal ranks [n_queries, NUM_POSITIONS], rows matching
    # query_ids; carried for the permutation test, not serialized
    per_query_rr: np.ndarray | None = field(default=None, repr=False)
    query_ids: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        positions = sorted(self.per_position)
        if positions != list(range(1, NUM_POSITIONS + 1)):
            raise ValidationError(f"positions must be 1..{NUM_POSITIONS}, got {positions}")
        if sorted(self.deltas) != positions:
            raise ValidationError("deltas and per_position disagree on positions")

    def delta_mrr_by_position(self) -> list[float]:
        return [self.deltas[p].mrr for p in range(1, NUM_POSITIONS + 1)]


@dataclass(frozen=True)
class SegmentStats:
    segment: int
    mean: float
    std: float
    p5: float
    p25: float
    p50: float
    p75: float
    p95: float


@dataclass
class SegmentSimilarityReport:
    pooling: str
    n_docs: int
    n_skipped: int  # documents with fewer tokens than segments
    segments: list[SegmentStats]


@dataclass(frozen=True)
class WindowAccuracy:
    window_start: int  # token offsets of the window bucket
    window_end: int
    mean_acc: float
    std: float
    n: int


@dataclass
class SpanAccuracyReport:
    window_len: int
    span_len: int
    instances_per_window: int
    n_docs: int
    windows: list[WindowAccuracy]


# ---------------------------------------------------------------------------
# insertion probe


def _rank_row(
    scores: np.ndarray, ids_arr: np.ndarray, relevant: set[str], k: int
) -> tuple[float, float]:
    """(reciprocal rank, recall) for one score row; same descending-score,
    ascending-doc-id order as retrieval.search."""
    order = np.lexsort((ids_arr, -scores))[:k]
    rr = 0.0
    hits = 0
    for pos, j in enumerate(order, start=1):
        if ids_arr[j] in relevant:
            hits += 1
            if rr == 0.0:
                rr = 1.0 / pos
    return rr, hits / len(relevant)


def run_insertion_probe(
    backend,
    corpus: Corpus,
    alignments: Sequence[PassageAlignment],
    qrels: Mapping[str, set[str]] | None = None,
    k: int = DEFAULT_K,
) -> PositionReport:
    """One default run plus ten runs with every aligned document's passage
    relocated to that run's insertion point; distractor documents stay fixed
    so the deltas isolate position."""
    if not alignments:
        raise ValidationError("insertion probe needs at least one alignment")
    seen_q: set[str] = set()
    seen_d: set[str] = set()
    for a in alignments:
        if a.query_id in seen_q:
            raise ValidationError(f"query {a.query_id!r} has multiple alignments")
        if a.doc_id in seen_d:
            raise ValidationError(
                f"document {a.doc_id!r} is aligned to more than one query; "
                f"each run can relocate a document only once"
            )
        seen_q.add(a.query_id)
        seen_d.add(a.doc_id)
    if qrels is None:
        qrels = {a.query_id: {a.doc_id} for a in alignments}
    relevant_sets = []
    for a in alignments:
        relevant = qrels.get(a.query_id)
        if not relevant:
            raise ValidationError(f"query {a.query_id!r} missing from qrels")
        relevant_sets.append(relevant)

    doc_ids = [d.id for d in corpus.documents]
    col = {doc_id: j for j, doc_id in enumerate(doc_ids)}
    ids_arr = np.asarray(doc_ids)
    doc_vecs = embed_batch(backend, [d.text for d in corpus.documents])
    q_vecs = embed_batch(backend, [corpus.query(a.query_id).text for a in alignments])
    dn = np.linalg.norm(doc_vecs, axis=1)
    qn = np.linalg.norm(q_vecs, axis=1)
    if np.any(dn == 0.0) or np.any(qn == 0.0):
        raise ValidationError("zero-norm embedding in insertion probe")
    d_hat = doc_vecs / dn[:, None]
    q_hat = q_vecs / qn[:, None]
    base_scores = q_hat @ d_hat.T  # [n_q, n_docs]
    cols = np.asarray([col[a.doc_id] for a in alignments])

    n_q = len(alignments)

    def run_metrics(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rr = np.empty(n_q)
        rec = np.empty(n_q)
        for qi in range(n_q):
            rr[qi], rec[qi] = _rank_row(scores[qi], ids_arr, relevant_sets[qi], k)
        return rr, rec

    base_rr, base_rec = run_metrics(base_scores)
    baseline = Metrics(
        mrr_at_k=float(base_rr.mean()), recall_at_k=float(base_rec.mean()), k=k
    )

    per_position: dict[int, Metrics] = {}
    deltas: dict[int, DeltaMetrics] = {}
    rr_matrix = np.empty((n_q, NUM_POSITIONS))
    for pos in range(1, NUM_POSITIONS + 1):
        variant_texts = []
        for a in alignments:
            doc = corpus.doc(a.doc_id)
            plan = insertion_points(doc.char_len, a.passage_len, doc_id=a.doc_id)
            variant = relocate_passage(doc, a, plan.points[pos - 1], position_index=pos)
            variant_texts.append(variant.text)
        v_vecs = embed_batch(backend, variant_texts)
        vn = np.linalg.norm(v_vecs, axis=1)
        if np.any(vn == 0.0):
            raise ValidationError("zero-norm embedding for a relocated document")
        scores = base_scores.copy()
        scores[:, cols] = q_hat @ (v_vecs / vn[:, None]).T  # relocated columns
        rr, rec = run_metrics(scores)
        rr_matrix[:, pos - 1] = rr
        m = Metrics(mrr_at_k=float(rr.mean()), recall_at_k=float(rec.mean()), k=k)
        per_position[pos] = m
        deltas[pos] = DeltaMetrics(
            mrr=m.mrr_at_k - baseline.mrr_at_k,
            recall=m.recall_at_k - baseline.recall_at_k,
        )

    return PositionReport(
        probe_kind="insertion",
        k=k,
        n_queries=n_q,
        baseline=baseline,
        per_position=per_position,
        deltas=deltas,
        per_query_rr=rr_matrix,
        query_ids=[a.query_id for a in alignments],
    )


# ---------------------------------------------------------------------------
# segment probe


def run_segment_probe(
    backend,
    docs: Sequence[Document],
    k_segments: int = 10,
    sample_size: int = 24000,
) -> SegmentSimilarityReport:
    """Split each document into uniform token segments, embed the whole
    document and every segment, and aggregate cosine(doc, segment) per
    segment index. Documents shorter than k_segments tokens are set aside."""
    if k_segments < 2:
        raise ValidationError("k_segments must be >= 2")
    if sample_size <= 0:
        raise ValidationError("sample_size must be > 0")
    usable: list[str] = []
    seg_texts: list[str] = []
    skipped = 0
    for doc in docs[:sample_size]:
        tokens = tokenize(doc.text)
        if len(tokens) < k_segments:
            skipped += 1
            continue
        usable.append(doc.text)
        seg_texts.extend(
            v.text for v in segment_uniform(doc, k=k_segments, tokens=tokens)
        )
    if not usable:
        raise ValidationError(
            f"no document has at least {k_segments} tokens; cannot run segment probe"
        )
    d_vecs = embed_batch(backend, usable)
    s_vecs = embed_batch(backend, seg_texts).reshape(len(usable), k_segments, -1)
    dn = np.linalg.norm(d_vecs, axis=1)
    sn = np.linalg.norm(s_vecs, axis=2)
    if np.any(dn == 0.0) or np.any(sn == 0.0):
        raise ValidationError("zero-norm embedding in segment probe")
    cos = np.einsum("qd,qkd->qk", d_vecs / dn[:, None], s_vecs / sn[:, :, None])

    segments = []
    for i in range(k_segments):
        values = cos[:, i]
        segments.append(
            SegmentStats(
                segment=i + 1,
                mean=float(values.mean()),
                std=float(values.std()),
                p5=lower_quantile(values, 0.05),
                p25=lower_quantile(values, 0.25),
                p50=lower_quantile(values, 0.50),
                p75=lower_quantile(values, 0.75),
                p95=lower_quantile(values, 0.95),
            )
        )
    return SegmentSimilarityReport(
        pooling=getattr(backend, "pooling_label", "unknown"),
        n_docs=len(usable),
        n_skipped=skipped,
        segments=segments,
    )


# ---------------------------------------------------------------------------
# span-corruption probe


def _normalize_ws(s: str) -> str:
    return " ".join(s.split())


def run_span_probe(
    span_backend,
    docs: Sequence[Document],
    window_len: int = 256,
    instances_per_window: int = 16,
    span_len: int = 3,
    seed: int = 0,
    max_len: int = 2048,
) -> SpanAccuracyReport:
    """Corrupt random token spans inside consecutive windows, ask the backend
    to reconstruct them, and score whitespace-normalized exact matches per
    window offset.

    `span_backend` needs fill_spans(inputs, spans_per_input) returning one
    prediction list per input. Backend failures abort only the affected
    window; the probe then raises a partial-report error naming the failed
    windows and carrying the report built from the rest.
    """
    if not docs:
        raise ValidationError("span probe needs at least one document")
    if instances_per_window <= 0:
        raise ValidationError("instances_per_window must be > 0")
    root = np.random.SeedSequence(seed)
    doc_seeds = root.spawn(len(docs))

    # bucket index -> parallel lists of inputs and targets
    inputs: dict[int, list[str]] = {}
    targets: dict[int, list[str]] = {}
    for doc, doc_seed in zip(docs, doc_seeds):
        tokens = tokenize(doc.text)
        if not tokens:
            raise ValidationError(f"document {doc.id!r} has no tokens")
        windows = token_windows(tokens, window_len=window_len, max_len=max_len)
        win_seeds = doc_seed.spawn(len(windows))
        for (w_start, w_end), win_seed in zip(windows, win_seeds):
            if w_end - w_start < span_len:
                continue
            bucket = w_start // window_len
            for inst in corrupt_spans(
                doc,
                (w_start, w_end),
                num_spans=instances_per_window,
                span_len=span_len,
                seed=int(win_seed.generate_state(1)[0]),
                tokens=tokens,
            ):
                inputs.setdefault(bucket, []).append(inst.input_with_sentinels)
                targets.setdefault(bucket, []).append(inst.target_spans[0])
    if not inputs:
        raise ValidationError(
            f"no window of width {window_len} can hold a {span_len}-token span"
        )

    windows_out: list[WindowAccuracy] = []
    failed: list[tuple[int, int]] = []
    for bucket in sorted(inputs):
        bounds = (bucket * window_len, (bucket + 1) * window_len)
        try:
            predictions = span_backend.fill_spans(inputs[bucket], spans_per_input=1)
        except TransportError:
            failed.append(bounds)
            continue
        if len(predictions) != len(inputs[bucket]):
            raise ValidationError(
                f"backend returned {len(predictions)} predictions for "
                f"{len(inputs[bucket])} inputs in window {bounds}"
            )
        scores = np.array(
            [
                1.0
                if preds and _normalize_ws(preds[0]) == _normalize_ws(target)
                else 0.0
                for preds, target in zip(predictions, targets[bucket])
            ]
        )
        windows_out.append(
            WindowAccuracy(
                window_start=bounds[0],
                window_end=bounds[1],
                mean_acc=float(scores.mean()),
                std=float(scores.std()),
                n=len(scores),
            )
        )
    report = SpanAccuracyReport(
        window_len=window_len,
        span_len=span_len,
        instances_per_window=instances_per_window,
        n_docs=len(docs),
        windows=windows_out,
    )
    if failed:
        raise ProbeError(
            f"span backend failed on {len(failed)} window(s): {failed}",
            failed_windows=failed,
            partial_report=report,
        )
    return report


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class PermutationTestResult:
    statistic: float
    p_value: float
    n_permutations: int

    def rejects_null(self, alpha: float) -> bool:
        return self.p_value <= alpha


def position_effect_test(
    per_query_rr: np.ndarray, n_permutations: int = 1000, seed: int = 0
) -> PermutationTestResult:
    """Permutation test for a position effect in per-query reciprocal ranks.

    Statistic: max over positions of |column mean - grand mean|. The null
    shuffles position labels independently within each query row, preserving
    every per-query value multiset. p uses the add-one estimator
    (1 + #{perm >= observed}) / (1 + n_permutations).
    """
    R = np.asarray(per_query_rr, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 1 or R.shape[1] < 2:
        raise ValidationError(f"need a 2-D matrix with >= 2 positions, got {R.shape}")
    if n_permutations < 1:
        raise ValidationError("n_permutations must be >= 1")

    def stat(m: np.ndarray) -> float:
        return float(np.abs(m.mean(axis=0) - m.mean()).max())

    observed = stat(R)
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(n_permutations):
        if stat(rng.permuted(R, axis=1)) >= observed:
            exceed += 1
    return PermutationTestResult(
        statistic=observed,
        p_value=(1 + exceed) / (1 + n_permutations),
        n_permutations=n_permutations,
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties; nan when either side has
    zero rank variance."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1 or len(xa) < 2:
        raise ValidationError("spearman_rho needs two equal-length 1-D sequences")
    rx = _average_ranks(xa)
    ry = _average_ranks(ya)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return float("nan")
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# report emission: JSON (lossless, canonical) and CSV (plot-ready columns)


def _position_json(report: PositionReport) -> dict:
    return {
        "report": "position",
        "probe_kind": report.probe_kind,
        "k": report.k,
        "n_queries": report.n_queries,
        "baseline": {
            "mrr_at_k": report.baseline.mrr_at_k,
            "recall_at_k": report.baseline.recall_at_k,
            "k": report.baseline.k,
        },
        "per_position": [
            {
                "position": p,
                "mrr_at_k": report.per_position[p].mrr_at_k,
                "recall_at_k": report.per_position[p].recall_at_k,
                "k": report.per_position[p].k,
            }
            for p in range(1, NUM_POSITIONS + 1)
        ],
        "deltas": [
            {
                "position": p,
                "mrr": report.deltas[p].mrr,
                "recall": report.deltas[p].recall,
            }
            for p in range(1, NUM_POSITIONS + 1)
        ],
    }


def _segment_json(report: SegmentSimilarityReport) -> dict:
    return {
        "report": "segment",
        "pooling": report.pooling,
        "n_docs": report.n_docs,
        "n_skipped": report.n_skipped,
        "segments": [
            {
                "segment": s.segment,
                "mean": s.mean,
                "std": s.std,
                "p5": s.p5,
                "p25": s.p25,
                "p50": s.p50,
                "p75": s.p75,
                "p95": s.p95,
            }
            for s in report.segments
        ],
    }


def _span_json(report: SpanAccuracyReport) -> dict:
    return {
        "report": "span",
        "window_len": report.window_len,
        "span_len": report.span_len,
        "instances_per_window": report.instances_per_window,
        "n_docs": report.n_docs,
        "windows": [
            {
                "window_start": w.window_start,
                "window_end": w.window_end,
                "mean_acc": w.mean_acc,
                "std": w.std,
                "n": w.n,
            }
            for w in report.windows
        ],
    }


def _position_csv(report: PositionReport) -> str:
    rows = ["kind,position,mrr,recall,delta_mrr,delta_recall\n"]
    rows.append(
        f"{report.probe_kind},0,{repr(report.baseline.mrr_at_k)},"
        f"{repr(report.baseline.recall_at_k)},{repr(0.0)},{repr(0.0)}\n"
    )
    for p in range(1, NUM_POSITIONS + 1):
        m = report.per_position[p]
        d = report.deltas[p]
        rows.append(
            f"{report.probe_kind},{p},{repr(m.mrr_at_k)},{repr(m.recall_at_k)},"
            f"{repr(d.mrr)},{repr(d.recall)}\n"
        )
    return "".join(rows)


def _segment_csv(report: SegmentSimilarityReport) -> str:
    rows = ["segment,mean,std,p5,p25,p50,p75,p95,pooling\n"]
    for s in report.segments:
        rows.append(
            f"{s.segment},{repr(s.mean)},{repr(s.std)},{repr(s.p5)},{repr(s.p25)},"
            f"{repr(s.p50)},{repr(s.p75)},{repr(s.p95)},{report.pooling}\n"
        )
    return "".join(rows)


def _span_csv(report: SpanAccuracyReport) -> str:
    rows = ["window_start,window_end,mean_acc,std,n\n"]
    for w in report.windows:
        rows.append(
            f"{w.window_start},{w.window_end},{repr(w.mean_acc)},{repr(w.std)},{w.n}\n"
        )
    return "".join(rows)


def emit_report(
    report: PositionReport | SegmentSimilarityReport | SpanAccuracyReport,
    path: str | Path,
    format: str = "json",
) -> None:
    """Stable field ordering in both formats; JSON re-emits byte-identically
    after a read; CSV columns are the documented plot-ready sets."""
    if isinstance(report, PositionReport):
        if not report.per_position:
            raise ValidationError("position report is empty")
        payload = _position_json(report) if format == "json" else _position_csv(report)
    elif isinstance(report, SegmentSimilarityReport):
        if not report.segments:
            raise ValidationError("segment report is empty")
        payload = _segment_json(report) if format == "json" else _segment_csv(report)
    elif isinstance(report, SpanAccuracyReport):
        if not report.windows:
            raise ValidationError("span report is empty")
        payload = _span_json(report) if format == "json" else _span_csv(report)
    else:
        raise ValidationError(f"unknown report type {type(report).__name__}")
    if format == "json":
        text = json.dumps(payload, ensure_ascii=False, indent=2) + "\n"
    elif format == "csv":
        text = payload
    else:
        raise ValidationError(f"unknown report format {format!r}")
    Path(path).write_text(text, encoding="utf-8")


def _load_json(path: Path, expected: str) -> dict:
    if not path.exists():
        raise ValidationError(f"report file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict) or obj.get("report") != expected:
        raise ValidationError(f"{path}: not a {expected} report")
    return obj


def read_position_report(path: str | Path) -> PositionReport:
    obj = _load_json(Path(path), "position")
    try:
        baseline = Metrics(
            mrr_at_k=obj["baseline"]["mrr_at_k"],
            recall_at_k=obj["baseline"]["recall_at_k"],
            k=obj["baseline"]["k"],
        )
        per_position = {
            rec["position"]: Metrics(
                mrr_at_k=rec["mrr_at_k"], recall_at_k=rec["recall_at_k"], k=rec["k"]
            )
            for rec in obj["per_position"]
        }
        deltas = {
            rec["position"]: DeltaMetrics(mrr=rec["mrr"], recall=rec["recall"])
            for rec in obj["deltas"]
        }
        return PositionReport(
            probe_kind=obj["probe_kind"],
            k=obj["k"],
            n_queries=obj["n_queries"],
            baseline=baseline,
            per_position=per_position,
            deltas=deltas,
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed position report ({exc})") from exc


def read_segment_report(path: str | Path) -> SegmentSimilarityReport:
    obj = _load_json(Path(path), "segment")
    try:
        return SegmentSimilarityReport(
            pooling=obj["pooling"],
            n_docs=obj["n_docs"],
            n_skipped=obj["n_skipped"],
            segments=[
                SegmentStats(
                    segment=rec["segment"],
                    mean=rec["mean"],
                    std=rec["std"],
                    p5=rec["p5"],
                    p25=rec["p25"],
                    p50=rec["p50"],
                    p75=rec["p75"],
                    p95=rec["p95"],
                )
                for rec in obj["segments"]
            ],
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed segment report ({exc})") from exc


def read_span_report(path: str | Path) -> SpanAccuracyReport:
    obj = _load_json(Path(path), "span")
    try:
        return SpanAccuracyReport(
            window_len=obj["window_len"],
            span_len=obj["span_len"],
            instances_per_window=obj["instances_per_window"],
            n_docs=obj["n_docs"],
            windows=[
                WindowAccuracy(
                    window_start=rec["window_start"],
                    window_end=rec["window_end"],
                    mean_acc=rec["mean_acc"],
                    std=rec["std"],
                    n=rec["n"],
                )
                for rec in obj["windows"]
            ],
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed span report ({exc})") from exc
