"""Document/query/qrel collections with character-offset passage alignment,
plus a synthetic corpus generator with a controllable passage-position law."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusError, PassageNotFoundError

WORD_LEN = 5  # synthetic words are fixed-width so passage offsets are word-aligned
WORD_UNIT = WORD_LEN + 1  # word + single trailing space
QUERY_SUBVOCAB_SIZE = 8
_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class Document:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise CorpusError("document with empty id")
        if not self.text:
            raise CorpusError(f"document {self.id!r} has empty text")

    @property
    def char_len(self) -> int:
        return len(self.text)


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise CorpusError("query with empty id")
        if not self.text:
            raise CorpusError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class PassageAlignment:
    query_id: str
    doc_id: str
    char_start: int
    char_end: int

    def __post_init__(self):
        if not (0 <= self.char_start < self.char_end):
            raise CorpusError(
                f"alignment for query {self.query_id!r}: bad span "
                f"[{self.char_start}, {self.char_end})"
            )

    @property
    def passage_len(self) -> int:
        return self.char_end - self.char_start


@dataclass
class Corpus:
    """Immutable bundle of documents and queries with id lookup."""

    documents: list[Document]
    queries: list[Query]
    _docs_by_id: dict[str, Document] = field(init=False, repr=False)
    _queries_by_id: dict[str, Query] = field(init=False, repr=False)

    def __post_init__(self):
        self._docs_by_id = {d.id: d for d in self.documents}
        self._queries_by_id = {q.id: q for q in self.queries}

    def doc(self, doc_id: str) -> Document:
        try:
            return self._docs_by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document id {doc_id!r}") from None

    def query(self, query_id: str) -> Query:
        try:
            return self._queries_by_id[query_id]
        except KeyError:
            raise CorpusError(f"unknown query id {query_id!r}") from None


@dataclass(frozen=True)
class FrontSkewed:
    """Passage start fractions follow Beta(1, b) with b chosen so the median
    equals median_fraction."""

    median_fraction: float

    def __post_init__(self):
        if not 0.0 < self.median_fraction < 1.0:
            raise CorpusError(f"median_fraction must be in (0,1), got {self.median_fraction}")


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class Fixed:
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise CorpusError(f"fixed fraction must be in [0,1], got {self.fraction}")


PositionLaw = FrontSkewed | Uniform | Fixed


@dataclass(frozen=True)
class SynthSpec:
    num_docs: int
    doc_char_len: tuple[int, int]
    passage_char_len: tuple[int, int]
    position_law: PositionLaw
    vocabulary_size: int
    seed: int

    def __post_init__(self):
        if self.num_docs < 1:
            raise CorpusError("num_docs must be >= 1")
        d_lo, d_hi = self.doc_char_len
        p_lo, p_hi = self.passage_char_len
        if not (0 < d_lo <= d_hi) or not (0 < p_lo <= p_hi):
            raise CorpusError("length ranges must be positive and ordered")
        if p_hi >= d_lo:
            raise CorpusError(
                f"passage length range {self.passage_char_len} must lie strictly "
                f"below document length range {self.doc_char_len}"
            )
        if d_lo < 2 * WORD_UNIT:
            raise CorpusError(f"doc_char_len lower bound must be >= {2 * WORD_UNIT}")
        # word counts are the rounded char lengths; the largest possible
        # passage must stay strictly shorter than the smallest document
        if _to_words(p_hi) >= _to_words(d_lo):
            raise CorpusError(
                f"passage range {self.passage_char_len} can reach "
                f"{_to_words(p_hi)} words, but documents may have as few as "
                f"{_to_words(d_lo)}; widen the gap"
            )
        reserved = self.num_docs * QUERY_SUBVOCAB_SIZE
        if self.vocabulary_size < reserved + 50:
            raise CorpusError(
                f"vocabulary_size {self.vocabulary_size} too small: need at least "
                f"{reserved + 50} for {self.num_docs} query sub-vocabularies"
            )


@dataclass(frozen=True)
class PositionDistribution:
    p5: float
    p25: float
    p50: float
    p75: float
    p95: float
    mean: float


def lower_quantile(values: Sequence[float], q: float) -> float:
    """Order statistic at index floor((n-1)*q) of the sorted values."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile must be in [0,1], got {q}")
    ordered = sorted(values)
    if not ordered:
        raise ValueError("quantile of empty sequence")
    return float(ordered[math.floor((len(ordered) - 1) * q)])


# ---------------------------------------------------------------------------
# loading


def _parse_jsonl_docs(path: Path) -> Iterable[tuple[str, str, int]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "id" not in rec or "text" not in rec:
                raise CorpusError(f"{path}:{lineno}: record must have 'id' and 'text'")
            yield str(rec["id"]), str(rec["text"]), lineno


def _parse_tsv_docs(path: Path) -> Iterable[tuple[str, str, int]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 'id<TAB>text'")
            yield parts[0], parts[1], lineno


def load_corpus(path: str | Path, format: str = "jsonl") -> list[Document]:
    """Load documents from a JSONL ({id, text}) or TSV (id<TAB>text) file."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    if format == "jsonl":
        records = _parse_jsonl_docs(path)
    elif format == "tsv":
        records = _parse_tsv_docs(path)
    else:
        raise CorpusError(f"unknown corpus format {format!r}")

    docs: list[Document] = []
    seen: set[str] = set()
    for doc_id, text, lineno in records:
        if doc_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
        if not text:
            raise CorpusError(f"{path}:{lineno}: empty text for id {doc_id!r}")
        seen.add(doc_id)
        docs.append(Document(id=doc_id, text=text))
    return docs


def load_queries(path: str | Path, format: str = "jsonl") -> list[Query]:
    docs = load_corpus(path, format=format)
    return [Query(id=d.id, text=d.text) for d in docs]


def load_qrels(path: str | Path) -> dict[str, set[str]]:
    """Binary qrels: TSV lines `query_id<TAB>doc_id`."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"qrels file not found: {path}")
    qrels: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 'query_id<TAB>doc_id'")
            qrels.setdefault(parts[0], set()).add(parts[1])
    return qrels


def load_passages(path: str | Path) -> list[tuple[str, str]]:
    """Passage file: JSONL with `query_id` and `passage_text`."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"passage file not found: {path}")
    out: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if "query_id" not in rec or "passage_text" not in rec:
                raise CorpusError(f"{path}:{lineno}: record must have 'query_id' and 'passage_text'")
            out.append((str(rec["query_id"]), str(rec["passage_text"])))
    return out


# ---------------------------------------------------------------------------
# alignment


def align_passage(doc: Document, passage_text: str, query_id: str) -> PassageAlignment:
    """Align at the first exact character-level occurrence of passage_text."""
    if not passage_text:
        raise CorpusError(f"empty passage text for query {query_id!r}")
    start = doc.text.find(passage_text)
    if start < 0:
        raise PassageNotFoundError(
            f"passage for query {query_id!r} not found in document {doc.id!r}"
        )
    return PassageAlignment(
        query_id=query_id,
        doc_id=doc.id,
        char_start=start,
        char_end=start + len(passage_text),
    )


def align_passages(
    passages: Sequence[tuple[str, str]],
    qrels: dict[str, set[str]],
    corpus: Corpus,
) -> tuple[list[PassageAlignment], int]:
    """Cross-reference passages with their judged-relevant documents.

    Queries whose passage has no exact occurrence are dropped (counted in the
    returned unaligned tally), not fatal.
    """
    alignments: list[PassageAlignment] = []
    unaligned = 0
    for query_id, passage_text in passages:
        doc_ids = sorted(qrels.get(query_id, ()))
        if not doc_ids:
            unaligned += 1
            continue
        hit = None
        for doc_id in doc_ids:
            try:
                hit = align_passage(corpus.doc(doc_id), passage_text, query_id)
                break
            except PassageNotFoundError:
                continue
        if hit is None:
            unaligned += 1
        else:
            alignments.append(hit)
    return alignments, unaligned


# ---------------------------------------------------------------------------
# synthesis


def _word(index: int) -> str:
    chars = []
    for _ in range(WORD_LEN):
        chars.append(_ALPHABET[index % 26])
        index //= 26
    return "".join(reversed(chars))


def _to_words(char_len: int) -> int:
    return max(1, round(char_len / WORD_UNIT))


def _front_skew_beta(median_fraction: float) -> float:
    # Beta(1, b) has CDF 1-(1-x)^b; solving for the median gives b below.
    return math.log(0.5) / math.log(1.0 - median_fraction)


def synth_corpus(spec: SynthSpec) -> tuple[list[Document], list[Query], list[PassageAlignment]]:
    """Generate documents, one query per document, and exact alignments.

    Documents are sequences of fixed-width words, each followed by a single
    space (including a trailing space at the end). The planted passage is a
    contiguous word run drawn from a per-query sub-vocabulary disjoint from
    every other query's; the distractor words come from a shared pool. The
    passage alignment covers the passage's trailing space so relocation at a
    word start never merges adjacent words.
    """
    rng = np.random.default_rng(spec.seed)
    d_lo, d_hi = spec.doc_char_len
    p_lo, p_hi = spec.passage_char_len

    shared_lo = spec.num_docs * QUERY_SUBVOCAB_SIZE
    shared_size = spec.vocabulary_size - shared_lo

    if isinstance(spec.position_law, FrontSkewed):
        beta_b = _front_skew_beta(spec.position_law.median_fraction)

    docs: list[Document] = []
    queries: list[Query] = []
    alignments: list[PassageAlignment] = []
    for i in range(spec.num_docs):
        n_words = _to_words(int(rng.integers(d_lo, d_hi + 1)))
        p_words = _to_words(int(rng.integers(p_lo, p_hi + 1)))
        if p_words >= n_words:
            raise CorpusError(
                f"infeasible spec: passage of {p_words} words does not fit in a "
                f"document of {n_words} words"
            )

        sub_lo = i * QUERY_SUBVOCAB_SIZE
        passage_idx = rng.integers(sub_lo, sub_lo + QUERY_SUBVOCAB_SIZE, size=p_words)
        filler_idx = rng.integers(shared_lo, shared_lo + shared_size, size=n_words - p_words)

        law = spec.position_law
        if isinstance(law, Fixed):
            fraction = law.fraction
        elif isinstance(law, Uniform):
            fraction = float(rng.random())
        else:
            fraction = float(rng.beta(1.0, beta_b))
        start_word = round(fraction * (n_words - p_words))

        words = [_word(int(w)) for w in filler_idx]
        passage_words = [_word(int(w)) for w in passage_idx]
        words[start_word:start_word] = passage_words
        text = "".join(w + " " for w in words)

        n_qwords = int(rng.integers(3, min(7, QUERY_SUBVOCAB_SIZE) + 1))
        query_idx = rng.integers(sub_lo, sub_lo + QUERY_SUBVOCAB_SIZE, size=n_qwords)
        query_text = " ".join(_word(int(w)) for w in query_idx)

        doc_id = f"d{i:06d}"
        query_id = f"q{i:06d}"
        char_start = start_word * WORD_UNIT
        char_end = char_start + p_words * WORD_UNIT
        docs.append(Document(id=doc_id, text=text))
        queries.append(Query(id=query_id, text=query_text))
        alignments.append(
            PassageAlignment(
                query_id=query_id, doc_id=doc_id, char_start=char_start, char_end=char_end
            )
        )
    return docs, queries, alignments


def qrels_from_alignments(alignments: Sequence[PassageAlignment]) -> dict[str, set[str]]:
    qrels: dict[str, set[str]] = {}
    for a in alignments:
        qrels.setdefault(a.query_id, set()).add(a.doc_id)
    return qrels


def passage_position_stats(
    alignments: Sequence[PassageAlignment], docs: Sequence[Document]
) -> PositionDistribution:
    """Exact order statistics (lower-interpolation rule) over char_start."""
    if not alignments:
        raise CorpusError("no alignments: cannot compute position statistics")
    by_id = {d.id: d for d in docs}
    starts: list[int] = []
    for a in alignments:
        if a.doc_id not in by_id:
            raise CorpusError(f"alignment references unknown document {a.doc_id!r}")
        if a.char_end > by_id[a.doc_id].char_len:
            raise CorpusError(f"alignment for {a.query_id!r} exceeds document length")
        starts.append(a.char_start)
    return PositionDistribution(
        p5=lower_quantile(starts, 0.05),
        p25=lower_quantile(starts, 0.25),
        p50=lower_quantile(starts, 0.50),
        p75=lower_quantile(starts, 0.75),
        p95=lower_quantile(starts, 0.95),
        mean=float(np.mean(starts)),
    )


# ---------------------------------------------------------------------------
# serialization


def write_corpus_jsonl(docs: Sequence[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "text": d.text}, ensure_ascii=False) + "\n")


def write_queries_jsonl(queries: Sequence[Query], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({"id": q.id, "text": q.text}, ensure_ascii=False) + "\n")


def write_qrels_tsv(qrels: dict[str, set[str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in sorted(qrels):
            for doc_id in sorted(qrels[query_id]):
                fh.write(f"{query_id}\t{doc_id}\n")


def write_alignments_jsonl(alignments: Sequence[PassageAlignment], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in alignments:
            fh.write(
                json.dumps(
                    {
                        "query_id": a.query_id,
                        "doc_id": a.doc_id,
                        "char_start": a.char_start,
                        "char_end": a.char_end,
                    }
                )
                + "\n"
            )


def load_alignments(path: str | Path) -> list[PassageAlignment]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"alignments file not found: {path}")
    out: list[PassageAlignment] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                out.append(
                    PassageAlignment(
                        query_id=rec["query_id"],
                        doc_id=rec["doc_id"],
                        char_start=int(rec["char_start"]),
                        char_end=int(rec["char_end"]),
                    )
                )
            except KeyError as exc:
                raise CorpusError(f"{path}:{lineno}: missing field {exc}") from exc
    return out
