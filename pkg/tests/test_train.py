import math

import numpy as np
import pytest
from scipy import stats as sps

from posbench.corpus import Corpus, Document, Query
from posbench.embed import init_params, toy_forward
from posbench.errors import ConfigError, ValidationError
from posbench.probes import tokenize
from posbench.retrieval import build_index
from posbench.train import (
    CROP_MAX_FRACTION,
    CROP_MIN_FRACTION,
    MODE_CROP_PRETRAIN,
    MODE_SUPERVISED_FINETUNE,
    TrainBatch,
    TrainConfig,
    contrastive_loss,
    crop_text,
    denominator_term_count,
    loss_gradient,
    mine_negatives,
    read_negative_pool,
    sample_crop_pair,
    train_contrastive,
    write_loss_log,
    write_negative_pool,
)
from tests.conftest import rng_texts


def naive_cos(a, b):
    num = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return num / (na * nb)


def naive_loss(q_vecs, pos_vecs, negs, in_batch, tau):
    """Independent scalar evaluation of the contrastive loss (no numpy, no
    log-sum-exp)."""
    n = len(q_vecs)
    total = 0.0
    for i in range(n):
        cands = [pos_vecs[i]]
        if in_batch:
            cands += [pos_vecs[m] for m in range(n) if m != i]
            cands += [v for row in negs for v in row]
        else:
            cands += list(negs[i])
        logits = [naive_cos(q_vecs[i], c) / tau for c in cands]
        z = sum(math.exp(l) for l in logits)
        total += -math.log(math.exp(logits[0]) / z)
    return total / n


def rand_vecs(rng, n, d=5):
    return rng.standard_normal((n, d))


class TestTrainBatch:
    def test_ragged_negatives_rejected(self):
        with pytest.raises(ValidationError, match="same k"):
            TrainBatch(("q1", "q2"), ("p1", "p2"), (("n",), ()))

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            TrainBatch(("q1",), ("p1", "p2"), ((), ()))

    def test_empty_batch_rejected(self):
        with pytest.raises(ValidationError):
            TrainBatch((), (), ())

    def test_tokenless_text_rejected(self):
        with pytest.raises(ValidationError):
            TrainBatch(("q",), ("   ",), ((),))

    def test_shape_properties(self):
        b = TrainBatch(("a", "b"), ("c", "d"), (("e", "f"), ("g", "h")))
        assert (b.n, b.k) == (2, 2)


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 128 and cfg.temperature == 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"batch_size": 0},
            {"epochs": 0},
            {"chunk_size": 0},
            {"chunk_size": 129},
            {"learning_rate": 0.0},
            {"temperature": 0.0},
            {"temperature": -1.0},
            {"hard_negatives_per_query": -1},
            {"refresh_every_epochs": 0},
            {"mining_depth": 9},
            {"lr_schedule": "cosine"},
        ],
    )
    def test_invariants(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestDenominatorCount:
    def test_in_batch(self):
        assert denominator_term_count(4, 2, True) == 1 + 3 + 8

    def test_own_only(self):
        assert denominator_term_count(4, 2, False) == 3


class TestContrastiveLoss:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            n = int(rng.integers(1, 5))
            k = int(rng.integers(0, 4))
            in_batch = bool(rng.integers(0, 2))
            tau = float(rng.uniform(0.2, 2.0))
            q = rand_vecs(rng, n)
            p = rand_vecs(rng, n)
            negs = rng.standard_normal((n, k, 5))
            got = contrastive_loss(q, p, negs, in_batch=in_batch, temperature=tau)
            want = naive_loss(q, p, [list(row) for row in negs], in_batch, tau)
            assert math.isclose(got, want, rel_tol=1e-12, abs_tol=1e-12)

    def test_single_term_is_exactly_zero(self):
        q = np.array([[0.3, 0.4]])
        p = np.array([[0.6, 0.8]])
        assert contrastive_loss(q, p, None, in_batch=False) == 0.0
        assert contrastive_loss(q, p, np.zeros((1, 0, 2)), in_batch=True) == 0.0

    def test_hand_computed_single_negative(self):
        q = np.array([[1.0, 0.0]])
        p = np.array([[1.0, 0.0]])
        negs = np.array([[[-1.0, 0.0]]])
        got = contrastive_loss(q, p, negs, in_batch=False, temperature=1.0)
        assert abs(got - math.log(1.0 + math.exp(-2.0))) < 1e-9

    def test_permuting_negatives_invariant(self):
        rng = np.random.default_rng(3)
        q, p = rand_vecs(rng, 3), rand_vecs(rng, 3)
        negs = rng.standard_normal((3, 4, 5))
        base = contrastive_loss(q, p, negs, in_batch=True)
        shuffled = negs[:, [2, 0, 3, 1], :]
        assert abs(base - contrastive_loss(q, p, shuffled, in_batch=True)) < 1e-12

    def test_eq1_bound(self):
        # 0 <= L <= log(1 + N_neg * e^(2/tau)) since cosines live in [-1, 1]
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(1, 5))
            k = int(rng.integers(0, 3))
            tau = float(rng.uniform(0.3, 2.0))
            in_batch = bool(rng.integers(0, 2))
            loss = contrastive_loss(
                rand_vecs(rng, n), rand_vecs(rng, n),
                rng.standard_normal((n, k, 5)),
                in_batch=in_batch, temperature=tau,
            )
            n_neg = denominator_term_count(n, k, in_batch) - 1
            assert 0.0 <= loss <= math.log(1.0 + n_neg * math.exp(2.0 / tau)) + 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            contrastive_loss(np.ones((2, 3)), np.ones((2, 4)), None, in_batch=True)
        with pytest.raises(ValidationError):
            contrastive_loss(np.ones((2, 3)), np.ones((3, 3)), None, in_batch=True)


def small_batch(rng, n=4, k=2):
    return TrainBatch(
        queries=tuple(rng_texts(rng, n)),
        positives=tuple(rng_texts(rng, n)),
        hard_negatives=tuple(tuple(rng_texts(rng, k)) for _ in range(n)),
    )


class TestLossGradient:
    def _fd_directional(self, batch, params, loss_kwargs, direction, eps=1e-5):
        plus = params.copy()
        plus.token_table += eps * direction
        minus = params.copy()
        minus.token_table -= eps * direction
        lp = loss_gradient(batch, plus, **loss_kwargs)[0].loss
        lm = loss_gradient(batch, minus, **loss_kwargs)[0].loss
        return (lp - lm) / (2 * eps)

    @pytest.mark.parametrize("pooling,decay", [("mean", 0.0), ("position_weighted", 2.0)])
    def test_matches_finite_differences(self, pooling, decay):
        rng = np.random.default_rng(10)
        params = init_params(
            dim=16, vocab_hash_buckets=128, seed=1, pooling=pooling, decay=decay
        )
        for trial in range(5):
            batch = small_batch(rng)
            kwargs = dict(temperature=0.7, in_batch=True)
            stats, grad = loss_gradient(batch, params, **kwargs)
            for _ in range(3):
                v = rng.standard_normal(params.token_table.shape)
                v /= np.linalg.norm(v)
                analytic = float((grad * v).sum())
                fd = self._fd_directional(batch, params, kwargs, v)
                assert abs(analytic - fd) <= 1e-4 * max(abs(fd), 1e-8)

    def test_loss_matches_contrastive_loss_through_encoder(self, pw_params):
        rng = np.random.default_rng(11)
        batch = small_batch(rng, n=3, k=2)

        def emb(text):
            return toy_forward(pw_params, [t.surface for t in tokenize(text)])

        q = np.stack([emb(t) for t in batch.queries])
        p = np.stack([emb(t) for t in batch.positives])
        negs = np.stack([np.stack([emb(t) for t in row]) for row in batch.hard_negatives])
        want = contrastive_loss(q, p, negs, in_batch=True, temperature=0.5)
        stats, _ = loss_gradient(batch, pw_params, temperature=0.5, in_batch=True)
        assert math.isclose(stats.loss, want, rel_tol=1e-12)
        # realized per-query denominator sizes: 1 + (n-1) + n*k each
        assert stats.denominator_terms == (9, 9, 9)
        assert all(t == denominator_term_count(3, 2, True) for t in stats.denominator_terms)

    def test_no_negatives_zero_loss_zero_gradient(self, mean_params):
        batch = TrainBatch(("alpha beta",), ("gamma delta",), ((),))
        stats, grad = loss_gradient(batch, mean_params, in_batch=False)
        assert stats.loss == 0.0
        assert not grad.any()

    def test_chunked_equals_full_bitwise(self, pw_params):
        rng = np.random.default_rng(12)
        batch = small_batch(rng, n=8, k=3)
        _, full = loss_gradient(batch, pw_params, temperature=0.4, in_batch=True)
        for chunk in (1, 2, 3, 5, 8):
            _, chunked = loss_gradient(
                batch, pw_params, temperature=0.4, in_batch=True, chunk_size=chunk
            )
            assert np.array_equal(full, chunked)

    def test_duplicated_negative_doubles_its_gradient(self):
        # two loss_gradient calls: one with negatives (X, Y) where Y is a
        # distinct token hashing to an identical table row, one with (X, X);
        # identical denominators, so X's row must receive exactly double.
        params = init_params(dim=6, vocab_hash_buckets=4096, seed=2)
        x_row = params.token_table[_bucket("negx", 4096)]
        params.token_table[_bucket("negy", 4096)] = x_row.copy()

        base = dict(queries=("query one",), positives=("positive doc",))
        batch_xy = TrainBatch(**base, hard_negatives=(("negx", "negy"),))
        batch_xx = TrainBatch(**base, hard_negatives=(("negx", "negx"),))
        stats_xy, grad_xy = loss_gradient(batch_xy, params, in_batch=False)
        stats_xx, grad_xx = loss_gradient(batch_xx, params, in_batch=False)

        assert math.isclose(stats_xy.loss, stats_xx.loss, rel_tol=1e-15)
        bx = _bucket("negx", 4096)
        by = _bucket("negy", 4096)
        assert np.allclose(grad_xx[bx], 2.0 * grad_xy[bx], rtol=1e-12, atol=0)
        assert np.allclose(grad_xy[by], grad_xy[bx], rtol=1e-12, atol=0)
        assert not grad_xx[by].any()


def _bucket(surface, buckets):
    from posbench.embed import bucket_indices

    return int(bucket_indices([surface], buckets)[0])


class TestCropSampling:
    def test_length_bounds_and_start_range(self):
        rng = np.random.default_rng(0)
        tokens = tokenize(" ".join(f"w{i}" for i in range(37)))
        lo = math.ceil(CROP_MIN_FRACTION * 37)
        hi = math.floor(CROP_MAX_FRACTION * 37)
        for _ in range(200):
            pair = sample_crop_pair(tokens, rng)
            for start, end in (pair.query_span, pair.doc_span):
                assert lo <= end - start <= hi
                assert 0 <= start and end <= 37

    def test_too_short_document(self):
        tokens = tokenize("a b c d e f g h i")  # 9 tokens
        with pytest.raises(ValidationError, match="10"):
            sample_crop_pair(tokens, np.random.default_rng(0), doc_id="d9")

    def test_length_uniformity_chi_square(self):
        # spec example: n=100 -> lengths uniform over {10..50}, p > 0.01
        rng = np.random.default_rng(1)
        tokens = tokenize(" ".join(f"w{i}" for i in range(100)))
        lengths = []
        for _ in range(50_000):
            pair = sample_crop_pair(tokens, rng)
            lengths.append(pair.query_span[1] - pair.query_span[0])
            lengths.append(pair.doc_span[1] - pair.doc_span[0])
        counts = np.bincount(lengths, minlength=51)[10:51]
        assert counts.sum() == 100_000
        assert sps.chisquare(counts).pvalue > 0.01

    def test_spans_are_independent_draws(self):
        rng = np.random.default_rng(2)
        tokens = tokenize(" ".join(f"w{i}" for i in range(60)))
        pairs = [sample_crop_pair(tokens, rng) for _ in range(50)]
        assert any(p.query_span != p.doc_span for p in pairs)

    def test_crop_text_exact_substring(self):
        text = "alpha beta gamma delta epsilon zeta eta theta iota kappa"
        tokens = tokenize(text)
        assert crop_text(text, tokens, (1, 4)) == "beta gamma delta"


def word_corpus(n_docs=12, words_per_doc=20, seed=0):
    rng = np.random.default_rng(seed)
    docs = []
    queries = []
    qrels = {}
    for i in range(n_docs):
        words = [f"t{int(w):04d}" for w in rng.integers(0, 500, size=words_per_doc)]
        own = f"own{i:03d}"
        words[0] = own
        docs.append(Document(id=f"d{i:03d}", text=" ".join(words)))
        queries.append(Query(id=f"q{i:03d}", text=own))
        qrels[f"q{i:03d}"] = {f"d{i:03d}"}
    return Corpus(documents=docs, queries=queries), qrels


class TestMineNegatives:
    def _setup(self, k=2, depth=6):
        corpus, qrels = word_corpus()
        params = init_params(dim=12, vocab_hash_buckets=256, seed=3)
        vecs = np.stack(
            [
                toy_forward(params, [t.surface for t in tokenize(d.text)])
                for d in corpus.documents
            ]
        )
        index = build_index([d.id for d in corpus.documents], vecs)
        return corpus, qrels, params, index

    def test_excludes_relevant_and_sizes(self):
        corpus, qrels, params, index = self._setup()
        pools = mine_negatives(
            params, index, corpus.queries, qrels,
            depth=6, k=2, rng=np.random.default_rng(0),
        )
        assert set(pools) == {q.id for q in corpus.queries}
        for qid, negs in pools.items():
            assert len(negs) == 2
            assert len(set(negs)) == 2
            assert not set(negs) & qrels[qid]

    def test_deterministic_under_rng(self):
        corpus, qrels, params, index = self._setup()
        a = mine_negatives(params, index, corpus.queries, qrels, depth=6, k=2,
                           rng=np.random.default_rng(5))
        b = mine_negatives(params, index, corpus.queries, qrels, depth=6, k=2,
                           rng=np.random.default_rng(5))
        assert a == b

    def test_insufficient_pool_names_query(self):
        corpus, qrels, params, index = self._setup()
        with pytest.raises(ValidationError, match="q000"):
            mine_negatives(params, index, corpus.queries, qrels,
                           depth=2, k=5, rng=np.random.default_rng(0))


class TestTrainingLoops:
    def test_monotone_descent_on_separable_batch(self):
        # spec sanity example: 100 descent steps strictly decrease the loss
        params = init_params(dim=16, vocab_hash_buckets=512, seed=7)
        batch = TrainBatch(
            queries=("apple fruit", "river water", "stone rock"),
            positives=("apple orchard fruit", "river stream water", "stone rock cliff"),
            hard_negatives=(("metal wire",), ("desert sand",), ("cloud sky",)),
        )
        losses = []
        for _ in range(100):
            stats, grad = loss_gradient(batch, params, temperature=0.5, in_batch=True)
            losses.append(stats.loss)
            params.token_table -= 0.05 * grad
        final = loss_gradient(batch, params, temperature=0.5, in_batch=True)[0].loss
        losses.append(final)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_crop_pretrain_counts_short_docs(self):
        corpus, _ = word_corpus(n_docs=6, words_per_doc=20)
        short = Document(id="tiny", text="a b c")
        corpus = Corpus(
            documents=list(corpus.documents) + [short], queries=list(corpus.queries)
        )
        params = init_params(dim=8, vocab_hash_buckets=128, seed=0)
        cfg = TrainConfig(batch_size=4, epochs=1, chunk_size=4,
                          hard_negatives_per_query=0, learning_rate=0.1)
        result = train_contrastive(params, corpus, cfg, mode=MODE_CROP_PRETRAIN)
        assert result.n_docs_skipped_short == 1
        assert len(result.epoch_losses) == 1
        assert len(result.loss_log) == math.ceil(6 / 4)

    def test_crop_pretrain_all_short_errors(self):
        corpus = Corpus(
            documents=[Document(id="d", text="a b c")],
            queries=[Query(id="q", text="x")],
        )
        params = init_params(dim=8, vocab_hash_buckets=128, seed=0)
        cfg = TrainConfig(batch_size=2, epochs=1, chunk_size=2,
                          hard_negatives_per_query=0, learning_rate=0.1)
        with pytest.raises(ValidationError):
            train_contrastive(params, corpus, cfg, mode=MODE_CROP_PRETRAIN)

    def test_finetune_refresh_cadence_and_snapshots(self):
        corpus, qrels = word_corpus()
        params = init_params(dim=12, vocab_hash_buckets=256, seed=1)
        cfg = TrainConfig(batch_size=6, epochs=8, chunk_size=6,
                          hard_negatives_per_query=2, refresh_every_epochs=2,
                          mining_depth=6, learning_rate=0.05, seed=4)
        result = train_contrastive(
            params, corpus, cfg, mode=MODE_SUPERVISED_FINETUNE, qrels=qrels
        )
        assert [e for e, _ in result.negative_pools] == [0, 2, 4, 6]
        assert [e for e, _ in result.checkpoints] == [1, 3, 5, 7]
        assert len(result.epoch_losses) == 8
        # snapshots are frozen copies, not views of the final params
        first_epoch_table = result.checkpoints[0][1].token_table
        assert not np.array_equal(first_epoch_table, result.params.token_table)

    def test_finetune_requires_qrels(self):
        corpus, _ = word_corpus()
        params = init_params(dim=8, vocab_hash_buckets=128, seed=0)
        cfg = TrainConfig(batch_size=4, epochs=1, chunk_size=4)
        with pytest.raises(ValidationError):
            train_contrastive(params, corpus, cfg, mode=MODE_SUPERVISED_FINETUNE)

    def test_unknown_mode(self):
        corpus, qrels = word_corpus()
        params = init_params(dim=8, vocab_hash_buckets=128, seed=0)
        cfg = TrainConfig(batch_size=4, epochs=1, chunk_size=4)
        with pytest.raises(ValidationError, match="mode"):
            train_contrastive(params, corpus, cfg, mode="distill", qrels=qrels)

    def test_training_is_deterministic(self):
        corpus, qrels = word_corpus()
        cfg = TrainConfig(batch_size=6, epochs=2, chunk_size=3,
                          hard_negatives_per_query=2, mining_depth=6,
                          learning_rate=0.05, seed=9)
        tables = []
        for _ in range(2):
            params = init_params(dim=12, vocab_hash_buckets=256, seed=1)
            result = train_contrastive(
                params, corpus, cfg, mode=MODE_SUPERVISED_FINETUNE, qrels=qrels
            )
            tables.append(result.params.token_table)
        assert np.array_equal(tables[0], tables[1])

    def test_initial_params_not_mutated(self):
        corpus, qrels = word_corpus()
        params = init_params(dim=12, vocab_hash_buckets=256, seed=1)
        before = params.token_table.copy()
        cfg = TrainConfig(batch_size=6, epochs=1, chunk_size=6,
                          hard_negatives_per_query=0, learning_rate=0.1)
        train_contrastive(params, corpus, cfg, mode=MODE_CROP_PRETRAIN)
        assert np.array_equal(params.token_table, before)


class TestTrainingIO:
    def test_loss_log_format(self, tmp_path):
        corpus, qrels = word_corpus(n_docs=6)
        params = init_params(dim=8, vocab_hash_buckets=128, seed=0)
        cfg = TrainConfig(batch_size=3, epochs=2, chunk_size=3,
                          hard_negatives_per_query=1, mining_depth=3,
                          learning_rate=0.05)
        result = train_contrastive(
            params, corpus, cfg, mode=MODE_SUPERVISED_FINETUNE, qrels=qrels
        )
        path = tmp_path / "loss.csv"
        write_loss_log(result, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,step,loss"
        assert len(lines) == 1 + len(result.loss_log)
        epoch, step, loss = lines[1].split(",")
        assert (int(epoch), int(step)) == (0, 0)
        assert float(loss) == result.loss_log[0][2]

    def test_negative_pool_roundtrip(self, tmp_path):
        pool = {"q2": ["d9", "d1"], "q1": ["d3"]}
        path = tmp_path / "negs.jsonl"
        write_negative_pool(pool, path)
        assert read_negative_pool(path) == pool
