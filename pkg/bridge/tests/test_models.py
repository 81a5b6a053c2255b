import numpy as np
import pytest

from posbridge import HashModel, parse_sentinel_spans
from posbridge.protocol import ProtocolError

torch = pytest.importorskip("torch")
transformers = pytest.importorskip("transformers")

from posbridge.hf import HFEncoderModel, HFSeq2SeqModel, ModelLoadError, load_model

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "hello", "world", "alpha", "beta", "gamma", "delta", "epsilon",
    "the", "quick", "brown", "fox", "##s", "##ed",
]


def write_tokenizer(directory):
    vocab_file = directory / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
    tokenizer = transformers.BertTokenizerFast(vocab_file=str(vocab_file))
    tokenizer.save_pretrained(str(directory))
    return tokenizer


@pytest.fixture(scope="module")
def bert_checkpoint(tmp_path_factory):
    """A tiny randomly initialized checkpoint of a public encoder
    architecture, materialized locally (the sandbox has no model hub)."""
    directory = tmp_path_factory.mktemp("tiny_bert")
    write_tokenizer(directory)
    config = transformers.BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=16,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=64,
    )
    torch.manual_seed(0)
    model = transformers.BertModel(config)
    model.save_pretrained(str(directory))
    return directory


@pytest.fixture(scope="module")
def t5_checkpoint(tmp_path_factory):
    """A tiny encoder-decoder checkpoint (public T5 architecture, random
    weights) sharing the wordpiece tokenizer above."""
    directory = tmp_path_factory.mktemp("tiny_t5")
    write_tokenizer(directory)
    config = transformers.T5Config(
        vocab_size=len(VOCAB),
        d_model=16,
        d_ff=32,
        d_kv=8,
        num_layers=1,
        num_heads=2,
        decoder_start_token_id=0,
    )
    torch.manual_seed(0)
    model = transformers.T5ForConditionalGeneration(config)
    model.save_pretrained(str(directory))
    return directory


class TestHashModel:
    def test_deterministic_and_shaped(self):
        model = HashModel(dim=8, seed=0)
        a = model.embed(["hello world", "alpha"], "mean")
        b = model.embed(["hello world", "alpha"], "mean")
        assert a.shape == (2, 8)
        assert np.array_equal(a, b)

    def test_seed_changes_vectors(self):
        a = HashModel(dim=8, seed=0).embed(["hello"], "mean")
        b = HashModel(dim=8, seed=1).embed(["hello"], "mean")
        assert not np.array_equal(a, b)

    def test_first_pooling_uses_first_token(self):
        model = HashModel(dim=8, seed=0)
        assert np.array_equal(
            model.embed(["hello world"], "first"), model.embed(["hello"], "first")
        )

    def test_decoder_pooling_rejected(self):
        with pytest.raises(ProtocolError, match="decoder"):
            HashModel(dim=8).embed(["a"], "decoder")

    def test_values_in_unit_range(self):
        vecs = HashModel(dim=64, seed=3).embed(["x y z"], "mean")
        assert np.all(np.abs(vecs) <= 1.0)


class TestEncoderCheckpoint:
    def test_load_detects_encoder_only(self, bert_checkpoint):
        model = load_model(bert_checkpoint)
        assert isinstance(model, HFEncoderModel)
        assert model.poolings == ("mean", "first")
        assert model.dim == 16

    def test_embed_dims_and_determinism(self, bert_checkpoint):
        model = load_model(bert_checkpoint)
        texts = ["hello world", "the quick brown fox", "hello world"]
        first_call = model.embed(texts, "mean")
        second_call = model.embed(texts, "mean")
        assert first_call.shape == (3, 16)
        assert np.array_equal(first_call, second_call)
        assert np.array_equal(first_call[0], first_call[2])

    def test_mean_differs_from_first(self, bert_checkpoint):
        model = load_model(bert_checkpoint)
        mean = model.embed(["hello world alpha"], "mean")
        first = model.embed(["hello world alpha"], "first")
        assert not np.allclose(mean, first)

    def test_padding_does_not_leak_into_mean(self, bert_checkpoint):
        # the same text must embed identically alone and padded next to a
        # longer neighbour
        model = load_model(bert_checkpoint)
        alone = model.embed(["hello world"], "mean")[0]
        padded = model.embed(["hello world", "the quick brown fox alpha beta"], "mean")[0]
        assert np.allclose(alone, padded, atol=1e-6)

    def test_decoder_pooling_rejected(self, bert_checkpoint):
        with pytest.raises(ProtocolError, match="decoder"):
            load_model(bert_checkpoint).embed(["hello"], "decoder")

    def test_fill_spans_rejected(self, bert_checkpoint):
        with pytest.raises(ProtocolError, match="encoder-decoder"):
            load_model(bert_checkpoint).fill_spans(["hello <extra_id_0>"], 1)

    def test_truncation_respects_max_tokens(self, bert_checkpoint):
        model = load_model(bert_checkpoint, max_input_tokens=8)
        long_text = " ".join(["hello"] * 100)
        assert model.embed([long_text], "mean").shape == (1, 16)


class TestSeq2SeqCheckpoint:
    def test_load_detects_encoder_decoder(self, t5_checkpoint):
        model = load_model(t5_checkpoint)
        assert isinstance(model, HFSeq2SeqModel)
        assert model.poolings == ("mean", "first", "decoder")

    def test_all_poolings_shaped_and_deterministic(self, t5_checkpoint):
        model = load_model(t5_checkpoint)
        for pooling in ("mean", "first", "decoder"):
            a = model.embed(["hello world", "alpha beta"], pooling)
            b = model.embed(["hello world", "alpha beta"], pooling)
            assert a.shape == (2, 16), pooling
            assert np.array_equal(a, b), pooling

    def test_decoder_pooling_differs_from_encoder_poolings(self, t5_checkpoint):
        model = load_model(t5_checkpoint)
        dec = model.embed(["hello world"], "decoder")
        enc = model.embed(["hello world"], "mean")
        assert not np.allclose(dec, enc)

    def test_fill_spans_shape_and_determinism(self, t5_checkpoint):
        model = load_model(t5_checkpoint)
        inputs = ["hello <extra_id_0> world", "alpha <extra_id_0> gamma"]
        a = model.fill_spans(inputs, 2)
        b = model.fill_spans(inputs, 2)
        assert len(a) == 2 and all(len(row) == 2 for row in a)
        assert all(isinstance(s, str) for row in a for s in row)
        assert a == b

    def test_empty_batches(self, t5_checkpoint):
        model = load_model(t5_checkpoint)
        assert model.embed([], "mean").shape == (0, 16)
        assert model.fill_spans([], 1) == []


class TestLoadFailures:
    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ModelLoadError, match="cannot load checkpoint"):
            load_model(tmp_path / "does_not_exist")


class TestSentinelParsing:
    def test_t5_style_output(self):
        spans = parse_sentinel_spans("<extra_id_0> foo bar <extra_id_1> baz", 2)
        assert spans == ["foo bar", "baz"]

    def test_no_sentinel_treats_whole_text_as_first_span(self):
        assert parse_sentinel_spans("  just words  ", 2) == ["just words", ""]

    def test_truncates_extras(self):
        spans = parse_sentinel_spans("<extra_id_0> a <extra_id_1> b <extra_id_2> c", 2)
        assert spans == ["a", "b"]

    def test_pads_missing(self):
        assert parse_sentinel_spans("<extra_id_0> only", 3) == ["only", "", ""]
