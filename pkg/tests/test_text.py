"""Text encoder tests: tokenization, sequence layout, masking invariants."""

import numpy as np
import pytest

from kedd.text import (
    CLS,
    PAD,
    SEP,
    UNK,
    NUM_RESERVED,
    TextDocument,
    TextEncoder,
    TransformerConfig,
    UkHead,
    Vocabulary,
    build_sequence,
    tokenize,
    truncate_pair,
)


def small_config(**overrides):
    defaults = dict(layers=2, heads=2, model_dim=12, ff_dim=16, max_tokens=32, dropout=0.1)
    defaults.update(overrides)
    return TransformerConfig(**defaults)


class TestVocabulary:
    def test_reserved_ids_fixed(self):
        v = Vocabulary(["aspirin"])
        assert v.id_to_token[:NUM_RESERVED] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASKTOK]"]
        assert v.lookup("aspirin") == NUM_RESERVED

    def test_build_respects_min_freq(self):
        v = Vocabulary.build(["cox cox inhibitor", "inhibitor binds"], min_freq=2)
        assert v.lookup("cox") != UNK and v.lookup("inhibitor") != UNK
        assert v.lookup("binds") == UNK

    def test_save_load_roundtrip(self, tmp_path):
        v = Vocabulary.build(["a a b b c c"], min_freq=2)
        v.save(tmp_path / "vocab.txt")
        loaded = Vocabulary.load(tmp_path / "vocab.txt")
        assert loaded.id_to_token == v.id_to_token

    def test_line_number_is_offset_id(self, tmp_path):
        v = Vocabulary(["first", "second"])
        v.save(tmp_path / "vocab.txt")
        lines = (tmp_path / "vocab.txt").read_text().splitlines()
        assert lines[v.lookup("second") - NUM_RESERVED] == "second"


class TestTokenize:
    def test_basic_split(self):
        v = Vocabulary(["aspirin", "inhibits", "cox"])
        doc = tokenize("Aspirin inhibits COX.", v)
        assert doc.tokens == [v.lookup("aspirin"), v.lookup("inhibits"), v.lookup("cox")]

    def test_empty_string(self):
        assert tokenize("", Vocabulary()).tokens == []

    def test_oov_maps_to_unk(self):
        assert tokenize("zzzunseenzzz", Vocabulary()).tokens == [UNK]

    def test_deterministic(self):
        v = Vocabulary(["x1", "y2"])
        assert tokenize("X1, y2 x1!", v).tokens == tokenize("X1, y2 x1!", v).tokens


class TestSequenceLayout:
    def test_single_doc_layout(self):
        doc = TextDocument("", [7, 8, 9])
        ids, dropped = build_sequence(doc, None, max_tokens=16)
        assert ids.tolist() == [CLS, 7, 8, 9, SEP]
        assert dropped == 0

    def test_pair_consumes_one_cls_two_sep(self):
        a = TextDocument("", [7, 8])
        b = TextDocument("", [9])
        ids, _ = build_sequence(a, b, max_tokens=16)
        assert ids.tolist() == [CLS, 7, 8, SEP, 9, SEP]
        assert (ids == CLS).sum() == 1 and (ids == SEP).sum() == 2

    def test_truncation_drops_doc_b_first(self):
        # budget = 9 - 3 = 6: b shrinks to 2, a keeps all 4
        a, b, dropped = truncate_pair([7] * 4, [8] * 4, max_tokens=9)
        assert a == [7] * 4 and b == [8] * 2 and dropped == 2

    def test_truncation_then_doc_a(self):
        a, b, dropped = truncate_pair([7] * 10, [8] * 4, max_tokens=9)
        assert b == [] and a == [7] * 6 and dropped == 8

    def test_reserved_ids_rejected_in_documents(self):
        with pytest.raises(ValueError, match="reserved"):
            TextDocument("", [CLS, 7])


class TestTextEncoder:
    def test_output_shape_for_lengths(self):
        enc = TextEncoder(small_config(), vocab_size=30, rng=np.random.default_rng(0))
        enc.eval()
        for n in (0, 1, 29):  # 29 tokens + CLS + SEP = max_tokens - 1
            doc = TextDocument("", [5 + (i % 20) for i in range(n)])
            out = enc.encode(doc)
            assert out.shape == (12,)

    def test_pair_order_sensitive_no_symmetry_guarantee(self):
        enc = TextEncoder(small_config(), vocab_size=30, rng=np.random.default_rng(1))
        enc.eval()
        a = TextDocument("", [6, 7])
        b = TextDocument("", [8, 9])
        ab = enc.encode(a, b).values
        ba = enc.encode(b, a).values
        assert not np.allclose(ab, ba)

    def test_attention_rows_sum_to_one(self):
        enc = TextEncoder(small_config(), vocab_size=30, rng=np.random.default_rng(2))
        enc.eval()
        collected = []
        enc.encode(TextDocument("", [5, 6, 7, 8]), collect_attention=collected)
        assert len(collected) == 2 * 2  # layers * heads
        for weights in collected:
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_padding_never_changes_cls_output(self):
        enc = TextEncoder(small_config(), vocab_size=30, rng=np.random.default_rng(3))
        enc.eval()
        ids, _ = build_sequence(TextDocument("", [5, 6, 7]), None, 32)
        base = enc.encode_ids(ids).values
        padded = enc.encode_ids(np.concatenate([ids, [PAD] * 6])).values
        np.testing.assert_allclose(padded, base, atol=1e-9)

    def test_eval_mode_deterministic(self):
        enc = TextEncoder(small_config(), vocab_size=30, rng=np.random.default_rng(4))
        enc.eval()
        doc = TextDocument("", [5, 9, 11])
        np.testing.assert_array_equal(enc.encode(doc).values, enc.encode(doc).values)


class TestUkHead:
    def test_zero_input_zero_bias_gives_zero(self):
        head = UkHead(8, 5, 0.2, np.random.default_rng(5))
        head.eval()
        from kedd.autodiff import constant

        out = head(constant(np.zeros(8)))
        np.testing.assert_array_equal(out.values, np.zeros(5))

    def test_eval_mode_deterministic(self):
        head = UkHead(8, 5, 0.5, np.random.default_rng(6))
        head.eval()
        from kedd.autodiff import constant

        x = constant(np.random.default_rng(7).standard_normal(8))
        np.testing.assert_array_equal(head(x).values, head(x).values)

    def test_train_mode_keep_frequency(self):
        # Binomial bound: keep rate 0.5 over 10000 draws stays in [0.47, 0.53].
        head = UkHead(4, 2000, 0.5, np.random.default_rng(8))
        head.train()
        from kedd.autodiff import constant

        rng = np.random.default_rng(9)
        x = constant(np.ones(4))
        kept = []
        for _ in range(5):
            out = head(x, rng=rng).values
            kept.append(out != 0.0)
        keep_freq = np.mean(kept)
        assert 0.47 <= keep_freq <= 0.53
