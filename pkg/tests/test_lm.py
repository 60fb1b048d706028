"""Vocabulary, tokenizer, causal LM, anchor extraction, refiner, adapters."""

import numpy as np
import pytest

from anchorseg import tensor as T
from anchorseg.gradcheck import check_gradients
from anchorseg.layers import AdapterRankError, Linear
from anchorseg.lm import (
    ANCHORS, AnchorsMissingError, ContextOverflowError, LMConfig, MicroLM,
    TokenRefiner, Vocabulary, extract_anchor_hidden, words_of,
)


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield
    T.reset_graph()


CORPUS = ("Please segment the anomalies in this image . Sure , it is User: Assistant: "
          "What are present ? describe them and then output map a small hole located on "
          "upper part of hazelnut as indicated by There no".split())


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(CORPUS)


class TestVocabulary:
    def test_default_instruction_round_trips(self, vocab):
        text = "Please segment the anomalies in this image."
        assert vocab.detokenize(vocab.tokenize(text)) == text

    def test_empty_round_trip(self, vocab):
        assert vocab.tokenize("") == []
        assert vocab.detokenize([]) == ""

    def test_anchor_triple_tokenizes_to_three_ids(self, vocab):
        ids = vocab.tokenize("[NOR][ANO][SEG]")
        assert ids == list(vocab.anchor_ids)
        assert vocab.detokenize(ids) == "[NOR][ANO][SEG]"

    def test_anchor_ids_are_three_highest(self, vocab):
        assert sorted(vocab.anchor_ids) == [len(vocab) - 3, len(vocab) - 2, len(vocab) - 1]
        assert vocab.nor_id < vocab.ano_id < vocab.seg_id

    def test_canonical_response_round_trips(self, vocab):
        text = "Sure, it is [NOR][ANO][SEG]."
        assert vocab.detokenize(vocab.tokenize(text)) == text

    def test_unknown_maps_to_unk(self, vocab):
        assert vocab.tokenize("zebra") == [vocab.unk_id]

    def test_save_load_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        again = Vocabulary.load(path)
        assert again.tokens == vocab.tokens

    def test_words_of_splits_punctuation(self):
        assert words_of("Sure, it is [NOR][ANO][SEG].") == \
            ["Sure", ",", "it", "is", "[NOR]", "[ANO]", "[SEG]", "."]


def make_lm(vocab, seed=0):
    rng = np.random.default_rng(seed)
    lm = MicroLM(LMConfig(vocab_size=vocab.base_size), rng)
    lm.extend_vocab(3, rng)
    return lm


def random_prefix(rng, n_img=8):
    return T.tensor(rng.normal(scale=0.3, size=(n_img, 64)))


class TestMicroLM:
    def test_causality_future_permutation(self, vocab):
        rng = np.random.default_rng(1)
        lm = make_lm(vocab)
        ids = list(rng.integers(5, vocab.base_size, size=12))
        prefix = random_prefix(rng)
        with T.no_grad():
            seq = T.concat_tokens([prefix, lm.embed_text(ids)])
            logits_a, _ = lm.forward(seq, 8)
            swapped = ids.copy()
            swapped[9], swapped[10] = swapped[10], swapped[9]
            seq_b = T.concat_tokens([prefix, lm.embed_text(swapped)])
            logits_b, _ = lm.forward(seq_b, 8)
        # logit row i depends on text tokens <= i, so rows 0..9 are untouched
        assert np.array_equal(logits_a.data[:10], logits_b.data[:10])
        assert not np.array_equal(logits_a.data[10:], logits_b.data[10:])

    def test_zero_text_single_logit_row(self, vocab):
        lm = make_lm(vocab)
        prefix = random_prefix(np.random.default_rng(2))
        with T.no_grad():
            logits, hidden = lm.forward(prefix, 8)
        assert logits.shape == (1, len(vocab))
        assert hidden.shape == (0, 64)

    def test_context_overflow(self, vocab):
        lm = make_lm(vocab)
        with pytest.raises(ContextOverflowError):
            lm.forward(T.tensor(np.zeros((321, 64))), 8)

    def test_generation_deterministic_and_bounded(self, vocab):
        lm = make_lm(vocab, seed=4)
        prefix = random_prefix(np.random.default_rng(3))
        ids = vocab.tokenize("Please segment the anomalies in this image.")
        a = lm.generate(prefix, ids, max_new=6, eos_id=vocab.eos_id)
        b = lm.generate(prefix, ids, max_new=6, eos_id=vocab.eos_id)
        assert a == b and len(a) <= 6

    def test_generate_max_new_zero(self, vocab):
        lm = make_lm(vocab)
        prefix = random_prefix(np.random.default_rng(3))
        assert lm.generate(prefix, [vocab.bos_id], max_new=0, eos_id=vocab.eos_id) == []

    def test_vocab_extension_preserves_base_logits(self, vocab):
        rng = np.random.default_rng(9)
        lm = MicroLM(LMConfig(vocab_size=vocab.base_size), rng)
        prefix = random_prefix(np.random.default_rng(5))
        ids = list(np.random.default_rng(6).integers(5, vocab.base_size, size=6))
        with T.no_grad():
            seq = T.concat_tokens([prefix, lm.embed_text(ids)])
            before, _ = lm.forward(seq, 8)
            lm.extend_vocab(3, rng)
            seq2 = T.concat_tokens([prefix, lm.embed_text(ids)])
            after, _ = lm.forward(seq2, 8)
        base = vocab.base_size
        # BLAS accumulation order may shift the last ulp across shapes, so the
        # contract is argmax preservation over base tokens (anchor columns masked)
        assert np.max(np.abs(before.data - after.data[:, :base])) < 1e-12
        assert np.array_equal(np.argmax(before.data, axis=1), np.argmax(after.data[:, :base], axis=1))


class TestAnchorExtraction:
    def test_rows_at_anchor_positions(self, vocab):
        rng = np.random.default_rng(7)
        hidden = T.tensor(rng.normal(size=(10, 64)))
        ids = vocab.tokenize("Sure, it is [NOR][ANO][SEG].")
        assert len(ids) == 8
        ids = [vocab.bos_id, vocab.unk_id] + ids  # anchors now at 6, 7, 8
        aset = extract_anchor_hidden(hidden, ids, vocab)
        assert np.array_equal(aset.h_nor.data[0], hidden.data[6])
        assert np.array_equal(aset.h_ano.data[0], hidden.data[7])
        assert np.array_equal(aset.h_seg.data[0], hidden.data[8])

    def test_missing_anchor_raises(self, vocab):
        hidden = T.tensor(np.zeros((4, 64)))
        ids = vocab.tokenize("Sure, it is [NOR][ANO]")  # no [SEG]
        with pytest.raises(AnchorsMissingError):
            extract_anchor_hidden(hidden, ids, vocab)

    def test_duplicate_anchor_uses_first(self, vocab):
        rng = np.random.default_rng(8)
        hidden = T.tensor(rng.normal(size=(8, 64)))
        ids = [vocab.nor_id, vocab.ano_id, vocab.seg_id, vocab.unk_id, vocab.seg_id]
        aset = extract_anchor_hidden(hidden, ids, vocab)
        # exhaustive scan oracle: first index holding each anchor id
        for vec, aid in ((aset.h_nor, vocab.nor_id), (aset.h_ano, vocab.ano_id),
                         (aset.h_seg, vocab.seg_id)):
            first = min(i for i, x in enumerate(ids) if x == aid)
            assert np.array_equal(vec.data[0], hidden.data[first])


class TestTokenRefiner:
    def test_zero_weights_zero_output(self, vocab):
        rng = np.random.default_rng(10)
        ref = TokenRefiner(rng)
        ref.lin2.weight.data[:] = 0.0
        hidden = T.tensor(rng.normal(size=(5, 64)))
        aset = extract_anchor_hidden(hidden, [vocab.nor_id, vocab.ano_id, vocab.seg_id], vocab)
        ref.refine(aset)
        assert np.all(aset.r_nor.data == 0.0)
        assert aset.r_seg.shape == (1, 32)

    def test_shared_weights_same_input_same_output(self, vocab):
        rng = np.random.default_rng(11)
        ref = TokenRefiner(rng)
        row = rng.normal(size=(1, 64))
        hidden = T.tensor(np.vstack([row, row, row]))
        aset = extract_anchor_hidden(hidden, [vocab.nor_id, vocab.ano_id, vocab.seg_id], vocab)
        ref.refine(aset)
        assert np.array_equal(aset.r_nor.data, aset.r_ano.data)
        assert np.array_equal(aset.r_nor.data, aset.r_seg.data)

    def test_gradient_through_both_layers(self, vocab):
        rng = np.random.default_rng(12)
        ref = TokenRefiner(rng)
        hidden = T.tensor(rng.normal(size=(3, 64)))
        w = rng.normal(size=(1, 32))

        def build():
            aset = extract_anchor_hidden(hidden, list(vocab.anchor_ids), vocab)
            ref.refine(aset)
            return T.sum_all(T.mul(aset.r_seg, T.tensor(w)))

        params = dict(ref.params("refiner"))
        errs = check_gradients(build, params)
        assert max(errs.values()) < 1e-4, errs

    def test_anchor_hidden_gradient_through_lm(self, vocab):
        """Hidden rows at anchor positions carry valid gradients back into the LM."""
        rng = np.random.default_rng(13)
        lm = make_lm(vocab, seed=13)
        ref = TokenRefiner(rng)
        prefix = random_prefix(rng)
        ids = vocab.tokenize("Sure, it is [NOR][ANO][SEG].")
        w = rng.normal(size=(1, 32))

        def build():
            seq = T.concat_tokens([prefix, lm.embed_text(ids)])
            _, hidden = lm.forward(seq, 8)
            aset = ref.refine(extract_anchor_hidden(hidden, ids, vocab))
            return T.sum_all(T.mul(aset.r_nor, T.tensor(w)))

        params = dict(lm.blocks[0].attn.q.params("q") + ref.params("ref"))
        errs = check_gradients(build, params, sample=6)
        assert max(errs.values()) < 1e-4, errs


class TestLowRankAdapter:
    def test_fresh_adapter_is_identity(self):
        rng = np.random.default_rng(14)
        lin = Linear(64, 64, rng)
        x = T.tensor(rng.normal(size=(5, 64)))
        with T.no_grad():
            before = lin(x).data.copy()
            lin.add_adapter(4, rng)
            after = lin(x).data
        assert np.array_equal(before, after)

    def test_rank4_adds_512_trainables(self):
        rng = np.random.default_rng(15)
        lin = Linear(64, 64, rng)
        lin.add_adapter(4, rng)
        added = sum(p.size for name, p in lin.params("l") if "lora" in name)
        assert added == 512
        trainable = {name for name, p in lin.params("l") if p.requires_grad}
        assert trainable == {"l.lora_a", "l.lora_b"}

    def test_rank_too_large(self):
        rng = np.random.default_rng(16)
        with pytest.raises(AdapterRankError):
            Linear(64, 32, rng).add_adapter(32, rng)

    def test_adapter_gradients(self):
        rng = np.random.default_rng(17)
        lin = Linear(16, 16, rng)
        lin.add_adapter(4, rng)
        lin.lora_a.data[:] = rng.normal(scale=0.1, size=lin.lora_a.shape)  # off zero
        x = rng.normal(size=(3, 16))
        w = rng.normal(size=(3, 16))

        def build():
            return T.sum_all(T.mul(lin(T.tensor(x)), T.tensor(w)))

        errs = check_gradients(build, {"a": lin.lora_a, "b": lin.lora_b})
        assert max(errs.values()) < 1e-4, errs
