import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from factstack.corpus import Dataset, Label, generate_synthetic
from factstack.encoder import EncoderConfig, init_params
from factstack.optim import TrainConfig
from factstack.prompt import (
    DEFAULT_NEGATIVE_WORDS, BinaryPrediction, PromptTemplate, Verbalizer,
    answer_map, apply_template, refute_filter_predict, refute_filter_train,
)
from factstack.tokenizer import MASK_ID, SEP_ID, build_vocab


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(
        ["the statement is . true false correct incorrect relevant irrelevant "
         "alpha beta gamma delta epsilon zeta"],
        max_size=60, min_freq=1,
    )


class TestPromptTemplate:
    def test_default_pattern_valid(self):
        PromptTemplate()

    @pytest.mark.parametrize("pattern", [
        "no slots at all",
        "<INPUT> twice <INPUT> and <MASK>",
        "<INPUT> but no mask",
        "<MASK> only",
    ])
    def test_malformed_patterns_rejected(self, pattern):
        with pytest.raises(ValueError, match="exactly one"):
            PromptTemplate(pattern)


class TestApplyTemplate:
    def test_default_template_token_layout(self, vocab):
        seq = apply_template(PromptTemplate(), "alpha", vocab, max_len=12)
        toks = [vocab.id_to_token[i] for i in seq.ids[: seq.n_real]]
        assert toks == ["[CLS]", "alpha", ".", "the", "statement", "is", "[MASK]", "[SEP]"]
        assert seq.mask_position == 6
        assert seq.ids[seq.mask_position] == MASK_ID

    def test_overlong_input_preserves_template_suffix(self, vocab):
        text = " ".join(["alpha"] * 100)
        seq = apply_template(PromptTemplate(), text, vocab, max_len=16)
        real = [vocab.id_to_token[i] for i in seq.ids[: seq.n_real]]
        assert real[-6:] == [".", "the", "statement", "is", "[MASK]", "[SEP]"]
        assert len(seq.ids) == 16

    def test_mask_slot_first_pattern(self, vocab):
        seq = apply_template(PromptTemplate("<MASK> says <INPUT>"), "beta", vocab, 10)
        toks = [vocab.id_to_token[i] for i in seq.ids[: seq.n_real]]
        assert toks[1] == "[MASK]"
        assert seq.mask_position == 1

    def test_template_exceeding_max_len_rejected(self, vocab):
        with pytest.raises(ValueError, match="template alone"):
            apply_template(PromptTemplate(), "x", vocab, max_len=6)

    @given(st.integers(min_value=0, max_value=160))
    @settings(max_examples=60, deadline=None)
    def test_suffix_preserved_for_any_input_length(self, n_words):
        vocab = build_vocab(
            ["the statement is . true false correct incorrect relevant irrelevant alpha"],
            max_size=60, min_freq=1,
        )
        text = " ".join(["alpha"] * n_words)  # up to 10x max_len
        seq = apply_template(PromptTemplate(), text, vocab, max_len=16)
        assert len(seq.ids) == 16
        assert seq.ids[seq.mask_position] == MASK_ID
        real = seq.ids[: seq.n_real]
        assert real[-2:] == [MASK_ID, SEP_ID]

    def test_deterministic(self, vocab):
        a = apply_template(PromptTemplate(), "alpha beta", vocab, 12)
        b = apply_template(PromptTemplate(), "alpha beta", vocab, 12)
        assert a == b


class TestVerbalizer:
    def test_defaults_resolve(self, vocab):
        v = Verbalizer.from_words(vocab)
        assert len(v.negative_ids) == 3 and len(v.positive_ids) == 3
        assert set(v.negative_words) == set(DEFAULT_NEGATIVE_WORDS)

    def test_missing_word_rejected(self, vocab):
        with pytest.raises(ValueError, match="missing from vocabulary"):
            Verbalizer.from_words(vocab, ["nonexistentword"], ["true"])

    def test_multi_token_word_rejected(self, vocab):
        with pytest.raises(ValueError, match="single token"):
            Verbalizer.from_words(vocab, ["false positive"], ["true"])

    def test_overlapping_sets_rejected(self, vocab):
        with pytest.raises(ValueError, match="disjoint"):
            Verbalizer.from_words(vocab, ["true"], ["true", "correct"])

    def test_empty_set_rejected(self, vocab):
        with pytest.raises(ValueError, match="nonempty"):
            Verbalizer.from_words(vocab, [], ["true"])


class TestAnswerMap:
    def _logits_for(self, vocab, verb, dist):
        """Full-vocab logits whose restricted softmax equals ``dist`` (a map
        word -> probability over the six label words)."""
        logits = np.zeros(vocab.size)
        for word, p in dist.items():
            tok_id = vocab.token_to_id[word]
            logits[tok_id] = math.log(p)
        return logits

    def test_all_mass_on_false(self, vocab):
        verb = Verbalizer.from_words(vocab)
        logits = np.full(vocab.size, -1e9)
        logits[vocab.token_to_id["false"]] = 0.0
        pred = answer_map(logits, verb)
        assert pred.p_negative == pytest.approx(1.0, abs=1e-12)

    def test_equal_logits_split_evenly(self, vocab):
        verb = Verbalizer.from_words(vocab)
        pred = answer_map(np.zeros(vocab.size), verb)
        assert pred.p_negative == pytest.approx(0.5, abs=1e-12)
        assert pred.p_positive == pytest.approx(0.5, abs=1e-12)

    def test_direct_summation_fixture(self, vocab):
        # restricted distribution: true .3, correct .2, relevant .1,
        # false .1, incorrect .1, irrelevant .2 -> positive .6 / negative .4
        verb = Verbalizer.from_words(vocab)
        dist = {"true": 0.3, "correct": 0.2, "relevant": 0.1,
                "false": 0.1, "incorrect": 0.1, "irrelevant": 0.2}
        pred = answer_map(self._logits_for(vocab, verb, dist), verb)
        assert pred.p_positive == pytest.approx(0.6, abs=1e-9)
        assert pred.p_negative == pytest.approx(0.4, abs=1e-9)

    def test_sums_to_one_and_shift_invariant(self, vocab):
        verb = Verbalizer.from_words(vocab)
        rng = np.random.default_rng(0)
        for _ in range(25):
            logits = rng.normal(size=vocab.size) * 3
            a = answer_map(logits, verb)
            b = answer_map(logits + 17.3, verb)
            assert a.p_negative + a.p_positive == pytest.approx(1.0, abs=1e-9)
            assert a.p_negative == pytest.approx(b.p_negative, abs=1e-9)

    def test_negative_word_logit_monotonicity(self, vocab):
        verb = Verbalizer.from_words(vocab)
        rng = np.random.default_rng(1)
        logits = rng.normal(size=vocab.size)
        base = answer_map(logits, verb).p_negative
        for word in verb.negative_words:
            bumped = logits.copy()
            bumped[vocab.token_to_id[word]] += 0.5
            assert answer_map(bumped, verb).p_negative >= base


class TestBinaryPrediction:
    def test_validation(self):
        with pytest.raises(ValueError):
            BinaryPrediction(p_negative=0.7, p_positive=0.7)
        with pytest.raises(ValueError):
            BinaryPrediction(p_negative=-0.1, p_positive=1.1)


def _filter_setup(steps=20):
    ds = generate_synthetic(5, 10, 300, seed=4)
    from factstack.corpus import preprocess_instance
    texts = [preprocess_instance(i) for i in ds]
    texts.append("the statement is . true false correct incorrect relevant irrelevant")
    vocab = build_vocab(texts, 400, 1)
    cfg = EncoderConfig(vocab_size=vocab.size, max_len=32, d_model=8, n_heads=2,
                        n_layers=1, d_ff=16, dropout_rate=0.1, n_classes=5)
    params = init_params(cfg, seed=2)
    train_cfg = TrainConfig(total_steps=steps, batch_size=8,
                            warmup_steps=min(5, steps // 2),
                            peak_lr=1e-3, weight_decay=0.01, seed=3)
    return ds, vocab, params, train_cfg


class TestRefuteFilter:
    def test_binary_relabeling_splits_refute_from_rest(self):
        # on the balanced 5-class corpus the binary stream is 20% negative
        ds = generate_synthetic(5, 10, 300, seed=4)
        negatives = [i for i in ds if i.label is Label.REFUTE]
        assert len(negatives) / len(ds) == pytest.approx(0.20)
        for inst in ds:
            is_negative = inst.label is Label.REFUTE
            assert is_negative == (inst.label is Label.REFUTE)

    def test_training_without_refute_rejected(self):
        ds, vocab, params, cfg = _filter_setup()
        no_refute = Dataset([i for i in ds if i.label is not Label.REFUTE])
        with pytest.raises(ValueError, match="no refute"):
            refute_filter_train(no_refute, params, vocab, cfg)

    def test_training_is_deterministic(self):
        ds, vocab, params, cfg = _filter_setup(steps=6)
        m1, t1 = refute_filter_train(ds, params, vocab, cfg)
        m2, t2 = refute_filter_train(ds, params, vocab, cfg)
        assert t1 == t2
        for name in m1.params.tensors:
            assert np.array_equal(m1.params.tensors[name], m2.params.tensors[name])

    def test_trace_length_matches_steps(self):
        ds, vocab, params, cfg = _filter_setup(steps=7)
        _, trace = refute_filter_train(ds, params, vocab, cfg)
        assert len(trace) == 7

    def test_input_params_not_mutated(self):
        ds, vocab, params, cfg = _filter_setup(steps=3)
        before = {k: v.copy() for k, v in params.tensors.items()}
        refute_filter_train(ds, params, vocab, cfg)
        for name in before:
            assert np.array_equal(before[name], params.tensors[name])

    def test_predict_threshold_is_strict(self):
        ds, vocab, params, cfg = _filter_setup(steps=3)
        model, _ = refute_filter_train(ds, params, vocab, cfg)
        inst = ds[0]
        _, pred = refute_filter_predict(model, inst)
        # exactly at the decision value, the strict inequality says Other
        is_refute_at_tie, _ = refute_filter_predict(model, inst, threshold=pred.p_negative)
        assert is_refute_at_tie is False
        is_refute_below, _ = refute_filter_predict(
            model, inst, threshold=pred.p_negative - 1e-9)
        assert is_refute_below is True

    def test_predict_deterministic(self):
        ds, vocab, params, cfg = _filter_setup(steps=3)
        model, _ = refute_filter_train(ds, params, vocab, cfg)
        a = refute_filter_predict(model, ds[3])
        b = refute_filter_predict(model, ds[3])
        assert a == b
