import numpy as np
import pytest

from factstack.corpus import (
    ALL_LABELS, Dataset, Label, NON_REFUTE_LABELS, generate_synthetic,
    preprocess_instance, stratified_kfold,
)
from factstack.encoder import EncoderConfig, init_params
from factstack.optim import TrainConfig
from factstack.pipeline import (
    ClassifierModel, ModelSpec, PredictionVector, crossval_train,
    finetune, predict, read_oof_csv, two_stage_predict, write_oof_csv,
)
from factstack.prompt import refute_filter_train
from factstack.tokenizer import build_vocab


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(5, 10, 300, seed=6)
    texts = [preprocess_instance(i) for i in ds]
    texts.append("the statement is . true false correct incorrect relevant irrelevant")
    vocab = build_vocab(texts, 400, 1)
    cfg = EncoderConfig(vocab_size=vocab.size, max_len=32, d_model=8, n_heads=2,
                        n_layers=1, d_ff=16, dropout_rate=0.1, n_classes=5)
    params = init_params(cfg, seed=1)
    return ds, vocab, cfg, params


def _cfg(steps=5, seed=3):
    return TrainConfig(total_steps=steps, batch_size=8, warmup_steps=min(2, steps // 2),
                       peak_lr=1e-3, weight_decay=0.01, seed=seed)


class TestPredictionVector:
    def test_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            PredictionVector(classes=ALL_LABELS, probs=np.array([0.5, 0.2, 0.1, 0.1, 0.2]))

    def test_non_negative(self):
        with pytest.raises(ValueError, match="non-negative"):
            PredictionVector(classes=ALL_LABELS, probs=np.array([1.2, -0.2, 0, 0, 0]))

    def test_tie_breaks_to_lowest_index(self):
        pv = PredictionVector(classes=ALL_LABELS, probs=np.full(5, 0.2))
        assert pv.argmax_label() is Label.SUPPORT_MULTIMODAL


class TestFinetune:
    def test_default_step_count_matches_recipe(self):
        assert TrainConfig().total_steps == 2000
        assert TrainConfig().batch_size == 32
        assert TrainConfig().warmup_steps == 100
        assert TrainConfig().peak_lr == 5e-6

    def test_records_one_trace_row_per_step(self, setup):
        ds, vocab, _, params = setup
        model, trace = finetune(params, ds, ALL_LABELS, vocab, _cfg(steps=6))
        assert len(trace) == 6

    def test_same_seed_identical_models(self, setup):
        ds, vocab, _, params = setup
        m1, _ = finetune(params, ds, ALL_LABELS, vocab, _cfg(steps=4))
        m2, _ = finetune(params, ds, ALL_LABELS, vocab, _cfg(steps=4))
        for name in m1.params.tensors:
            assert np.array_equal(m1.params.tensors[name], m2.params.tensors[name])

    def test_reheads_for_four_class_stage(self, setup):
        ds, vocab, _, params = setup
        four = Dataset([i for i in ds if i.label is not Label.REFUTE])
        model, _ = finetune(params, four, NON_REFUTE_LABELS, vocab, _cfg(steps=3))
        assert model.params.config.n_classes == 4
        assert model.classes == NON_REFUTE_LABELS

    def test_class_in_data_but_not_in_list_rejected(self, setup):
        ds, vocab, _, params = setup
        with pytest.raises(ValueError, match="absent from class list"):
            finetune(params, ds, NON_REFUTE_LABELS, vocab, _cfg(steps=3))

    def test_class_in_list_but_not_in_data_rejected(self, setup):
        ds, vocab, _, params = setup
        only_two = Dataset([i for i in ds
                            if i.label in (Label.SUPPORT_TEXT, Label.REFUTE)])
        with pytest.raises(ValueError, match="missing from training data"):
            finetune(params, only_two, ALL_LABELS, vocab, _cfg(steps=3))

    def test_unlabeled_rejected(self, setup):
        _, vocab, _, params = setup
        from factstack.corpus import Instance
        unl = Dataset([Instance(id="u1", claim_text="x")], provenance="test")
        with pytest.raises(ValueError, match="labeled"):
            finetune(params, unl, ALL_LABELS, vocab, _cfg(steps=3))


class TestPredict:
    def test_distribution_properties(self, setup):
        ds, vocab, _, params = setup
        model, _ = finetune(params, ds, ALL_LABELS, vocab, _cfg(steps=3))
        pv = predict(model, ds[0])
        assert pv.classes == ALL_LABELS
        assert len(pv.probs) == 5
        assert abs(pv.probs.sum() - 1.0) <= 1e-9
        again = predict(model, ds[0])
        assert np.array_equal(pv.probs, again.probs)

    def test_argmax_invariant_under_logit_shift(self, setup):
        # softmax of shifted logits has identical argmax; verify through the head
        ds, vocab, _, params = setup
        model, _ = finetune(params, ds, ALL_LABELS, vocab, _cfg(steps=3))
        shifted = model.params.copy()
        shifted.tensors["cls_b"] = shifted.tensors["cls_b"] + 13.0
        shifted_model = ClassifierModel(params=shifted, classes=ALL_LABELS, vocab=vocab)
        for inst in list(ds)[:5]:
            assert predict(model, inst).argmax_label() is \
                predict(shifted_model, inst).argmax_label()


class TestCrossval:
    def test_oof_width_and_coverage(self, setup):
        ds, vocab, cfg, params = setup
        folds = stratified_kfold(ds, k=5, seed=2)
        specs = [ModelSpec(name=f"m{j}", config=cfg, seed=j) for j in range(4)]
        result = crossval_train(ds, folds, specs, ALL_LABELS, vocab, _cfg(steps=2))
        oof = result.oof
        assert oof.width == 4 * 5  # specs x classes
        # every instance got exactly one prediction per spec: blocks sum to 1
        for spec in specs:
            block = oof.block(spec.name)
            assert np.allclose(block.sum(axis=1), 1.0, atol=1e-9)

    def test_no_leakage_by_provenance(self, setup):
        ds, vocab, cfg, params = setup
        folds = stratified_kfold(ds, k=5, seed=2)
        specs = [ModelSpec(name="m0", config=cfg, seed=0)]
        result = crossval_train(ds, folds, specs, ALL_LABELS, vocab, _cfg(steps=2))
        for i in range(len(ds)):
            producing_fold = result.oof.fold_of[i]
            trained_on = result.train_indices[("m0", producing_fold)]
            assert i not in trained_on

    def test_duplicate_spec_names_rejected(self, setup):
        ds, vocab, cfg, _ = setup
        folds = stratified_kfold(ds, k=5, seed=2)
        specs = [ModelSpec(name="m", config=cfg, seed=0),
                 ModelSpec(name="m", config=cfg, seed=1)]
        with pytest.raises(ValueError, match="unique"):
            crossval_train(ds, folds, specs, ALL_LABELS, vocab, _cfg(steps=2))

    def test_oof_csv_round_trip(self, setup, tmp_path):
        ds, vocab, cfg, _ = setup
        folds = stratified_kfold(ds, k=5, seed=2)
        specs = [ModelSpec(name="m0", config=cfg, seed=0),
                 ModelSpec(name="m1", config=cfg, seed=1)]
        oof = crossval_train(ds, folds, specs, ALL_LABELS, vocab, _cfg(steps=2)).oof
        p = tmp_path / "oof.csv"
        write_oof_csv(oof, p)
        again = read_oof_csv(p)
        assert again.instance_ids == oof.instance_ids
        assert again.fold_of == oof.fold_of
        assert again.model_names == oof.model_names
        assert again.classes == oof.classes
        assert np.array_equal(again.values, oof.values)

    def test_bad_oof_header_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("foo,bar\n1,2\n")
        with pytest.raises(ValueError, match="out-of-fold"):
            read_oof_csv(p)


def _zero_head_model(setup_tuple, classes):
    """A classifier whose logits are all zero: exact ties everywhere."""
    ds, vocab, cfg, params = setup_tuple
    from factstack.encoder import rehead
    p = rehead(params, len(classes), seed=0)
    p.tensors["cls_w"][:] = 0.0
    p.tensors["cls_b"][:] = 0.0
    return ClassifierModel(params=p, classes=classes, vocab=vocab)


@pytest.fixture(scope="module")
def filter_model(setup):
    ds, vocab, _, params = setup
    model, _ = refute_filter_train(ds, params, vocab, _cfg(steps=4))
    return model


class TestTwoStage:
    def test_filter_gate_forces_refute(self, setup, filter_model):
        ds, vocab, cfg, params = setup
        clf4 = _zero_head_model(setup, NON_REFUTE_LABELS)
        # threshold 0 makes any nonzero negative mass a refute decision
        label, pv = two_stage_predict(filter_model, clf4, ds[0], threshold=0.0)
        assert label is Label.REFUTE
        assert pv.probs[Label.REFUTE.index] == 1.0
        assert pv.probs.sum() == pytest.approx(1.0)

    def test_other_branch_never_outputs_refute(self, setup, filter_model):
        ds, _, _, _ = setup
        clf4 = _zero_head_model(setup, NON_REFUTE_LABELS)
        # threshold 1.0 can never be strictly exceeded
        label, pv = two_stage_predict(filter_model, clf4, ds[0], threshold=1.0)
        assert label is not Label.REFUTE
        assert pv.probs[Label.REFUTE.index] == 0.0

    def test_exact_tie_resolves_to_lowest_index(self, setup, filter_model):
        ds, _, _, _ = setup
        clf4 = _zero_head_model(setup, NON_REFUTE_LABELS)
        label, pv = two_stage_predict(filter_model, clf4, ds[0], threshold=1.0)
        assert label is Label.SUPPORT_MULTIMODAL  # lowest index among the four
        assert np.allclose(pv.probs[:4], 0.25)

    def test_ensemble_of_four_class_models_accepted(self, setup, filter_model):
        ds, _, _, _ = setup
        clf4 = _zero_head_model(setup, NON_REFUTE_LABELS)
        label, pv = two_stage_predict(filter_model, [clf4, clf4], ds[0], threshold=1.0)
        assert label is Label.SUPPORT_MULTIMODAL

    def test_five_class_stage_rejected(self, setup, filter_model):
        ds, _, _, _ = setup
        clf5 = _zero_head_model(setup, ALL_LABELS)
        with pytest.raises(ValueError, match="refute"):
            two_stage_predict(filter_model, clf5, ds[0], threshold=1.0)
