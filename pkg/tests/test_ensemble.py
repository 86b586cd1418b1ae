import numpy as np
import pytest

from factstack.corpus import ALL_LABELS, generate_synthetic, preprocess_instance
from factstack.encoder import EncoderConfig, init_params
from factstack.ensemble import (
    SnapshotSet, StackerConfig, load_stacker, mean_ensemble, save_stacker,
    snapshot_predict, snapshot_train, stacker_predict, train_stacker,
)
from factstack.optim import TrainConfig
from factstack.pipeline import OofMatrix, PredictionVector, predict
from factstack.tokenizer import build_vocab


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(5, 10, 300, seed=8)
    vocab = build_vocab([preprocess_instance(i) for i in ds], 400, 1)
    cfg = EncoderConfig(vocab_size=vocab.size, max_len=32, d_model=8, n_heads=2,
                        n_layers=1, d_ff=16, dropout_rate=0.1, n_classes=5)
    return ds, vocab, cfg, init_params(cfg, seed=1)


def _pv(*probs):
    return PredictionVector(classes=ALL_LABELS[: len(probs)], probs=np.array(probs))


class TestMeanEnsemble:
    def test_identical_members_unchanged(self):
        p = _pv(0.2, 0.3, 0.5)
        out = mean_ensemble([p, p, p])
        assert np.allclose(out.probs, p.probs)

    def test_two_point_masses_average(self):
        out = mean_ensemble([_pv(1.0, 0.0), _pv(0.0, 1.0)])
        assert np.array_equal(out.probs, np.array([0.5, 0.5]))

    def test_order_invariant(self):
        a, b, c = _pv(0.7, 0.2, 0.1), _pv(0.1, 0.8, 0.1), _pv(0.3, 0.3, 0.4)
        x = mean_ensemble([a, b, c])
        y = mean_ensemble([c, a, b])
        assert np.allclose(x.probs, y.probs, atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            mean_ensemble([])

    def test_mismatched_class_lists_rejected(self):
        with pytest.raises(ValueError, match="class lists"):
            mean_ensemble([_pv(1.0, 0.0), _pv(0.5, 0.3, 0.2)])


class TestSnapshot:
    def _train(self, setup, total=6, cycles=3, seed=4):
        ds, vocab, cfg, params = setup
        tc = TrainConfig(total_steps=total, batch_size=8, warmup_steps=0,
                         peak_lr=1e-3, weight_decay=0.01, seed=seed)
        return snapshot_train(params, ds, ALL_LABELS, vocab, tc, cycles=cycles)

    def test_one_snapshot_per_cycle_at_boundaries(self, setup):
        snaps, trace = self._train(setup, total=6, cycles=3)
        assert len(snaps.snapshots) == 3
        assert snaps.cycle_steps == [2, 4, 6]
        assert len(trace) == 6  # a single training pass, every step counted once

    def test_total_steps_independent_of_cycles(self, setup):
        _, t2 = self._train(setup, total=12, cycles=2)
        _, t3 = self._train(setup, total=12, cycles=3)
        assert len(t2) == len(t3) == 12

    def test_cycles_below_two_rejected(self, setup):
        with pytest.raises(ValueError, match="cycles"):
            self._train(setup, total=6, cycles=1)

    def test_indivisible_rejected(self, setup):
        with pytest.raises(ValueError, match="divisible"):
            self._train(setup, total=7, cycles=3)

    def test_single_member_equals_plain_predict(self, setup):
        ds, vocab, _, _ = setup
        snaps, _ = self._train(setup)
        one = SnapshotSet(snapshots=[snaps.snapshots[0]], cycle_steps=[snaps.cycle_steps[0]],
                          classes=snaps.classes, vocab=snaps.vocab)
        member = one.members()[0]
        assert np.array_equal(snapshot_predict(one, ds[0]).probs,
                              predict(member, ds[0]).probs)

    def test_equals_mean_of_member_predictions_bitwise(self, setup):
        ds, _, _, _ = setup
        snaps, _ = self._train(setup)
        inst = ds[5]
        got = snapshot_predict(snaps, inst)
        acc = predict(snaps.members()[0], inst).probs.copy()
        for m in snaps.members()[1:]:
            acc += predict(m, inst).probs
        expected = acc / len(snaps.snapshots)
        assert np.array_equal(got.probs, expected)
        assert abs(got.probs.sum() - 1.0) <= 1e-9


def _adversary_oof(n=400, n_classes=5, seed=0, honest=0.8, liar=0.9):
    """Model A reports the true posterior, model B confidently points at the
    next class over: the mean is fooled, a meta-learner is not."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n)
    a = np.full((n, n_classes), (1 - honest) / (n_classes - 1))
    a[np.arange(n), y] = honest
    b = np.full((n, n_classes), (1 - liar) / (n_classes - 1))
    b[np.arange(n), (y + 1) % n_classes] = liar
    oof = OofMatrix(
        instance_ids=[f"i{j}" for j in range(n)],
        fold_of=[j % 5 for j in range(n)],
        model_names=["honest", "liar"],
        classes=ALL_LABELS[:n_classes],
        values=np.concatenate([a, b], axis=1),
    )
    labels = [ALL_LABELS[c] for c in y]
    return oof, labels


class TestStacker:
    def test_input_width(self):
        oof, labels = _adversary_oof(n=200)
        stacker = train_stacker(oof, labels, StackerConfig(total_steps=50, seed=1))
        assert stacker.input_width == 2 * 5

    def test_four_spec_width(self):
        # 4 specs x 5 classes -> 20 input columns
        rng = np.random.default_rng(0)
        n = 60
        vals = rng.dirichlet(np.ones(5), size=(n, 4)).reshape(n, 20)
        oof = OofMatrix(instance_ids=[f"i{j}" for j in range(n)],
                        fold_of=[0] * n, model_names=["a", "b", "c", "d"],
                        classes=ALL_LABELS, values=vals)
        labels = [ALL_LABELS[j % 5] for j in range(n)]
        stacker = train_stacker(oof, labels, StackerConfig(total_steps=10, seed=0))
        assert stacker.input_width == 20

    def test_deterministic(self):
        oof, labels = _adversary_oof(n=150)
        cfg = StackerConfig(total_steps=40, seed=9)
        s1 = train_stacker(oof, labels, cfg)
        s2 = train_stacker(oof, labels, cfg)
        for name in s1.tensors:
            assert np.array_equal(s1.tensors[name], s2.tensors[name])

    def test_beats_mean_on_adversary(self):
        # the constructed-adversary oracle: stacker accuracy must exceed the
        # mean ensemble by a wide margin (the full-size gate runs in acceptance)
        oof, labels = _adversary_oof(n=400, seed=3)
        test_oof, test_labels = _adversary_oof(n=200, seed=4)
        stacker = train_stacker(oof, labels, StackerConfig(total_steps=300, seed=2))

        def accuracy(pred_labels):
            return np.mean([p is t for p, t in zip(pred_labels, test_labels)])

        stack_preds, mean_preds = [], []
        for row in test_oof.values:
            stack_preds.append(stacker_predict(stacker, row).argmax_label())
            half = len(row) // 2
            pa = PredictionVector(classes=ALL_LABELS, probs=row[:half])
            pb = PredictionVector(classes=ALL_LABELS, probs=row[half:])
            mean_preds.append(mean_ensemble([pa, pb]).argmax_label())
        assert accuracy(stack_preds) >= accuracy(mean_preds) + 0.10

    def test_column_order_sensitivity(self):
        # permuting the base-model blocks at predict time must change outputs
        oof, labels = _adversary_oof(n=300, seed=5)
        stacker = train_stacker(oof, labels, StackerConfig(total_steps=200, seed=2))
        row = oof.values[0]
        half = len(row) // 2
        swapped = np.concatenate([row[half:], row[:half]])
        a = stacker_predict(stacker, row)
        b = stacker_predict(stacker, swapped)
        assert not np.allclose(a.probs, b.probs)

    def test_width_mismatch_rejected(self):
        oof, labels = _adversary_oof(n=100)
        stacker = train_stacker(oof, labels, StackerConfig(total_steps=10, seed=0))
        with pytest.raises(ValueError, match="width"):
            stacker_predict(stacker, np.zeros(7))

    def test_label_count_mismatch_rejected(self):
        oof, labels = _adversary_oof(n=100)
        with pytest.raises(ValueError, match="labels"):
            train_stacker(oof, labels[:-1], StackerConfig(total_steps=5))

    def test_prediction_distribution(self):
        oof, labels = _adversary_oof(n=100)
        stacker = train_stacker(oof, labels, StackerConfig(total_steps=20, seed=0))
        pv = stacker_predict(stacker, oof.values[0])
        assert len(pv.probs) == 5
        assert abs(pv.probs.sum() - 1.0) <= 1e-9
        again = stacker_predict(stacker, oof.values[0])
        assert np.array_equal(pv.probs, again.probs)

    def test_save_load_round_trip(self, tmp_path):
        oof, labels = _adversary_oof(n=100)
        stacker = train_stacker(oof, labels, StackerConfig(total_steps=10, seed=0))
        p = tmp_path / "stacker.bin"
        save_stacker(stacker, p)
        again = load_stacker(p)
        assert again.classes == stacker.classes
        assert again.model_names == stacker.model_names
        for name in stacker.tensors:
            assert np.array_equal(stacker.tensors[name], again.tensors[name])
