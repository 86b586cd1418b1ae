"""Supervised finetuning, k-fold cross-validation with out-of-fold collection,
and the two-stage refute-then-classify prediction flow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import ALL_LABELS, Dataset, FoldAssignment, Instance, Label, preprocess_instance
from .encoder import (
    EncoderConfig, EncoderParams, ForwardGraph, backward, class_logits,
    forward, init_params, rehead, softmax, softmax_cross_entropy,
)
from .optim import AdamWHyper, AdamWState, ScheduleConfig, TrainConfig, adamw_step, schedule_lr
from .prompt import FilterModel, refute_filter_predict
from .tokenizer import TokenSequence, Vocabulary, encode

__all__ = [
    "PredictionVector", "ClassifierModel", "ModelSpec", "OofMatrix",
    "CrossvalResult", "finetune", "predict", "predict_batch",
    "crossval_train", "two_stage_predict", "write_oof_csv", "read_oof_csv",
]

_PREDICT_CHUNK = 64


@dataclass
class PredictionVector:
    """A probability distribution over an ordered class list."""

    classes: tuple[Label, ...]
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.classes),):
            raise ValueError("one probability per class required")
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {self.probs.sum()}, expected 1")

    def argmax_label(self) -> Label:
        # np.argmax returns the first maximum: ties break to the lowest index
        return self.classes[int(np.argmax(self.probs))]


@dataclass
class ClassifierModel:
    """Encoder weights plus the class list its head predicts over."""

    params: EncoderParams
    classes: tuple[Label, ...]
    vocab: Vocabulary

    def __post_init__(self) -> None:
        if self.params.config.n_classes != len(self.classes):
            raise ValueError(
                f"head width {self.params.config.n_classes} != class count {len(self.classes)}"
            )


@dataclass
class ModelSpec:
    """One base model to train: its architecture, seed, and optional
    pretrained starting point."""

    name: str
    config: EncoderConfig
    seed: int
    base_params: Optional[EncoderParams] = None

    def __post_init__(self) -> None:
        if not self.name or "__" in self.name:
            raise ValueError(f"model name must be nonempty without '__': {self.name!r}")


def _run_classifier_training(
    params: EncoderParams,
    encoded: list[TokenSequence],
    targets: np.ndarray,
    schedule: ScheduleConfig,
    cfg: TrainConfig,
    capture_steps: Optional[set[int]] = None,
) -> tuple[EncoderParams, list[tuple[int, float, float]], list[tuple[int, EncoderParams]]]:
    """The shared supervised loop: cross-entropy on the class head under the
    given schedule. ``capture_steps`` are completed-step counts at which a
    parameter snapshot is taken (used by snapshot ensembling)."""
    state = AdamWState.init(params.tensors)
    hyper = AdamWHyper(base_lr=cfg.peak_lr, weight_decay=cfg.weight_decay)
    trace: list[tuple[int, float, float]] = []
    snapshots: list[tuple[int, EncoderParams]] = []
    n = len(encoded)
    for it in range(cfg.total_steps):
        rng = np.random.default_rng((cfg.seed, it))
        idx = rng.choice(n, size=cfg.batch_size, replace=True)
        batch = [encoded[j] for j in idx]

        graph = ForwardGraph()
        hidden = forward(params, batch, train_mode=True, rng=rng, graph=graph)
        logits = class_logits(params, hidden, graph=graph)
        loss, dlogits = softmax_cross_entropy(logits, targets[idx])
        graph.register_loss(dlogits, kind="cls")
        grads = backward(params, graph)

        lr = schedule_lr(it, schedule)
        adamw_step(params.tensors, grads, state, hyper, lr)
        trace.append((it + 1, lr, loss))
        if capture_steps and (it + 1) in capture_steps:
            snapshots.append((it + 1, params.copy()))
    return params, trace, snapshots


def finetune(
    params: EncoderParams,
    train: Dataset,
    classes: Sequence[Label],
    vocab: Vocabulary,
    cfg: Optional[TrainConfig] = None,
) -> tuple[ClassifierModel, list[tuple[int, float, float]]]:
    """Supervised finetuning of the classification head (and whole encoder).

    Uses the warmup-then-cosine schedule. If the incoming parameters carry a
    head of a different width (e.g. a 5-way head being adapted to the 4-class
    stage), the head is re-initialized at the requested width from the run
    seed. The input params are never mutated.
    """
    cfg = cfg if cfg is not None else TrainConfig()
    classes = tuple(classes)
    if not train.is_labeled:
        raise ValueError("finetuning requires a labeled dataset")
    labels = train.labels()
    present = set(labels)
    extra = present - set(classes)
    if extra:
        raise ValueError(f"classes present in data but absent from class list: {sorted(l.canonical_name for l in extra)}")
    missing = set(classes) - present
    if missing:
        raise ValueError(f"classes missing from training data: {sorted(l.canonical_name for l in missing)}")
    if params.config.vocab_size != vocab.size:
        raise ValueError("params vocabulary size does not match the vocabulary")

    if params.config.n_classes != len(classes):
        params = rehead(params, len(classes), cfg.seed)
    else:
        params = params.copy()
    class_index = {label: i for i, label in enumerate(classes)}
    targets = np.array([class_index[l] for l in labels], dtype=np.int64)
    encoded = [encode(vocab, preprocess_instance(inst), params.config.max_len) for inst in train]
    schedule = ScheduleConfig(
        kind="warmup-cosine", warmup_steps=cfg.warmup_steps,
        peak_lr=cfg.peak_lr, total_steps=cfg.total_steps,
    )
    params, trace, _ = _run_classifier_training(params, encoded, targets, schedule, cfg)
    return ClassifierModel(params=params, classes=classes, vocab=vocab), trace


def predict_batch(model: ClassifierModel, instances: Sequence[Instance]) -> list[PredictionVector]:
    """Deterministic eval-mode predictions for a batch of instances."""
    out: list[PredictionVector] = []
    max_len = model.params.config.max_len
    for start in range(0, len(instances), _PREDICT_CHUNK):
        chunk = instances[start: start + _PREDICT_CHUNK]
        encoded = [encode(model.vocab, preprocess_instance(inst), max_len) for inst in chunk]
        hidden = forward(model.params, encoded)
        probs = softmax(class_logits(model.params, hidden), axis=-1)
        for row in probs:
            out.append(PredictionVector(classes=model.classes, probs=row))
    return out


def predict(model: ClassifierModel, instance: Instance) -> PredictionVector:
    """Class distribution for a single instance."""
    return predict_batch(model, [instance])[0]


@dataclass
class OofMatrix:
    """Out-of-fold base-model predictions aligned to training instances.

    Row i holds, for every model spec, the class probabilities predicted by
    the fold model that never saw instance i during training; ``fold_of``
    records which validation fold produced the row.
    """

    instance_ids: list[str]
    fold_of: list[int]
    model_names: list[str]
    classes: tuple[Label, ...]
    values: np.ndarray  # (n_instances, n_models * n_classes)

    def __post_init__(self) -> None:
        n, w = self.values.shape
        if n != len(self.instance_ids) or n != len(self.fold_of):
            raise ValueError("row count mismatch")
        if w != len(self.model_names) * len(self.classes):
            raise ValueError(
                f"width {w} != models ({len(self.model_names)}) x classes ({len(self.classes)})"
            )

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def block(self, model_name: str) -> np.ndarray:
        """The probability columns belonging to one model."""
        s = self.model_names.index(model_name)
        c = len(self.classes)
        return self.values[:, s * c: (s + 1) * c]


@dataclass
class CrossvalResult:
    """Per-(spec, fold) models with their training-index provenance, plus the
    assembled out-of-fold matrix."""

    models: dict  # (spec_name, fold) -> ClassifierModel
    train_indices: dict  # (spec_name, fold) -> tuple of dataset indices trained on
    oof: OofMatrix
    traces: dict  # (spec_name, fold) -> loss trace


def crossval_train(
    dataset: Dataset,
    folds: FoldAssignment,
    specs: Sequence[ModelSpec],
    classes: Sequence[Label],
    vocab: Vocabulary,
    cfg: Optional[TrainConfig] = None,
) -> CrossvalResult:
    """Train every spec on every train-fold split and collect leakage-free
    out-of-fold predictions in original instance order.

    Per-run training seeds derive deterministically from the base seed as
    ``cfg.seed + spec_index * k + fold``.
    """
    cfg = cfg if cfg is not None else TrainConfig()
    classes = tuple(classes)
    if len(folds.assignment) != len(dataset):
        raise ValueError("fold assignment does not cover the dataset")
    if not specs:
        raise ValueError("at least one model spec required")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("model spec names must be unique")

    n, c = len(dataset), len(classes)
    values = np.zeros((n, len(specs) * c))
    models: dict = {}
    train_indices: dict = {}
    traces: dict = {}
    for s_idx, spec in enumerate(specs):
        base = spec.base_params if spec.base_params is not None else init_params(spec.config, spec.seed)
        for fold in range(folds.k):
            tr_idx = folds.train_indices(fold)
            va_idx = folds.fold_indices(fold)
            subset = Dataset([dataset[i] for i in tr_idx], provenance=dataset.provenance)
            fold_cfg = replace(cfg, seed=cfg.seed + s_idx * folds.k + fold)
            model, trace = finetune(base, subset, classes, vocab, fold_cfg)
            preds = predict_batch(model, [dataset[i] for i in va_idx])
            for i, pred in zip(va_idx, preds):
                values[i, s_idx * c: (s_idx + 1) * c] = pred.probs
            models[(spec.name, fold)] = model
            train_indices[(spec.name, fold)] = tuple(tr_idx)
            traces[(spec.name, fold)] = trace

    oof = OofMatrix(
        instance_ids=[inst.id for inst in dataset],
        fold_of=list(folds.assignment),
        model_names=names,
        classes=classes,
        values=values,
    )
    return CrossvalResult(models=models, train_indices=train_indices, oof=oof, traces=traces)


def _mean_probs(preds: Sequence[PredictionVector]) -> PredictionVector:
    # fixed accumulation order: input order, then a single divide
    acc = preds[0].probs.copy()
    for p in preds[1:]:
        if p.classes != preds[0].classes:
            raise ValueError("mismatched class lists")
        acc += p.probs
    return PredictionVector(classes=preds[0].classes, probs=acc / len(preds))


def two_stage_predict(
    filter_model: FilterModel,
    classifier4,
    instance: Instance,
    threshold: float = 0.5,
) -> tuple[Label, PredictionVector]:
    """Gate on the refute filter, then classify among the other four classes.

    ``classifier4`` is a 4-class :class:`ClassifierModel` or a sequence of
    them (mean-ensembled in order). The returned vector always spans the full
    five classes: a refute decision puts probability 1 on the refute class,
    otherwise the 4-class distribution is embedded with refute mass 0. Ties
    resolve to the lowest class index.
    """
    is_refute, _binary = refute_filter_predict(filter_model, instance, threshold)
    if is_refute:
        probs = np.zeros(len(ALL_LABELS))
        probs[Label.REFUTE.index] = 1.0
        return Label.REFUTE, PredictionVector(classes=ALL_LABELS, probs=probs)

    members = [classifier4] if isinstance(classifier4, ClassifierModel) else list(classifier4)
    pred4 = _mean_probs([predict(m, instance) for m in members])
    probs = np.zeros(len(ALL_LABELS))
    for label, p in zip(pred4.classes, pred4.probs):
        if label is Label.REFUTE:
            raise ValueError("the 4-class stage must not contain the refute class")
        probs[label.index] = p
    full = PredictionVector(classes=ALL_LABELS, probs=probs)
    return full.argmax_label(), full


# ---------------------------------------------------------------------------
# out-of-fold matrix persistence

def write_oof_csv(oof: OofMatrix, path: str | Path) -> None:
    """Columns: id, fold, then one ``<model>__<Class_Name>`` column per
    (model, class) pair in block order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["id", "fold"]
    for name in oof.model_names:
        header += [f"{name}__{label.canonical_name}" for label in oof.classes]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, inst_id in enumerate(oof.instance_ids):
            writer.writerow([inst_id, oof.fold_of[i]] + [repr(float(v)) for v in oof.values[i]])


def read_oof_csv(path: str | Path) -> OofMatrix:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["id", "fold"]:
            raise ValueError(f"{path}: not an out-of-fold matrix file")
        model_names: list[str] = []
        classes: list[Label] = []
        for col in header[2:]:
            if "__" not in col:
                raise ValueError(f"{path}: bad column name {col!r}")
            name, cat = col.rsplit("__", 1)
            if name not in model_names:
                model_names.append(name)
            label = Label.from_string(cat)
            if len(model_names) == 1:
                classes.append(label)
        expected = ["id", "fold"]
        for name in model_names:
            expected += [f"{name}__{label.canonical_name}" for label in classes]
        if header != expected:
            raise ValueError(f"{path}: inconsistent model/class column blocks")
        ids, fold_of, rows = [], [], []
        for row in reader:
            ids.append(row[0])
            fold_of.append(int(row[1]))
            rows.append([float(x) for x in row[2:]])
    return OofMatrix(
        instance_ids=ids, fold_of=fold_of, model_names=model_names,
        classes=tuple(classes), values=np.array(rows, dtype=np.float64),
    )
