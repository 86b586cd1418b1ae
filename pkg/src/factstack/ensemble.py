"""Snapshot ensembling, mean ensembling, and the stacking meta-learner.

Snapshots come from a single training pass under a cyclic learning-rate
schedule: a parameter checkpoint is captured at the end of every cycle, where
the rate bottoms out. The stacker is a 3-layer fully-connected network over
the concatenated out-of-fold probabilities of the base models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import Dataset, Instance, Label, preprocess_instance
from .encoder import EncoderParams, rehead, softmax, softmax_cross_entropy
from .optim import AdamWHyper, AdamWState, ScheduleConfig, TrainConfig, adamw_step
from .pipeline import (
    ClassifierModel, OofMatrix, PredictionVector, _run_classifier_training,
    predict,
)
from .tokenizer import Vocabulary, encode

__all__ = [
    "SnapshotSet", "StackerParams", "StackerConfig",
    "snapshot_train", "snapshot_predict", "mean_ensemble",
    "train_stacker", "stacker_predict", "save_stacker", "load_stacker",
]

STACKER_MAGIC = b"FSSTACK1"


@dataclass
class SnapshotSet:
    """Checkpoints captured at successive cycle ends of one training run."""

    snapshots: list[EncoderParams]
    cycle_steps: list[int]       # completed-step count at each capture
    classes: tuple[Label, ...]
    vocab: Vocabulary

    def __post_init__(self) -> None:
        if len(self.snapshots) != len(self.cycle_steps):
            raise ValueError("one capture step per snapshot required")
        if any(b <= a for a, b in zip(self.cycle_steps, self.cycle_steps[1:])):
            raise ValueError("cycle capture steps must be strictly increasing")

    def members(self) -> list[ClassifierModel]:
        return [ClassifierModel(params=p, classes=self.classes, vocab=self.vocab)
                for p in self.snapshots]


def snapshot_train(
    params: EncoderParams,
    train: Dataset,
    classes: Sequence[Label],
    vocab: Vocabulary,
    cfg: TrainConfig,
    cycles: int,
) -> tuple[SnapshotSet, list[tuple[int, float, float]]]:
    """One training pass under the cyclic schedule, capturing a checkpoint at
    the final step of every cycle."""
    if cycles < 2:
        raise ValueError(f"snapshot training needs cycles >= 2, got {cycles}")
    if cfg.total_steps % cycles != 0:
        raise ValueError(
            f"total_steps={cfg.total_steps} not divisible by cycles={cycles}"
        )
    classes = tuple(classes)
    if not train.is_labeled:
        raise ValueError("snapshot training requires a labeled dataset")
    labels = train.labels()
    if set(labels) - set(classes):
        raise ValueError("dataset contains classes outside the class list")

    if params.config.n_classes != len(classes):
        params = rehead(params, len(classes), cfg.seed)
    else:
        params = params.copy()
    class_index = {label: i for i, label in enumerate(classes)}
    targets = np.array([class_index[l] for l in labels], dtype=np.int64)
    encoded = [encode(vocab, preprocess_instance(inst), params.config.max_len) for inst in train]

    seg = cfg.total_steps // cycles
    capture_steps = {seg * (c + 1) for c in range(cycles)}
    schedule = ScheduleConfig(
        kind="cyclic", warmup_steps=0, peak_lr=cfg.peak_lr,
        total_steps=cfg.total_steps, cycles=cycles,
    )
    _, trace, captured = _run_classifier_training(
        params, encoded, targets, schedule, cfg, capture_steps=capture_steps,
    )
    steps = [s for s, _ in captured]
    snaps = [p for _, p in captured]
    return SnapshotSet(snapshots=snaps, cycle_steps=steps, classes=classes, vocab=vocab), trace


def mean_ensemble(preds: Sequence[PredictionVector]) -> PredictionVector:
    """Arithmetic mean of prediction vectors over the same class list.

    Members are accumulated in input order and divided once, so the result
    is bitwise reproducible for a fixed member order.
    """
    if not preds:
        raise ValueError("mean of an empty prediction list")
    acc = preds[0].probs.copy()
    for p in preds[1:]:
        if p.classes != preds[0].classes:
            raise ValueError("mismatched class lists")
        acc += p.probs
    return PredictionVector(classes=preds[0].classes, probs=acc / len(preds))


def snapshot_predict(snapshots: SnapshotSet, instance: Instance) -> PredictionVector:
    """Mean-ensemble the member checkpoints' predictions, in cycle order."""
    if not snapshots.snapshots:
        raise ValueError("empty snapshot set")
    return mean_ensemble([predict(m, instance) for m in snapshots.members()])


# ---------------------------------------------------------------------------
# stacking

@dataclass
class StackerConfig:
    hidden1: int = 64
    hidden2: int = 32
    lr: float = 1e-2
    total_steps: int = 400
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class StackerParams:
    """A 3-layer network mapping concatenated base probabilities to classes."""

    tensors: dict         # w1,b1,w2,b2,w3,b3
    classes: tuple[Label, ...]
    model_names: list[str]

    @property
    def input_width(self) -> int:
        return self.tensors["w1"].shape[0]

    def __post_init__(self) -> None:
        t = self.tensors
        chain = [t["w1"].shape[1], t["b1"].shape[0], t["w2"].shape[0]]
        chain2 = [t["w2"].shape[1], t["b2"].shape[0], t["w3"].shape[0]]
        if len(set(chain)) != 1 or len(set(chain2)) != 1:
            raise ValueError("stacker layer dimensions do not chain")
        if t["w3"].shape[1] != len(self.classes) or t["b3"].shape[0] != len(self.classes):
            raise ValueError("stacker output width must equal the class count")
        if self.input_width != len(self.model_names) * len(self.classes):
            raise ValueError("stacker input width must equal models x classes")


def _stacker_forward(t: dict, x: np.ndarray):
    z1 = x @ t["w1"] + t["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ t["w2"] + t["b2"]
    h2 = np.maximum(z2, 0.0)
    logits = h2 @ t["w3"] + t["b3"]
    return logits, (x, z1, h1, z2, h2)


def _stacker_backward(t: dict, cache, dlogits: np.ndarray) -> dict:
    x, z1, h1, z2, h2 = cache
    grads = {"w3": h2.T @ dlogits, "b3": dlogits.sum(axis=0)}
    dh2 = dlogits @ t["w3"].T
    dz2 = dh2 * (z2 > 0)
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ t["w2"].T
    dz1 = dh1 * (z1 > 0)
    grads["w1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def train_stacker(
    oof: OofMatrix,
    labels: Sequence[Label],
    cfg: Optional[StackerConfig] = None,
) -> StackerParams:
    """Fit the meta-learner on out-of-fold probabilities by full-batch AdamW
    cross-entropy minimization; deterministic given the seed."""
    cfg = cfg if cfg is not None else StackerConfig()
    if len(labels) != oof.values.shape[0]:
        raise ValueError(
            f"{len(labels)} labels for {oof.values.shape[0]} out-of-fold rows"
        )
    class_index = {label: i for i, label in enumerate(oof.classes)}
    try:
        y = np.array([class_index[l] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc} not in the matrix's class list") from exc

    d_in = oof.width
    c = len(oof.classes)
    rng = np.random.default_rng(cfg.seed)

    def he(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))

    t = {
        "w1": he(d_in, cfg.hidden1), "b1": np.zeros(cfg.hidden1),
        "w2": he(cfg.hidden1, cfg.hidden2), "b2": np.zeros(cfg.hidden2),
        "w3": he(cfg.hidden2, c), "b3": np.zeros(c),
    }
    state = AdamWState.init(t)
    hyper = AdamWHyper(base_lr=cfg.lr, weight_decay=cfg.weight_decay)
    x = oof.values
    for _ in range(cfg.total_steps):
        logits, cache = _stacker_forward(t, x)
        _, dlogits = softmax_cross_entropy(logits, y)
        grads = _stacker_backward(t, cache, dlogits)
        adamw_step(t, grads, state, hyper, cfg.lr)
    return StackerParams(tensors=t, classes=oof.classes, model_names=list(oof.model_names))


def stacker_predict(
    stacker: StackerParams,
    base_preds: Sequence[PredictionVector] | np.ndarray,
) -> PredictionVector:
    """Apply the meta-learner to concatenated base-model predictions.

    The concatenation order must match the model order the stacker was
    trained with; a width mismatch is rejected.
    """
    if isinstance(base_preds, np.ndarray):
        x = np.asarray(base_preds, dtype=np.float64)
    else:
        x = np.concatenate([p.probs for p in base_preds])
    if x.shape != (stacker.input_width,):
        raise ValueError(f"input width {x.shape} != expected ({stacker.input_width},)")
    logits, _ = _stacker_forward(stacker.tensors, x[np.newaxis, :])
    return PredictionVector(classes=stacker.classes, probs=softmax(logits[0]))


# ---------------------------------------------------------------------------
# stacker persistence: magic, json header, then float64 tensors

_STACKER_ORDER = ["w1", "b1", "w2", "b2", "w3", "b3"]


def save_stacker(stacker: StackerParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({
        "input": stacker.input_width,
        "hidden1": stacker.tensors["b1"].shape[0],
        "hidden2": stacker.tensors["b2"].shape[0],
        "classes": [l.index for l in stacker.classes],
        "model_names": stacker.model_names,
    }, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(STACKER_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in _STACKER_ORDER:
            fh.write(np.ascontiguousarray(stacker.tensors[name], dtype="<f8").tobytes())


def load_stacker(path: str | Path) -> StackerParams:
    path = Path(path)
    data = path.read_bytes()
    if data[: len(STACKER_MAGIC)] != STACKER_MAGIC:
        raise ValueError(f"{path}: not a stacker checkpoint (bad magic)")
    off = len(STACKER_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off: off + hlen].decode("utf-8"))
    off += hlen
    classes = tuple(Label(i) for i in meta["classes"])
    d_in, h1, h2, c = meta["input"], meta["hidden1"], meta["hidden2"], len(classes)
    shapes = {"w1": (d_in, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,),
              "w3": (h2, c), "b3": (c,)}
    tensors = {}
    for name in _STACKER_ORDER:
        n = int(np.prod(shapes[name]))
        end = off + 8 * n
        if end > len(data):
            raise ValueError(f"{path}: truncated stacker checkpoint")
        tensors[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shapes[name]).copy()
        off = end
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in stacker checkpoint")
    return StackerParams(tensors=tensors, classes=classes, model_names=list(meta["model_names"]))
