"""Claim/document records, CSV ingestion, stratified folds, and synthetic corpora.

The on-disk format is a UTF-8 CSV with the exact header
``id,claim,claim_ocr,document,document_ocr,category`` (``category`` may be
absent for unlabeled test files). Quoting follows RFC 4180, which is what the
stdlib csv module produces and consumes by default.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

__all__ = [
    "Label",
    "Instance",
    "Dataset",
    "FoldAssignment",
    "DatasetError",
    "CSV_HEADER",
    "load_dataset",
    "save_dataset",
    "preprocess_instance",
    "stratified_kfold",
    "generate_synthetic",
]

CSV_HEADER = ["id", "claim", "claim_ocr", "document", "document_ocr", "category"]


class DatasetError(ValueError):
    """Raised for malformed dataset files and ill-formed records."""


class Label(Enum):
    """The five claim categories, indexed in canonical report order."""

    SUPPORT_MULTIMODAL = 0
    SUPPORT_TEXT = 1
    INSUFFICIENT_MULTIMODAL = 2
    INSUFFICIENT_TEXT = 3
    REFUTE = 4

    @property
    def index(self) -> int:
        return self.value

    @property
    def canonical_name(self) -> str:
        # e.g. "Support_Multimodal"
        return "_".join(part.capitalize() for part in self.name.split("_"))

    @classmethod
    def from_string(cls, text: str) -> "Label":
        """Parse a category string; separators and case are not significant."""
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        for label in cls:
            if label.name.lower() == key:
                return label
        raise DatasetError(f"unknown category string: {text!r}")

    def __str__(self) -> str:
        return self.canonical_name


#: Canonical class order used for every vector, matrix, and report.
ALL_LABELS: tuple[Label, ...] = tuple(Label)

#: The four downstream classes once refute instances are filtered out.
NON_REFUTE_LABELS: tuple[Label, ...] = tuple(l for l in Label if l is not Label.REFUTE)


@dataclass
class Instance:
    """A single claim record with its OCR and reference-document texts."""

    id: str
    claim_text: str
    claim_ocr_text: str = ""
    document_text: str = ""
    document_ocr_text: str = ""
    label: Optional[Label] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise DatasetError("instance id must be nonempty")
        if not self.claim_text:
            raise DatasetError(f"instance {self.id!r}: claim_text must be nonempty")


@dataclass
class Dataset:
    """An ordered, immutable-by-convention collection of instances."""

    instances: list[Instance]
    provenance: str = "train"

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for inst in self.instances:
            if inst.id in seen:
                raise DatasetError(f"duplicate instance id: {inst.id!r}")
            seen.add(inst.id)
        labeled = [inst.label is not None for inst in self.instances]
        if any(labeled) and not all(labeled):
            raise DatasetError("dataset mixes labeled and unlabeled instances")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[Instance]:
        return iter(self.instances)

    def __getitem__(self, i: int) -> Instance:
        return self.instances[i]

    @property
    def is_labeled(self) -> bool:
        return bool(self.instances) and self.instances[0].label is not None

    def labels(self) -> list[Label]:
        if not self.is_labeled:
            raise DatasetError("dataset is unlabeled")
        return [inst.label for inst in self.instances]  # type: ignore[misc]


def load_dataset(path: str | Path, has_labels: bool = True) -> Dataset:
    """Read a dataset CSV.

    The header must match ``CSV_HEADER`` exactly, except that the trailing
    ``category`` column may be omitted when ``has_labels`` is False.
    Row numbers in error messages are 1-based and include the header.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, expected header {CSV_HEADER}")
        if header == CSV_HEADER:
            n_cols = 6
        elif header == CSV_HEADER[:5]:
            if has_labels:
                raise DatasetError(f"{path}: has_labels requested but no category column")
            n_cols = 5
        else:
            raise DatasetError(f"{path}: bad header {header}, expected {CSV_HEADER}")

        instances: list[Instance] = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                raise DatasetError(f"{path}: row {row_no}: expected {n_cols} fields, got {len(row)}")
            label: Optional[Label] = None
            if has_labels:
                try:
                    label = Label.from_string(row[5])
                except DatasetError as exc:
                    raise DatasetError(f"{path}: row {row_no}: {exc}") from exc
            try:
                instances.append(
                    Instance(
                        id=row[0],
                        claim_text=row[1],
                        claim_ocr_text=row[2],
                        document_text=row[3],
                        document_ocr_text=row[4],
                        label=label,
                    )
                )
            except DatasetError as exc:
                raise DatasetError(f"{path}: row {row_no}: {exc}") from exc
    tag = "train" if has_labels else "test"
    return Dataset(instances, provenance=tag)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset CSV with the canonical header (category column included
    only when the dataset is labeled)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labeled = dataset.is_labeled
    header = CSV_HEADER if labeled else CSV_HEADER[:5]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for inst in dataset:
            row = [inst.id, inst.claim_text, inst.claim_ocr_text,
                   inst.document_text, inst.document_ocr_text]
            if labeled:
                row.append(inst.label.canonical_name)  # type: ignore[union-attr]
            writer.writerow(row)


def preprocess_instance(instance: Instance, max_chars: Optional[int] = None) -> str:
    """Model input text: claim concatenated with its OCR text.

    Reference-document text is intentionally excluded from the model input.
    A single space joins the two parts; the joiner is dropped when the OCR
    text is empty. ``max_chars`` clips at character level; token-level
    clipping is the tokenizer's job.
    """
    if instance.claim_ocr_text:
        text = instance.claim_text + " " + instance.claim_ocr_text
    else:
        text = instance.claim_text
    if max_chars is not None:
        text = text[:max_chars]
    return text


@dataclass
class FoldAssignment:
    """A stratified k-fold partition of dataset indices."""

    k: int
    assignment: list[int]  # instance index -> fold index in 0..k-1
    seed: int

    def fold_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f != fold]


def stratified_kfold(dataset: Dataset, k: int, seed: int) -> FoldAssignment:
    """Assign each instance to one of ``k`` folds, stratified by label.

    Per-class index lists are shuffled with a seeded generator and dealt
    round-robin. The dealing position carries over from one class to the
    next so that overall fold sizes also differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = dataset.labels()
    by_class: dict[Label, list[int]] = {}
    for i, label in enumerate(labels):
        by_class.setdefault(label, []).append(i)
    for label, idxs in by_class.items():
        if len(idxs) < k:
            raise ValueError(
                f"class {label.canonical_name} has {len(idxs)} members, fewer than k={k}"
            )

    rng = random.Random(seed)
    assignment = [0] * len(dataset)
    cursor = 0
    for label in sorted(by_class, key=lambda l: l.index):
        idxs = list(by_class[label])
        rng.shuffle(idxs)
        for idx in idxs:
            assignment[idx] = cursor % k
            cursor += 1
    return FoldAssignment(k=k, assignment=assignment, seed=seed)


# Word pools for the synthetic corpus. Negation markers give refute claims a
# lexical signal the prompt filter can latch onto; affirmation markers do the
# same for the positive side and guarantee the default verbalizer words exist
# in any vocabulary built from this corpus.
_NEGATION_MARKERS = ["not", "never", "fake", "hoax", "false", "incorrect", "irrelevant"]
_AFFIRMATION_MARKERS = ["indeed", "verified", "true", "correct", "relevant"]
_KEYWORDS_PER_CLASS = 8


def generate_synthetic(
    n_classes: int,
    per_class: int,
    vocab_size: int,
    seed: int,
    provenance: str = "synthetic",
) -> Dataset:
    """Generate a deterministic, linearly separable labeled corpus.

    Each class owns a disjoint keyword pool; every claim mixes filler words
    with keywords from its own class only, so a bag-of-words classifier can
    reach perfect training accuracy. Refute claims additionally carry
    negation markers, other classes occasionally carry affirmation markers.
    """
    if n_classes <= 0 or per_class <= 0 or vocab_size <= 0:
        raise ValueError("n_classes, per_class, and vocab_size must be positive")
    if n_classes > len(ALL_LABELS):
        raise ValueError(f"at most {len(ALL_LABELS)} classes available, got {n_classes}")
    n_reserved = n_classes * _KEYWORDS_PER_CLASS + len(_NEGATION_MARKERS) + len(_AFFIRMATION_MARKERS)
    n_filler = vocab_size - n_reserved
    if n_filler < 10:
        raise ValueError(
            f"vocab_size={vocab_size} too small for {n_classes} classes "
            f"(needs at least {n_reserved + 10})"
        )

    keywords = [
        [f"topic{c}word{j}" for j in range(_KEYWORDS_PER_CLASS)] for c in range(n_classes)
    ]
    filler = [f"filler{j:03d}" for j in range(n_filler)]
    rng = random.Random(seed)

    def sentence(cls: int, n_fill: int, n_key: int) -> str:
        words = rng.sample(filler, min(n_fill, len(filler)))
        words += rng.sample(keywords[cls], min(n_key, _KEYWORDS_PER_CLASS))
        rng.shuffle(words)
        return " ".join(words)

    instances: list[Instance] = []
    idx = 0
    for c in range(n_classes):
        label = ALL_LABELS[c]
        for _ in range(per_class):
            claim = sentence(c, rng.randint(6, 10), rng.randint(3, 5))
            if label is Label.REFUTE:
                markers = rng.sample(_NEGATION_MARKERS, rng.randint(2, 3))
                claim = claim + " " + " ".join(markers)
            elif rng.random() < 0.5:
                claim = claim + " " + rng.choice(_AFFIRMATION_MARKERS)
            ocr = sentence(c, rng.randint(2, 4), rng.randint(1, 2)) if rng.random() < 0.7 else ""
            doc = " ".join(rng.sample(filler, min(8, len(filler))))
            instances.append(
                Instance(
                    id=f"syn-{idx:05d}",
                    claim_text=claim,
                    claim_ocr_text=ocr,
                    document_text=doc,
                    label=label,
                )
            )
            idx += 1
    return Dataset(instances, provenance=provenance)
