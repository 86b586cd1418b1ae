"""Cloze prompting: template application, verbalizer answer mapping, and the
binary refute filter.

The multi-class task is split in two: a cloze prompt asks the MLM head to
fill a single mask slot, the distribution over the verbalizer's label words
is renormalized, and the summed negative-word mass decides whether an
instance is a refute. Everything else flows on to the 4-class stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import Dataset, Instance, Label, preprocess_instance
from .encoder import (
    EncoderParams, ForwardGraph, backward, forward, mlm_logits,
    log_softmax, softmax,
)
from .optim import AdamWHyper, AdamWState, ScheduleConfig, TrainConfig, adamw_step, lr_warmup_cosine
from .tokenizer import (
    CLS_ID, MASK_ID, PAD_ID, SEP_ID, TokenSequence, Vocabulary, tokenize,
)

__all__ = [
    "INPUT_SLOT", "MASK_SLOT", "DEFAULT_TEMPLATE",
    "DEFAULT_NEGATIVE_WORDS", "DEFAULT_POSITIVE_WORDS",
    "PromptTemplate", "Verbalizer", "BinaryPrediction", "FilterModel",
    "apply_template", "answer_map", "refute_filter_train", "refute_filter_predict",
]

INPUT_SLOT = "<INPUT>"
MASK_SLOT = "<MASK>"
DEFAULT_TEMPLATE = "<INPUT>. The statement is <MASK>"
DEFAULT_NEGATIVE_WORDS = ("false", "irrelevant", "incorrect")
DEFAULT_POSITIVE_WORDS = ("true", "relevant", "correct")


@dataclass
class PromptTemplate:
    """A pattern with exactly one input slot and one mask slot."""

    pattern: str = DEFAULT_TEMPLATE

    def __post_init__(self) -> None:
        for slot in (INPUT_SLOT, MASK_SLOT):
            if self.pattern.count(slot) != 1:
                raise ValueError(f"template must contain exactly one {slot}: {self.pattern!r}")

    def segments(self) -> list[tuple[str, str]]:
        """The pattern as ('literal'|'input'|'mask', text) pieces in order."""
        i_in = self.pattern.index(INPUT_SLOT)
        i_mk = self.pattern.index(MASK_SLOT)
        first, second = ((INPUT_SLOT, i_in), (MASK_SLOT, i_mk)) if i_in < i_mk \
            else ((MASK_SLOT, i_mk), (INPUT_SLOT, i_in))
        out: list[tuple[str, str]] = []
        out.append(("literal", self.pattern[: first[1]]))
        out.append(("input" if first[0] == INPUT_SLOT else "mask", ""))
        out.append(("literal", self.pattern[first[1] + len(first[0]): second[1]]))
        out.append(("input" if second[0] == INPUT_SLOT else "mask", ""))
        out.append(("literal", self.pattern[second[1] + len(second[0]):]))
        return out


@dataclass
class Verbalizer:
    """Label words mapped to single vocabulary tokens, split by polarity."""

    negative_words: tuple[str, ...]
    positive_words: tuple[str, ...]
    negative_ids: tuple[int, ...]
    positive_ids: tuple[int, ...]

    @classmethod
    def from_words(
        cls,
        vocab: Vocabulary,
        negative_words: Sequence[str] = DEFAULT_NEGATIVE_WORDS,
        positive_words: Sequence[str] = DEFAULT_POSITIVE_WORDS,
    ) -> "Verbalizer":
        if not negative_words or not positive_words:
            raise ValueError("both label-word sets must be nonempty")
        if set(negative_words) & set(positive_words):
            raise ValueError("label-word sets must be disjoint")

        def resolve(words: Sequence[str]) -> tuple[int, ...]:
            ids = []
            for word in words:
                toks = tokenize(word)
                if len(toks) != 1:
                    raise ValueError(f"label word {word!r} is not a single token")
                if toks[0] not in vocab:
                    raise ValueError(f"label word {word!r} missing from vocabulary")
                ids.append(vocab.token_to_id[toks[0]])
            return tuple(ids)

        return cls(
            negative_words=tuple(negative_words),
            positive_words=tuple(positive_words),
            negative_ids=resolve(negative_words),
            positive_ids=resolve(positive_words),
        )

    @property
    def all_ids(self) -> tuple[int, ...]:
        return self.negative_ids + self.positive_ids


@dataclass
class BinaryPrediction:
    p_negative: float
    p_positive: float

    def __post_init__(self) -> None:
        for p in (self.p_negative, self.p_positive):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if abs(self.p_negative + self.p_positive - 1.0) > 1e-9:
            raise ValueError("binary probabilities must sum to 1")


def apply_template(
    template: PromptTemplate,
    text: str,
    vocab: Vocabulary,
    max_len: int,
) -> TokenSequence:
    """Fill the template and encode it, recording the mask position.

    When the filled prompt would exceed ``max_len``, the input text is
    truncated from its right end; the template's literal tokens and the mask
    slot always survive intact.
    """
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    segs = template.segments()
    literal_ids = {
        i: [vocab.lookup(t) for t in tokenize(seg_text)]
        for i, (kind, seg_text) in enumerate(segs) if kind == "literal"
    }
    input_ids = [vocab.lookup(t) for t in tokenize(text)]
    overhead = sum(len(v) for v in literal_ids.values()) + 1 + 2  # mask + CLS/SEP
    room = max_len - overhead
    if room < 0:
        raise ValueError(f"template alone exceeds max_len={max_len}")
    input_ids = input_ids[:room]

    ids = [CLS_ID]
    mask_position = None
    for i, (kind, _) in enumerate(segs):
        if kind == "literal":
            ids.extend(literal_ids[i])
        elif kind == "input":
            ids.extend(input_ids)
        else:
            mask_position = len(ids)
            ids.append(MASK_ID)
    ids.append(SEP_ID)
    n_real = len(ids)
    ids += [PAD_ID] * (max_len - n_real)
    attention = [1] * n_real + [0] * (max_len - n_real)
    return TokenSequence(ids=ids, attention_mask=attention, mask_position=mask_position)


def answer_map(mask_logits: np.ndarray, verbalizer: Verbalizer) -> BinaryPrediction:
    """Project mask-position logits onto the binary classes.

    The softmax is restricted to the verbalizer's word ids; each class's
    probability is the summed mass of its words. Invariant under adding a
    constant to all logits.
    """
    mask_logits = np.asarray(mask_logits, dtype=np.float64)
    if mask_logits.ndim != 1:
        raise ValueError("mask_logits must be a single vocabulary-sized vector")
    ids = np.array(verbalizer.all_ids, dtype=np.int64)
    if ids.max() >= mask_logits.shape[0]:
        raise ValueError("verbalizer word id outside the logit vector")
    p = softmax(mask_logits[ids])
    n_neg = len(verbalizer.negative_ids)
    p_neg = float(np.sum(p[:n_neg]))
    p_pos = float(np.sum(p[n_neg:]))
    # guard against float drift before the dataclass validates the pair
    total = p_neg + p_pos
    return BinaryPrediction(p_negative=p_neg / total, p_positive=p_pos / total)


@dataclass
class FilterModel:
    """A trained refute filter: encoder weights plus its prompt setting."""

    params: EncoderParams
    vocab: Vocabulary
    template: PromptTemplate
    verbalizer: Verbalizer


def _binary_targets(verbalizer: Verbalizer, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Restricted target distributions (over the verbalizer ids, in all_ids
    order) for the negative and positive classes; mass split evenly across
    each class's words."""
    n_neg, n_pos = len(verbalizer.negative_ids), len(verbalizer.positive_ids)
    q_neg = np.zeros(n_neg + n_pos)
    q_neg[:n_neg] = 1.0 / n_neg
    q_pos = np.zeros(n_neg + n_pos)
    q_pos[n_neg:] = 1.0 / n_pos
    return q_neg, q_pos


def refute_filter_train(
    train: Dataset,
    params: EncoderParams,
    vocab: Vocabulary,
    cfg: Optional[TrainConfig] = None,
    template: Optional[PromptTemplate] = None,
    verbalizer: Optional[Verbalizer] = None,
) -> tuple[FilterModel, list[tuple[int, float, float]]]:
    """Finetune the MLM head through the prompt on the binary refute task.

    Refute instances become the negative class; the other four classes merge
    into the positive class. The loss is cross-entropy of the restricted
    label-word distribution against the class target. Uses the finetuning
    schedule (warmup then cosine annealing). Returns the model and its loss
    trace.
    """
    if not train.is_labeled:
        raise ValueError("filter training requires a labeled dataset")
    labels = train.labels()
    if not any(l is Label.REFUTE for l in labels):
        raise ValueError("dataset has no refute instance; binary task is degenerate")
    cfg = cfg if cfg is not None else TrainConfig()
    template = template if template is not None else PromptTemplate()
    verbalizer = verbalizer if verbalizer is not None else Verbalizer.from_words(vocab)
    if params.config.vocab_size != vocab.size:
        raise ValueError("params vocabulary size does not match the vocabulary")

    max_len = params.config.max_len
    encoded = [apply_template(template, preprocess_instance(inst), vocab, max_len)
               for inst in train]
    q_neg, q_pos = _binary_targets(verbalizer, vocab.size)
    targets = np.stack([q_neg if l is Label.REFUTE else q_pos for l in labels])
    word_ids = np.array(verbalizer.all_ids, dtype=np.int64)

    params = params.copy()
    state = AdamWState.init(params.tensors)
    hyper = AdamWHyper(base_lr=cfg.peak_lr, weight_decay=cfg.weight_decay)
    schedule = ScheduleConfig(
        kind="warmup-cosine", warmup_steps=cfg.warmup_steps,
        peak_lr=cfg.peak_lr, total_steps=cfg.total_steps,
    )

    trace: list[tuple[int, float, float]] = []
    n = len(encoded)
    for it in range(cfg.total_steps):
        rng = np.random.default_rng((cfg.seed, it))
        idx = rng.choice(n, size=cfg.batch_size, replace=True)
        batch = [encoded[j] for j in idx]
        positions = [[seq.mask_position] for seq in batch]
        q = targets[idx]

        graph = ForwardGraph()
        hidden = forward(params, batch, train_mode=True, rng=rng, graph=graph)
        logits = mlm_logits(params, hidden, positions, graph=graph)
        sub = logits[:, word_ids]
        logp = log_softmax(sub, axis=-1)
        loss = -float(np.mean(np.sum(q * logp, axis=-1)))
        dsub = (softmax(sub, axis=-1) - q) / len(batch)
        dlogits = np.zeros_like(logits)
        dlogits[:, word_ids] = dsub
        graph.register_loss(dlogits, kind="mlm")
        grads = backward(params, graph)

        lr = lr_warmup_cosine(it, schedule)
        adamw_step(params.tensors, grads, state, hyper, lr)
        trace.append((it + 1, lr, loss))

    model = FilterModel(params=params, vocab=vocab, template=template, verbalizer=verbalizer)
    return model, trace


def refute_filter_predict(
    model: FilterModel,
    instance: Instance,
    threshold: float = 0.5,
) -> tuple[bool, BinaryPrediction]:
    """Decide refute-vs-other for one instance.

    Refute requires the summed negative-word mass to strictly exceed the
    threshold; a tie goes to the positive side.
    """
    seq = apply_template(
        model.template, preprocess_instance(instance), model.vocab,
        model.params.config.max_len,
    )
    hidden = forward(model.params, [seq])
    logits = mlm_logits(model.params, hidden, [[seq.mask_position]])
    pred = answer_map(logits[0], model.verbalizer)
    return pred.p_negative > threshold, pred
