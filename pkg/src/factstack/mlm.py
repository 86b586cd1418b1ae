"""Dynamic token masking and the masked-language-model pretraining loop.

Per sequence, a fixed count of maskable positions is selected uniformly
without replacement: ``max(1, round(select_fraction * m))`` where ``m`` is the
number of non-special, non-padding positions (round = half away from zero).
Each selected position then independently becomes the MASK token, a random
content token, or stays unchanged, with the configured 0.80/0.10/0.10 split.
Every batch is re-masked freshly, so the corruption pattern over the corpus
changes from iteration to iteration.

The loss is mean categorical cross-entropy over the vocabulary at the
selected positions only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .corpus import Dataset, preprocess_instance
from .encoder import (
    EncoderConfig, EncoderParams, ForwardGraph, backward, forward,
    init_params, mlm_logits, softmax_cross_entropy, log_softmax,
)
from .optim import AdamWHyper, AdamWState, ScheduleConfig, TrainConfig, adamw_step, lr_warmup_linear
from .tokenizer import MASK_ID, N_RESERVED, TokenSequence, Vocabulary, encode

__all__ = [
    "MaskingConfig", "MaskedBatch", "PRETRAIN_DEFAULTS",
    "selection_count", "apply_masking", "mlm_loss", "pretrain",
]

#: The pretraining recipe: 3000 iterations, batch 64, linear decay after a
#: 500-step warmup to 1e-4, weight decay 0.01.
PRETRAIN_DEFAULTS = TrainConfig(
    total_steps=3000, batch_size=64, warmup_steps=500, peak_lr=1e-4,
    weight_decay=0.01, seed=0,
)


@dataclass
class MaskingConfig:
    select_fraction: float = 0.15
    mask_fraction: float = 0.80
    random_fraction: float = 0.10
    keep_fraction: float = 0.10

    def __post_init__(self) -> None:
        if not 0.0 < self.select_fraction < 1.0:
            raise ValueError("select_fraction must lie in (0, 1)")
        total = self.mask_fraction + self.random_fraction + self.keep_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"replacement fractions must sum to 1, got {total}")


@dataclass
class MaskedBatch:
    """Corrupted sequences plus what was selected and what stood there."""

    sequences: list[TokenSequence]
    positions: list[list[int]]   # selected positions per sequence, ascending
    originals: list[list[int]]   # true token ids at those positions

    def flat_targets(self) -> np.ndarray:
        return np.array([t for row in self.originals for t in row], dtype=np.int64)


def selection_count(m: int, fraction: float) -> int:
    """Number of positions to select among ``m`` maskable ones; never zero."""
    return max(1, math.floor(fraction * m + 0.5))


def apply_masking(
    batch: Sequence[TokenSequence],
    cfg: MaskingConfig,
    vocab_size: int,
    rng: np.random.Generator | int,
) -> MaskedBatch:
    """Corrupt a batch for MLM training; deterministic given the generator.

    Only non-special, non-padding positions (token id >= N_RESERVED under an
    attention mask of 1) are eligible. A sequence with no eligible position
    is passed through unchanged with a warning.
    """
    if not batch:
        raise ValueError("empty batch")
    if vocab_size <= N_RESERVED:
        raise ValueError("vocabulary has no non-special tokens")
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)

    sequences: list[TokenSequence] = []
    positions: list[list[int]] = []
    originals: list[list[int]] = []
    for s_idx, seq in enumerate(batch):
        maskable = [
            i for i, (tid, am) in enumerate(zip(seq.ids, seq.attention_mask))
            if am == 1 and tid >= N_RESERVED
        ]
        if not maskable:
            warnings.warn(f"sequence {s_idx} has no maskable positions; skipped")
            sequences.append(TokenSequence(list(seq.ids), list(seq.attention_mask)))
            positions.append([])
            originals.append([])
            continue
        k = selection_count(len(maskable), cfg.select_fraction)
        chosen = sorted(int(maskable[j]) for j in rng.choice(len(maskable), size=k, replace=False))
        ids = list(seq.ids)
        orig = []
        for pos in chosen:
            orig.append(ids[pos])
            u = rng.random()
            if u < cfg.mask_fraction:
                ids[pos] = MASK_ID
            elif u < cfg.mask_fraction + cfg.random_fraction:
                ids[pos] = int(rng.integers(N_RESERVED, vocab_size))
            # else: keep unchanged
        sequences.append(TokenSequence(ids, list(seq.attention_mask)))
        positions.append(chosen)
        originals.append(orig)
    return MaskedBatch(sequences=sequences, positions=positions, originals=originals)


def mlm_loss(logits: np.ndarray, originals: Sequence[int]) -> float:
    """Mean categorical cross-entropy at the selected positions."""
    targets = np.asarray(originals, dtype=np.int64)
    if logits.shape[0] == 0 or targets.shape[0] == 0:
        raise ValueError("empty position set")
    if logits.shape[0] != targets.shape[0]:
        raise ValueError("one logit row per selected position required")
    logp = log_softmax(logits, axis=-1)
    return -float(np.mean(logp[np.arange(len(targets)), targets]))


def pretrain(
    dataset: Dataset,
    vocab: Vocabulary,
    config: EncoderConfig,
    train: Optional[TrainConfig] = None,
    masking: Optional[MaskingConfig] = None,
    initial: Optional[EncoderParams] = None,
) -> tuple[EncoderParams, list[tuple[int, float, float]]]:
    """Run the MLM pretraining loop; returns params and the loss trace.

    Each iteration draws a fresh batch (uniformly with replacement) and a
    fresh masking pattern from a generator derived from (seed, iteration),
    so the run is reproducible and batches are independent streams.
    The trace holds one (step, lr, loss) row per optimizer step, with steps
    counted from 1.
    """
    if len(dataset) == 0:
        raise ValueError("empty pretraining corpus")
    train = train if train is not None else replace(PRETRAIN_DEFAULTS)
    masking = masking if masking is not None else MaskingConfig()
    if config.vocab_size != vocab.size:
        raise ValueError(
            f"encoder vocab_size {config.vocab_size} != vocabulary size {vocab.size}"
        )

    encoded = [encode(vocab, preprocess_instance(inst), config.max_len) for inst in dataset]
    params = initial.copy() if initial is not None else init_params(config, train.seed)
    state = AdamWState.init(params.tensors)
    hyper = AdamWHyper(base_lr=train.peak_lr, weight_decay=train.weight_decay)
    schedule = ScheduleConfig(
        kind="warmup-linear", warmup_steps=train.warmup_steps,
        peak_lr=train.peak_lr, total_steps=train.total_steps,
    )

    trace: list[tuple[int, float, float]] = []
    for it in range(train.total_steps):
        rng = np.random.default_rng((train.seed, it))
        idx = rng.choice(len(encoded), size=train.batch_size, replace=True)
        masked = apply_masking([encoded[j] for j in idx], masking, vocab.size, rng)
        targets = masked.flat_targets()
        if targets.size == 0:
            raise ValueError("batch had no maskable positions; corpus texts are degenerate")

        graph = ForwardGraph()
        hidden = forward(params, masked.sequences, train_mode=True, rng=rng, graph=graph)
        logits = mlm_logits(params, hidden, masked.positions, graph=graph)
        loss, dlogits = softmax_cross_entropy(logits, targets)
        graph.register_loss(dlogits, kind="mlm")
        grads = backward(params, graph)

        lr = lr_warmup_linear(it, schedule)
        adamw_step(params.tensors, grads, state, hyper, lr)
        trace.append((it + 1, lr, loss))
    return params, trace
