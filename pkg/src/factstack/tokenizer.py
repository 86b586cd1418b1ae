"""Word-level vocabulary and deterministic encoding to fixed-length id sequences.

Five ids are reserved: PAD=0, UNK=1, CLS=2, SEP=3, MASK=4. Content ids start
at 5. Vocabularies are persisted as plain text, one token per line, where the
line number (0-based) equals ``id - 5``; the reserved tokens are implicit.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

__all__ = [
    "PAD_ID", "UNK_ID", "CLS_ID", "SEP_ID", "MASK_ID", "N_RESERVED",
    "Vocabulary", "TokenSequence", "tokenize", "normalize",
    "build_vocab", "encode", "decode",
]

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
MASK_ID = 4
N_RESERVED = 5

_RESERVED_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word tokens; punctuation marks stand alone."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """The canonical text form a decode of an encode reproduces."""
    return " ".join(tokenize(text))


@dataclass
class Vocabulary:
    """Immutable token <-> id mapping with fixed reserved ids."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def content_ids(self) -> range:
        """Ids of non-reserved tokens."""
        return range(N_RESERVED, self.size)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for token in self.id_to_token[N_RESERVED:]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                tokens.append(line.rstrip("\n"))
        return cls._from_content_tokens(tokens)

    @classmethod
    def _from_content_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        id_to_token = list(_RESERVED_TOKENS) + list(tokens)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(token_to_id=token_to_id, id_to_token=id_to_token)


@dataclass
class TokenSequence:
    """Fixed-length id sequence: CLS, content..., SEP, PAD padding.

    ``attention_mask`` is 1 for real tokens (including CLS/SEP/MASK) and 0
    for padding; real tokens always precede padding. ``mask_position``, when
    set, is the index of the single MASK token a cloze prompt cares about.
    """

    ids: list[int]
    attention_mask: list[int]
    mask_position: Optional[int] = None

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.attention_mask):
            raise ValueError("ids and attention_mask length mismatch")
        if self.mask_position is not None and self.ids[self.mask_position] != MASK_ID:
            raise ValueError("mask_position does not point at a MASK token")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return sum(self.attention_mask)


def build_vocab(texts: Iterable[str], max_size: int, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary over the tokenized corpus.

    Ties in frequency break lexicographically so two builds over the same
    corpus are identical. ``max_size`` bounds the total size including the
    five reserved ids.
    """
    if max_size <= N_RESERVED:
        raise ValueError(f"max_size must exceed {N_RESERVED}, got {max_size}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0 or not counts:
        raise ValueError("empty corpus")
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary._from_content_tokens(ranked[: max_size - N_RESERVED])


def encode(vocab: Vocabulary, text: str, max_len: int) -> TokenSequence:
    """Encode text as [CLS] tokens... [SEP] with PAD fill, exactly ``max_len`` long.

    Content tokens beyond ``max_len - 2`` are dropped from the right.
    Out-of-vocabulary tokens map to UNK.
    """
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    content = [vocab.lookup(tok) for tok in tokenize(text)][: max_len - 2]
    ids = [CLS_ID] + content + [SEP_ID]
    n_real = len(ids)
    ids += [PAD_ID] * (max_len - n_real)
    mask = [1] * n_real + [0] * (max_len - n_real)
    return TokenSequence(ids=ids, attention_mask=mask)


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Space-joined tokens for the given ids; reserved ids are omitted."""
    out = []
    for i in ids:
        if i < 0 or i >= vocab.size:
            raise ValueError(f"token id {i} out of range for vocabulary of size {vocab.size}")
        if i >= N_RESERVED:
            out.append(vocab.id_to_token[i])
    return " ".join(out)
