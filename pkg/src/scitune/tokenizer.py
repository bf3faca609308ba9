"""Word-level tokenizer with reserved control and visual-position tokens.

The vocabulary is closed over the training corpora (synthetic text has a
small closed vocabulary), so word-level tokenization with an UNK fallback
is sufficient; subword merges are out of scope.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

# Reserved marker a rendered context uses to stand in for the image; it is
# expanded to k IMG positions at encode time. Ordinary text never produces
# IMG ids: word tokenization splits "<image>" into plain tokens.
IMAGE_MARKER = "<image>"

UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation marks become single-char tokens."""
    return _WORD_RE.findall(text.lower())


def normalize(text: str) -> str:
    """The canonical text form a decode round trip reproduces."""
    return " ".join(tokenize(text))


@dataclass
class Vocab:
    """Bijective token/id map. Ids 0..3 are BOS/EOS/PAD/IMG; id 4 is UNK."""

    BOS = 0
    EOS = 1
    PAD = 2
    IMG = 3

    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK_TOKEN:
            raise ValueError(f"first ordinary token must be {UNK_TOKEN!r}")
        self.token_to_id = {tok: i + 4 for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    @property
    def unk_id(self) -> int:
        return 4

    @property
    def size(self) -> int:
        return 4 + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def serialize(self) -> str:
        """One ordinary token per line; id = line number + 4."""
        return "".join(tok + "\n" for tok in self.tokens)

    @classmethod
    def deserialize(cls, text: str) -> "Vocab":
        return cls(tokens=text.splitlines())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.deserialize(Path(path).read_text(encoding="utf-8"))


def vocab_hash(v: Vocab) -> str:
    return hashlib.sha256(v.serialize().encode("utf-8")).hexdigest()


def build_vocab(corpus_texts: list[str], max_size: int) -> Vocab:
    """Frequency-ranked word vocab, ties broken lexicographically.

    ``max_size`` bounds the total id space (4 specials + UNK + words).
    """
    if not corpus_texts:
        raise ValueError("corpus is empty")
    if max_size < 8:
        raise ValueError(f"max_size must be at least 8, got {max_size}")
    counts: dict[str, int] = {}
    for text in corpus_texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = max_size - 5
    return Vocab(tokens=[UNK_TOKEN] + [tok for tok, _ in ranked[:keep]])


@dataclass
class TokenSequence:
    """Token ids with a per-position loss mask and optional visual span.

    ``loss_mask`` is True exactly where the position contributes to the
    training loss (target tokens and EOS); it is False on every context
    and visual position.
    """

    ids: list[int]
    loss_mask: list[bool]
    visual_span: tuple[int, int] | None = None

    def __post_init__(self):
        if len(self.ids) != len(self.loss_mask):
            raise ValueError(
                f"ids/mask length mismatch: {len(self.ids)} vs {len(self.loss_mask)}"
            )
        if self.visual_span is not None:
            start, length = self.visual_span
            if start < 0 or start + length > len(self.ids):
                raise ValueError(f"visual span {self.visual_span} out of bounds")
            if any(self.loss_mask[start : start + length]):
                raise ValueError("loss mask must be false on visual positions")


def encode(
    v: Vocab, context: str, target: str, k_visual: int, max_len: int
) -> TokenSequence:
    """Lay out BOS, context (marker expanded to IMG ids), target, EOS.

    Truncation drops tail target tokens first and never touches context or
    visual positions. The loss mask is True on kept target tokens and EOS.
    """
    if max_len < k_visual + 2:
        raise ValueError(f"max_len {max_len} < k_visual + 2 = {k_visual + 2}")
    parts = context.split(IMAGE_MARKER)
    if len(parts) > 2:
        raise ValueError("context contains more than one image marker")

    ctx_ids: list[int] = [v.id_of(t) for t in tokenize(parts[0])]
    visual_span: tuple[int, int] | None = None
    if len(parts) == 2:
        visual_span = (1 + len(ctx_ids), k_visual)
        ctx_ids += [Vocab.IMG] * k_visual
        ctx_ids += [v.id_of(t) for t in tokenize(parts[1])]

    n_ctx = len(ctx_ids)
    if 1 + n_ctx + 1 > max_len:
        raise ValueError(
            f"context alone exceeds max_len: {1 + n_ctx} + EOS > {max_len}"
        )
    tgt_ids = [v.id_of(t) for t in tokenize(target)]
    keep = min(len(tgt_ids), max_len - 2 - n_ctx)
    tgt_ids = tgt_ids[:keep]

    ids = [Vocab.BOS] + ctx_ids + tgt_ids + [Vocab.EOS]
    mask = [False] * (1 + n_ctx) + [True] * (keep + 1)
    return TokenSequence(ids=ids, loss_mask=mask, visual_span=visual_span)


def decode(v: Vocab, ids: list[int]) -> str:
    """Inverse of encode's text mapping up to normalization; specials omitted."""
    words = []
    for i in ids:
        if i in (Vocab.BOS, Vocab.EOS, Vocab.PAD, Vocab.IMG):
            continue
        if i < 0 or i >= v.size:
            raise ValueError(f"unknown token id {i} for vocab of size {v.size}")
        words.append(v.tokens[i - 4])
    return " ".join(words)
