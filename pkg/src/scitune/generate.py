"""Autoregressive decoding and structured parsing of generated text.

Parsers are total: malformed text yields absent fields, never an
exception, so evaluation denominators stay equal to the test-set size.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import FigureType, Image
from .model import ModelParams, forward_logits
from .template import (
    CHOICE_LETTERS,
    SENTINEL_LECTURE,
    SENTINEL_MENTION,
    SENTINEL_OCR,
    SENTINEL_SOLUTION,
)
from .tokenizer import Vocab


@dataclass
class GenConfig:
    max_new_tokens: int = 64
    temperature: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "max_new_tokens": self.max_new_tokens,
            "temperature": self.temperature,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass
class ParsedPretrainOutput:
    figure_type: FigureType | None = None
    caption: str | None = None
    ocr: str | None = None
    mention: str | None = None


@dataclass
class ParsedQaOutput:
    answer_index: int | None = None
    lecture: str | None = None
    solution: str | None = None


def generate_tokens(
    params: ModelParams,
    context_ids: list[int],
    img: Image | None = None,
    cfg: GenConfig = GenConfig(),
    features: T.Tensor | None = None,
    visual_span: tuple[int, int] | None = None,
) -> list[int]:
    """Decode up to max_new_tokens ids after the context; stops after EOS.

    Greedy decoding (temperature 0) takes the argmax with lowest-id
    tie-break; positive temperature samples from softmax(logits/t) under
    the seeded generator.
    """
    rng = np.random.default_rng(cfg.seed)
    ids = list(context_ids)
    out: list[int] = []
    for _ in range(cfg.max_new_tokens):
        logits = forward_logits(params, ids, img=img, features=features,
                                visual_span=visual_span)
        if cfg.temperature == 0:
            tok = int(np.argmax(logits))
        else:
            z = logits / cfg.temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            tok = int(rng.choice(len(p), p=p))
        ids.append(tok)
        out.append(tok)
        if tok == Vocab.EOS:
            break
    return out


_TYPE_DISPLAYS = sorted((ft.value for ft in FigureType), key=len, reverse=True)

_OCR_RE = re.compile(r"(?i)\b" + SENTINEL_OCR[:-1] + r"\s*:")
_MENTION_RE = re.compile(r"(?i)\b" + SENTINEL_MENTION[:-1] + r"\s*:")
_LECTURE_RE = re.compile(r"(?i)\b" + SENTINEL_LECTURE[:-1] + r"\s*:")
_SOLUTION_RE = re.compile(r"(?i)\b" + SENTINEL_SOLUTION[:-1] + r"\s*:")
_SENTENCE_END_RE = re.compile(r"\.(?=\s|$)")
_ANSWER_RE = re.compile(r"(?i)\bthe answer is\s+([a-z])\b")


def _split_sentinels(text: str, patterns) -> tuple[str, list[str | None]]:
    """Head text before the first sentinel, plus each sentinel's span text."""
    matches = []
    for i, pat in enumerate(patterns):
        m = pat.search(text)
        if m:
            matches.append((m.start(), m.end(), i))
    matches.sort()
    head_end = matches[0][0] if matches else len(text)
    fields: list[str | None] = [None] * len(patterns)
    for j, (start, end, i) in enumerate(matches):
        until = matches[j + 1][0] if j + 1 < len(matches) else len(text)
        fields[i] = text[end:until].strip()
    return text[:head_end], fields


def parse_pretrain_output(text: str) -> ParsedPretrainOutput:
    """Recover figure type (leading display string), caption (first sentence),
    and sentinel-delimited OCR/mention fields from generated text."""
    rest = text.strip()
    figure_type = None
    for display in _TYPE_DISPLAYS:
        if rest.lower().startswith(display.lower()):
            figure_type = FigureType(display)
            rest = rest[len(display) :].lstrip()
            break
    head, (ocr, mention) = _split_sentinels(rest, (_OCR_RE, _MENTION_RE))
    head = head.strip()
    caption: str | None = None
    if head:
        m = _SENTENCE_END_RE.search(head)
        caption = head[: m.end()] if m else head
    return ParsedPretrainOutput(
        figure_type=figure_type,
        caption=caption,
        ocr=ocr if ocr else None,
        mention=mention if mention else None,
    )


def parse_qa_output(text: str, n_choices: int) -> ParsedQaOutput:
    """Extract the answer letter and sentinel-delimited lecture/solution.

    Out-of-range or missing letters yield an absent answer (scored
    incorrect downstream, never excluded).
    """
    if not 2 <= n_choices <= len(CHOICE_LETTERS):
        raise ValueError(f"n_choices must be in 2-{len(CHOICE_LETTERS)}")
    answer_index = None
    m = _ANSWER_RE.search(text)
    if m:
        idx = ord(m.group(1).upper()) - ord("A")
        if 0 <= idx < n_choices:
            answer_index = idx
    _, (lecture, solution) = _split_sentinels(text, (_LECTURE_RE, _SOLUTION_RE))
    return ParsedQaOutput(
        answer_index=answer_index,
        lecture=lecture if lecture else None,
        solution=solution if solution else None,
    )
