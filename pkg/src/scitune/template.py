"""Instruction assembly: system message, sampled instruction, ordered targets.

All template strings below are compiled-in constants with bit-exact
stability guarantees (checkpoints depend on them); they are documented in
``TEMPLATE.md`` at the repository root. Changing any of them invalidates
existing checkpoints via the template hash.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass

from .corpus import FigureRecord, Image, QARecord
from .tokenizer import IMAGE_MARKER

SYSTEM_PREAMBLE = (
    "A chat between a curious human and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the human's "
    "questions."
)

INSTRUCTION_PROMPTS = [
    "Describe the following image in detail.",
    "Provide a detailed description of the given image.",
    "Give an elaborate explanation of the image you see.",
    "Share a comprehensive rundown of the presented image.",
    "Offer a thorough analysis of the image.",
    "Explain the various aspects of the image before you.",
    "Clarify the contents of the displayed image with great detail.",
    "Characterize the image using a well-detailed description.",
    "Break down the elements of the image in a detailed manner.",
    "Walk through the important details of the image.",
    "Portray the image with a rich, descriptive narrative.",
    "Narrate the contents of the image with precision.",
    "Analyze the image in a comprehensive and detailed manner.",
    "Illustrate the image through a descriptive explanation.",
    "Examine the image closely and share its details.",
    "Write an exhaustive depiction of the given image.",
]

# Sentinels give parsers segment boundaries. Figure type and caption carry
# no delimiter: position (type = leading display string, caption = the
# following sentence) identifies them.
SENTINEL_OCR = "OCR:"
SENTINEL_MENTION = "MENTION:"
SENTINEL_LECTURE = "LECTURE:"
SENTINEL_SOLUTION = "SOLUTION:"

ANSWER_TEMPLATE = "The answer is {letter}."
QA_INSTRUCTION_SUFFIX = (
    "Answer with the option's letter, then give the lecture and solution."
)
CHOICE_LETTERS = "ABCDE"

OCR_JOIN = ", "


class SegmentKind(enum.Enum):
    FIGURE_TYPE = "FigureType"
    CAPTION = "Caption"
    OCR = "Ocr"
    MENTION = "Mention"
    ANSWER = "Answer"
    LECTURE = "Lecture"
    SOLUTION = "Solution"


_SEGMENT_PREFIX = {
    SegmentKind.OCR: SENTINEL_OCR + " ",
    SegmentKind.MENTION: SENTINEL_MENTION + " ",
    SegmentKind.LECTURE: SENTINEL_LECTURE + " ",
    SegmentKind.SOLUTION: SENTINEL_SOLUTION + " ",
}

PRETRAIN_SEGMENT_ORDER = [
    SegmentKind.FIGURE_TYPE,
    SegmentKind.CAPTION,
    SegmentKind.OCR,
    SegmentKind.MENTION,
]
TASK_SEGMENT_ORDER = [SegmentKind.ANSWER, SegmentKind.LECTURE, SegmentKind.SOLUTION]


@dataclass
class InstructionRecord:
    """A fully assembled training example with ordered target segments."""

    system: str
    instruction: str
    image: Image | None
    targets: list[tuple[SegmentKind, str]]
    source_id: str = ""


def template_constants_hash() -> str:
    """Identity of every compiled-in template constant, for checkpoints."""
    payload = "\x1e".join(
        [SYSTEM_PREAMBLE]
        + INSTRUCTION_PROMPTS
        + [
            IMAGE_MARKER,
            SENTINEL_OCR,
            SENTINEL_MENTION,
            SENTINEL_LECTURE,
            SENTINEL_SOLUTION,
            ANSWER_TEMPLATE,
            QA_INSTRUCTION_SUFFIX,
            CHOICE_LETTERS,
            OCR_JOIN,
        ]
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def sample_instruction(seed: int) -> str:
    """One of the 16 description prompts, uniform under the seeded generator."""
    return INSTRUCTION_PROMPTS[random.Random(seed).randrange(len(INSTRUCTION_PROMPTS))]


def assemble_pretrain_record(fig: FigureRecord, seed: int) -> InstructionRecord:
    """Concept-alignment example: figure type, caption, then optional OCR
    and paragraph mention, generated in that order."""
    targets = [
        (SegmentKind.FIGURE_TYPE, fig.figure_type.value),
        (SegmentKind.CAPTION, fig.caption),
    ]
    if fig.ocr:
        targets.append((SegmentKind.OCR, OCR_JOIN.join(fig.ocr)))
    if fig.mention:
        targets.append((SegmentKind.MENTION, fig.mention))
    return InstructionRecord(
        system=SYSTEM_PREAMBLE,
        instruction=sample_instruction(seed),
        image=fig.image,
        targets=targets,
        source_id=fig.id,
    )


def assemble_task_record(qa: QARecord) -> InstructionRecord:
    """Task-tuning example: answer sentence, then lecture and solution."""
    if len(qa.choices) > len(CHOICE_LETTERS):
        raise ValueError(
            f"record {qa.id}: at most {len(CHOICE_LETTERS)} choices supported, "
            f"got {len(qa.choices)}"
        )
    lines = [qa.question]
    if qa.context_text:
        lines.append(qa.context_text)
    lines += [
        f"({CHOICE_LETTERS[i]}) {choice}" for i, choice in enumerate(qa.choices)
    ]
    lines.append(QA_INSTRUCTION_SUFFIX)

    targets = [
        (SegmentKind.ANSWER,
         ANSWER_TEMPLATE.format(letter=CHOICE_LETTERS[qa.answer_index]))
    ]
    if qa.lecture:
        targets.append((SegmentKind.LECTURE, qa.lecture))
    if qa.solution:
        targets.append((SegmentKind.SOLUTION, qa.solution))
    return InstructionRecord(
        system=SYSTEM_PREAMBLE,
        instruction="\n".join(lines),
        image=qa.context_image,
        targets=targets,
        source_id=qa.id,
    )


def render(rec: InstructionRecord) -> tuple[str, str]:
    """Rendered (context_text, target_text) for tokenization.

    The target never contains the system preamble; segment texts appear
    verbatim, sentinel-prefixed where the segment kind requires one.
    """
    marker = IMAGE_MARKER if rec.image is not None else ""
    context = (
        rec.system + "\nHuman: " + rec.instruction + "\n" + marker + "\nAssistant: "
    )
    target = " ".join(
        _SEGMENT_PREFIX.get(kind, "") + text for kind, text in rec.targets
    )
    return context, target
