"""Figure and QA corpora: ingestion, synthesis, and splits.

On-disk format is JSONL with image payloads referenced by relative path
(PNG or ``.f32raw``). Synthetic corpora are deterministic functions of
their arguments and stand in for full-scale figure/QA datasets during
desk-scale runs.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class FigureType(enum.Enum):
    """The five figure classes; values are the display strings."""

    GRAPH_PLOT = "Graph Plot"
    SCATTERPLOT = "Scatterplot"
    NODE_DIAGRAM = "Node Diagram"
    EQUATION = "Equation"
    BAR_CHART = "Bar Chart"


FIGURE_TYPES = list(FigureType)

ARXIV_CATEGORIES = [
    "Computer Science",
    "Economics",
    "Electrical Engineering and Systems Science",
    "Mathematics",
    "Physics",
    "Quantitative Biology",
    "Quantitative Finance",
    "Statistics",
]

SUBJECTS = ["NAT", "SOC", "LAN"]


@dataclass
class Image:
    """Row-major pixel intensities in [0, 1]."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        expected = self.width * self.height * self.channels
        if self.data.size != expected:
            raise ValueError(
                f"data length {self.data.size} != width*height*channels {expected}"
            )
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0, 1]")

    def as_grid(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width, self.channels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.channels == other.channels
            and np.array_equal(self.data, other.data)
        )


@dataclass
class FigureRecord:
    """One scientific figure with its type, caption, and optional text fields."""

    id: str
    image: Image
    figure_type: FigureType
    caption: str
    ocr: list[str] | None = None
    mention: str | None = None
    category: str = ARXIV_CATEGORIES[0]

    def __post_init__(self):
        if not self.caption:
            raise ValueError(f"record {self.id}: caption must be non-empty")


@dataclass
class QARecord:
    """One multiple-choice science question with optional contexts and CoT text."""

    id: str
    question: str
    choices: list[str]
    answer_index: int
    context_text: str | None = None
    context_image: Image | None = None
    lecture: str | None = None
    solution: str | None = None
    subject: str = "NAT"
    grade: int = 1
    topic: str = ""

    def __post_init__(self):
        if not self.choices:
            raise ValueError(f"record {self.id}: choices must be non-empty")
        if not 2 <= len(self.choices) <= 5:
            raise ValueError(
                f"record {self.id}: expected 2-5 choices, got {len(self.choices)}"
            )
        if not 0 <= self.answer_index < len(self.choices):
            raise ValueError(
                f"record {self.id}: answer_index {self.answer_index} out of range "
                f"for {len(self.choices)} choices"
            )
        if self.subject not in SUBJECTS:
            raise ValueError(f"record {self.id}: unknown subject {self.subject!r}")
        if not 1 <= self.grade <= 12:
            raise ValueError(f"record {self.id}: grade {self.grade} outside 1-12")


@dataclass
class CorpusSplit:
    """Pairwise-disjoint id lists covering the corpus."""

    train: list[str]
    validation: list[str]
    test: list[str]

    def __post_init__(self):
        groups = [set(self.train), set(self.validation), set(self.test)]
        total = len(self.train) + len(self.validation) + len(self.test)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValueError("split id lists overlap")


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def write_image(img: Image, path: str | Path) -> None:
    """Write PNG (uint8, intensities rounded to /255 grid) or raw float32."""
    path = Path(path)
    if path.suffix == ".png":
        grid = np.round(img.as_grid() * 255.0).astype(np.uint8)
        if img.channels == 1:
            PILImage.fromarray(grid[:, :, 0], mode="L").save(path)
        else:
            PILImage.fromarray(grid, mode="RGB").save(path)
    elif path.suffix == ".f32raw":
        header = struct.pack("<iii", img.width, img.height, img.channels)
        path.write_bytes(header + img.data.astype("<f4").tobytes())
    else:
        raise ValueError(f"unsupported image extension {path.suffix!r}")


def read_image(path: str | Path) -> Image:
    """Load PNG or ``.f32raw``; intensities normalized to [0, 1] float64."""
    path = Path(path)
    if path.suffix == ".png":
        with PILImage.open(path) as pil:
            arr = np.asarray(pil)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return Image(width=w, height=h, channels=c, data=arr.reshape(-1) / 255.0)
    if path.suffix == ".f32raw":
        buf = path.read_bytes()
        if len(buf) < 12:
            raise ValueError(f"{path}: truncated f32raw header")
        w, h, c = struct.unpack_from("<iii", buf, 0)
        data = np.frombuffer(buf[12:], dtype="<f4").astype(np.float64)
        return Image(width=w, height=h, channels=c, data=data)
    raise ValueError(f"unsupported image extension {path.suffix!r}")


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

_FIGURE_FIELDS = {"id", "image", "figure_type", "caption", "ocr", "mention", "category"}
_QA_FIELDS = {
    "id",
    "question",
    "choices",
    "answer_index",
    "context_text",
    "context_image",
    "lecture",
    "solution",
    "subject",
    "grade",
    "topic",
}

_DISPLAY_TO_TYPE = {ft.value: ft for ft in FigureType}


def save_figure_corpus(
    records: list[FigureRecord], path: str | Path, image_format: str = "png"
) -> None:
    """Write JSONL plus an ``images/`` directory next to it."""
    path = Path(path)
    img_dir = path.parent / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            rel = f"images/{rec.id}.{image_format}"
            write_image(rec.image, path.parent / rel)
            row = {
                "id": rec.id,
                "image": rel,
                "figure_type": rec.figure_type.value,
                "caption": rec.caption,
                "ocr": rec.ocr,
                "mention": rec.mention,
                "category": rec.category,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_figure_corpus(path: str | Path) -> list[FigureRecord]:
    """Load all records in file order; image intensities normalized to [0, 1]."""
    path = Path(path)
    records: list[FigureRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed JSON at line {lineno}: {exc.msg}") from None
            if not isinstance(row, dict) or not _FIGURE_FIELDS.issuperset(row) or (
                "id" not in row or "image" not in row
            ):
                raise ValueError(f"malformed figure record at line {lineno}")
            ftype_str = row.get("figure_type")
            if ftype_str not in _DISPLAY_TO_TYPE:
                raise ValueError(
                    f"unknown figure type {ftype_str!r} at line {lineno}"
                )
            img_path = path.parent / row["image"]
            if not img_path.exists():
                raise ValueError(
                    f"missing image file for record {row['id']!r}: {row['image']}"
                )
            try:
                records.append(
                    FigureRecord(
                        id=row["id"],
                        image=read_image(img_path),
                        figure_type=_DISPLAY_TO_TYPE[ftype_str],
                        caption=row.get("caption", ""),
                        ocr=row.get("ocr"),
                        mention=row.get("mention"),
                        category=row.get("category", ARXIV_CATEGORIES[0]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(
                    f"invalid figure record at line {lineno}: {exc}"
                ) from None
    return records


def save_qa_corpus(
    records: list[QARecord], path: str | Path, image_format: str = "png"
) -> None:
    path = Path(path)
    img_dir = path.parent / "images"
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            rel = None
            if rec.context_image is not None:
                img_dir.mkdir(parents=True, exist_ok=True)
                rel = f"images/{rec.id}.{image_format}"
                write_image(rec.context_image, path.parent / rel)
            row = {
                "id": rec.id,
                "question": rec.question,
                "choices": rec.choices,
                "answer_index": rec.answer_index,
                "context_text": rec.context_text,
                "context_image": rel,
                "lecture": rec.lecture,
                "solution": rec.solution,
                "subject": rec.subject,
                "grade": rec.grade,
                "topic": rec.topic,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_qa_corpus(path: str | Path) -> list[QARecord]:
    """Load QA records; records without a context image are retained."""
    path = Path(path)
    records: list[QARecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed JSON at line {lineno}: {exc.msg}") from None
            if not isinstance(row, dict) or not _QA_FIELDS.issuperset(row):
                raise ValueError(f"malformed QA record at line {lineno}")
            img = None
            if row.get("context_image"):
                img_path = path.parent / row["context_image"]
                if not img_path.exists():
                    raise ValueError(
                        f"missing image file for record {row.get('id')!r}: "
                        f"{row['context_image']}"
                    )
                img = read_image(img_path)
            try:
                records.append(
                    QARecord(
                        id=row["id"],
                        question=row["question"],
                        choices=row["choices"],
                        answer_index=row["answer_index"],
                        context_text=row.get("context_text"),
                        context_image=img,
                        lecture=row.get("lecture"),
                        solution=row.get("solution"),
                        subject=row.get("subject", "NAT"),
                        grade=row.get("grade", 1),
                        topic=row.get("topic", ""),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"invalid QA record at line {lineno}: {exc}") from None
    return records


# ---------------------------------------------------------------------------
# synthetic figures
# ---------------------------------------------------------------------------

_METRICS = [
    "throughput",
    "error rate",
    "latency",
    "drift",
    "response",
    "signal power",
    "loss",
    "accuracy",
]
_SUBJECT_NOUNS = ["probe", "sensor", "channel", "filter", "sample", "cluster"]
_VARIABLES = ["load", "voltage", "time", "frequency", "pressure", "temperature"]


def _quantize(grid: np.ndarray) -> np.ndarray:
    """Snap to the /255 grid so PNG round trips are exact."""
    return np.round(np.clip(grid, 0.0, 1.0) * 255.0) / 255.0


def _draw_line(grid: np.ndarray, r0: int, c0: int, r1: int, c1: int, value: float):
    n = max(abs(r1 - r0), abs(c1 - c0), 1)
    for t in range(n + 1):
        r = int(round(r0 + (r1 - r0) * t / n))
        c = int(round(c0 + (c1 - c0) * t / n))
        grid[r, c] = value


def _figure_pixels(ftype: FigureType, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # Background speckle is a per-record nuisance shared by all classes, and
    # each class splits into two discrete sub-styles. Both blur the per-class
    # mean prototype a zero-shot centroid matcher relies on, while the
    # class-specific structure stays crisp enough to learn from.
    grid = np.zeros((h, w))
    for _ in range(10):
        r = int(rng.integers(0, h - 1))
        c = int(rng.integers(0, w - 1))
        grid[r : r + 2, c : c + 2] = 0.4
    style = int(rng.integers(2))
    if ftype in (FigureType.GRAPH_PLOT, FigureType.SCATTERPLOT, FigureType.BAR_CHART):
        grid[:, 1] = 0.4
        grid[h - 2, :] = 0.4
    # Graph plots and scatterplots share one band-shaped mean distribution
    # (dots are sampled around the same sine family the curves trace), so a
    # mean-prototype matcher confuses them while the local texture (thick
    # dim contiguous trace vs isolated bright dots) stays learnable.
    if ftype is FigureType.GRAPH_PLOT:
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(5.0, 8.0)
        center = h // 2 + int(rng.integers(-3, 4))
        for x in range(2, w):
            y = int(round(center - amp * np.sin(4 * np.pi * x / w + phase)))
            y = min(max(y, 1), h - 5)
            grid[y : y + 3, x] = 0.55
    elif ftype is FigureType.SCATTERPLOT:
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(5.0, 8.0)
        center = h // 2 + int(rng.integers(-3, 4))
        xs: list[int] = []
        for x in rng.permutation(np.arange(2, w - 2)):
            if all(abs(int(x) - seen) >= 2 for seen in xs):
                xs.append(int(x))
            if len(xs) == 12:
                break
        for x in xs:
            y = int(round(center - amp * np.sin(4 * np.pi * x / w + phase)))
            y += int(rng.integers(-4, 5))
            y = min(max(y, 1), h - 4)
            grid[y : y + 2, x : x + 2] = 1.0
    elif ftype is FigureType.BAR_CHART:
        n_bars = 4 if style == 0 else 6
        slot = (w - 4) // n_bars
        for b in range(n_bars):
            height = int(rng.integers(5, h - 7))
            c0 = 3 + b * slot
            grid[h - 2 - height : h - 2, c0 : c0 + slot - 2] = 0.85
    elif ftype is FigureType.NODE_DIAGRAM:
        if style == 0:
            centers = [(7, 7), (7, w - 8), (h - 8, 7), (h - 8, w - 8)]
        else:
            centers = [(5, w // 2), (h - 8, 7), (h - 8, w - 8)]
        jittered = [
            (r + int(rng.integers(-2, 3)), c + int(rng.integers(-2, 3)))
            for r, c in centers
        ]
        for (r0, c0), (r1, c1) in zip(jittered, jittered[1:] + jittered[:1]):
            _draw_line(grid, r0, c0, r1, c1, 0.6)
        for r, c in jittered:
            grid[r - 2 : r + 3, c - 2 : c + 3] = 1.0
    elif ftype is FigureType.EQUATION:
        rows = (6, 14, 22) if style == 0 else (10, 20)
        thick = 2 if style == 0 else 3
        for row in rows:
            col = 2
            while col < w - 3:
                run = int(rng.integers(2, 6))
                gap = int(rng.integers(1, 3))
                grid[row : row + thick, col : min(col + run, w - 2)] = 0.9
                col += run + gap
    return _quantize(grid)


def synth_figure_corpus(
    n: int,
    seed: int,
    ocr_fraction: float = 0.5,
    mention_fraction: float = 0.75,
    width: int = 32,
    height: int = 32,
    channels: int = 1,
) -> list[FigureRecord]:
    """Deterministic figure corpus with separable per-class pixel patterns.

    Classes cycle round-robin so counts stay balanced. Exactly
    ``round(n * fraction)`` records carry OCR (and likewise mentions), chosen
    by a seeded permutation. Captions, OCR strings, and mentions are
    templated around each record's sampled parameters.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng([seed, n])
    has_ocr = np.zeros(n, dtype=bool)
    has_ocr[rng.permutation(n)[: round(n * ocr_fraction)]] = True
    has_mention = np.zeros(n, dtype=bool)
    has_mention[rng.permutation(n)[: round(n * mention_fraction)]] = True

    records = []
    for i in range(n):
        ftype = FIGURE_TYPES[i % len(FIGURE_TYPES)]
        metric = _METRICS[int(rng.integers(len(_METRICS)))]
        noun = _SUBJECT_NOUNS[int(rng.integers(len(_SUBJECT_NOUNS)))]
        var = _VARIABLES[int(rng.integers(len(_VARIABLES)))]
        num = int(rng.integers(100))
        pixels = _figure_pixels(ftype, rng, height, width)
        caption = f"The {metric} of {noun} {i} as a function of {var} {num}"
        ocr = None
        if has_ocr[i]:
            ocr = [f"{var} {int(rng.integers(50))}", f"{metric} axis"]
        mention = None
        if has_mention[i]:
            mention = (
                f"As shown in figure {i}, the {metric} of the {noun} "
                f"saturates beyond {var} {num}."
            )
        records.append(
            FigureRecord(
                id=f"fig-{seed}-{i:05d}",
                image=Image(width=width, height=height, channels=channels,
                            data=np.repeat(pixels.reshape(-1), channels)),
                figure_type=ftype,
                caption=caption + ".",
                ocr=ocr,
                mention=mention,
                category=ARXIV_CATEGORIES[i % len(ARXIV_CATEGORIES)],
            )
        )
    return records


# ---------------------------------------------------------------------------
# synthetic QA
# ---------------------------------------------------------------------------

_KEYWORDS = [
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "hazel",
    "indigo", "jade", "lumen", "maroon", "nickel", "ochre", "pewter", "quartz",
]
_OBJECTS = [
    "dial", "gauge", "beacon", "valve", "relay", "switch", "marker", "lever",
    "knob", "slider", "antenna", "regulator",
]
_TOPICS = ["circuits", "geology", "optics", "weather", "ecology", "grammar"]


def _lecture_counts(n: int, n_lectures: int) -> list[int]:
    """One record per lecture, remainder split by halving weights (largest
    remainder rounding) so the frequency profile is skewed."""
    weights = [2.0 ** -(i + 1) for i in range(n_lectures)]
    total = sum(weights)
    extra = n - n_lectures
    shares = [extra * w / total for w in weights]
    counts = [1 + int(s) for s in shares]
    remainder = n - sum(counts)
    order = sorted(range(n_lectures), key=lambda i: (-(shares[i] % 1.0), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def synth_qa_corpus(n: int, n_lectures: int, seed: int) -> list[QARecord]:
    """Deterministic QA corpus with a skewed lecture-frequency profile.

    Each lecture owns a question phrasing (its object noun), so exposure
    frequency governs how well a trained model handles the phrasing. The
    gold answer is derivable from the question and context by construction:
    the keyword named in the context (or question, or the figure type of
    the context image) appears among the choices.
    """
    if n_lectures < 1:
        raise ValueError(f"n_lectures must be at least 1, got {n_lectures}")
    if n_lectures > n:
        raise ValueError(f"n_lectures {n_lectures} exceeds n {n}")
    rng = np.random.default_rng([seed, n, n_lectures])

    objects = [_OBJECTS[j % len(_OBJECTS)] + ("" if j < len(_OBJECTS) else f" {j}")
               for j in range(n_lectures)]
    lectures = [
        f"Lesson {j}: the {objects[j]} panel reports one configured value at a time."
        for j in range(n_lectures)
    ]
    counts = _lecture_counts(n, n_lectures)
    lecture_ids = np.repeat(np.arange(n_lectures), counts)
    lecture_ids = lecture_ids[rng.permutation(n)]

    records = []
    for i in range(n):
        j = int(lecture_ids[i])
        obj = objects[j]
        mode = ("TXT", "IMG", "NO", "BOTH")[i % 4]
        n_choices = 4
        gold_pos = int(rng.integers(n_choices))
        context_text = None
        context_image = None

        if mode == "IMG":
            ftype = FIGURE_TYPES[int(rng.integers(len(FIGURE_TYPES)))]
            pixels = _figure_pixels(ftype, rng, 32, 32)
            context_image = Image(width=32, height=32, channels=1,
                                  data=pixels.reshape(-1))
            question = f"Which figure type does the {obj} panel show?"
            others = [t.value for t in FIGURE_TYPES if t is not ftype]
            picks = list(rng.choice(len(others), size=n_choices - 1, replace=False))
            choices = [others[int(p)] for p in picks]
            choices.insert(gold_pos, ftype.value)
            solution = (
                f"The panel shows a {ftype.value.lower()}, so option "
                f"{'ABCDE'[gold_pos]} is correct."
            )
        else:
            word = _KEYWORDS[int(rng.integers(len(_KEYWORDS)))]
            others = [k for k in _KEYWORDS if k != word]
            picks = list(rng.choice(len(others), size=n_choices - 1, replace=False))
            choices = [others[int(p)] for p in picks]
            choices.insert(gold_pos, word)
            if mode == "NO":
                question = f"Which option names the {obj} keyword {word}?"
            else:
                question = f"Which value is the {obj} set to?"
                context_text = f"The {obj} is currently set to {word}."
                if mode == "BOTH":
                    ftype = FIGURE_TYPES[int(rng.integers(len(FIGURE_TYPES)))]
                    pixels = _figure_pixels(ftype, rng, 32, 32)
                    context_image = Image(width=32, height=32, channels=1,
                                          data=pixels.reshape(-1))
            solution = (
                f"The {obj} keyword is {word}, so option "
                f"{'ABCDE'[gold_pos]} is correct."
            )

        records.append(
            QARecord(
                id=f"qa-{seed}-{i:05d}",
                question=question,
                choices=choices,
                answer_index=gold_pos,
                context_text=context_text,
                context_image=context_image,
                lecture=lectures[j],
                solution=solution,
                subject=SUBJECTS[i % len(SUBJECTS)],
                grade=(i % 12) + 1,
                topic=_TOPICS[i % len(_TOPICS)],
            )
        )
    return records


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def make_split(
    ids: list[str], fractions: tuple[float, float, float], seed: int
) -> CorpusSplit:
    """Seeded shuffle, then partition into train/validation/test."""
    if not ids:
        raise ValueError("ids must be non-empty")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be three non-negative values: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(ids)
    shuffled = [ids[int(i)] for i in np.random.default_rng(seed).permutation(n)]
    sizes = [int(f * n) for f in fractions]
    shares = [f * n - s for f, s in zip(fractions, sizes)]
    order = sorted(range(3), key=lambda i: (-shares[i], i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    a, b = sizes[0], sizes[0] + sizes[1]
    return CorpusSplit(train=shuffled[:a], validation=shuffled[a:b], test=shuffled[b:])
