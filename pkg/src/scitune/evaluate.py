"""Quantitative evaluation: figure-type accuracy with a nearest-centroid
baseline, caption BLEU/ROUGE, category-stratified QA accuracy, lecture and
solution scoring split by answer correctness, and the lecture-frequency
few-shot analysis.

Metric conventions declared here for reproducibility: BLEU is smoothed
sentence-level BLEU-4 (uniform weights, add-one smoothing on orders 2-4,
brevity penalty exp(1 - r/h) when h < r) and ROUGE is ROUGE-L F1, both
over the package's word tokenization. Absolute values are therefore not
comparable across toolkits, only orderings.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import FigureType, QARecord, FigureRecord
from .generate import ParsedPretrainOutput, ParsedQaOutput
from .tokenizer import tokenize

# Published full-scale reference points, shipped as annotations only (desk
# scale runs are not comparable; tests never assert these).
REFERENCE_POINTS = {
    "figure_type_accuracy_all": {"clip_zero_shot": 58.68, "llama_scitune_13b": 92.42},
    "caption_bleu": {"blip": "0.02±0.02", "llama_scitune": "0.05±0.03"},
    "caption_rouge": {"blip": "0.10±0.07", "llama_scitune": "0.13±0.08"},
    "scienceqa_accuracy_avg": {"human": 88.40, "llama_scitune_ctom_13b": 90.03},
}


# ---------------------------------------------------------------------------
# text metrics
# ---------------------------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: str, reference: str) -> float:
    """Sentence BLEU-4 in [0, 1]; empty hypothesis scores 0."""
    hyp = tokenize(hypothesis)
    ref = tokenize(reference)
    if not hyp:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        hyp_ng = _ngrams(hyp, n)
        ref_ng = _ngrams(ref, n)
        matched = sum(min(c, ref_ng[g]) for g, c in hyp_ng.items())
        total = sum(hyp_ng.values())
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        else:
            p = (matched + 1) / (total + 1)
        log_sum += math.log(p)
    bp = math.exp(1 - len(ref) / len(hyp)) if len(hyp) < len(ref) else 1.0
    return bp * math.exp(log_sum / 4)


def rouge_l(hypothesis: str, reference: str) -> float:
    """ROUGE-L F1 over word tokens; 0 when precision and recall are both 0."""
    hyp = tokenize(hypothesis)
    ref = tokenize(reference)
    if not hyp or not ref:
        return 0.0
    prev = [0] * (len(ref) + 1)
    for h in hyp:
        cur = [0] * (len(ref) + 1)
        for j, r in enumerate(ref, start=1):
            cur[j] = prev[j - 1] + 1 if h == r else max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# figure-type evaluation
# ---------------------------------------------------------------------------


@dataclass
class ClassAccuracy:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class FigureTypeReport:
    per_class: dict[str, ClassAccuracy]
    overall: ClassAccuracy

    def to_dict(self) -> dict:
        out = {
            name: {"correct": c.correct, "total": c.total, "accuracy": c.accuracy}
            for name, c in self.per_class.items()
        }
        out["All"] = {
            "correct": self.overall.correct,
            "total": self.overall.total,
            "accuracy": self.overall.accuracy,
        }
        return out


def _check_aligned(pred_ids, gold_ids) -> None:
    if set(pred_ids) != set(gold_ids):
        missing = set(gold_ids) - set(pred_ids)
        extra = set(pred_ids) - set(gold_ids)
        raise ValueError(
            f"prediction/gold id mismatch: missing {sorted(missing)[:3]}, "
            f"extra {sorted(extra)[:3]}"
        )


def figure_type_eval(
    preds: dict[str, ParsedPretrainOutput], gold: list[FigureRecord]
) -> FigureTypeReport:
    """Per-class and micro-averaged accuracy; absent predictions count wrong."""
    _check_aligned(preds.keys(), [r.id for r in gold])
    per_class = {ft.value: ClassAccuracy(0, 0) for ft in FigureType}
    overall = ClassAccuracy(0, 0)
    for rec in gold:
        cell = per_class[rec.figure_type.value]
        cell.total += 1
        overall.total += 1
        if preds[rec.id].figure_type is rec.figure_type:
            cell.correct += 1
            overall.correct += 1
    return FigureTypeReport(per_class=per_class, overall=overall)


def centroid_baseline(
    train_exemplars: list[tuple[FigureType, np.ndarray]],
    test: list[np.ndarray],
) -> list[FigureType]:
    """Nearest class prototype by cosine similarity in frozen encoder space.

    Prototypes are per-class mean feature vectors; ties go to the
    lexicographically first class display name.
    """
    groups: dict[FigureType, list[np.ndarray]] = {}
    for ftype, feats in train_exemplars:
        groups.setdefault(ftype, []).append(np.asarray(feats, dtype=np.float64).ravel())
    missing = [ft.value for ft in FigureType if ft not in groups]
    if missing:
        raise ValueError(f"no exemplars for class(es): {missing}")
    ordered = sorted(FigureType, key=lambda ft: ft.value)
    protos = []
    for ft in ordered:
        proto = np.mean(groups[ft], axis=0)
        norm = np.linalg.norm(proto)
        protos.append(proto / norm if norm else proto)
    proto_mat = np.stack(protos)

    out = []
    for feats in test:
        v = np.asarray(feats, dtype=np.float64).ravel()
        norm = np.linalg.norm(v)
        if norm:
            v = v / norm
        sims = proto_mat @ v
        best = 0
        for i in range(1, len(ordered)):
            if sims[i] > sims[best]:
                best = i
        out.append(ordered[best])
    return out


# ---------------------------------------------------------------------------
# QA evaluation
# ---------------------------------------------------------------------------

QA_STRATA = ["NAT", "SOC", "LAN", "TXT", "IMG", "NO", "G1-6", "G7-12"]


def _strata_of(rec: QARecord) -> list[str]:
    strata = [rec.subject]
    if rec.context_text:
        strata.append("TXT")
    if rec.context_image is not None:
        strata.append("IMG")
    if not rec.context_text and rec.context_image is None:
        strata.append("NO")
    strata.append("G1-6" if rec.grade <= 6 else "G7-12")
    return strata


@dataclass
class QaReport:
    overall: ClassAccuracy
    strata: dict[str, ClassAccuracy]
    context_partition: dict[str, int]

    def to_dict(self) -> dict:
        out = {
            "Avg": {
                "correct": self.overall.correct,
                "total": self.overall.total,
                "accuracy": self.overall.accuracy,
            }
        }
        for name in QA_STRATA:
            c = self.strata[name]
            out[name] = {"correct": c.correct, "total": c.total,
                         "accuracy": c.accuracy}
        out["context_partition"] = dict(self.context_partition)
        return out


def qa_eval(preds: dict[str, ParsedQaOutput], gold: list[QARecord]) -> QaReport:
    """Micro accuracy overall and per stratum. A record with both text and
    image context counts in both TXT and IMG denominators; absent answers
    score incorrect."""
    _check_aligned(preds.keys(), [r.id for r in gold])
    overall = ClassAccuracy(0, 0)
    strata = {name: ClassAccuracy(0, 0) for name in QA_STRATA}
    partition = {"txt_only": 0, "img_only": 0, "both": 0, "none": 0}
    for rec in gold:
        correct = preds[rec.id].answer_index == rec.answer_index
        overall.total += 1
        overall.correct += correct
        for name in _strata_of(rec):
            strata[name].total += 1
            strata[name].correct += correct
        has_txt = bool(rec.context_text)
        has_img = rec.context_image is not None
        key = {
            (True, False): "txt_only",
            (False, True): "img_only",
            (True, True): "both",
            (False, False): "none",
        }[(has_txt, has_img)]
        partition[key] += 1
    return QaReport(overall=overall, strata=strata, context_partition=partition)


# ---------------------------------------------------------------------------
# lecture/solution (chain-of-thought) scoring
# ---------------------------------------------------------------------------


@dataclass
class CotCell:
    bleu: float
    rouge: float
    count: int


@dataclass
class CotReport:
    """Mean BLEU/ROUGE of generated lecture and solution text, over all
    answers and split by answer correctness. Empty subsets are absent."""

    cells: dict[tuple[str, str], CotCell | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {}
        for (segment, subset), cell in self.cells.items():
            out.setdefault(segment, {})[subset] = (
                None
                if cell is None
                else {"bleu": cell.bleu, "rouge": cell.rouge, "count": cell.count}
            )
        return out


def cot_eval(preds: dict[str, ParsedQaOutput], gold: list[QARecord]) -> CotReport:
    _check_aligned(preds.keys(), [r.id for r in gold])
    rows: dict[str, list[tuple[float, float, bool]]] = {"Lecture": [], "Solution": []}
    for rec in gold:
        p = preds[rec.id]
        correct = p.answer_index == rec.answer_index
        if rec.lecture:
            hyp = p.lecture or ""
            rows["Lecture"].append(
                (bleu(hyp, rec.lecture), rouge_l(hyp, rec.lecture), correct)
            )
        if rec.solution:
            hyp = p.solution or ""
            rows["Solution"].append(
                (bleu(hyp, rec.solution), rouge_l(hyp, rec.solution), correct)
            )
    report = CotReport()
    for segment, scored in rows.items():
        for subset in ("All", "Correct", "Incorrect"):
            if subset == "All":
                chosen = scored
            elif subset == "Correct":
                chosen = [s for s in scored if s[2]]
            else:
                chosen = [s for s in scored if not s[2]]
            report.cells[(segment, subset)] = (
                CotCell(
                    bleu=float(np.mean([s[0] for s in chosen])),
                    rouge=float(np.mean([s[1] for s in chosen])),
                    count=len(chosen),
                )
                if chosen
                else None
            )
    return report


# ---------------------------------------------------------------------------
# few-shot lecture-frequency analysis
# ---------------------------------------------------------------------------

FEWSHOT_THRESHOLDS = (5, 10, 25, 50)


@dataclass
class FewshotRow:
    threshold: int
    n_questions: int
    accuracy: float | None


def fewshot_eval(
    train_qa: list[QARecord],
    test_qa: list[QARecord],
    preds: dict[str, ParsedQaOutput],
    thresholds: tuple[int, ...] = FEWSHOT_THRESHOLDS,
) -> list[FewshotRow]:
    """Accuracy on test questions whose gold lecture was seen at most
    ``threshold`` times in training (cumulative buckets, so question counts
    are monotone in the threshold). Test records without a lecture are
    excluded; lectures are compared by exact string match."""
    _check_aligned(preds.keys(), [r.id for r in test_qa])
    freq = Counter(r.lecture for r in train_qa if r.lecture)
    rows = []
    for threshold in thresholds:
        chosen = [
            r for r in test_qa if r.lecture and freq.get(r.lecture, 0) <= threshold
        ]
        if chosen:
            correct = sum(
                preds[r.id].answer_index == r.answer_index for r in chosen
            )
            rows.append(FewshotRow(threshold, len(chosen), correct / len(chosen)))
        else:
            rows.append(FewshotRow(threshold, 0, None))
    return rows


# ---------------------------------------------------------------------------
# caption metrics and report assembly
# ---------------------------------------------------------------------------


@dataclass
class CaptionReport:
    bleu_mean: float
    bleu_sd: float
    rouge_mean: float
    rouge_sd: float
    count: int

    def to_dict(self) -> dict:
        return {
            "bleu_mean": self.bleu_mean,
            "bleu_sd": self.bleu_sd,
            "rouge_mean": self.rouge_mean,
            "rouge_sd": self.rouge_sd,
            "count": self.count,
        }


def caption_eval(
    preds: dict[str, ParsedPretrainOutput], gold: list[FigureRecord]
) -> CaptionReport:
    """Mean ± sd of BLEU and ROUGE-L of generated captions against gold."""
    _check_aligned(preds.keys(), [r.id for r in gold])
    bleus, rouges = [], []
    for rec in gold:
        hyp = preds[rec.id].caption or ""
        bleus.append(bleu(hyp, rec.caption))
        rouges.append(rouge_l(hyp, rec.caption))
    return CaptionReport(
        bleu_mean=float(np.mean(bleus)),
        bleu_sd=float(np.std(bleus)),
        rouge_mean=float(np.mean(rouges)),
        rouge_sd=float(np.std(rouges)),
        count=len(gold),
    )


@dataclass
class MetricsReport:
    """Aggregate of every evaluation section this package produces."""

    figure_types: FigureTypeReport | None = None
    baseline_figure_types: FigureTypeReport | None = None
    captions: CaptionReport | None = None
    qa: QaReport | None = None
    cot: CotReport | None = None
    fewshot: list[FewshotRow] | None = None

    def to_dict(self) -> dict:
        out: dict = {"reference_points": REFERENCE_POINTS}
        if self.figure_types is not None:
            out["figure_types"] = self.figure_types.to_dict()
        if self.baseline_figure_types is not None:
            out["baseline_figure_types"] = self.baseline_figure_types.to_dict()
        if self.captions is not None:
            out["captions"] = self.captions.to_dict()
        if self.qa is not None:
            out["qa"] = self.qa.to_dict()
        if self.cot is not None:
            out["cot"] = self.cot.to_dict()
        if self.fewshot is not None:
            out["fewshot"] = [
                {"threshold": r.threshold, "n_questions": r.n_questions,
                 "accuracy": r.accuracy}
                for r in self.fewshot
            ]
        return out


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in rows
    )


def _pct(acc: float | None) -> str:
    return "-" if acc is None else f"{100 * acc:.2f}"


def render_figure_table(
    pipeline: FigureTypeReport, baseline: FigureTypeReport | None = None
) -> str:
    header = ["Figure Type", "Pipeline"]
    if baseline is not None:
        header.insert(1, "Baseline")
    rows = [header]
    for ft in FigureType:
        row = [ft.value, _pct(pipeline.per_class[ft.value].accuracy)]
        if baseline is not None:
            row.insert(1, _pct(baseline.per_class[ft.value].accuracy))
        rows.append(row)
    last = ["All", _pct(pipeline.overall.accuracy)]
    if baseline is not None:
        last.insert(1, _pct(baseline.overall.accuracy))
    rows.append(last)
    return _table(rows)


def render_qa_table(report: QaReport) -> str:
    rows = [["Category", "Accuracy", "N"]]
    rows.append(["Avg", _pct(report.overall.accuracy), str(report.overall.total)])
    for name in QA_STRATA:
        c = report.strata[name]
        rows.append([name, _pct(c.accuracy), str(c.total)])
    return _table(rows)


def render_fewshot_table(rows_in: list[FewshotRow]) -> str:
    rows = [["Frequency", "#Questions", "Accuracy"]]
    for r in rows_in:
        rows.append([str(r.threshold), str(r.n_questions), _pct(r.accuracy)])
    return _table(rows)


def render_cot_table(report: CotReport) -> str:
    rows = [["Answers", "Segment", "BLEU", "ROUGE", "N"]]
    for subset in ("All", "Correct", "Incorrect"):
        for segment in ("Lecture", "Solution"):
            cell = report.cells.get((segment, subset))
            if cell is None:
                rows.append([subset, segment, "-", "-", "0"])
            else:
                rows.append(
                    [subset, segment, f"{cell.bleu:.3f}", f"{cell.rouge:.3f}",
                     str(cell.count)]
                )
    return _table(rows)


def render_report(report: MetricsReport) -> str:
    sections = []
    if report.figure_types is not None:
        sections.append(
            "Figure-type accuracy\n"
            + render_figure_table(report.figure_types, report.baseline_figure_types)
        )
    if report.captions is not None:
        c = report.captions
        sections.append(
            "Caption metrics\n"
            + _table(
                [
                    ["Metric", "Mean", "SD"],
                    ["BLEU", f"{c.bleu_mean:.3f}", f"{c.bleu_sd:.3f}"],
                    ["ROUGE", f"{c.rouge_mean:.3f}", f"{c.rouge_sd:.3f}"],
                ]
            )
        )
    if report.qa is not None:
        sections.append("QA accuracy\n" + render_qa_table(report.qa))
    if report.cot is not None:
        sections.append("Lecture/solution generation\n" + render_cot_table(report.cot))
    if report.fewshot is not None:
        sections.append("Few-shot analysis\n" + render_fewshot_table(report.fewshot))
    return "\n\n".join(sections)
