"""Benchmark metric suite: box/set IoU, per-type scores, order-debiased essay
judging, and report aggregation.

Scoring composes bottom-up: a type score per question (multiple-choice match,
routed fill-in-the-blank, or the two-call essay judge), the per-ability mean
over its questions, and the overall mean over the five abilities. The overall
score is deliberately the mean of ability means, not a pooled question mean.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .backend import Backend, BackendError, CompletionRequest, ImageAttachment
from .core import (
    ABILITIES,
    BASE_SYSTEM_PROMPT,
    BBox,
    AnswerValue,
    BenchItem,
    GROUNDING_TASKS,
    LonLatRange,
    TASK_ABILITY,
    downscale_max_edge,
)

logger = logging.getLogger(__name__)

ABILITY_COLUMNS = ("Extracting", "Grounding", "Referring", "Reasoning", "Analyzing", "Overall")

JUDGE_CHOICE_VALUES = {"A": 1.0, "B": 0.0, "C": 0.5}

AJ_INSTRUCTION_TEMPLATE = (
    "Please evaluate which of the two answers below is better for the essay question "
    "{question}, consider the following criteria:\n"
    "1. Diversity: The answer should address various aspects of the question, "
    "providing a well-rounded perspective.\n"
    "2. Specificity: The answer should be detailed and precise, avoiding vague or "
    "general statements.\n"
    "3. Professionalism: The answer should be articulated in a professional manner, "
    "demonstrating expertise and credibility.\n"
    "\n"
    "Answer1:\n"
    "{answer1}\n"
    "Answer2:\n"
    "{answer2}\n"
    "\n"
    "Question: which answer is better?\n"
    "A. Answer1 is better than Answer2\n"
    "B. Answer1 is worse than Answer2\n"
    "C. Answer1 and Answer2 are comparable\n"
    "\n"
    'Only respond answer with A, B or C in JSON format, for example: {{"answer": "C"}}\n'
    "Answer: "
)

_JUDGE_REASK_SUFFIX = "\nOnly respond answer with A, B or C in JSON format."


class JudgeError(RuntimeError):
    """The judge produced no parseable verdict within the retry budget."""


@dataclass(frozen=True)
class JudgeVerdict:
    """One judge call: choice A means answer1 won, B it lost, C comparable."""

    value: float
    raw_choice: str
    order: str = "kept"  # "kept" or "swapped"

    def __post_init__(self) -> None:
        if JUDGE_CHOICE_VALUES.get(self.raw_choice) != self.value:
            raise ValueError(f"verdict value {self.value} inconsistent with choice {self.raw_choice}")


# ---------------------------------------------------------------------------
# text normalization


_WS_RE = re.compile(r"\s+")
_THOUSANDS_RE = re.compile(r"(?<=\d)[,，](?=\d)")
_SCALE_RE = re.compile(r"^1\s*[::]\s*([\d ]+)$")
_TERMINAL_PUNCT = ".,;:!?。，；：！？"


def normalize_text(s: str) -> str:
    """Trim, casefold, collapse whitespace, strip terminal punctuation, and
    canonicalize scale ratios ("1:24,000" -> "1:24000")."""
    s = _WS_RE.sub(" ", str(s)).strip().casefold()
    while s and s[-1] in _TERMINAL_PUNCT:
        s = s[:-1].rstrip()
    s = _THOUSANDS_RE.sub("", s)
    m = _SCALE_RE.match(s)
    if m:
        s = "1:" + m.group(1).replace(" ", "")
    return s


# ---------------------------------------------------------------------------
# IoU metrics


def iou_det(b1: BBox, b2: BBox) -> float:
    """Intersection over union of two pixel boxes; 0 when disjoint."""
    b1.require_valid("b1")
    b2.require_valid("b2")
    inter = b1.intersection_area(b2)
    union = b1.area + b2.area - inter
    return inter / union


def iou_set_discrete(a: Iterable[str], b: Iterable[str]) -> float:
    """|A∩B| / |A∪B| over normalized texts; defined as 1.0 when both empty."""
    sa = {normalize_text(x) for x in a}
    sb = {normalize_text(x) for x in b}
    if not sa and not sb:
        return 1.0
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def iou_set_rect(r1: LonLatRange, r2: LonLatRange) -> float:
    """Area IoU of two lon-lat rectangles in degree space."""
    r1.require_valid("r1")
    r2.require_valid("r2")
    inter = r1.intersection_area(r2)
    union = r1.area + r2.area - inter
    return inter / union


# ---------------------------------------------------------------------------
# per-type scores


_CHOICE_RE = re.compile(r"\(?([a-d])\)?")


def _extract_choice_label(text: str) -> Optional[str]:
    n = normalize_text(text)
    m = _CHOICE_RE.fullmatch(n)
    if m:
        return m.group(1).upper()
    m = re.match(r"\(?([a-d])[\).:\s]", n)
    if m:
        return m.group(1).upper()
    return None


def score_mcq(item: BenchItem, answer: Optional[AnswerValue]) -> float:
    """1.0 iff the answer's normalized label equals the ground-truth label.
    A wrong-shaped answer is a wrong answer."""
    gt = item.ground_truth
    if gt is None:
        raise ValueError(f"item {item.id} has no ground truth")
    if answer is None:
        return 0.0
    if answer.kind not in ("choice_label", "text"):
        logger.warning("item %s: MCQ answer has kind %r, scoring 0", item.id, answer.kind)
        return 0.0
    label = _extract_choice_label(str(answer.value))
    return 1.0 if label is not None and label == str(gt.value).upper() else 0.0


def score_fitb(item: BenchItem, answer: Optional[AnswerValue]) -> float:
    """Routed fill-in-the-blank score: box IoU for grounding tasks, set IoU
    for the set-extraction tasks, exact match otherwise."""
    gt = item.ground_truth
    if gt is None:
        raise ValueError(f"item {item.id} has no ground truth")
    if answer is None:
        return 0.0
    if item.task in GROUNDING_TASKS:
        if answer.kind != "bbox" or not answer.value.is_valid():
            logger.warning("item %s: expected a bbox answer, got %r", item.id, answer.kind)
            return 0.0
        return iou_det(answer.value, gt.value)
    if item.task == "index_map":
        if answer.kind != "name_set":
            logger.warning("item %s: expected a name-set answer, got %r", item.id, answer.kind)
            return 0.0
        return iou_set_discrete(answer.value, gt.value)
    if item.task == "lonlat":
        if answer.kind != "lonlat" or not answer.value.is_valid():
            logger.warning("item %s: expected a lon-lat answer, got %r", item.id, answer.kind)
            return 0.0
        return iou_set_rect(answer.value, gt.value)
    if answer.kind not in ("text", "choice_label", "essay"):
        logger.warning("item %s: expected a text answer, got %r", item.id, answer.kind)
        return 0.0
    return 1.0 if normalize_text(str(answer.value)) == normalize_text(str(gt.value)) else 0.0


# ---------------------------------------------------------------------------
# essay judging


def _parse_judge_choice(raw: str) -> Optional[str]:
    for candidate in (raw, _brace_slice(raw)):
        if candidate is None:
            continue
        try:
            doc = json.loads(candidate)
        except (json.JSONDecodeError, TypeError):
            continue
        if isinstance(doc, dict) and str(doc.get("answer", "")).strip().upper() in JUDGE_CHOICE_VALUES:
            return str(doc["answer"]).strip().upper()
    m = re.search(r'"answer"\s*:\s*"?([ABCabc])', raw)
    if m:
        return m.group(1).upper()
    stripped = raw.strip().rstrip(".")
    if stripped.upper() in JUDGE_CHOICE_VALUES:
        return stripped.upper()
    m = re.search(r"\b([ABC])\b", raw)
    if m:
        return m.group(1)
    return None


def _brace_slice(raw: str) -> Optional[str]:
    start, end = raw.find("{"), raw.rfind("}")
    if 0 <= start < end:
        return raw[start : end + 1]
    return None


def judge_pair(
    question: str,
    answer1: str,
    answer2: str,
    map_image: Optional[np.ndarray],
    backend: Backend,
    *,
    max_edge: int = 2048,
    reasks: int = 2,
) -> tuple[JudgeVerdict, float]:
    """Ask the judge which of two answers is better; A maps to 1.0, B to 0.0,
    C to 0.5. The entire map image is attached (downscaled if needed; the
    factor is returned for the judge log). Malformed output is re-asked up to
    ``reasks`` times before raising :class:`JudgeError`."""
    instruction = AJ_INSTRUCTION_TEMPLATE.format(
        question=question, answer1=answer1, answer2=answer2
    )
    images: tuple[ImageAttachment, ...] = ()
    factor = 1.0
    if map_image is not None:
        scaled, factor = downscale_max_edge(map_image, max_edge)
        images = (ImageAttachment.from_array("judge:map", scaled),)
    for attempt in range(reasks + 1):
        req = CompletionRequest(
            system=BASE_SYSTEM_PROMPT,
            instruction=instruction if attempt == 0 else instruction + _JUDGE_REASK_SUFFIX,
            images=images,
            json_mode=True,
        )
        raw = backend.complete(req)
        choice = _parse_judge_choice(raw)
        if choice is not None:
            return JudgeVerdict(JUDGE_CHOICE_VALUES[choice], choice), factor
        logger.warning("judge output unparseable (attempt %d): %.120s", attempt + 1, raw)
    raise JudgeError(f"no parseable judge verdict after {reasks + 1} attempts")


def score_eq(
    item: BenchItem,
    answer_text: str,
    map_image: Optional[np.ndarray],
    backend: Backend,
    *,
    max_edge: int = 2048,
) -> tuple[float, list[JudgeVerdict], float]:
    """Order-debiased essay score: (1 - J(q, gt, ans) + J(q, ans, gt)) / 2.

    Exactly two judge calls per question, once per answer order. Returns the
    score, both verdicts, and the image downscale factor used."""
    gt = item.ground_truth
    if gt is None:
        raise ValueError(f"item {item.id} has no ground truth")
    reference = str(gt.value)
    kept, factor = judge_pair(
        item.question_text, reference, answer_text, map_image, backend, max_edge=max_edge
    )
    swapped, _ = judge_pair(
        item.question_text, answer_text, reference, map_image, backend, max_edge=max_edge
    )
    swapped = replace(swapped, order="swapped")
    score = 0.5 * (1.0 - kept.value + swapped.value)
    return score, [kept, swapped], factor


# ---------------------------------------------------------------------------
# aggregation


def score_ability(scores: Sequence[float]) -> float:
    """Arithmetic mean of the per-question type scores of one ability."""
    if not scores:
        raise ValueError("an ability score is undefined over zero questions")
    return float(sum(scores)) / len(scores)


def score_overall(ability_scores: Sequence[float]) -> float:
    """Arithmetic mean of the five ability scores."""
    if len(ability_scores) != 5:
        raise ValueError(f"expected exactly 5 ability scores, got {len(ability_scores)}")
    return float(sum(ability_scores)) / 5.0


@dataclass
class ScoreReport:
    per_question: dict[str, float]
    per_task: dict[str, float]
    per_task_counts: dict[str, int]
    per_ability: dict[str, float]
    overall: Optional[float]
    judge_log: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_question": dict(sorted(self.per_question.items())),
            "per_task": dict(sorted(self.per_task.items())),
            "per_task_counts": dict(sorted(self.per_task_counts.items())),
            "per_ability": {a: self.per_ability[a] for a in ABILITIES if a in self.per_ability},
            "overall": self.overall,
            "judge_log": self.judge_log,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScoreReport":
        return cls(
            per_question=dict(d.get("per_question", {})),
            per_task=dict(d.get("per_task", {})),
            per_task_counts=dict(d.get("per_task_counts", {})),
            per_ability=dict(d.get("per_ability", {})),
            overall=d.get("overall"),
            judge_log=list(d.get("judge_log", [])),
        )

    def to_text_table(self, method: str = "responses") -> str:
        """Plain-text table in the canonical column order (five abilities
        followed by Overall)."""
        header = f"{'Method':<20}" + "".join(f"{c:>12}" for c in ABILITY_COLUMNS)
        values = []
        for ability in ABILITIES:
            v = self.per_ability.get(ability)
            values.append(f"{v:.3f}" if v is not None else "-")
        values.append(f"{self.overall:.3f}" if self.overall is not None else "-")
        row = f"{method:<20}" + "".join(f"{v:>12}" for v in values)
        return header + "\n" + row + "\n"

    def to_task_csv(self) -> str:
        """Per-task means as CSV, one row per task, for radar-style plots."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "ability", "mean_score", "questions"])
        for task in sorted(self.per_task):
            writer.writerow(
                [task, TASK_ABILITY.get(task, ""), f"{self.per_task[task]:.6f}", self.per_task_counts.get(task, 0)]
            )
        return buf.getvalue()


def evaluate_bench(
    items: Sequence[BenchItem],
    responses: Mapping[str, Optional[AnswerValue]],
    *,
    judge_backend: Optional[Backend] = None,
    image_loader: Optional[Callable[[str], Optional[np.ndarray]]] = None,
    judge_max_edge: int = 2048,
) -> ScoreReport:
    """Score every item against its response and aggregate.

    Essay items need ``judge_backend``; a judge failure scores the question
    0.0 and is flagged in the judge log rather than aborting the run."""
    per_question: dict[str, float] = {}
    judge_log: list[dict[str, Any]] = []
    has_essays = any(item.qtype == "EQ" for item in items)
    if has_essays and judge_backend is None:
        raise ValueError("essay items require a judge backend")

    for item in items:
        answer = responses.get(item.id)
        if item.qtype == "MCQ":
            score = score_mcq(item, answer)
        elif item.qtype == "FITB":
            score = score_fitb(item, answer)
        else:
            score = _score_essay(item, answer, judge_backend, image_loader, judge_max_edge, judge_log)
        if not 0.0 <= score <= 1.0 or score != score:
            raise AssertionError(f"item {item.id}: score {score} outside [0, 1]")
        per_question[item.id] = score

    per_task: dict[str, list[float]] = {}
    per_ability_scores: dict[str, list[float]] = {}
    for item in items:
        per_task.setdefault(item.task, []).append(per_question[item.id])
        per_ability_scores.setdefault(item.ability, []).append(per_question[item.id])

    per_ability = {a: score_ability(v) for a, v in per_ability_scores.items()}
    overall = None
    if all(a in per_ability for a in ABILITIES):
        overall = score_overall([per_ability[a] for a in ABILITIES])
    else:
        missing = [a for a in ABILITIES if a not in per_ability]
        logger.warning("no questions for abilities %s; overall left undefined", missing)
    return ScoreReport(
        per_question=per_question,
        per_task={t: score_ability(v) for t, v in per_task.items()},
        per_task_counts={t: len(v) for t, v in per_task.items()},
        per_ability=per_ability,
        overall=overall,
        judge_log=judge_log,
    )


def _score_essay(
    item: BenchItem,
    answer: Optional[AnswerValue],
    backend: Optional[Backend],
    image_loader: Optional[Callable[[str], Optional[np.ndarray]]],
    max_edge: int,
    judge_log: list[dict[str, Any]],
) -> float:
    if answer is None or answer.kind not in ("essay", "text"):
        judge_log.append({"item_id": item.id, "error": "no essay answer"})
        return 0.0
    image = image_loader(item.map_id) if image_loader else None
    try:
        score, verdicts, factor = score_eq(
            item, str(answer.value), image, backend, max_edge=max_edge
        )
    except (JudgeError, BackendError) as exc:
        logger.warning("item %s: judge failed (%s); scoring 0.0", item.id, exc)
        judge_log.append({"item_id": item.id, "error": str(exc)})
        return 0.0
    for verdict in verdicts:
        judge_log.append(
            {
                "item_id": item.id,
                "order": verdict.order,
                "raw_choice": verdict.raw_choice,
                "value": verdict.value,
                "downscale": factor,
            }
        )
    return score
