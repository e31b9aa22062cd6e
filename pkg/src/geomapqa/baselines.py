"""Reference answering policies used as analytic baselines."""
from __future__ import annotations

import random
from typing import Optional, Sequence

from .core import AnswerValue, BenchItem, MCQ_LABELS

_JUNK_TEXT = "no answer available"
_JUNK_ESSAY = "The map does not provide enough information to assess this."


def uniform_random_responses(
    items: Sequence[BenchItem], seed: int = 42
) -> dict[str, Optional[AnswerValue]]:
    """The knowledge-free baseline: uniform random letters on multiple choice,
    uninformative junk elsewhere (which scores 0 on every non-choice task)."""
    rng = random.Random(f"random-baseline:{seed}")
    out: dict[str, Optional[AnswerValue]] = {}
    for item in items:
        if item.qtype == "MCQ":
            out[item.id] = AnswerValue.choice(rng.choice(MCQ_LABELS))
        elif item.qtype == "EQ":
            out[item.id] = AnswerValue.essay(_JUNK_ESSAY)
        else:
            out[item.id] = AnswerValue.text(_JUNK_TEXT)
    return out


def ground_truth_responses(items: Sequence[BenchItem]) -> dict[str, Optional[AnswerValue]]:
    """Perfect-answer policy: every item answered with its own ground truth."""
    return {item.id: item.ground_truth for item in items}
