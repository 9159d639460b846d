"""Recover reasoning steps, ratings and candidate rankings from model output."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence


class UnparsableRating(ValueError):
    pass


class UnparsableRanking(ValueError):
    pass


@dataclass(frozen=True)
class ReasoningTrace:
    steps: tuple[str, ...]
    raw_span: str

    @property
    def num_steps(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class RankedList:
    order: tuple[str, ...]
    repaired: bool
    gt_rank: int | None = None

    def rank_of(self, label: str) -> int:
        return self.order.index(label) + 1


_FINAL_MARKERS = re.compile(r"(?i)(?:final\s+answer|ranking)[*_]*\s*:")
_START_MARKERS = re.compile(r"(?i)reasoning(?:\s+process)?[*_]*\s*:")
_STEP_MARKER = re.compile(r"(?i)(?<![\w])step\s*(\d+)\s*[:.)\-]")
_NUMBERED_LINE = re.compile(r"(?m)^[^\S\n]*(?:[-*+][^\S\n]+)?(?:\*\*)?(\d+)[.)](?:\*\*)?[^\S\n]+(?=\S)")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_BULLET = re.compile(r"^[\s>*+\-#_]+")


def _reasoning_span(raw: str) -> str:
    """Text between an optional "Reasoning:" header and the last answer/ranking marker."""
    span = raw
    finals = list(_FINAL_MARKERS.finditer(span))
    if finals:
        span = span[: finals[-1].start()]
    starts = list(_START_MARKERS.finditer(span))
    if starts:
        span = span[starts[-1].end():]
    return span


def _clean(step: str) -> str:
    # bullets may start any line, including the one that introduces the next step
    lines = (_BULLET.sub("", line.strip()) for line in step.splitlines())
    step = " ".join(line for line in lines if line)
    return re.sub(r"\s+", " ", step.replace("**", "")).strip()


def _split_at(span: str, matches: Sequence[re.Match]) -> list[str]:
    pieces = []
    for j, m in enumerate(matches):
        end = matches[j + 1].start() if j + 1 < len(matches) else len(span)
        pieces.append(span[m.end():end])
    return pieces


def extract_reasoning(raw: str) -> ReasoningTrace:
    """Reasoning statements, found by the first rule that matches:

    1. explicit ``Step k`` markers;
    2. numbered list lines (``1.``, ``2)``, optionally bulleted or bold);
    3. sentences of the text before the final answer / ranking line.

    Markdown bullets, emphasis and trailing whitespace do not affect the count.
    """
    span = _reasoning_span(raw or "")
    for pattern in (_STEP_MARKER, _NUMBERED_LINE):
        matches = list(pattern.finditer(span))
        if matches:
            steps = [_clean(p) for p in _split_at(span, matches)]
            return ReasoningTrace(tuple(s for s in steps if s), span)
    text = " ".join(_clean(line) for line in span.splitlines())
    sentences = [s.strip() for s in _SENTENCE_END.split(text)]
    return ReasoningTrace(tuple(s for s in sentences if s), span)


_FINAL_ANSWER = re.compile(r"(?i)final\s+answer")
_RATING = re.compile(r"(?i)\brating\W{0,3}([1-5])(?!\d)")
_BARE_DIGIT = re.compile(r"(?<![\d.])([1-5])(?![\d.]\d|\d)")


def extract_rating(raw: str) -> int:
    """Rating reported after the last "Final answer" marker.

    The last ``Rating d`` after the marker wins, then the last bare digit 1-5
    after it. Without a marker, only an explicit ``Rating d`` anywhere counts.
    """
    markers = list(_FINAL_ANSWER.finditer(raw or ""))
    if markers:
        tail = raw[markers[-1].end():]
        found = _RATING.findall(tail) or _BARE_DIGIT.findall(tail)
    else:
        found = _RATING.findall(raw or "")
    if not found:
        raise UnparsableRating("unparsable rating")
    return int(found[-1])


_RANKING_MARKER = re.compile(r"(?i)ranking\s*:")
_LABEL = re.compile(r"(?<![A-Za-z0-9])C\s?(\d{1,2})(?!\d)")


def extract_ranking(raw: str, candidates: Sequence[str],
                    ground_truth: str | None = None) -> RankedList:
    """Candidate order after the last "Ranking:" marker, repaired into a permutation.

    Repairs: repeated labels keep their first position, unknown labels are
    dropped, missing labels are appended in candidate order. Without a
    marker the last line naming two or more labels is used.
    """
    raw = raw or ""
    known = set(candidates)
    markers = list(_RANKING_MARKER.finditer(raw))
    if markers:
        tokens = [f"C{int(n)}" for n in _LABEL.findall(raw[markers[-1].end():])]
    else:
        tokens = []
        for line in reversed(raw.splitlines()):
            found = [f"C{int(n)}" for n in _LABEL.findall(line)]
            if len(found) >= 2:
                tokens = found
                break
    if not any(t in known for t in tokens):
        raise UnparsableRanking("unparsable ranking")

    order, seen = [], set()
    for t in tokens:
        if t in known and t not in seen:
            order.append(t)
            seen.add(t)
    missing = [c for c in candidates if c not in seen]
    order.extend(missing)
    repaired = tokens != order
    gt_rank = order.index(ground_truth) + 1 if ground_truth is not None else None
    return RankedList(tuple(order), repaired, gt_rank)


def worst_rank_list(candidates: Sequence[str], ground_truth: str | None = None) -> RankedList:
    """Stand-in for an unparsable ranking: ground truth placed last."""
    order = [c for c in candidates if c != ground_truth]
    if ground_truth is not None:
        order.append(ground_truth)
    return RankedList(tuple(order), True, len(order) if ground_truth is not None else None)
