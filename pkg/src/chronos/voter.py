"""Answer canonicalization, top-eta score filtering, and weighted majority voting."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

NO_ANSWER = "__NO_ANSWER__"

_INT_RE = re.compile(r"[+-]?\d+\Z")


@dataclass(frozen=True)
class VoteOutcome:
    """Result of one weighted vote: the winner plus the full tally."""

    winner: str
    retained: tuple[int, ...]  # indices into the original scored sequence
    weights: dict[str, float]  # canonical answer -> summed score over retained
    eta: float
    n_retained: int


def canonicalize_answer(raw: str) -> str:
    """Normalize an answer string for voting and gold comparison.

    Takes the last \\boxed{...} group when present, trims whitespace, and
    normalizes integer-like strings (leading zeros, explicit +). An empty
    result becomes the NO_ANSWER token. Total and idempotent.
    """
    text = raw if isinstance(raw, str) else str(raw)
    boxed = _last_boxed_group(text)
    if boxed is not None:
        text = boxed
    text = text.strip()
    if _INT_RE.match(text):
        text = str(int(text))
    if not text:
        return NO_ANSWER
    return text


def _last_boxed_group(text: str) -> str | None:
    """Content of the last \\boxed{...} in text, with balanced-brace matching."""
    marker = "\\boxed{"
    start = text.rfind(marker)
    if start < 0:
        return None
    depth = 1
    i = start + len(marker)
    begin = i
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[begin:i]
        i += 1
    return None  # unbalanced box; fall back to the raw text


def top_eta_filter(scored: Sequence, eta: float) -> list[int]:
    """Indices of the max(1, floor(eta*N)) highest-scored items.

    Ranking is by score descending with ties broken by ascending index, so
    the retained set is a deterministic function of the input.
    """
    if not scored:
        raise ValueError("cannot filter an empty candidate set")
    if not (isinstance(eta, (int, float)) and math.isfinite(eta)) or not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    n_keep = max(1, math.floor(eta * len(scored)))
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    return sorted(order[:n_keep])


def weighted_majority(
    retained: Sequence,
    eta: float = 1.0,
    retained_indices: Sequence[int] | None = None,
) -> VoteOutcome:
    """Vote over an already-filtered set: winner = argmax of summed scores.

    Items need .answer (canonical string) and .score. NO_ANSWER items keep
    their slot in the retained set but cannot win. Ties between answers break
    lexicographically.
    """
    if not retained:
        raise ValueError("cannot vote over an empty retained set")
    weights: dict[str, float] = {}
    for item in retained:
        a = item.answer
        if a == NO_ANSWER:
            continue
        weights[a] = weights.get(a, 0.0) + item.score
    if not weights:
        raise ValueError("every retained trajectory has no extracted answer")
    best = max(weights.values())
    winner = min(a for a, w in weights.items() if w == best)
    indices = tuple(retained_indices) if retained_indices is not None else tuple(range(len(retained)))
    if len(indices) != len(retained):
        raise ValueError("retained_indices must match the retained set")
    return VoteOutcome(winner=winner, retained=indices, weights=weights, eta=eta, n_retained=len(retained))


def vote(scored: Sequence, eta: float) -> VoteOutcome:
    """Filter to the top eta fraction by score, then take the weighted majority.

    Answers are canonicalized here, so raw trajectory answers are accepted.
    """
    keep = top_eta_filter(scored, eta)
    canonical = [_Canonical(canonicalize_answer(scored[i].answer), scored[i].score) for i in keep]
    return weighted_majority(canonical, eta=eta, retained_indices=keep)


@dataclass(frozen=True)
class _Canonical:
    answer: str
    score: float


def unweighted_majority(answers: Sequence[str]) -> str:
    """Most frequent canonical answer; lexicographic tie-break.

    NO_ANSWER is excluded unless it is the only answer present.
    """
    if not answers:
        raise ValueError("cannot vote over an empty answer list")
    counts = Counter(a for a in answers if a != NO_ANSWER)
    if not counts:
        return NO_ANSWER
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)
