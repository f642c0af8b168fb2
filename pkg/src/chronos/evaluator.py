"""Evaluation harness: Pass@1, Maj@K, and score-weighted voting accuracy via
repeated subsampling from per-question candidate pools, plus AUC and
score-distribution exports.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from chronos.scorer_net import ScoredTrajectory
from chronos.trainer import auc
from chronos.voter import canonicalize_answer, unweighted_majority, vote

CORRECT = "correct"
INCORRECT = "incorrect"


@dataclass
class QuestionPool:
    """All scored candidate trajectories for one question plus its gold answer."""

    question_id: str
    gold_answer: str
    trajectories: list[ScoredTrajectory]

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError(f"question {self.question_id!r}: empty candidate pool")

    @property
    def correctness(self) -> np.ndarray:
        return np.array([st.answer == self.gold_answer for st in self.trajectories], dtype=bool)


@dataclass
class MethodResult:
    mean: float
    std: float
    per_repeat: list[float]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_repeat": self.per_repeat}


@dataclass
class EvalReport:
    k: int
    repeats: int
    eta: float
    seed: int
    methods: dict[str, MethodResult]
    pass_at_1: float | None = None
    auc_value: float | None = None
    per_question: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name, res in self.methods.items():
            if not 0.0 <= res.mean <= 1.0 or res.std < 0.0:
                raise ValueError(f"method {name!r}: accuracy out of range")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "repeats": self.repeats,
            "eta": self.eta,
            "seed": self.seed,
            "methods": {name: res.to_dict() for name, res in self.methods.items()},
            "pass_at_1": self.pass_at_1,
            "auc": self.auc_value,
            "per_question": self.per_question,
        }


def build_pools(
    scored: Sequence[ScoredTrajectory],
    gold: dict[str, str] | None = None,
) -> list[QuestionPool]:
    """Group scored trajectories by question and attach gold answers.

    Gold answers come from the supplied map (canonicalized) or, failing that,
    from the answer shared by label-true trajectories. Stored labels must
    agree with canonical-equality correctness.
    """
    by_q: dict[str, list[ScoredTrajectory]] = {}
    order: list[str] = []
    for st in scored:
        if st.trajectory is None:
            raise ValueError("pool construction needs trajectory references")
        qid = st.trajectory.question_id
        if qid not in by_q:
            by_q[qid] = []
            order.append(qid)
        by_q[qid].append(st)

    pools = []
    for qid in order:
        items = by_q[qid]
        if gold is not None and qid in gold:
            gold_answer = canonicalize_answer(gold[qid])
        else:
            positives = {st.answer for st in items if st.trajectory.label is True}
            if len(positives) > 1:
                raise ValueError(f"question {qid!r}: label-true trajectories disagree on the answer: {sorted(positives)}")
            if not positives:
                raise ValueError(f"question {qid!r}: missing gold answer (no gold map entry and no correct-labeled trajectory)")
            gold_answer = positives.pop()
        for st in items:
            label = st.trajectory.label
            if label is not None and label != (st.answer == gold_answer):
                raise ValueError(
                    f"question {qid!r}, trajectory {st.trajectory.trajectory_id!r}: "
                    f"label {label} disagrees with answer {st.answer!r} vs gold {gold_answer!r}"
                )
        pools.append(QuestionPool(question_id=qid, gold_answer=gold_answer, trajectories=items))
    return pools


def pass_at_1(pools: Sequence[QuestionPool]) -> float:
    """Exact expected accuracy of a uniformly drawn single trajectory."""
    if not pools:
        raise ValueError("no pools to evaluate")
    correct = 0
    total = 0
    for pool in pools:
        correct += int(pool.correctness.sum())
        total += len(pool.trajectories)
    return correct / total


def _draw_rng(seed: int, repeat: int, question_id: str) -> random.Random:
    digest = hashlib.blake2b(f"{seed}|{repeat}|{question_id}".encode("utf-8"), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


def _winner(items: Sequence[ScoredTrajectory], method: str, eta: float) -> str:
    if method == "maj":
        return unweighted_majority([st.answer for st in items])
    if method == "chronos":
        return vote(items, eta).winner
    raise ValueError(f"unknown method {method!r}")


def subsample_eval(
    pools: Sequence[QuestionPool],
    k: int,
    repeats: int,
    seed: int,
    method: str,
    eta: float = 0.1,
) -> EvalReport:
    """Accuracy of one aggregation method over repeated K-subsamples per question.

    Each (seed, repeat, question) triple gets its own deterministic RNG, and
    the K indices are drawn without replacement.
    """
    if not pools:
        raise ValueError("no pools to evaluate")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for pool in pools:
        if k > len(pool.trajectories):
            raise ValueError(
                f"K={k} exceeds pool size {len(pool.trajectories)} for question {pool.question_id!r}"
            )
    per_repeat: list[float] = []
    wins = {pool.question_id: 0 for pool in pools}
    for r in range(repeats):
        n_correct = 0
        for pool in pools:
            rng = _draw_rng(seed, r, pool.question_id)
            idx = sorted(rng.sample(range(len(pool.trajectories)), k))
            items = [pool.trajectories[i] for i in idx]
            if _winner(items, method, eta) == pool.gold_answer:
                n_correct += 1
                wins[pool.question_id] += 1
        per_repeat.append(n_correct / len(pools))
    acc = np.array(per_repeat)
    per_question = [
        {"question_id": pool.question_id, f"{method}_win_rate": wins[pool.question_id] / repeats}
        for pool in pools
    ]
    return EvalReport(
        k=k,
        repeats=repeats,
        eta=eta,
        seed=seed,
        methods={method: MethodResult(mean=float(acc.mean()), std=float(acc.std()), per_repeat=per_repeat)},
        per_question=per_question,
    )


def pool_auc(pools: Sequence[QuestionPool]) -> float | None:
    """Scorer AUC over every pooled trajectory; None when only one class exists."""
    scores: list[float] = []
    labels: list[int] = []
    for pool in pools:
        for st, ok in zip(pool.trajectories, pool.correctness):
            scores.append(st.score)
            labels.append(int(ok))
    try:
        return auc(scores, labels)
    except ValueError:
        return None


def compare_report(
    pools: Sequence[QuestionPool],
    k: int,
    repeats: int,
    eta: float,
    seed: int,
) -> EvalReport:
    """One consolidated report: Pass@1, Maj@K, weighted voting at eta, and AUC."""
    maj = subsample_eval(pools, k, repeats, seed, "maj", eta)
    chron = subsample_eval(pools, k, repeats, seed, "chronos", eta)
    per_question = []
    for pool, mrow, crow in zip(pools, maj.per_question, chron.per_question):
        per_question.append(
            {
                "question_id": pool.question_id,
                "pool_size": len(pool.trajectories),
                "n_correct": int(pool.correctness.sum()),
                "pass_at_1": float(pool.correctness.mean()),
                "maj_win_rate": mrow["maj_win_rate"],
                "chronos_win_rate": crow["chronos_win_rate"],
            }
        )
    return EvalReport(
        k=k,
        repeats=repeats,
        eta=eta,
        seed=seed,
        methods={"maj": maj.methods["maj"], "chronos": chron.methods["chronos"]},
        pass_at_1=pass_at_1(pools),
        auc_value=pool_auc(pools),
        per_question=per_question,
    )


@dataclass(frozen=True)
class HistogramBin:
    bin_lo: float
    bin_hi: float
    klass: str
    count: int


@dataclass
class HistogramExport:
    n_bins: int
    bins: list[HistogramBin]
    degenerate_questions: list[str]

    def rows(self) -> list[tuple[float, float, str, int]]:
        return [(b.bin_lo, b.bin_hi, b.klass, b.count) for b in self.bins]


def export_distribution(pools: Sequence[QuestionPool], bins: int = 20) -> HistogramExport:
    """Binned counts of per-pool min-max normalized scores, split by correctness.

    Pools whose scores are all equal normalize to a single bin and are flagged.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not pools:
        raise ValueError("no pools to export")
    counts = {CORRECT: np.zeros(bins, dtype=np.int64), INCORRECT: np.zeros(bins, dtype=np.int64)}
    degenerate = []
    for pool in pools:
        scores = np.array([st.score for st in pool.trajectories])
        lo, hi = scores.min(), scores.max()
        if hi == lo:
            degenerate.append(pool.question_id)
            normalized = np.zeros_like(scores)
        else:
            normalized = (scores - lo) / (hi - lo)
        idx = np.minimum((normalized * bins).astype(int), bins - 1)
        for i, ok in zip(idx, pool.correctness):
            counts[CORRECT if ok else INCORRECT][i] += 1
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = []
    for klass in (CORRECT, INCORRECT):
        for b in range(bins):
            out.append(HistogramBin(float(edges[b]), float(edges[b + 1]), klass, int(counts[klass][b])))
    return HistogramExport(n_bins=bins, bins=out, degenerate_questions=degenerate)
