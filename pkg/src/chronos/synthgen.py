"""Deterministic synthetic trajectory pools with a known class structure.

Correct-class signals are baseline Gaussian noise around a base uncertainty
level; incorrect-class signals additionally carry an elevated burst over the
last `extent` positions. Log-probability vectors are the exact preimage of the
designed signal (all k values equal to -s_t), so signal extraction reproduces
it bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from chronos.trajectory_store import TokenStep, Trajectory


@dataclass(frozen=True)
class SynthSpec:
    n_questions: int = 20
    pool_size: int = 32
    correct_fraction: float = 0.5
    length_range: tuple[int, int] = (48, 96)
    base_level: float = 1.0
    sigma: float = 0.1
    amplitude: float = 0.3  # added to the incorrect class over the tail burst
    extent: int = 16  # burst length in final positions
    k_stat: int = 4
    answer_alphabet: tuple[str, ...] = tuple(str(d) for d in range(10))
    wrong_answer_concentration: float = 1.0  # 1 = uniform; larger skews to one wrong answer
    seed: int = 0

    def __post_init__(self):
        if self.n_questions < 1 or self.pool_size < 1:
            raise ValueError("n_questions and pool_size must be >= 1")
        if not 0.0 < self.correct_fraction < 1.0:
            raise ValueError(f"correct_fraction must lie in (0, 1), got {self.correct_fraction}")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length_range {self.length_range}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.extent < 1:
            raise ValueError("extent must be >= 1")
        if self.k_stat < 1:
            raise ValueError("k_stat must be >= 1")
        if len(self.answer_alphabet) < 2:
            raise ValueError("answer alphabet needs at least 2 symbols")
        if self.wrong_answer_concentration < 1.0:
            raise ValueError("wrong_answer_concentration must be >= 1")
        if self.base_level < 0:
            raise ValueError(
                "infeasible spec: negative base level would require positive log-probabilities"
            )

    def to_dict(self) -> dict:
        return {
            "n_questions": self.n_questions,
            "pool_size": self.pool_size,
            "correct_fraction": self.correct_fraction,
            "length_range": list(self.length_range),
            "base_level": self.base_level,
            "sigma": self.sigma,
            "amplitude": self.amplitude,
            "extent": self.extent,
            "k_stat": self.k_stat,
            "answer_alphabet": list(self.answer_alphabet),
            "wrong_answer_concentration": self.wrong_answer_concentration,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        kwargs = dict(d)
        if "length_range" in kwargs:
            kwargs["length_range"] = tuple(kwargs["length_range"])
        if "answer_alphabet" in kwargs:
            kwargs["answer_alphabet"] = tuple(kwargs["answer_alphabet"])
        return cls(**kwargs)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate(spec: SynthSpec) -> list[Trajectory]:
    """Emit labeled pools, question by question, deterministically per seed."""
    rng = np.random.default_rng(spec.seed)
    n_correct = _round_half_up(spec.correct_fraction * spec.pool_size)
    trajs: list[Trajectory] = []
    wrong_pool = len(spec.answer_alphabet) - 1
    weights = np.array([spec.wrong_answer_concentration ** (-j) for j in range(wrong_pool)])
    weights /= weights.sum()
    for q in range(spec.n_questions):
        qid = f"q{q:04d}"
        gold_idx = int(rng.integers(len(spec.answer_alphabet)))
        gold = spec.answer_alphabet[gold_idx]
        wrong_answers = [a for a in spec.answer_alphabet if a != gold]
        for i in range(spec.pool_size):
            correct = i < n_correct
            m = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
            signal = spec.base_level + spec.sigma * rng.standard_normal(m)
            if not correct:
                burst = min(spec.extent, m)
                signal[m - burst :] += spec.amplitude
            signal = np.maximum(signal, 0.0)
            steps = tuple(TokenStep(top_k_logprobs=(float(-s),) * spec.k_stat) for s in signal)
            answer = gold if correct else wrong_answers[int(rng.choice(wrong_pool, p=weights))]
            trajs.append(
                Trajectory(
                    question_id=qid,
                    trajectory_id=f"{qid}-t{i:03d}",
                    answer=answer,
                    steps=steps,
                    label=correct,
                )
            )
    return trajs
