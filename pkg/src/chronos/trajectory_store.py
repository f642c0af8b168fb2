"""Trajectory data model, JSONL ingestion/validation, and dataset splitting.

Wire format (one JSON object per line, UTF-8, LF):
    line 1:  {"format_version": 1, "k_stat": <int>}
    line 2+: {"question_id": str, "trajectory_id": str, "answer": str,
              "label": bool (optional),
              "steps": [[logprob, ... k_stat values], ...]}

Each step holds the natural-log probabilities of the top-k candidate tokens
at that decoding position, sorted non-increasing, all <= 0.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

FORMAT_VERSION = 1


class TrajectoryValidationError(ValueError):
    """A record violated the trajectory schema. Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class TokenStep:
    """Top-k log-probabilities at one decoding step, sorted non-increasing."""

    top_k_logprobs: tuple[float, ...]

    def __post_init__(self):
        lp = self.top_k_logprobs
        if not lp:
            raise TrajectoryValidationError("step has no log-probabilities")
        for i, v in enumerate(lp):
            if not math.isfinite(v):
                raise TrajectoryValidationError(f"non-finite log-probability at position {i}")
            if v > 0.0:
                raise TrajectoryValidationError(f"positive log-probability {v} at position {i}")
            if i > 0 and v > lp[i - 1]:
                raise TrajectoryValidationError(f"log-probabilities not sorted non-increasing at position {i}")

    @property
    def k(self) -> int:
        return len(self.top_k_logprobs)


@dataclass(frozen=True)
class Trajectory:
    """One sampled reasoning chain: per-step logprobs, extracted answer, optional label."""

    question_id: str
    trajectory_id: str
    answer: str
    steps: tuple[TokenStep, ...]
    label: bool | None = None

    def __post_init__(self):
        if not self.steps:
            raise TrajectoryValidationError(f"trajectory {self.trajectory_id!r} has no steps")
        k = self.steps[0].k
        for i, s in enumerate(self.steps):
            if s.k != k:
                raise TrajectoryValidationError(
                    f"trajectory {self.trajectory_id!r}: step {i} has k={s.k}, expected {k}"
                )

    @property
    def k(self) -> int:
        return self.steps[0].k

    @property
    def key(self) -> tuple[str, str]:
        return (self.question_id, self.trajectory_id)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/validation/test partition of a trajectory set."""

    train: tuple[Trajectory, ...]
    validation: tuple[Trajectory, ...]
    test: tuple[Trajectory, ...]
    seed: int

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.validation), len(self.test))


def _parse_step(raw, line: int, step_index: int, k_stat: int) -> TokenStep:
    if not isinstance(raw, list):
        raise TrajectoryValidationError(f"step {step_index} is not a list", line)
    if len(raw) != k_stat:
        raise TrajectoryValidationError(
            f"step {step_index} has {len(raw)} log-probabilities, header declares k_stat={k_stat}", line
        )
    try:
        values = tuple(float(v) for v in raw)
    except (TypeError, ValueError):
        raise TrajectoryValidationError(f"step {step_index} contains a non-numeric value", line) from None
    try:
        return TokenStep(values)
    except TrajectoryValidationError as exc:
        raise TrajectoryValidationError(f"step {step_index}: {exc.args[0]}", line) from None


def _parse_record(obj: dict, line: int, k_stat: int) -> Trajectory:
    for key in ("question_id", "trajectory_id", "answer", "steps"):
        if key not in obj:
            raise TrajectoryValidationError(f"missing field {key!r}", line)
    label = obj.get("label")
    if label is not None and not isinstance(label, bool):
        raise TrajectoryValidationError("label must be a boolean when present", line)
    steps_raw = obj["steps"]
    if not isinstance(steps_raw, list) or not steps_raw:
        raise TrajectoryValidationError("steps must be a non-empty list", line)
    steps = tuple(_parse_step(s, line, i, k_stat) for i, s in enumerate(steps_raw))
    try:
        return Trajectory(
            question_id=str(obj["question_id"]),
            trajectory_id=str(obj["trajectory_id"]),
            answer=str(obj["answer"]),
            steps=steps,
            label=label,
        )
    except TrajectoryValidationError as exc:
        raise TrajectoryValidationError(exc.args[0], line) from None


def read_header(path: str | Path) -> dict:
    """Read and validate the header line; returns {"format_version", "k_stat"}."""
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    if not first.strip():
        raise TrajectoryValidationError("empty file: missing header", 1)
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise TrajectoryValidationError(f"malformed JSON in header: {exc.msg}", 1) from None
    if not isinstance(header, dict):
        raise TrajectoryValidationError("header is not a JSON object", 1)
    if header.get("format_version") != FORMAT_VERSION:
        raise TrajectoryValidationError(
            f"unsupported format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}", 1
        )
    k_stat = header.get("k_stat")
    if not isinstance(k_stat, int) or isinstance(k_stat, bool) or k_stat < 1:
        raise TrajectoryValidationError("header k_stat must be a positive integer", 1)
    return {"format_version": FORMAT_VERSION, "k_stat": k_stat}


def iter_jsonl(path: str | Path) -> Iterator[Trajectory]:
    """Yield trajectories one by one. Raises TrajectoryValidationError on the first bad record."""
    header = read_header(path)
    k_stat = header["k_stat"]
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as f:
        f.readline()  # header already validated
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryValidationError(f"malformed JSON: {exc.msg}", line_no) from None
            if not isinstance(obj, dict):
                raise TrajectoryValidationError("record is not a JSON object", line_no)
            traj = _parse_record(obj, line_no, k_stat)
            if traj.key in seen:
                raise TrajectoryValidationError(f"duplicate (question_id, trajectory_id) {traj.key}", line_no)
            seen.add(traj.key)
            yield traj


def load_jsonl(path: str | Path) -> list[Trajectory]:
    """Load a full trajectory file, preserving record order."""
    return list(iter_jsonl(path))


def validate_jsonl(path: str | Path, max_errors: int = 100) -> list[str]:
    """Scan a file and collect all schema violations (up to max_errors).

    Unlike load_jsonl, keeps going after a bad record so a report can list
    every problem with its line number.
    """
    errors: list[str] = []
    try:
        header = read_header(path)
    except TrajectoryValidationError as exc:
        return [str(exc)]
    k_stat = header["k_stat"]
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as f:
        f.readline()
        for line_no, line in enumerate(f, start=2):
            if len(errors) >= max_errors:
                errors.append(f"stopped after {max_errors} errors")
                break
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise TrajectoryValidationError("record is not a JSON object", line_no)
                traj = _parse_record(obj, line_no, k_stat)
                if traj.key in seen:
                    raise TrajectoryValidationError(f"duplicate (question_id, trajectory_id) {traj.key}", line_no)
                seen.add(traj.key)
            except json.JSONDecodeError as exc:
                errors.append(f"line {line_no}: malformed JSON: {exc.msg}")
            except TrajectoryValidationError as exc:
                errors.append(str(exc))
    return errors


def save_jsonl(trajs: Iterable[Trajectory], path: str | Path, k_stat: int | None = None) -> int:
    """Write trajectories in the wire format; returns the record count.

    Floats are serialized with Python's shortest round-trip representation,
    so load(save(T)) is bit-exact.
    """
    trajs = list(trajs)
    if k_stat is None:
        if not trajs:
            raise ValueError("k_stat is required when writing an empty dataset")
        k_stat = trajs[0].k
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"format_version": FORMAT_VERSION, "k_stat": k_stat}) + "\n")
        for traj in trajs:
            if traj.k != k_stat:
                raise ValueError(f"trajectory {traj.key} has k={traj.k}, dataset k_stat={k_stat}")
            rec = {
                "question_id": traj.question_id,
                "trajectory_id": traj.trajectory_id,
                "answer": traj.answer,
                "steps": [list(s.top_k_logprobs) for s in traj.steps],
            }
            if traj.label is not None:
                rec["label"] = traj.label
            f.write(json.dumps(rec) + "\n")
    return len(trajs)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    trajs: Sequence[Trajectory],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    group_by_question: bool = False,
) -> DatasetSplit:
    """Deterministically partition trajectories into train/validation/test.

    Validation and test sizes are round(ratio * N) (half up); train takes the
    remainder. Splitting is per trajectory by default; with group_by_question
    every trajectory of a question lands in the same part.
    """
    n = len(trajs)
    if n < 3:
        raise ValueError(f"need at least 3 trajectories to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    seen: set[tuple[str, str]] = set()
    for t in trajs:
        if t.key in seen:
            raise ValueError(f"duplicate (question_id, trajectory_id) {t.key}")
        seen.add(t.key)

    rng = random.Random(seed)
    if group_by_question:
        qids = sorted({t.question_id for t in trajs})
        if len(qids) < 3:
            raise ValueError(f"need at least 3 questions for a grouped split, got {len(qids)}")
        order = list(qids)
        rng.shuffle(order)
        n_val = max(1, _round_half_up(ratios[1] * len(order)))
        n_test = max(1, _round_half_up(ratios[2] * len(order)))
        val_q = set(order[:n_val])
        test_q = set(order[n_val : n_val + n_test])
        train = tuple(t for t in trajs if t.question_id not in val_q and t.question_id not in test_q)
        validation = tuple(t for t in trajs if t.question_id in val_q)
        test = tuple(t for t in trajs if t.question_id in test_q)
    else:
        idx = list(range(n))
        rng.shuffle(idx)
        n_val = _round_half_up(ratios[1] * n)
        n_test = _round_half_up(ratios[2] * n)
        if n_val + n_test >= n:
            raise ValueError(f"split of {n} trajectories leaves an empty training set")
        val_idx = set(idx[:n_val])
        test_idx = set(idx[n_val : n_val + n_test])
        train = tuple(trajs[i] for i in range(n) if i not in val_idx and i not in test_idx)
        validation = tuple(trajs[i] for i in sorted(val_idx))
        test = tuple(trajs[i] for i in sorted(test_idx))
    return DatasetSplit(train=train, validation=validation, test=test, seed=seed)
