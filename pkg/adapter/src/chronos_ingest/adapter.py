"""Sample reasoning trajectories from an OpenAI-compatible completions API.

Writes the trajectory JSONL wire format consumed downstream:
    line 1:  {"format_version": 1, "k_stat": K}
    line 2+: {"question_id", "trajectory_id", "answer", "label"?, "steps": [[...K logprobs]...]}

Runs are resumable: a (question_id, trajectory_id) pair already present in the
output file is never requested again, and trajectory ids are a deterministic
hash of (question_id, sample index, seed policy), so reruns are idempotent.
Rows that cannot be emitted validly (missing logprobs, endpoint failures after
retries) are recorded in a failures sidecar, never silently dropped or
silently emitted.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import requests

FORMAT_VERSION = 1
AUTH_ENV_VAR = "CHRONOS_API_KEY"

PROMPT_TEMPLATES = {
    "math": "{prompt}\n\nPlease reason step by step, and put your final answer within \\boxed{{}}.",
    "choice": "{prompt}\n\nPlease reason step by step, and put your final answer within \\boxed{{}}, such as \\boxed{{A}}.",
    "plain": "{prompt}",
}

_INT_RE = re.compile(r"[+-]?\d+\Z")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20
    max_tokens: int = 2048
    logprobs: int = 20  # top-k logprobs recorded per step; becomes the file's k_stat
    prompt_template: str = "math"
    concurrency: int = 4
    max_retries: int = 3
    backoff_seconds: float = 0.5
    timeout: float = 120.0
    seed_base: int = 0  # request seed for sample i is seed_base + i

    def __post_init__(self):
        if self.logprobs < 1:
            raise ValueError("logprobs must be >= 1")
        if self.logprobs > self.top_k:
            raise ValueError(f"recorded top-{self.logprobs} exceeds the endpoint's top_k={self.top_k}")
        if self.prompt_template not in PROMPT_TEMPLATES:
            raise ValueError(f"unknown prompt template {self.prompt_template!r}")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def sampling_params(self) -> dict:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "top_k": self.top_k,
            "max_tokens": self.max_tokens,
            "logprobs": self.logprobs,
            "prompt_template": self.prompt_template,
            "seed_base": self.seed_base,
        }


@dataclass(frozen=True)
class Question:
    question_id: str
    prompt: str
    gold_answer: str | None = None


@dataclass
class IngestResult:
    written: int
    skipped: int
    failed: int
    output_path: Path
    failures_path: Path | None


def load_questions(path: str | Path) -> list[Question]:
    """Questions file: one JSON object per line with question_id, prompt,
    and an optional gold_answer."""
    questions = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            qid = str(obj["question_id"])
            if qid in seen:
                raise ValueError(f"line {line_no}: duplicate question_id {qid!r}")
            seen.add(qid)
            gold = obj.get("gold_answer")
            questions.append(Question(qid, str(obj["prompt"]), None if gold is None else str(gold)))
    if not questions:
        raise ValueError(f"{path}: no questions")
    return questions


def extract_boxed_answer(text: str) -> str:
    """Content of the last \\boxed{...} group (balanced braces), else ""."""
    marker = "\\boxed{"
    start = text.rfind(marker)
    if start < 0:
        return ""
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
                return text[begin:i].strip()
        i += 1
    return ""


def _normalize(answer: str) -> str:
    answer = answer.strip()
    if _INT_RE.match(answer):
        return str(int(answer))
    return answer


def trajectory_id(question_id: str, sample_index: int, seed_base: int) -> str:
    """Deterministic record identity, so interrupted runs resume idempotently."""
    key = f"{question_id}|{sample_index}|seed_base={seed_base}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def _extract_steps(choice: dict, k: int) -> list[list[float]]:
    """Per-step top-k logprobs from a completions choice, defensively re-sorted.

    Raises ValueError when any step lacks k finite non-positive values; such
    records must go to the failures sidecar rather than the output file.
    """
    logprobs = choice.get("logprobs")
    if not logprobs:
        raise ValueError("endpoint returned no logprobs")
    top = logprobs.get("top_logprobs")
    if not top:
        raise ValueError("endpoint returned no top_logprobs")
    steps = []
    for i, entry in enumerate(top):
        if entry is None:
            raise ValueError(f"step {i}: missing top_logprobs entry")
        values = sorted((float(v) for v in entry.values()), reverse=True)
        if len(values) < k:
            raise ValueError(f"step {i}: only {len(values)} logprobs, need {k}")
        values = values[:k]
        if any(v > 0.0 for v in values):
            raise ValueError(f"step {i}: positive log-probability from endpoint")
        steps.append(values)
    if not steps:
        raise ValueError("empty completion")
    return steps


def _request_completion(session: requests.Session, endpoint: EndpointConfig, prompt: str, seed: int) -> dict:
    payload = {
        "model": endpoint.model,
        "prompt": prompt,
        "temperature": endpoint.temperature,
        "top_p": endpoint.top_p,
        "top_k": endpoint.top_k,
        "max_tokens": endpoint.max_tokens,
        "logprobs": endpoint.logprobs,
        "seed": seed,
        "stream": False,
        "n": 1,
    }
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(AUTH_ENV_VAR)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    url = endpoint.base_url.rstrip("/") + "/v1/completions"
    last_error: Exception | None = None
    for attempt in range(endpoint.max_retries):
        try:
            resp = session.post(url, json=payload, headers=headers, timeout=endpoint.timeout)
            if resp.status_code >= 500:
                raise requests.HTTPError(f"server error {resp.status_code}")
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            last_error = exc
            if attempt + 1 < endpoint.max_retries:
                time.sleep(endpoint.backoff_seconds * (2**attempt))
    raise RuntimeError(f"endpoint failed after {endpoint.max_retries} attempts: {last_error}")


def _existing_keys(path: Path, k_stat: int) -> set[tuple[str, str]]:
    """Keys already present in a partially written output file."""
    keys: set[tuple[str, str]] = set()
    if not path.exists() or path.stat().st_size == 0:
        return keys
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("format_version") != FORMAT_VERSION or header.get("k_stat") != k_stat:
            raise ValueError(
                f"{path}: existing header {header} does not match this run "
                f"(format_version={FORMAT_VERSION}, k_stat={k_stat}); refusing to append"
            )
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            keys.add((rec["question_id"], rec["trajectory_id"]))
    return keys


def _validate_record(rec: dict, k_stat: int) -> None:
    # emitted rows must satisfy the downstream schema before the write completes
    for step_index, step in enumerate(rec["steps"]):
        if len(step) != k_stat:
            raise ValueError(f"step {step_index}: expected {k_stat} logprobs, found {len(step)}")
        for i, v in enumerate(step):
            if v > 0.0:
                raise ValueError(f"step {step_index}: positive log-probability at position {i}")
            if i > 0 and v > step[i - 1]:
                raise ValueError(f"step {step_index}: logprobs not sorted at position {i}")


def sample_trajectories(
    questions: Sequence[Question],
    n_per_question: int,
    endpoint: EndpointConfig,
    output_path: str | Path,
) -> IngestResult:
    """Sample n_per_question completions per question and append trajectory
    records to output_path (creating it, with header, when absent)."""
    if n_per_question < 1:
        raise ValueError("n_per_question must be >= 1")
    output_path = Path(output_path)
    k_stat = endpoint.logprobs
    template = PROMPT_TEMPLATES[endpoint.prompt_template]
    existing = _existing_keys(output_path, k_stat)

    jobs = []  # (question, sample_index, trajectory_id)
    skipped = 0
    for q in questions:
        for i in range(n_per_question):
            tid = trajectory_id(q.question_id, i, endpoint.seed_base)
            if (q.question_id, tid) in existing:
                skipped += 1
            else:
                jobs.append((q, i, tid))

    write_lock = threading.Lock()
    failures: list[dict] = []
    written = 0

    def fetch(job):
        q, i, tid = job
        prompt = template.format(prompt=q.prompt)
        data = _request_completion(session, endpoint, prompt, seed=endpoint.seed_base + i)
        choice = data["choices"][0]
        steps = _extract_steps(choice, k_stat)
        answer = extract_boxed_answer(choice.get("text", ""))
        rec = {
            "question_id": q.question_id,
            "trajectory_id": tid,
            "answer": answer,
            "steps": steps,
        }
        if q.gold_answer is not None:
            rec["label"] = _normalize(answer) == _normalize(q.gold_answer) if answer else False
        _validate_record(rec, k_stat)
        return rec

    new_file = not output_path.exists() or output_path.stat().st_size == 0
    with requests.Session() as session, open(output_path, "a", encoding="utf-8", newline="\n") as out:
        if new_file:
            out.write(json.dumps({"format_version": FORMAT_VERSION, "k_stat": k_stat}) + "\n")
            out.flush()
        with ThreadPoolExecutor(max_workers=endpoint.concurrency) as pool:
            futures = [(job, pool.submit(fetch, job)) for job in jobs]
            # a single appender keeps every JSONL line atomic
            for (q, i, tid), future in futures:
                try:
                    rec = future.result()
                except Exception as exc:
                    failures.append(
                        {"question_id": q.question_id, "sample_index": i, "trajectory_id": tid, "error": str(exc)}
                    )
                    continue
                with write_lock:
                    out.write(json.dumps(rec) + "\n")
                    out.flush()
                    written += 1

    failures_path = None
    if failures:
        failures_path = output_path.with_suffix(output_path.suffix + ".failures.jsonl")
        with open(failures_path, "a", encoding="utf-8", newline="\n") as f:
            for row in failures:
                f.write(json.dumps(row) + "\n")

    meta_path = output_path.with_suffix(output_path.suffix + ".meta.json")
    meta = {
        "sampling": endpoint.sampling_params(),
        "base_url": endpoint.base_url,
        "n_per_question": n_per_question,
        "questions": len(questions),
        "written": written,
        "skipped_existing": skipped,
        "failed": len(failures),
        "note": "logprobs recorded as returned by the endpoint (re-sorted); serving-side renormalization, if any, is not undone",
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    return IngestResult(
        written=written,
        skipped=skipped,
        failed=len(failures),
        output_path=output_path,
        failures_path=failures_path,
    )
