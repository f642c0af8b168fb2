"""In-process OpenAI-compatible stub endpoint serving canned logprob responses."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class StubState:
    """Mutable behavior knobs shared with the running server."""

    def __init__(self):
        self.lock = threading.Lock()
        self.requests: list[dict] = []
        self.fail_always: set[tuple[str, int]] = set()  # (answer tag, seed) -> permanent 500
        self.fail_once_budget: dict[tuple[str, int], int] = {}  # remaining 500s before success

    def record(self, payload: dict) -> None:
        with self.lock:
            self.requests.append(payload)

    def should_fail(self, key: tuple[str, int]) -> bool:
        with self.lock:
            if key in self.fail_always:
                return True
            remaining = self.fail_once_budget.get(key, 0)
            if remaining > 0:
                self.fail_once_budget[key] = remaining - 1
                return True
            return False


_ANS_RE = re.compile(r"\[ans=([^\]]*)\]")


def _logprob(seed: int, step: int, rank: int) -> float:
    digest = hashlib.blake2b(f"{seed}:{step}:{rank}".encode(), digest_size=4).digest()
    return -(int.from_bytes(digest, "big") % 4000) / 1000.0 - 0.001


def canned_response(prompt: str, seed: int, n_logprobs: int, n_steps: int = 6) -> dict:
    """Deterministic completion with per-step top-logprob dicts.

    Dict entries are emitted in arbitrary (insertion) order, not sorted, so the
    adapter's defensive re-sort is exercised. One extra entry beyond the
    requested count mimics endpoints that return top_k rather than `logprobs`.
    """
    m = _ANS_RE.search(prompt)
    tag = m.group(1) if m else ""
    text = "Working through the problem step by step. "
    text += f"The final answer is \\boxed{{{tag}}}." if tag else "No definitive conclusion."
    tokens = [f"tok{i}" for i in range(n_steps)]
    top = []
    for step in range(n_steps):
        values = [_logprob(seed, step, r) for r in range(n_logprobs + 1)]
        entry = {f"w{r}": v for r, v in enumerate(values)}  # unsorted on purpose
        top.append(entry)
    return {
        "id": f"cmpl-{seed}",
        "object": "text_completion",
        "choices": [
            {
                "index": 0,
                "text": text,
                "finish_reason": "stop",
                "logprobs": {
                    "tokens": tokens,
                    "token_logprobs": [top[i]["w0"] for i in range(n_steps)],
                    "top_logprobs": top,
                },
            }
        ],
    }


def make_handler(state: StubState):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep test output quiet
            pass

        def do_POST(self):
            if self.path != "/v1/completions":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length))
            state.record(payload)
            m = _ANS_RE.search(payload.get("prompt", ""))
            key = (m.group(1) if m else "", int(payload.get("seed", 0)))
            if state.should_fail(key):
                self.send_response(500)
                self.end_headers()
                self.wfile.write(b"boom")
                return
            body = json.dumps(
                canned_response(payload["prompt"], int(payload.get("seed", 0)), int(payload["logprobs"]))
            ).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    return Handler


class StubEndpoint:
    def __init__(self):
        self.state = StubState()
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), make_handler(self.state))
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        return False
