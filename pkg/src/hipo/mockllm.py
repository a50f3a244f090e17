"""Bundled mock chat-completions endpoint.

Serves POST requests shaped like {model, messages, temperature} and answers
deterministically: augmentation prompts get a valid six-field rewrite built
from the inputs, judge prompts get nine rubric scores derived from a SHA-256
of the judged payload (so means are reproducible). A scripted reply queue
lets tests exercise error paths (non-JSON replies, missing fields, 5xx).

Run standalone with `python -m hipo.mockllm --port 8731`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .llmclient import JUDGE_GROUPS


def deterministic_scores(problem: str, response: str) -> dict[str, dict[str, float]]:
    """Nine 0-10 scores as a pure function of the judged payload."""
    digest = hashlib.sha256(f"{problem}\x00{response}".encode("utf-8")).hexdigest()
    out: dict[str, dict[str, float]] = {}
    i = 0
    for group, keys in JUDGE_GROUPS.items():
        out[group] = {}
        for key in keys:
            out[group][key] = (int(digest[i * 4 : i * 4 + 4], 16) % 101) / 10.0
            i += 1
    return out


def _augment_reply(payload: dict) -> dict:
    instruction = str(payload.get("instruction", "the request"))[:120]
    tag = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:8]
    sides = {}
    for side in ("output_a", "output_b"):
        original = str(payload.get(side, ""))[:120] or f"response {tag}"
        sides[side] = {
            "refined_query": f"Refined ({tag}): {instruction}",
            "meta_thinking": f"Step 1: restate the task. Step 2: adapt {side}. Step 3: answer.",
            "refined_answer": f"{original} [rewritten {side}]",
        }
    return sides


def default_reply(request_body: dict) -> str:
    """Dispatch on the system prompt: augmentation vs judging."""
    messages = request_body.get("messages", [])
    system = next((m.get("content", "") for m in messages if m.get("role") == "system"), "")
    user = next(
        (m.get("content", "") for m in reversed(messages) if m.get("role") == "user"), "{}"
    )
    try:
        payload = json.loads(user)
    except json.JSONDecodeError:
        payload = {}
    if "cognitive structure" in system:
        return json.dumps(_augment_reply(payload))
    if "expert evaluator" in system:
        return json.dumps(
            deterministic_scores(str(payload.get("problem", "")), str(payload.get("response", "")))
        )
    return json.dumps({"echo": payload})


class MockLLMServer:
    """Threaded in-process server; use as a context manager in tests.

    `script` entries are (status, raw_content) pairs consumed once each
    before falling back to the deterministic default behavior. raw_content
    is placed verbatim into choices[0].message.content.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.script: deque[tuple[int, str]] = deque()
        self.requests_seen: list[dict] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    body = {}
                outer.requests_seen.append(body)
                if outer.script:
                    status, content = outer.script.popleft()
                else:
                    status, content = 200, default_reply(body)
                reply = {
                    "id": "mock-0",
                    "object": "chat.completion",
                    "model": body.get("model", "mock"),
                    "choices": [
                        {
                            "index": 0,
                            "message": {"role": "assistant", "content": content},
                            "finish_reason": "stop",
                        }
                    ],
                }
                data = json.dumps(reply).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass  # keep test output quiet

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def start(self) -> "MockLLMServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockLLMServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Deterministic mock chat-completions endpoint")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8731)
    args = parser.parse_args(argv)
    server = MockLLMServer(args.host, args.port).start()
    print(f"mock endpoint listening on {server.url}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
