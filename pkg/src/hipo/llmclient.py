"""Chat-completions client for dataset augmentation and rubric judging.

Provider-agnostic: any endpoint accepting POST {model, messages,
temperature} and answering with choices[0].message.content works. Requests
retry with exponential backoff on transport failures and malformed-JSON
replies; schema violations and out-of-range scores never retry and never
clamp. Prompt templates are frozen strings so request bodies are byte-stable
for identical inputs.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import requests

ENV_ENDPOINT = "HIPO_LLM_ENDPOINT"
ENV_MODEL = "HIPO_LLM_MODEL"
ENV_KEY = "HIPO_LLM_KEY"


class EndpointError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class AugmentationParseError(ValueError):
    """Reply was not the requested strict JSON, even after retries."""

    def __init__(self, raw_reply: str):
        super().__init__(f"endpoint reply is not the requested strict JSON: {raw_reply[:200]!r}")
        self.raw_reply = raw_reply


class ClientSchemaError(ValueError):
    """A structurally valid reply is missing or mistyping a required field."""

    def __init__(self, path: str, message: str = "missing or invalid"):
        super().__init__(f"reply field '{path}': {message}")
        self.path = path


class ScoreRangeError(ValueError):
    def __init__(self, path: str, value: float):
        super().__init__(f"score '{path}' = {value!r} outside [0, 10]")
        self.path = path
        self.value = value


class EmptyScoreSetError(ValueError):
    pass


AUGMENT_PROMPT = """You are given a dataset of instructions, two model outputs (output_a and output_b).

Your task is to rewrite both outputs into the following cognitive structure:

1. Refined Query (Rq) --- Rewrite the original query into an elaborate one that contains more explanations or context for answering the original query.

2. Meta-Thinking (Mt) --- Provide structured reasoning steps that logically lead to the answer.

3. Refined Answer (A) --- Give the final, polished response that directly addresses the query, based on Mt.

Format your response strictly as JSON with the following structure:

{"output_a": {"refined_query": "...", "meta_thinking": "...", "refined_answer": "..."}, "output_b": {"refined_query": "...", "meta_thinking": "...", "refined_answer": "..."}}

Maintain the preference relationship: if output_a was originally preferred, ensure your rewritten output_a remains of higher quality than output_b. Do not add any text before or after the JSON."""

JUDGE_PROMPT = """You are an expert evaluator of mathematical reasoning. Given a problem and a model response, evaluate the response on the following criteria, each scored 0-10:

Coherence: Logical flow, structural organization, consistency.

Accuracy: Factual correctness, domain knowledge application, reasoning validity, final answer correctness.

Goal Completion: Strategy usefulness, progress toward solution, partial success recognition, error robustness.

Return a JSON object: {"coherence": {"logical_flow": ..., "structural_organization": ..., "consistency": ...}, "accuracy": {"domain_knowledge": ..., "reasoning_validity": ...}, "goal_completion": {"strategy_usefulness": ..., "progress_toward_solution": ..., "partial_success": ..., "error_robustness": ...}}. Do not add any text before or after the JSON."""

JUDGE_GROUPS: dict[str, tuple[str, ...]] = {
    "coherence": ("logical_flow", "structural_organization", "consistency"),
    "accuracy": ("domain_knowledge", "reasoning_validity"),
    "goal_completion": (
        "strategy_usefulness",
        "progress_toward_solution",
        "partial_success",
        "error_robustness",
    ),
}

RADAR_AXES: tuple[str, ...] = tuple(k for keys in JUDGE_GROUPS.values() for k in keys)

_RESPONSE_KEYS = ("refined_query", "meta_thinking", "refined_answer")


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    api_key: str | None = None
    temperature: float = 0.0  # judge stability: greedy by default
    timeout: float = 30.0
    max_tries: int = 5
    backoff_base: float = 1.0
    max_in_flight: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        url = os.environ.get(ENV_ENDPOINT)
        model = os.environ.get(ENV_MODEL)
        if not url or not model:
            raise EndpointError(
                f"{ENV_ENDPOINT} and {ENV_MODEL} must be set (and {ENV_KEY} if the endpoint needs it)"
            )
        return cls(url=url, model=model, api_key=os.environ.get(ENV_KEY), **overrides)


@dataclass(frozen=True)
class AugmentedRecord:
    """Both rewritten outputs; six segment fields, all non-empty."""

    output_a: dict[str, str]
    output_b: dict[str, str]

    def response_texts(self, side: str) -> tuple[str, str, str]:
        out = self.output_a if side == "output_a" else self.output_b
        return out["refined_query"], out["meta_thinking"], out["refined_answer"]


@dataclass(frozen=True)
class JudgeScores:
    logical_flow: float
    structural_organization: float
    consistency: float
    domain_knowledge: float
    reasoning_validity: float
    strategy_usefulness: float
    progress_toward_solution: float
    partial_success: float
    error_robustness: float

    def __post_init__(self):
        for axis in RADAR_AXES:
            v = getattr(self, axis)
            if not (0.0 <= v <= 10.0):
                raise ScoreRangeError(axis, v)

    def as_dict(self) -> dict[str, float]:
        return {axis: getattr(self, axis) for axis in RADAR_AXES}


@dataclass(frozen=True)
class RadarSummary:
    means: dict[str, float]
    count: int

    def to_json(self) -> str:
        return json.dumps({"count": self.count, "means": self.means}, indent=2)


def build_chat_body(cfg: EndpointConfig, system: str, user: str) -> dict:
    return {
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": cfg.temperature,
    }


def build_augment_request(
    cfg: EndpointConfig, instruction: str, output_a: str, output_b: str, preferred_label: str
) -> dict:
    user = json.dumps(
        {
            "instruction": instruction,
            "output_a": output_a,
            "output_b": output_b,
            "preferred": preferred_label,
        },
        ensure_ascii=False,
    )
    return build_chat_body(cfg, AUGMENT_PROMPT, user)


def build_judge_request(cfg: EndpointConfig, problem: str, response: str) -> dict:
    user = json.dumps({"problem": problem, "response": response}, ensure_ascii=False)
    return build_chat_body(cfg, JUDGE_PROMPT, user)


def _post_chat(cfg: EndpointConfig, body: dict) -> str:
    """POST with bounded retries; returns the first message content string.

    Retries transport failures, non-2xx statuses and replies that are not
    strict JSON objects. Raises EndpointError / AugmentationParseError after
    cfg.max_tries attempts.
    """
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    last_error: Exception | None = None
    last_raw: str | None = None
    for attempt in range(cfg.max_tries):
        if attempt:
            time.sleep(cfg.backoff_base * 2 ** (attempt - 1))
        try:
            resp = requests.post(cfg.url, json=body, headers=headers, timeout=cfg.timeout)
        except requests.RequestException as e:
            last_error = EndpointError(f"transport failure: {e}")
            continue
        if resp.status_code != 200:
            last_error = EndpointError(
                f"endpoint returned status {resp.status_code}", status=resp.status_code
            )
            continue
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            last_error = EndpointError(f"malformed completion envelope: {e}")
            continue
        try:
            json.loads(content)
        except json.JSONDecodeError:
            last_raw = content
            last_error = None
            continue
        return content
    if last_raw is not None:
        raise AugmentationParseError(last_raw)
    raise last_error if last_error else EndpointError("endpoint failed with no diagnostics")


def _require_str(obj: dict, path: str) -> str:
    cur = obj
    for p in path.split("."):
        if not isinstance(cur, dict) or p not in cur:
            raise ClientSchemaError(path)
        cur = cur[p]
    if not isinstance(cur, str) or cur == "":
        raise ClientSchemaError(path, "must be a non-empty string")
    return cur


def augment_pair(
    cfg: EndpointConfig,
    instruction: str,
    output_a: str,
    output_b: str,
    preferred_label: str = "output_a",
) -> AugmentedRecord:
    """Rewrite both outputs into the three-segment structure via the endpoint."""
    for name, value in (("instruction", instruction), ("output_a", output_a), ("output_b", output_b)):
        if not value:
            raise ValueError(f"{name} must be non-empty")
    if preferred_label not in ("output_a", "output_b"):
        raise ValueError("preferred_label must be 'output_a' or 'output_b'")
    body = build_augment_request(cfg, instruction, output_a, output_b, preferred_label)
    content = _post_chat(cfg, body)
    obj = json.loads(content)
    if not isinstance(obj, dict):
        raise AugmentationParseError(content)
    sides = {}
    for side in ("output_a", "output_b"):
        sides[side] = {key: _require_str(obj, f"{side}.{key}") for key in _RESPONSE_KEYS}
    return AugmentedRecord(output_a=sides["output_a"], output_b=sides["output_b"])


def judge_response(cfg: EndpointConfig, problem: str, response: str) -> JudgeScores:
    """Score one response on the nine rubric axes; out-of-range is an error."""
    body = build_judge_request(cfg, problem, response)
    content = _post_chat(cfg, body)
    obj = json.loads(content)
    if not isinstance(obj, dict):
        raise ClientSchemaError("<reply>", "must be a JSON object")
    values: dict[str, float] = {}
    for group, keys in JUDGE_GROUPS.items():
        if group not in obj or not isinstance(obj[group], dict):
            raise ClientSchemaError(group)
        for key in keys:
            if key not in obj[group]:
                raise ClientSchemaError(f"{group}.{key}")
            v = obj[group][key]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ClientSchemaError(f"{group}.{key}", "must be a number")
            if not (0.0 <= float(v) <= 10.0):
                raise ScoreRangeError(f"{group}.{key}", float(v))
            values[key] = float(v)
    return JudgeScores(**values)


def aggregate_scores(scores: Sequence[JudgeScores]) -> RadarSummary:
    """Arithmetic mean per radar axis, fixed summation order."""
    if len(scores) == 0:
        raise EmptyScoreSetError("cannot aggregate an empty score set")
    means = {
        axis: float(np.mean([getattr(s, axis) for s in scores], dtype=np.float64))
        for axis in RADAR_AXES
    }
    return RadarSummary(means=means, count=len(scores))


def to_training_record(record: AugmentedRecord, prompt: str, preferred_label: str = "output_a") -> str:
    """Serialize an augmentation result as one training-data JSONL line."""
    chosen = "output_a" if preferred_label == "output_a" else "output_b"
    rejected = "output_b" if chosen == "output_a" else "output_a"
    return json.dumps(
        {
            "prompt": prompt,
            "chosen": getattr(record, chosen),
            "rejected": getattr(record, rejected),
        },
        ensure_ascii=False,
    )


def _map_bounded(cfg: EndpointConfig, fn, items: Iterable) -> list:
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        return list(pool.map(fn, items))


def augment_many(
    cfg: EndpointConfig, triples: Sequence[tuple[str, str, str]], preferred_label: str = "output_a"
) -> list[AugmentedRecord]:
    """Bounded-concurrency augmentation; results in input order."""
    return _map_bounded(
        cfg, lambda t: augment_pair(cfg, t[0], t[1], t[2], preferred_label), triples
    )


def judge_many(cfg: EndpointConfig, items: Sequence[tuple[str, str]]) -> list[JudgeScores]:
    """Bounded-concurrency judging; results in input order."""
    return _map_bounded(cfg, lambda t: judge_response(cfg, t[0], t[1]), items)
