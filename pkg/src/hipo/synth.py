"""Synthetic segmented arithmetic preference data and final-answer accuracy.

Stand-in benchmark at desk scale: integer-addition questions with templated
three-segment responses. The chosen response restates the question, walks
digit-wise addition steps, and answers with the marker "Answer: <int>"; the
rejected response reuses the template with one of three flaw modes
(wrong-step, wrong-final, off-topic). Everything is deterministic given the
seed; per-item generation seeds derive as seed XOR item index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import PreferencePair, SegmentedResponse
from .model import ModelParams, detokenize, generate, prompt_ids

MODES = ("wrong-step", "wrong-final", "off-topic")

PROMPT_TEMPLATE = "Q: {query}\n"
ANSWER_MARKER = "Answer:"


@dataclass(frozen=True)
class SynthTask:
    query: str
    correct_answer: str
    distractor_answer: str
    flawed_reasoning_mode: str

    def __post_init__(self):
        if self.correct_answer == self.distractor_answer:
            raise ValueError("distractor must differ from the correct answer")
        if self.flawed_reasoning_mode not in MODES:
            raise ValueError(f"unknown flaw mode {self.flawed_reasoning_mode!r}")


@dataclass(frozen=True)
class _Item:
    a: int
    b: int
    mode: str
    bump: int  # offset applied to flawed sums, in [1, 9]
    c: int  # decoy operands for off-topic
    d: int


def _draw_items(n: int, seed: int, max_operand: int) -> list[_Item]:
    if n <= 0:
        raise ValueError("n must be > 0")
    if max_operand < 2:
        raise ValueError("max_operand must be >= 2")
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        a, b = (int(v) for v in rng.integers(0, max_operand + 1, size=2))
        mode = MODES[int(rng.integers(0, len(MODES)))]
        bump = int(rng.integers(1, 10))
        c, d = (int(v) for v in rng.integers(0, max_operand + 1, size=2))
        if c + d == a + b:
            d = d + 1 if d < max_operand else d - 1
        items.append(_Item(a, b, mode, bump, c, d))
    return items


def _mt_text(a: int, b: int, first_bump: int = 0) -> tuple[str, int]:
    """Digit-wise addition steps; `first_bump` corrupts the first partial sum."""
    if b >= 10:
        tens, ones = b - b % 10, b % 10
        s1 = a + tens + first_bump
        s = s1 + ones
        return f"{a}+{tens}={s1}; {s1}+{ones}={s}; total {s}.\n", s
    s = a + b + first_bump
    return f"{a}+{b}={s}; total {s}.\n", s


def _response(a: int, b: int, first_bump: int = 0, final_bump: int = 0) -> SegmentedResponse:
    rq = f"Restating: find {a}+{b}.\n"
    mt, s = _mt_text(a, b, first_bump)
    return SegmentedResponse.from_texts(rq, mt, f"{ANSWER_MARKER} {s + final_bump}")


def _rejected(item: _Item) -> SegmentedResponse:
    if item.mode == "wrong-step":
        # flawed intermediate carried consistently through to the answer
        return _response(item.a, item.b, first_bump=item.bump)
    if item.mode == "wrong-final":
        # correct steps, contradicting final answer
        return _response(item.a, item.b, final_bump=item.bump)
    # off-topic: restates and answers a different question entirely
    return _response(item.c, item.d)


def _task(item: _Item) -> SynthTask:
    correct = item.a + item.b
    if item.mode == "off-topic":
        distractor = item.c + item.d
    else:
        distractor = correct + item.bump
    return SynthTask(
        query=f"What is {item.a}+{item.b}?",
        correct_answer=str(correct),
        distractor_answer=str(distractor),
        flawed_reasoning_mode=item.mode,
    )


def _pair(item: _Item) -> PreferencePair:
    return PreferencePair(
        prompt=PROMPT_TEMPLATE.format(query=f"What is {item.a}+{item.b}?"),
        chosen=_response(item.a, item.b),
        rejected=_rejected(item),
    )


def gen_tasks(n: int, seed: int, max_operand: int = 50) -> list[SynthTask]:
    return [_task(it) for it in _draw_items(n, seed, max_operand)]


def gen_dataset(n: int, seed: int, max_operand: int = 50, modes=MODES) -> list[PreferencePair]:
    """Segmented preference pairs; deterministic given (n, seed, max_operand).

    `modes` restricts which flaw modes appear (items drawn for other modes
    are re-templated onto the allowed set in round-robin order).
    """
    items = _draw_items(n, seed, max_operand)
    if tuple(modes) != MODES:
        allowed = tuple(modes)
        items = [
            _Item(it.a, it.b, allowed[i % len(allowed)], it.bump, it.c, it.d)
            for i, it in enumerate(items)
        ]
    return [_pair(it) for it in items]


def extract_answer(generated: str) -> str:
    """First whitespace-delimited token after the last "Answer:" marker.

    Total: returns "" when the marker is absent or nothing follows it.
    """
    idx = generated.rfind(ANSWER_MARKER)
    if idx < 0:
        return ""
    rest = generated[idx + len(ANSWER_MARKER):].split()
    return rest[0] if rest else ""


@dataclass
class EvalItem:
    prompt: str
    generated: str
    expected: str
    extracted: str
    correct: bool


@dataclass
class EvalReport:
    n_items: int
    n_correct: int
    accuracy: float
    items: list[EvalItem] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_items": self.n_items,
                "n_correct": self.n_correct,
                "accuracy": self.accuracy,
                "items": [vars(i) for i in self.items],
            },
            ensure_ascii=False,
            indent=2,
        )


def _evaluate(params: ModelParams, prompts_expected, temperature: float, seed: int, max_new: int) -> EvalReport:
    items = []
    n_correct = 0
    for i, (prompt_text, expected) in enumerate(prompts_expected):
        gen = generate(params, prompt_ids(prompt_text), temperature, seed ^ i, max_new)
        text = detokenize(gen).decode("utf-8", errors="replace")
        extracted = extract_answer(text)
        ok = extracted == expected
        n_correct += ok
        items.append(EvalItem(prompt_text, text, expected, extracted, ok))
    return EvalReport(len(items), n_correct, n_correct / len(items), items)


def eval_accuracy(
    params: ModelParams,
    tasks: list[SynthTask],
    temperature: float = 0.1,
    seed: int = 0,
    max_new: int = 96,
) -> EvalReport:
    """Generate with the shared prompt template and grade by exact match."""
    if not tasks:
        raise ValueError("tasks must be non-empty")
    pe = [(PROMPT_TEMPLATE.format(query=t.query), t.correct_answer) for t in tasks]
    return _evaluate(params, pe, temperature, seed, max_new)


def evaluate_records(
    params: ModelParams,
    pairs: list[PreferencePair],
    temperature: float = 0.1,
    seed: int = 0,
    max_new: int = 96,
) -> EvalReport:
    """Grade against a JSONL dataset: the expected answer is extracted from
    each record's chosen refined_answer, the record prompt is used verbatim."""
    if not pairs:
        raise ValueError("pairs must be non-empty")
    pe = [(p.prompt, extract_answer(p.chosen.text_a)) for p in pairs]
    return _evaluate(params, pe, temperature, seed, max_new)
