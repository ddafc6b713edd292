"""Synthetic chart-style QA tasks with verifiable answers.

Each task is a small table of labelled bar values (the "visual facts"), a
question from a fixed family and the exact answer implied by the two.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import InvalidInputError
from .vocab import DIGITS, KINDS, LABELS, TITLES, VOCAB, Vocabulary

VALUE_WIDTH = 3
SUM_WIDTH = 4
EASY_RECORDS = (2, 3)
HARD_RECORDS = (4, 6)

# Question mix per difficulty, in KINDS order: max, min, sum, diff, get.
# Carry/borrow arithmetic is rare: the policy learns it far slower than lookup
# and comparison, and it would otherwise dominate every accuracy curve.
QUESTION_MIX = {
    "easy": (0.25, 0.25, 0.1, 0.1, 0.3),
    "hard": (0.3, 0.3, 0.1, 0.1, 0.2),
}


@dataclass(frozen=True)
class VisualFacts:
    records: tuple[tuple[str, int], ...]
    title: str = "T0"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple((str(l), int(v)) for l, v in self.records))
        labels = [l for l, _ in self.records]
        if len(set(labels)) != len(labels):
            raise InvalidInputError(f"duplicate labels in facts: {labels}")
        if not 1 <= len(self.records) <= 6:
            raise InvalidInputError("facts must hold between 1 and 6 records")
        for label, value in self.records:
            if label not in LABELS:
                raise InvalidInputError(f"unknown label {label!r}")
            if not 1 <= value <= 999:
                raise InvalidInputError(f"value {value} outside [1, 999]")
        if self.title not in TITLES:
            raise InvalidInputError(f"unknown title {self.title!r}")

    def value_of(self, label: str) -> int:
        for l, v in self.records:
            if l == label:
                return v
        raise KeyError(label)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(l for l, _ in self.records)


@dataclass(frozen=True)
class Question:
    kind: str
    args: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        arity = {"max": 0, "min": 0, "sum": 0, "diff": 2, "get": 1}
        if self.kind not in arity:
            raise InvalidInputError(f"unknown question kind {self.kind!r}")
        if len(self.args) != arity[self.kind]:
            raise InvalidInputError(f"{self.kind} takes {arity[self.kind]} label argument(s)")
        if self.kind == "diff" and self.args[0] == self.args[1]:
            raise InvalidInputError("diff needs two distinct labels")

    def tokens(self, vocab: Vocabulary = VOCAB) -> list[int]:
        return vocab.ids((self.kind, *self.args))


@dataclass(frozen=True)
class AnswerValue:
    kind: str
    numeric: int | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind == "numeric":
            if self.numeric is None or self.label is not None:
                raise InvalidInputError("numeric answer needs exactly the numeric field")
        elif self.kind == "label":
            if self.label is None or self.numeric is not None:
                raise InvalidInputError("label answer needs exactly the label field")
        else:
            raise InvalidInputError(f"unknown answer kind {self.kind!r}")

    @classmethod
    def of(cls, value: int | str) -> AnswerValue:
        if isinstance(value, str):
            return cls("label", label=value)
        return cls("numeric", numeric=int(value))

    def to_json(self):
        return self.numeric if self.kind == "numeric" else self.label


@dataclass(frozen=True)
class TaskInstance:
    facts: VisualFacts
    question: Question
    gold_answer: AnswerValue
    reference_trace: tuple[int, ...]
    prompt: tuple[int, ...]
    task_id: str = ""
    difficulty: str = "easy"

    @property
    def question_tokens(self) -> list[int]:
        return self.question.tokens()


def solve(facts: VisualFacts, question: Question) -> AnswerValue:
    """Exact answer of ``question`` over ``facts``."""
    values = dict(facts.records)
    if question.kind == "max":
        return AnswerValue.of(max(facts.records, key=lambda r: r[1])[0])
    if question.kind == "min":
        return AnswerValue.of(min(facts.records, key=lambda r: r[1])[0])
    if question.kind == "sum":
        return AnswerValue.of(sum(values.values()))
    if question.kind == "diff":
        a, b = question.args
        return AnswerValue.of(abs(values[a] - values[b]))
    return AnswerValue.of(values[question.args[0]])


def required_labels(facts: VisualFacts, question: Question) -> tuple[str, ...]:
    """Labels whose records must be read to answer the question, in reading order."""
    if question.kind in ("get", "diff"):
        return question.args
    return facts.labels


def digits(value: int, width: int) -> list[str]:
    if value < 0 or value >= 10**width:
        raise InvalidInputError(f"{value} does not fit in {width} digits")
    return list(str(value).zfill(width))


def serialize_prompt(facts: VisualFacts, question: Question, vocab: Vocabulary = VOCAB) -> list[int]:
    toks = [facts.title]
    for label, value in facts.records:
        toks.append(label)
        toks.extend(digits(value, VALUE_WIDTH))
    toks.append(question.kind)
    toks.extend(question.args)
    return vocab.ids(toks)


def parse_prompt(prompt: Iterable[int], vocab: Vocabulary = VOCAB) -> tuple[VisualFacts, Question]:
    toks = vocab.decode(list(prompt))
    if not toks or toks[0] not in TITLES:
        raise InvalidInputError("prompt must start with a title token")
    title, i, records = toks[0], 1, []
    while i < len(toks) and toks[i] in LABELS:
        chunk = toks[i + 1:i + 1 + VALUE_WIDTH]
        if len(chunk) != VALUE_WIDTH or any(c not in DIGITS for c in chunk):
            raise InvalidInputError(f"malformed record at prompt position {i}")
        records.append((toks[i], int("".join(chunk))))
        i += 1 + VALUE_WIDTH
    if i >= len(toks) or toks[i] not in KINDS:
        raise InvalidInputError("prompt is missing its question")
    return VisualFacts(tuple(records), title), Question(toks[i], tuple(toks[i + 1:]))


def max_prompt_length() -> int:
    return 1 + 6 * (1 + VALUE_WIDTH) + 3


def generate_task(seed: int, difficulty: str = "easy", trace_style: str = "structured") -> TaskInstance:
    """Pure function of (seed, difficulty, trace_style)."""
    from .traces import TraceTemplate, build_reference_trace

    if difficulty not in QUESTION_MIX:
        raise InvalidInputError(f"unknown difficulty {difficulty!r}")
    rng = random.Random(f"task:{difficulty}:{seed}")
    lo, hi = EASY_RECORDS if difficulty == "easy" else HARD_RECORDS
    n = rng.randint(lo, hi)
    labels = rng.sample(LABELS, n)
    values = rng.sample(range(1, 1000), n)
    facts = VisualFacts(tuple(zip(labels, values)), rng.choice(TITLES))
    kind = rng.choices(KINDS, weights=QUESTION_MIX[difficulty])[0]
    if kind == "get":
        question = Question(kind, (rng.choice(labels),))
    elif kind == "diff":
        question = Question(kind, tuple(rng.sample(labels, 2)))
    else:
        question = Question(kind)
    gold = solve(facts, question)
    trace = build_reference_trace(facts, question, gold, TraceTemplate(style=trace_style))
    return TaskInstance(
        facts=facts,
        question=question,
        gold_answer=gold,
        reference_trace=tuple(trace),
        prompt=tuple(serialize_prompt(facts, question)),
        task_id=f"{difficulty}-{seed}",
        difficulty=difficulty,
    )


def task_to_dict(task: TaskInstance) -> dict:
    return {
        "task_id": task.task_id,
        "difficulty": task.difficulty,
        "title": task.facts.title,
        "facts": [[l, v] for l, v in task.facts.records],
        "question": task.question.kind,
        "args": list(task.question.args),
        "gold": task.gold_answer.to_json(),
        "reference_trace": list(task.reference_trace),
    }


def task_from_dict(d: dict) -> TaskInstance:
    facts = VisualFacts(tuple((l, v) for l, v in d["facts"]), d["title"])
    question = Question(d["question"], tuple(d["args"]))
    gold = AnswerValue.of(d["gold"])
    if gold != solve(facts, question):
        raise InvalidInputError(f"task {d.get('task_id')!r}: gold answer disagrees with facts")
    return TaskInstance(
        facts=facts,
        question=question,
        gold_answer=gold,
        reference_trace=tuple(int(t) for t in d["reference_trace"]),
        prompt=tuple(serialize_prompt(facts, question)),
        task_id=d.get("task_id", ""),
        difficulty=d.get("difficulty", "easy"),
    )


def save_tasks(tasks: Iterable[TaskInstance], path: str | Path) -> None:
    with open(path, "w") as f:
        for t in tasks:
            f.write(json.dumps(task_to_dict(t), sort_keys=True) + "\n")


def load_tasks(path: str | Path) -> list[TaskInstance]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(task_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass
class TaskSampler:
    """Deterministic stream of tasks with a fixed hard/easy mix."""

    seed: int
    hard_fraction: float = 0.5
    trace_style: str = "structured"
    offset: int = 0

    def task(self, index: int) -> TaskInstance:
        rng = random.Random(f"mix:{self.seed}:{index}")
        difficulty = "hard" if rng.random() < self.hard_fraction else "easy"
        return generate_task(self.seed * 1_000_003 + self.offset + index, difficulty, self.trace_style)

    def take(self, n: int, start: int = 0) -> list[TaskInstance]:
        return [self.task(start + i) for i in range(n)]
