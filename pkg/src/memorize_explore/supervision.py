"""Exemplar pool and the rule-based refiner for memorization targets."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import InvalidInputError
from .tasks import AnswerValue, Question, TaskInstance, VisualFacts
from .traces import TraceTemplate, build_reference_trace, detect_variants
from .vocab import VOCAB, Vocabulary

DEFAULT_CAPACITY = 64


@dataclass(frozen=True)
class PoolEntry:
    trace: tuple[int, ...]
    task_id: str
    grade: str
    step: int
    kind: str | None = None


@dataclass
class ExemplarPool:
    """Bounded FIFO of High-graded traces."""

    capacity: int = DEFAULT_CAPACITY
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise InvalidInputError("pool capacity must be positive")
        self.entries = deque(self.entries, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def traces(self) -> list[tuple[int, ...]]:
        return [e.trace for e in self.entries]

    def latest_for(self, kind: str) -> PoolEntry | None:
        for entry in reversed(self.entries):
            if entry.kind == kind:
                return entry
        return None

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "entries": [{**asdict(e), "trace": list(e.trace)} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExemplarPool:
        entries = [PoolEntry(tuple(e["trace"]), e["task_id"], e["grade"], e["step"], e.get("kind")) for e in d["entries"]]
        if any(e.grade != "High" for e in entries):
            raise InvalidInputError("pool file holds a non-High entry")
        if len(entries) > d["capacity"]:
            raise InvalidInputError("pool file holds more entries than its capacity")
        return cls(d["capacity"], deque(entries))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> ExemplarPool:
        return cls.from_dict(json.loads(Path(path).read_text()))


def admit_exemplar(pool: ExemplarPool, trace, grade: str, task_id: str, step: int,
                   kind: str | None = None) -> ExemplarPool:
    """Admit ``trace`` iff it graded High; the oldest entry drops out at capacity."""
    if grade == "High":
        pool.entries.append(PoolEntry(tuple(int(t) for t in trace), task_id, grade, step, kind))
    return pool


def refine_ground_truth(
    facts: VisualFacts,
    question: Question,
    gold_answer: AnswerValue,
    template: TraceTemplate = TraceTemplate(),
    pool: ExemplarPool | None = None,
    vocab: Vocabulary = VOCAB,
) -> list[int]:
    """Structured target built from the facts, borrowing phrasing from the pool.

    The newest pooled exemplar of the same question kind sets the phrasing
    variant of each segment; with no such exemplar the canonical template
    output is returned.
    """
    template.validate()
    if pool is not None:
        entry = pool.latest_for(question.kind)
        if entry is not None:
            variants = detect_variants(entry.trace, vocab)
            if variants is not None:
                template = template.with_variants(variants)
    return build_reference_trace(facts, question, gold_answer, template, vocab)


def supervision_target(task: TaskInstance, pool: ExemplarPool | None, refine_enabled: bool,
                       template: TraceTemplate = TraceTemplate()) -> list[int]:
    if not refine_enabled:
        return list(task.reference_trace)
    return refine_ground_truth(task.facts, task.question, task.gold_answer, template, pool)
