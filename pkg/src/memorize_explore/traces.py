"""Structured thinking traces: Extraction -> Calculation -> Conclusion.

A structured trace writes every intermediate value (running best, running
sum, the ordered pair of a difference), so each token is a local function of
the last few tokens plus the record being read. The "minimal" style keeps the
three segment headers but drops all intermediate values, standing in for the
loosely written traces a small model struggles to imitate.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidTemplateError
from .tasks import SUM_WIDTH, VALUE_WIDTH, AnswerValue, Question, VisualFacts, digits, required_labels
from .vocab import (
    ANSWER_CLOSE, ANSWER_OPEN, CALC, CONC, EOS, EXT, PHRASES, TRACE_CLOSE, TRACE_OPEN, VOCAB, Vocabulary,
)

SEGMENTS = ("extraction", "calculation", "conclusion")
SEGMENT_HEADERS = {"extraction": EXT, "calculation": CALC, "conclusion": CONC}
OP_FOR_KIND = {"max": ">", "min": "<", "sum": "+", "diff": "-", "get": "="}
STYLES = ("structured", "minimal")


@dataclass(frozen=True)
class TraceTemplate:
    """Segment order, per-segment phrasing variant and trace style."""

    segments: tuple[str, ...] = SEGMENTS
    variants: tuple[int, int, int] = (0, 0, 0)
    style: str = "structured"

    def validate(self) -> None:
        if tuple(self.segments) != SEGMENTS:
            raise InvalidTemplateError(
                f"template segments must be exactly {SEGMENTS} in order, got {tuple(self.segments)}"
            )
        if len(self.variants) != len(SEGMENTS) or any(v not in (0, 1, 2) for v in self.variants):
            raise InvalidTemplateError(f"bad phrasing variants {self.variants}")
        if self.style not in STYLES:
            raise InvalidTemplateError(f"unknown trace style {self.style!r}")

    def with_variants(self, variants) -> TraceTemplate:
        return TraceTemplate(self.segments, tuple(variants), self.style)


def answer_tokens(question: Question, answer: AnswerValue) -> list[str]:
    if answer.kind == "label":
        return [answer.label]
    width = SUM_WIDTH if question.kind == "sum" else VALUE_WIDTH
    return digits(answer.numeric, width)


def _record(label: str, value: int) -> list[str]:
    return [label, *digits(value, VALUE_WIDTH)]


def _calculation(facts: VisualFacts, question: Question) -> list[str]:
    kind = question.kind
    out: list[str] = []
    if kind in ("max", "min"):
        best = None
        for label, value in facts.records:
            wins = best is None or (value > best[1] if kind == "max" else value < best[1])
            if best is not None:
                # the question's operator when the new record takes over, "=" when the best stays
                out.append(OP_FOR_KIND[kind] if wins else "=")
            if wins:
                best = (label, value)
            out += _record(*best)
    elif kind == "sum":
        total = 0
        for label, value in facts.records:
            total += value
            out += [label, *digits(total, SUM_WIDTH)]
    elif kind == "diff":
        a, b = question.args
        va, vb = facts.value_of(a), facts.value_of(b)
        big, small = (a, b) if va >= vb else (b, a)
        out += [big, small, *digits(abs(va - vb), VALUE_WIDTH)]
    else:
        label = question.args[0]
        out += _record(label, facts.value_of(label))
    return out


def build_trace_strings(
    facts: VisualFacts, question: Question, answer: AnswerValue, template: TraceTemplate
) -> list[str]:
    template.validate()
    extraction = [t for label in required_labels(facts, question) for t in _record(label, facts.value_of(label))]
    if template.style == "minimal":
        body = [EXT, "the", "chart", *extraction, CALC, "the", "answer", "is", CONC]
    else:
        ve, vc, vk = template.variants
        body = [
            EXT, PHRASES["extraction"][ve], *extraction,
            CALC, PHRASES["calculation"][vc], OP_FOR_KIND[question.kind], *_calculation(facts, question),
            CONC, PHRASES["conclusion"][vk],
        ]
    return [TRACE_OPEN, *body, ANSWER_OPEN, *answer_tokens(question, answer), ANSWER_CLOSE, TRACE_CLOSE, EOS]


def build_reference_trace(
    facts: VisualFacts,
    question: Question,
    gold_answer: AnswerValue,
    template: TraceTemplate = TraceTemplate(),
    vocab: Vocabulary = VOCAB,
) -> list[int]:
    """Full response token ids (trace, answer, end marker) for a task."""
    return vocab.ids(build_trace_strings(facts, question, gold_answer, template))


def detect_variants(tokens, vocab: Vocabulary = VOCAB) -> tuple[int, int, int] | None:
    """Phrasing variant of each segment, read from the token after each header.

    Returns None when any segment header is missing or is not followed by one
    of its phrase tokens.
    """
    toks = vocab.decode(tokens)
    found = []
    for seg in SEGMENTS:
        header = SEGMENT_HEADERS[seg]
        if header not in toks:
            return None
        i = toks.index(header)
        if i + 1 >= len(toks) or toks[i + 1] not in PHRASES[seg]:
            return None
        found.append(PHRASES[seg].index(toks[i + 1]))
    return tuple(found)
