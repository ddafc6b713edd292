"""Rule-based verification: response parsing, answer reward, trace F1 and the trace checker."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .tasks import VALUE_WIDTH, AnswerValue, Question, VisualFacts, digits, required_labels
from .vocab import DIGITS, HEADERS, LABELS, VOCAB, Vocabulary

GRADES = ("Low", "Medium", "High")
GRADE_VALUE = {"Low": 0.0, "Medium": 0.5, "High": 1.0}
MAX_ANSWER_DIGITS = 6


@dataclass(frozen=True)
class ParsedResponse:
    trace_tokens: tuple[int, ...]
    answer: AnswerValue | None
    parse_ok: bool


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.5       # weight of the thinking reward
    kappa: float = 0.5     # weight of the checker grade
    c_low: float = 0.25
    c_high: float = 0.75
    s_style: float = 0.5

    @property
    def max_combined(self) -> float:
        return 1.0 + self.lam + self.kappa


@dataclass
class RewardBreakdown:
    r_a: int
    r_t: float
    grade: str
    combined: float
    advantage: float = 0.0


_FAILED = ParsedResponse((), None, False)


def parse_response(tokens: Sequence[int], vocab: Vocabulary = VOCAB) -> ParsedResponse:
    """Split a rollout into trace and answer; malformed input gives parse_ok=False."""
    toks = [int(t) for t in tokens]
    try:
        start = toks.index(vocab.trace_open)
        end = toks.index(vocab.trace_close, start + 1)
    except ValueError:
        return _FAILED
    span = toks[start + 1:end]
    if span.count(vocab.answer_open) != 1 or span.count(vocab.answer_close) != 1 or vocab.trace_open in span:
        return _FAILED
    a0, a1 = span.index(vocab.answer_open), span.index(vocab.answer_close)
    if a1 <= a0 + 1:
        return _FAILED
    answer = _parse_answer(span[a0 + 1:a1], vocab)
    if answer is None:
        return _FAILED
    return ParsedResponse(tuple(span), answer, True)


def _parse_answer(ids: list[int], vocab: Vocabulary) -> AnswerValue | None:
    if not all(0 <= t < vocab.size for t in ids):
        return None
    syms = vocab.decode(ids)
    if len(syms) == 1 and syms[0] in LABELS:
        return AnswerValue.of(syms[0])
    if 1 <= len(syms) <= MAX_ANSWER_DIGITS and all(s in DIGITS for s in syms):
        return AnswerValue.of(int("".join(syms)))
    return None


def relaxed_correct(predicted: AnswerValue, gold: AnswerValue) -> bool:
    if predicted.kind != gold.kind:
        return False
    if gold.kind == "label":
        return predicted.label.casefold() == gold.label.casefold()
    # |p - g| <= 0.05 |g|, in exact integer arithmetic
    return 20 * abs(predicted.numeric - gold.numeric) <= abs(gold.numeric)


def answer_reward(response: ParsedResponse, gold: AnswerValue) -> int:
    return int(response.parse_ok and relaxed_correct(response.answer, gold))


def _content(tokens, vocab: Vocabulary) -> Counter:
    excluded = vocab.marker_ids
    return Counter(t for t in tokens if t not in excluded)


def multiset_f1(pred: Counter, ref: Counter) -> float:
    n_pred, n_ref = sum(pred.values()), sum(ref.values())
    if n_pred == 0 or n_ref == 0:
        return 0.0
    overlap = sum((pred & ref).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / n_pred, overlap / n_ref
    return 2 * precision * recall / (precision + recall)


def thinking_reward(trace_tokens, reference_trace_tokens, vocab: Vocabulary = VOCAB) -> float:
    """Token-multiset F1 between a trace and a reference, markers excluded."""
    return multiset_f1(_content(trace_tokens, vocab), _content(reference_trace_tokens, vocab))


def required_fact_tokens(facts: VisualFacts, question: Question | None = None,
                         vocab: Vocabulary = VOCAB) -> Counter:
    labels = facts.labels if question is None else required_labels(facts, question)
    out = Counter()
    for label in labels:
        out.update(vocab.ids([label, *digits(facts.value_of(label), VALUE_WIDTH)]))
    return out


def fact_coverage(trace_tokens, facts: VisualFacts, question: Question | None = None,
                  vocab: Vocabulary = VOCAB) -> float:
    required = required_fact_tokens(facts, question, vocab)
    return sum((Counter(trace_tokens) & required).values()) / sum(required.values())


def has_structure(trace_tokens, vocab: Vocabulary = VOCAB) -> bool:
    headers = [vocab.id(h) for h in HEADERS]
    positions = []
    for h in headers:
        if list(trace_tokens).count(h) != 1:
            return False
        positions.append(list(trace_tokens).index(h))
    return positions == sorted(positions)


def style_tokens(tokens, vocab: Vocabulary = VOCAB) -> Counter:
    """Phrasing skeleton of a trace: everything except markers, labels and digits."""
    excluded = vocab.marker_ids | vocab.label_ids | vocab.digit_ids
    return Counter(t for t in tokens if t not in excluded)


def style_score(trace_tokens, exemplars, vocab: Vocabulary = VOCAB) -> float:
    mine = style_tokens(trace_tokens, vocab)
    return max((multiset_f1(mine, style_tokens(e, vocab)) for e in exemplars), default=0.0)


def check_trace(
    trace_tokens,
    facts: VisualFacts,
    exemplars,
    question: Question | None = None,
    config: RewardConfig = RewardConfig(),
    vocab: Vocabulary = VOCAB,
) -> str:
    """Grade a trace Low / Medium / High from structure, fact coverage and style.

    Without ``question`` every record counts as required.
    """
    if not has_structure(trace_tokens, vocab):
        return "Low"
    coverage = fact_coverage(trace_tokens, facts, question, vocab)
    if coverage < config.c_low:
        return "Low"
    if coverage < config.c_high:
        return "Medium"
    if style_score(trace_tokens, exemplars, vocab) >= config.s_style:
        return "High"
    return "Medium"


def score_response(
    tokens,
    gold: AnswerValue,
    reference_trace,
    facts: VisualFacts,
    question: Question,
    exemplars,
    config: RewardConfig = RewardConfig(),
    vocab: Vocabulary = VOCAB,
) -> RewardBreakdown:
    parsed = parse_response(tokens, vocab)
    r_a = answer_reward(parsed, gold)
    ref_trace = parse_response(reference_trace, vocab).trace_tokens
    r_t = thinking_reward(parsed.trace_tokens, ref_trace, vocab)
    grade = check_trace(parsed.trace_tokens, facts, exemplars, question, config, vocab) if parsed.parse_ok else "Low"
    combined = r_a + config.lam * r_t + config.kappa * GRADE_VALUE[grade]
    return RewardBreakdown(r_a=r_a, r_t=r_t, grade=grade, combined=combined)
