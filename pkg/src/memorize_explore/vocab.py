"""Token inventory shared by the policy, the task generator and the verifiers."""

from __future__ import annotations

from dataclasses import dataclass, field

TRACE_OPEN = "<think>"
TRACE_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
EOS = "<eos>"
PAD = "<pad>"
MARKERS = (TRACE_OPEN, TRACE_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, EOS, PAD)

EXT = "[ext]"
CALC = "[calc]"
CONC = "[conc]"
HEADERS = (EXT, CALC, CONC)

DIGITS = tuple(str(i) for i in range(10))
LABELS = tuple("ABCDEFGH")
TITLES = ("T0", "T1", "T2", "T3")
KINDS = ("max", "min", "sum", "diff", "get")
OPS = (">", "<", "+", "-", "=")

# Three phrasing variants per segment; variant 0 is the canonical one.
PHRASES = {
    "extraction": ("read", "list", "note"),
    "calculation": ("step", "then", "work"),
    "conclusion": ("so", "thus", "hence"),
}

FILLER = (
    "the", "is", "of", "and", "value", "chart", "bar",
    "total", "answer", "from", "than", "most", "least", "each",
)


def _default_tokens() -> tuple[str, ...]:
    phrases = tuple(p for seg in ("extraction", "calculation", "conclusion") for p in PHRASES[seg])
    return MARKERS + HEADERS + DIGITS + LABELS + TITLES + KINDS + OPS + phrases + FILLER


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...] = field(default_factory=_default_tokens)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for m in MARKERS:
            if self.tokens.count(m) != 1:
                raise ValueError(f"marker {m!r} must appear exactly once")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def ids(self, tokens) -> list[int]:
        return [self._index[t] for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    # frequently used ids
    @property
    def trace_open(self) -> int:
        return self._index[TRACE_OPEN]

    @property
    def trace_close(self) -> int:
        return self._index[TRACE_CLOSE]

    @property
    def answer_open(self) -> int:
        return self._index[ANSWER_OPEN]

    @property
    def answer_close(self) -> int:
        return self._index[ANSWER_CLOSE]

    @property
    def eos(self) -> int:
        return self._index[EOS]

    @property
    def pad(self) -> int:
        return self._index[PAD]

    @property
    def marker_ids(self) -> frozenset[int]:
        return frozenset(self._index[m] for m in MARKERS)

    @property
    def header_ids(self) -> frozenset[int]:
        return frozenset(self._index[h] for h in HEADERS)

    @property
    def digit_ids(self) -> frozenset[int]:
        return frozenset(self._index[d] for d in DIGITS)

    @property
    def label_ids(self) -> frozenset[int]:
        return frozenset(self._index[c] for c in LABELS)

    @property
    def kind_ids(self) -> frozenset[int]:
        return frozenset(self._index[k] for k in KINDS)

    def is_digit(self, tok: int) -> bool:
        return self.tokens[tok] in DIGITS

    def is_label(self, tok: int) -> bool:
        return self.tokens[tok] in LABELS


VOCAB = Vocabulary()
