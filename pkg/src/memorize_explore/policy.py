"""Tiny autoregressive categorical policy with exact log-probs and hand-written backprop.

Every next-token distribution is computed from a fixed set of context slots:

* the last ``window`` response tokens (left-padded),
* the question tokens (kind and up to two label arguments),
* the most recent segment header emitted,
* three records read from the prompt by a deterministic read head: the
  record of the most recently emitted label ("focus"), the record of the most
  recent label that differs from it ("previous"), and the record at index
  ``#labels emitted since the last header`` ("next").

Each slot is embedded, the embeddings are concatenated (slot-wise weights)
and passed through two tanh layers and an output projection. There is no
attention; the read head is a fixed function of the token history.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .vocab import DIGITS, HEADERS, KINDS, LABELS, TITLES, VOCAB, Vocabulary

N_QUESTION_SLOTS = 3
N_RECORD_SLOTS = 3
RECORD_WIDTH = 4
PARAM_NAMES = ("embed", "w1", "b1", "w2", "b2", "w_out", "b_out")


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 64
    embed_dim: int = 16
    window: int = 8
    hidden1: int = 128
    hidden2: int = 64
    max_len: int = 128
    init_scale: float = 1.0

    @property
    def n_slots(self) -> int:
        return self.window + N_QUESTION_SLOTS + 1 + N_RECORD_SLOTS * RECORD_WIDTH

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d_in = self.n_slots * self.embed_dim
        return {
            "embed": (self.vocab_size, self.embed_dim),
            "w1": (d_in, self.hidden1),
            "b1": (self.hidden1,),
            "w2": (self.hidden1, self.hidden2),
            "b2": (self.hidden2,),
            "w_out": (self.hidden2, self.vocab_size),
            "b_out": (self.vocab_size,),
        }

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PolicyParameters:
    config: PolicyConfig
    embed: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    seed: int | None = None
    frozen: bool = field(default=False, compare=False)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def with_flat(self, vec: np.ndarray) -> PolicyParameters:
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = {}, 0
        for name, shape in self.config.shapes().items():
            n = int(np.prod(shape))
            out[name] = vec[pos:pos + n].reshape(shape).copy()
            pos += n
        if pos != vec.size:
            raise InvalidInputError(f"flat vector has {vec.size} entries, expected {pos}")
        return PolicyParameters(self.config, seed=self.seed, **out)

    def copy(self) -> PolicyParameters:
        return PolicyParameters(self.config, seed=self.seed, **{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> PolicyParameters:
        return PolicyParameters(self.config, seed=self.seed, **{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def scaled(self, c: float) -> PolicyParameters:
        return PolicyParameters(self.config, seed=self.seed, **{k: c * v for k, v in self.arrays().items()})

    def add_(self, other: PolicyParameters, c: float = 1.0) -> PolicyParameters:
        for name in PARAM_NAMES:
            getattr(self, name)[...] += c * getattr(other, name)
        return self

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays().values())))

    def max_abs_diff(self, other: PolicyParameters) -> float:
        return max(float(np.max(np.abs(getattr(self, n) - getattr(other, n)))) for n in PARAM_NAMES)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())

    def bit_equal(self, other: PolicyParameters) -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)


def init_params(config: PolicyConfig = PolicyConfig(), seed: int = 0) -> PolicyParameters:
    rng = np.random.default_rng(seed)
    shapes = config.shapes()
    s = config.init_scale
    d_in, h1 = shapes["w1"]
    return PolicyParameters(
        config,
        embed=s * rng.normal(0.0, 1.0, shapes["embed"]),
        w1=s * rng.normal(0.0, 1.0 / np.sqrt(d_in), shapes["w1"]),
        b1=np.zeros(h1),
        w2=s * rng.normal(0.0, 1.0 / np.sqrt(h1), shapes["w2"]),
        b2=np.zeros(config.hidden2),
        # small output layer keeps the initial policy close to uniform
        w_out=s * rng.normal(0.0, 0.1 / np.sqrt(config.hidden2), shapes["w_out"]),
        b_out=np.zeros(config.vocab_size),
        seed=seed,
    )


def zero_params(config: PolicyConfig = PolicyConfig()) -> PolicyParameters:
    return PolicyParameters(config, **{k: np.zeros(s) for k, s in config.shapes().items()})


def snapshot(params: PolicyParameters) -> PolicyParameters:
    """Deep, read-only copy (used for the rollout and reference policies)."""
    snap = params.copy()
    for a in snap.arrays().values():
        a.flags.writeable = False
    snap.frozen = True
    return snap


# ---------------------------------------------------------------------------
# read head


class _VocabTables:
    def __init__(self, vocab: Vocabulary):
        n = vocab.size
        self.pad = vocab.pad
        self.is_label = np.zeros(n, bool)
        self.is_digit = np.zeros(n, bool)
        self.is_header = np.zeros(n, bool)
        self.is_kind = np.zeros(n, bool)
        self.is_title = np.zeros(n, bool)
        # reduced vocabularies may lack some token classes
        for table, group in ((self.is_label, LABELS), (self.is_digit, DIGITS), (self.is_header, HEADERS),
                             (self.is_kind, KINDS), (self.is_title, TITLES)):
            for t in group:
                if t in vocab:
                    table[vocab.id(t)] = True
        self.is_label = self.is_label.tolist()
        self.is_digit = self.is_digit.tolist()
        self.is_header = self.is_header.tolist()
        self.is_kind = self.is_kind.tolist()
        self.is_title = self.is_title.tolist()


_TABLES: dict[int, _VocabTables] = {}


def _tables(vocab: Vocabulary) -> _VocabTables:
    key = id(vocab)
    if key not in _TABLES:
        _TABLES[key] = _VocabTables(vocab)
    return _TABLES[key]


def _read_prompt(prompt, tab: _VocabTables):
    """Lenient prompt reader: records and question slots, never raises."""
    pad = tab.pad
    i, n = 0, len(prompt)
    if n and tab.is_title[prompt[0]]:
        i = 1
    records = []
    while i + RECORD_WIDTH <= n and tab.is_label[prompt[i]] and all(
        tab.is_digit[t] for t in prompt[i + 1:i + RECORD_WIDTH]
    ):
        records.append(tuple(prompt[i:i + RECORD_WIDTH]))
        i += RECORD_WIDTH
    question = [pad] * N_QUESTION_SLOTS
    if i < n and tab.is_kind[prompt[i]]:
        q = list(prompt[i:i + N_QUESTION_SLOTS])
        question[:len(q)] = q
    return records, question


class ReadHead:
    """Incremental context builder for one (prompt, response) pair."""

    __slots__ = ("tab", "window", "records", "by_label", "question", "recent",
                 "focus", "prev", "seg_count", "header", "none")

    def __init__(self, prompt, window: int, vocab: Vocabulary = VOCAB):
        self.tab = _tables(vocab)
        pad = self.tab.pad
        self.window = window
        self.records, self.question = _read_prompt(list(prompt), self.tab)
        self.by_label = {r[0]: r for r in self.records}
        self.none = (pad,) * RECORD_WIDTH
        self.recent = [pad] * window
        self.focus = None
        self.prev = None
        self.seg_count = 0
        self.header = pad

    def context(self) -> list[int]:
        nxt = self.records[self.seg_count] if self.seg_count < len(self.records) else self.none
        focus = self.by_label.get(self.focus, self.none)
        prev = self.by_label.get(self.prev, self.none)
        return [*self.recent, *self.question, self.header, *focus, *prev, *nxt]

    def push(self, tok: int) -> None:
        self.recent.pop(0)
        self.recent.append(tok)
        if self.tab.is_header[tok]:
            self.header = tok
            self.seg_count = 0
        elif self.tab.is_label[tok]:
            self.seg_count += 1
            if tok != self.focus:
                self.prev = self.focus
                self.focus = tok


def contexts(prompt, response, window: int, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """Context slots for predicting each response token (teacher forcing)."""
    head = ReadHead(prompt, window, vocab)
    rows = []
    for tok in response:
        rows.append(head.context())
        head.push(tok)
    return np.asarray(rows, dtype=np.intp).reshape(len(rows), -1)


# ---------------------------------------------------------------------------
# forward / backward


def _check_tokens(tokens, vocab_size: int) -> None:
    for t in tokens:
        if not 0 <= int(t) < vocab_size:
            raise InvalidInputError(f"token id {t} outside [0, {vocab_size})")


def _forward(params: PolicyParameters, ctx: np.ndarray):
    x = params.embed[ctx].reshape(ctx.shape[0], -1)
    h1 = np.tanh(x @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    logits = h2 @ params.w_out + params.b_out
    return x, h1, h2, logits


def _backward(params: PolicyParameters, ctx: np.ndarray, cache, dlogits: np.ndarray) -> PolicyParameters:
    x, h1, h2, _ = cache
    d = params.config.embed_dim
    g_wout = h2.T @ dlogits
    g_bout = dlogits.sum(axis=0)
    da2 = (dlogits @ params.w_out.T) * (1.0 - h2 * h2)
    g_w2 = h1.T @ da2
    g_b2 = da2.sum(axis=0)
    da1 = (da2 @ params.w2.T) * (1.0 - h1 * h1)
    g_w1 = x.T @ da1
    g_b1 = da1.sum(axis=0)
    dx = (da1 @ params.w1.T).reshape(-1, d)
    g_embed = np.zeros_like(params.embed)
    np.add.at(g_embed, ctx.ravel(), dx)
    return PolicyParameters(params.config, g_embed, g_w1, g_b1, g_w2, g_b2, g_wout, g_bout, seed=params.seed)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_logits(params: PolicyParameters, prompt, prefix, vocab: Vocabulary = VOCAB) -> np.ndarray:
    cfg = params.config
    _check_tokens(prompt, cfg.vocab_size)
    _check_tokens(prefix, cfg.vocab_size)
    if len(prefix) > cfg.max_len:
        raise InvalidInputError(f"prefix longer than max length {cfg.max_len}")
    head = ReadHead(prompt, cfg.window, vocab)
    for t in prefix:
        head.push(int(t))
    ctx = np.asarray([head.context()], dtype=np.intp)
    return _forward(params, ctx)[3][0]


@dataclass(frozen=True)
class SequenceLogProb:
    total: float
    per_token: tuple[float, ...]


def _token_logprobs(params: PolicyParameters, prompt, response, vocab: Vocabulary):
    cfg = params.config
    if len(response) == 0:
        raise InvalidInputError("response is empty")
    _check_tokens(prompt, cfg.vocab_size)
    _check_tokens(response, cfg.vocab_size)
    ctx = contexts(prompt, response, cfg.window, vocab)
    cache = _forward(params, ctx)
    logp = log_softmax(cache[3])
    picked = logp[np.arange(len(response)), np.asarray(response, dtype=np.intp)]
    return ctx, cache, logp, picked


def sequence_logprob(params: PolicyParameters, prompt, response, vocab: Vocabulary = VOCAB) -> SequenceLogProb:
    _, _, _, picked = _token_logprobs(params, prompt, response, vocab)
    per_token = tuple(float(v) for v in picked)
    return SequenceLogProb(total=float(np.sum(picked)), per_token=per_token)


def logprob_gradient(params: PolicyParameters, prompt, response, vocab: Vocabulary = VOCAB) -> PolicyParameters:
    """Gradient of ``sequence_logprob(...).total`` with respect to every parameter."""
    ctx, cache, logp, _ = _token_logprobs(params, prompt, response, vocab)
    dlogits = -np.exp(logp)
    dlogits[np.arange(len(response)), np.asarray(response, dtype=np.intp)] += 1.0
    return _backward(params, ctx, cache, dlogits)


@dataclass
class BatchScore:
    """Per-sequence log-probs for a batch of responses to one prompt, with the
    forward cache needed to backpropagate any per-position logit gradient."""

    ctx: np.ndarray
    cache: tuple
    logp: np.ndarray
    targets: np.ndarray
    offsets: np.ndarray
    totals: np.ndarray

    def seq_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))


def score_batch(params: PolicyParameters, prompt, responses, vocab: Vocabulary = VOCAB) -> BatchScore:
    cfg = params.config
    _check_tokens(prompt, cfg.vocab_size)
    ctxs, targets, lengths = [], [], []
    for resp in responses:
        if len(resp) == 0:
            raise InvalidInputError("response is empty")
        _check_tokens(resp, cfg.vocab_size)
        ctxs.append(contexts(prompt, resp, cfg.window, vocab))
        targets.extend(resp)
        lengths.append(len(resp))
    ctx = np.concatenate(ctxs, axis=0)
    cache = _forward(params, ctx)
    logp = log_softmax(cache[3])
    targets = np.asarray(targets, dtype=np.intp)
    picked = logp[np.arange(len(targets)), targets]
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    totals = np.array([picked[offsets[k]:offsets[k + 1]].sum() for k in range(len(lengths))])
    return BatchScore(ctx, cache, logp, targets, offsets, totals)


def weighted_logprob_grad(params: PolicyParameters, score: BatchScore, weights) -> PolicyParameters:
    """Gradient of sum_k weights[k] * log p(response_k)."""
    w = np.repeat(np.asarray(weights, dtype=np.float64), np.diff(score.offsets))
    dlogits = -np.exp(score.logp) * w[:, None]
    dlogits[np.arange(len(score.targets)), score.targets] += w
    return _backward(params, score.ctx, score.cache, dlogits)


def backward_logits(params: PolicyParameters, score: BatchScore, dlogits: np.ndarray) -> PolicyParameters:
    return _backward(params, score.ctx, score.cache, dlogits)


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class Rollout:
    tokens: tuple[int, ...]
    old_logprob: SequenceLogProb
    truncated: bool = False


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def generate(
    params: PolicyParameters,
    prompts,
    rng=None,
    temperature: float = 1.0,
    greedy: bool = False,
    vocab: Vocabulary = VOCAB,
) -> list[Rollout]:
    """Ancestral sampling for a batch of prompts, one rollout per prompt.

    Cached log-probs are those of the untempered policy at sampling time.
    """
    cfg = params.config
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive (use greedy=True for argmax decoding)")
    gen = None if greedy else _as_rng(rng)
    prompts = [list(p) for p in prompts]
    for p in prompts:
        _check_tokens(p, cfg.vocab_size)
    heads = [ReadHead(p, cfg.window, vocab) for p in prompts]
    budgets = [cfg.max_len - len(p) for p in prompts]
    if min(budgets, default=1) < 1:
        raise InvalidInputError("prompt leaves no room for a response")
    tokens: list[list[int]] = [[] for _ in prompts]
    logps: list[list[float]] = [[] for _ in prompts]
    active = list(range(len(prompts)))
    eos = vocab.eos
    while active:
        ctx = np.asarray([heads[i].context() for i in active], dtype=np.intp)
        logits = _forward(params, ctx)[3]
        logp = log_softmax(logits)
        if greedy:
            choice = np.argmax(logits, axis=1)
        else:
            probs = np.exp(log_softmax(logits / temperature))
            cdf = np.cumsum(probs, axis=1)
            u = gen.random(len(active)) * cdf[:, -1]
            choice = np.minimum((cdf < u[:, None]).sum(axis=1), cfg.vocab_size - 1)
        still = []
        for row, i in enumerate(active):
            tok = int(choice[row])
            tokens[i].append(tok)
            logps[i].append(float(logp[row, tok]))
            heads[i].push(tok)
            if tok != eos and len(tokens[i]) < budgets[i]:
                still.append(i)
        active = still
    out = []
    for toks, lps in zip(tokens, logps):
        out.append(Rollout(tuple(toks), SequenceLogProb(float(np.sum(lps)), tuple(lps)), truncated=toks[-1] != eos))
    return out


def sample_group(
    params: PolicyParameters,
    prompt,
    K: int,
    temperature: float = 1.0,
    rng=None,
    greedy: bool = False,
    vocab: Vocabulary = VOCAB,
) -> list[Rollout]:
    if K < 1:
        raise InvalidInputError("group size K must be at least 1")
    return generate(params, [prompt] * K, rng=rng, temperature=temperature, greedy=greedy, vocab=vocab)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.json header + <stem>.bin flat little-endian float64


def save_checkpoint(params: PolicyParameters, path: str | Path) -> Path:
    path = Path(path)
    header_path = path.with_suffix(".json")
    data_path = path.with_suffix(".bin")
    header = {
        "format": "flat-f64le",
        "data": data_path.name,
        "shapes": {k: list(v) for k, v in params.config.shapes().items()},
        "order": list(PARAM_NAMES),
        "seed": params.seed,
        "config": asdict(params.config),
        "config_hash": params.config.digest(),
    }
    params.flat().astype("<f8").tofile(data_path)
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return header_path


def load_checkpoint(path: str | Path) -> PolicyParameters:
    header_path = Path(path).with_suffix(".json")
    header = json.loads(header_path.read_text())
    known = {f.name for f in fields(PolicyConfig)}
    config = PolicyConfig(**{k: v for k, v in header["config"].items() if k in known})
    if config.digest() != header["config_hash"]:
        raise InvalidInputError(f"{header_path}: config hash mismatch")
    vec = np.fromfile(header_path.parent / header["data"], dtype="<f8")
    params = zero_params(config).with_flat(vec)
    params.seed = header.get("seed")
    return params
