from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memorize_explore.errors import InvalidInputError
from memorize_explore.policy import (
    PolicyConfig, contexts, forward_logits, generate, init_params, load_checkpoint, log_softmax,
    logprob_gradient, sample_group, save_checkpoint, sequence_logprob, snapshot, zero_params,
)
from memorize_explore.tasks import generate_task
from memorize_explore.vocab import MARKERS, VOCAB, Vocabulary

TASK = generate_task(11, "hard")
SMALL = PolicyConfig(embed_dim=4, hidden1=12, hidden2=8)


def central_difference(f, params, idx, h=1e-5):
    flat = params.flat()
    out = []
    for i in idx:
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        out.append((f(params.with_flat(up)) - f(params.with_flat(down))) / (2 * h))
    return np.array(out)


def test_parameter_budget():
    assert PolicyConfig().n_params() < 100_000
    p = init_params()
    assert p.flat().size == PolicyConfig().n_params()


def test_zero_params_give_zero_logits():
    logits = forward_logits(zero_params(), TASK.prompt, TASK.reference_trace[:5])
    assert logits.shape == (64,)
    assert not logits.any()


def test_logits_deterministic_and_normalized():
    p = init_params(seed=42)
    a = forward_logits(p, TASK.prompt, TASK.reference_trace[:7])
    b = forward_logits(p, TASK.prompt, TASK.reference_trace[:7])
    assert np.array_equal(a, b)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = init_params(PolicyConfig(init_scale=float(rng.uniform(0.5, 5.0))), seed=int(rng.integers(1000)))
        logits = forward_logits(p, TASK.prompt, TASK.reference_trace[:int(rng.integers(0, 20))])
        probs = np.exp(log_softmax(logits))
        assert abs(sum(float(x) for x in probs) - 1.0) < 1e-9


def test_out_of_range_token_rejected():
    with pytest.raises(InvalidInputError):
        forward_logits(init_params(), TASK.prompt, [64])
    with pytest.raises(InvalidInputError):
        forward_logits(init_params(), [-1], [])
    with pytest.raises(InvalidInputError):
        sequence_logprob(init_params(), TASK.prompt, [])


def test_uniform_logprob_closed_form():
    vocab = Vocabulary(MARKERS + tuple("abcdefghij"))
    p = zero_params(PolicyConfig(vocab_size=16))
    lp = sequence_logprob(p, [6, 7], [8, 9, vocab.eos], vocab=vocab)
    assert lp.total == pytest.approx(3 * np.log(1 / 16), abs=1e-12)
    assert lp.total == pytest.approx(-8.3178, abs=1e-4)


def test_logprob_is_additive_and_nonpositive():
    p = init_params(seed=3)
    lp = sequence_logprob(p, TASK.prompt, TASK.reference_trace)
    assert abs(lp.total - sum(lp.per_token)) < 1e-9
    assert all(v <= 0 for v in lp.per_token)
    assert lp == sequence_logprob(p, TASK.prompt, TASK.reference_trace)


def test_per_token_matches_forward_logits():
    p = init_params(seed=5)
    resp = TASK.reference_trace[:12]
    lp = sequence_logprob(p, TASK.prompt, resp)
    for i, tok in enumerate(resp):
        expected = log_softmax(forward_logits(p, TASK.prompt, resp[:i]))[tok]
        assert lp.per_token[i] == pytest.approx(expected, abs=1e-12)


def test_argmax_token_beats_uniform():
    p = init_params(PolicyConfig(init_scale=3.0), seed=1)
    logits = forward_logits(p, TASK.prompt, [])
    best = int(np.argmax(logits))
    assert logits.max() > np.sort(logits)[-2]
    assert sequence_logprob(p, TASK.prompt, [best]).per_token[0] > np.log(1 / 64)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_params(PolicyConfig(init_scale=2.0), seed=seed)
    task = generate_task(seed, "hard")
    f = lambda q: sequence_logprob(q, task.prompt, task.reference_trace).total
    idx = rng.choice(p.flat().size, 64, replace=False)
    analytic = logprob_gradient(p, task.prompt, task.reference_trace).flat()[idx]
    numeric = central_difference(f, p, idx)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
    assert rel.max() < 1e-4


def test_gradient_shape_congruent():
    p = init_params(SMALL)
    g = logprob_gradient(p, TASK.prompt, TASK.reference_trace)
    for name, a in p.arrays().items():
        assert g.arrays()[name].shape == a.shape


def test_saturated_softmax_has_tiny_gradient():
    p = init_params(SMALL, seed=0)
    target = VOCAB.eos
    p.b_out[:] = -40.0
    p.b_out[target] = 40.0
    g = logprob_gradient(p, TASK.prompt, [target])
    assert g.norm() < 1e-20


def test_snapshot_is_deep_and_immutable():
    p = init_params(seed=9)
    snap = snapshot(p)
    before = forward_logits(snap, TASK.prompt, [])
    p.b_out += 1.0
    p.w_out *= 2.0
    assert np.array_equal(forward_logits(snap, TASK.prompt, []), before)
    with pytest.raises(ValueError):
        snap.b_out[0] = 1.0
    assert snapshot(snap).bit_equal(snap)
    assert snap.frozen


def test_sample_group_cardinality_and_length():
    p = init_params(seed=0)
    group = sample_group(p, TASK.prompt, 4, 1.0, rng=1)
    assert len(group) == 4
    budget = p.config.max_len - len(TASK.prompt)
    for r in group:
        assert 1 <= len(r.tokens) <= budget
        assert r.truncated == (r.tokens[-1] != VOCAB.eos)
        assert r.old_logprob.total == pytest.approx(sequence_logprob(p, TASK.prompt, r.tokens).total, abs=1e-9)


def test_greedy_group_is_identical():
    p = init_params(seed=0)
    group = sample_group(p, TASK.prompt, 5, 1.0, greedy=True)
    assert len({r.tokens for r in group}) == 1


def test_seeded_sampling_reproducible():
    p = init_params(seed=0)
    a = sample_group(p, TASK.prompt, 8, 1.0, rng=123)
    b = sample_group(p, TASK.prompt, 8, 1.0, rng=123)
    assert [r.tokens for r in a] == [r.tokens for r in b]
    with pytest.raises(InvalidInputError):
        sample_group(p, TASK.prompt, 0, 1.0, rng=1)
    with pytest.raises(InvalidInputError):
        sample_group(p, TASK.prompt, 2, 0.0, rng=1)


def test_batched_generation_matches_single_prompt():
    p = init_params(seed=2)
    prompts = [generate_task(s, "easy").prompt for s in range(3)]
    batch = generate(p, prompts, greedy=True)
    for prompt, out in zip(prompts, batch):
        assert generate(p, [prompt], greedy=True)[0].tokens == out.tokens


@given(st.lists(st.integers(0, 63), min_size=1, max_size=40))
@settings(max_examples=100, deadline=None)
def test_contexts_never_fail_on_arbitrary_tokens(response):
    ctx = contexts(TASK.prompt, response, 8)
    assert ctx.shape == (len(response), PolicyConfig().n_slots)
    assert ctx.min() >= 0 and ctx.max() < 64


def test_checkpoint_round_trip(tmp_path):
    import json

    p = init_params(SMALL, seed=4)
    header = save_checkpoint(p, tmp_path / "ckpt")
    meta = json.loads(header.read_text())
    assert meta["seed"] == 4 and meta["format"] == "flat-f64le"
    raw = np.fromfile(tmp_path / "ckpt.bin", dtype="<f8")
    assert raw.size == SMALL.n_params()
    q = load_checkpoint(tmp_path / "ckpt")
    assert q.bit_equal(p)
    meta["config"]["hidden1"] = 13
    header.write_text(json.dumps(meta))
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "ckpt")
