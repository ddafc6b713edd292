"""Losses, gradients and the dynamic memorize/explore step.

All losses are per prompt. Log-probabilities are whole-sequence sums, and the
importance ratio is taken per sequence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NaNGradientError
from .policy import (
    PolicyParameters, Rollout, SequenceLogProb, backward_logits, contexts, log_softmax, logprob_gradient,
    sample_group, score_batch, sequence_logprob, _forward,
)
from .rewards import RewardBreakdown, RewardConfig, score_response
from .tasks import TaskInstance


class Mode(str, enum.Enum):
    MEMORIZE = "Memorize"
    EXPLORE = "Explore"


@dataclass(frozen=True)
class GroupAdvantages:
    rewards: tuple[float, ...]
    mean: float
    std: float
    advantages: tuple[float, ...]
    epsilon: float


@dataclass(frozen=True)
class GrpoConfig:
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    inner_epochs: int = 1
    use_clip: bool = True
    use_kl: bool = True

    @classmethod
    def dyme(cls, inner_epochs: int = 1) -> GrpoConfig:
        """Simplified objective: no clipping, no KL."""
        return cls(clip_epsilon=0.0, kl_beta=0.0, inner_epochs=inner_epochs, use_clip=False, use_kl=False)


@dataclass
class StepOutcome:
    mode: Mode
    loss: float
    grad_norm: float
    advantage_stats: tuple[float, float, float]
    group_success_rate: float
    sft_fraction_running: float
    mean_reward: float = 0.0


@dataclass
class ModeTally:
    sft_steps: int = 0
    total_steps: int = 0

    def record(self, mode: Mode) -> float:
        self.total_steps += 1
        self.sft_steps += mode == Mode.MEMORIZE
        return self.sft_steps / self.total_steps


# ---------------------------------------------------------------------------
# objectives


def sft_loss_and_grad(params: PolicyParameters, task_or_prompt, target=None):
    """Negative log-likelihood of the supervision target and its gradient.

    Accepts a task (target defaults to its reference trace) or a bare prompt
    plus explicit target tokens.
    """
    if isinstance(task_or_prompt, TaskInstance):
        prompt = task_or_prompt.prompt
        target = task_or_prompt.reference_trace if target is None else target
    else:
        prompt = task_or_prompt
    if target is None or len(target) == 0:
        raise InvalidInputError("SFT target is empty")
    loss = -sequence_logprob(params, prompt, target).total
    grad = logprob_gradient(params, prompt, target).scaled(-1.0)
    return loss, grad


def group_advantage(rewards: Sequence[float], epsilon: float = 1e-4) -> GroupAdvantages:
    r = np.asarray(rewards, dtype=np.float64)
    K = r.size
    if K == 0:
        raise InvalidInputError("empty reward group")
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    mean = float(r.sum() / K)
    if np.all(r == r[0]):
        return GroupAdvantages(tuple(r.tolist()), float(r[0]), 0.0, (0.0,) * K, epsilon)
    std = float(np.sqrt(np.sum((r - mean) ** 2) / K))
    adv = (r - mean) / (std + epsilon)
    return GroupAdvantages(tuple(r.tolist()), mean, std, tuple(adv.tolist()), epsilon)


def importance_ratio(params: PolicyParameters, old_logprobs: SequenceLogProb, prompt, response) -> float:
    return float(np.exp(sequence_logprob(params, prompt, response).total - old_logprobs.total))


def _kl_rows(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    return np.sum(np.exp(logp) * (logp - logq), axis=1)


def kl_to_reference(params: PolicyParameters, ref: PolicyParameters, prompt, response_context) -> float:
    """Sum over visited positions of KL(p_theta(.|ctx) || p_ref(.|ctx))."""
    if len(response_context) == 0:
        return 0.0
    ctx = contexts(prompt, response_context, params.config.window)
    logp = log_softmax(_forward(params, ctx)[3])
    logq = log_softmax(_forward(ref, ctx)[3])
    return float(max(_kl_rows(logp, logq).sum(), 0.0))


def surrogate_loss_and_grad(
    params: PolicyParameters,
    prompt,
    responses: Sequence[Sequence[int]],
    old_totals: Sequence[float],
    advantages: Sequence[float],
    config: GrpoConfig,
    ref: PolicyParameters | None = None,
):
    """Group-relative surrogate for any group size (including a single sample).

    Returns (loss, grad, info) where info holds ratios and the clip mask.
    """
    K = len(responses)
    score = score_batch(params, prompt, responses)
    ratio = np.exp(score.totals - np.asarray(old_totals, dtype=np.float64))
    A = np.asarray(advantages, dtype=np.float64)
    if config.use_clip:
        eps = config.clip_epsilon
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        unclipped_term = ratio * A
        clipped_term = clipped * A
        surrogate = np.minimum(unclipped_term, clipped_term)
        active = unclipped_term <= clipped_term
    else:
        surrogate = ratio * A
        active = np.ones(K, dtype=bool)
    loss = -float(surrogate.mean())
    # d(ratio)/dtheta = ratio * dlogp/dtheta
    coef = np.where(active, -ratio * A / K, 0.0)
    w = np.repeat(coef, np.diff(score.offsets))
    probs = np.exp(score.logp)
    dlogits = -probs * w[:, None]
    dlogits[np.arange(len(score.targets)), score.targets] += w
    kl = 0.0
    if config.use_kl and config.kl_beta > 0.0:
        if ref is None:
            raise InvalidInputError("KL penalty requested without a reference policy")
        logq = log_softmax(_forward(ref, score.ctx)[3])
        rows = _kl_rows(score.logp, logq)
        kl = float(rows.sum() / K)
        loss += config.kl_beta * kl
        dlogits += (config.kl_beta / K) * probs * (score.logp - logq - rows[:, None])
    grad = backward_logits(params, score, dlogits)
    info = {"ratio": ratio, "active": active, "kl": kl, "surrogate": surrogate}
    return loss, grad, info


def grpo_loss_and_grad(
    params: PolicyParameters,
    prompt,
    rollouts: Sequence[Rollout],
    rewards: Sequence[RewardBreakdown],
    config: GrpoConfig,
    ref: PolicyParameters | None = None,
):
    if len(rollouts) < 2:
        raise InvalidInputError("group-relative loss needs at least two rollouts")
    if len(rollouts) != len(rewards):
        raise InvalidInputError("one reward breakdown per rollout required")
    loss, grad, _ = surrogate_loss_and_grad(
        params,
        prompt,
        [r.tokens for r in rollouts],
        [r.old_logprob.total for r in rollouts],
        [b.advantage for b in rewards],
        config,
        ref,
    )
    return loss, grad


def mode_select(answer_rewards: Sequence[int]) -> Mode:
    if len(answer_rewards) == 0:
        raise InvalidInputError("mode rule needs at least one rollout")
    return Mode.EXPLORE if max(answer_rewards) == 1 else Mode.MEMORIZE


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    t: int = 0
    m: PolicyParameters | None = None
    v: PolicyParameters | None = None


def _nonfinite_report(grad: PolicyParameters) -> dict:
    return {
        name: {"nan": int(np.isnan(a).sum()), "inf": int(np.isinf(a).sum()), "size": int(a.size)}
        for name, a in grad.arrays().items()
        if not np.isfinite(a).all()
    }


def optimizer_update(params: PolicyParameters, grad: PolicyParameters, state: AdamState) -> PolicyParameters:
    """In-place Adam step. An all-zero gradient leaves parameters and moments untouched."""
    if params.frozen:
        raise InvalidInputError("cannot update a frozen snapshot")
    if not grad.all_finite():
        raise NaNGradientError("non-finite gradient", diagnostics=_nonfinite_report(grad))
    arrays = grad.arrays()
    if all(not a.any() for a in arrays.values()):
        return params
    if state.max_grad_norm is not None:
        norm = grad.norm()
        if norm > state.max_grad_norm:
            grad = grad.scaled(state.max_grad_norm / norm)
            arrays = grad.arrays()
    if state.m is None:
        state.m = params.zeros_like()
        state.v = params.zeros_like()
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in arrays.items():
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        getattr(params, name)[...] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# one training step


@dataclass
class StepConfig:
    K: int = 8
    temperature: float = 1.0
    adv_epsilon: float = 1e-4
    grpo: GrpoConfig = field(default_factory=GrpoConfig.dyme)
    rewards: RewardConfig = field(default_factory=RewardConfig)


@dataclass
class Group:
    rollouts: list[Rollout]
    rewards: list[RewardBreakdown]
    advantages: GroupAdvantages

    @property
    def answer_rewards(self) -> list[int]:
        return [b.r_a for b in self.rewards]

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.answer_rewards))

    @property
    def mean_reward(self) -> float:
        return float(np.mean([b.combined for b in self.rewards]))


def rollout_group(
    params: PolicyParameters,
    task: TaskInstance,
    config: StepConfig,
    rng,
    reference,
    exemplars=(),
) -> Group:
    """Sample K responses, score them and attach group-normalized advantages."""
    rollouts = sample_group(params, task.prompt, config.K, config.temperature, rng)
    rewards = [
        score_response(r.tokens, task.gold_answer, reference, task.facts, task.question, exemplars, config.rewards)
        for r in rollouts
    ]
    adv = group_advantage([b.combined for b in rewards], config.adv_epsilon)
    for b, a in zip(rewards, adv.advantages):
        b.advantage = a
    return Group(rollouts, rewards, adv)


def explore_update(params, task, group: Group, config: StepConfig, opt: AdamState, ref=None):
    """Policy-gradient update(s) on a scored group; returns (loss, grad_norm) of the first epoch."""
    first = None
    for _ in range(max(1, config.grpo.inner_epochs)):
        loss, grad = grpo_loss_and_grad(params, task.prompt, group.rollouts, group.rewards, config.grpo, ref)
        if first is None:
            first = (loss, grad.norm())
        optimizer_update(params, grad, opt)
    return first


def dyme_step(
    params: PolicyParameters,
    task: TaskInstance,
    K: int,
    config: StepConfig,
    opt: AdamState,
    rng,
    target=None,
    exemplars=(),
    tally: ModeTally | None = None,
    group: Group | None = None,
) -> tuple[StepOutcome, Group]:
    """Sample, verify, then run exactly one of the SFT or the group-relative update.

    ``target`` is the memorization target (defaults to the task's reference
    trace); it is also the reference for the thinking reward.
    """
    if K != config.K:
        config = StepConfig(K, config.temperature, config.adv_epsilon, config.grpo, config.rewards)
    target = task.reference_trace if target is None else target
    tally = tally if tally is not None else ModeTally()
    if group is None:
        group = rollout_group(params, task, config, rng, target, exemplars)
    mode = mode_select(group.answer_rewards)
    if mode == Mode.EXPLORE:
        loss, grad_norm = explore_update(params, task, group, config, opt)
    else:
        loss, grad = sft_loss_and_grad(params, task.prompt, target)
        grad_norm = grad.norm()
        optimizer_update(params, grad, opt)
    adv = np.asarray(group.advantages.advantages)
    outcome = StepOutcome(
        mode=mode,
        loss=float(loss),
        grad_norm=float(grad_norm),
        advantage_stats=(float(adv.mean()), float(adv.std()), float(adv.max())),
        group_success_rate=group.success_rate,
        sft_fraction_running=tally.record(mode),
        mean_reward=group.mean_reward,
    )
    return outcome, group
