"""Experiment runner: every training paradigm, held-out evaluation and metric files."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from collections import Counter, deque
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, NaNGradientError
from .optim import (
    AdamState, Group, GrpoConfig, Mode, ModeTally, StepConfig, explore_update, grpo_loss_and_grad,
    mode_select, optimizer_update, rollout_group, sft_loss_and_grad,
)
from .policy import PolicyConfig, PolicyParameters, generate, init_params, save_checkpoint, snapshot
from .rewards import GRADES, RewardConfig, check_trace, parse_response, answer_reward, thinking_reward
from .supervision import ExemplarPool, admit_exemplar, supervision_target
from .tasks import TaskInstance, TaskSampler
from .traces import STYLES, build_reference_trace

PARADIGMS = (
    "sft", "grpo", "two_stage", "two_stage_kl", "reward_threshold",
    "sft_anneal", "sft_budget", "dyme", "dyme_pure", "dyme_full",
)
EVAL_OFFSET = 500_000_000
ROLLING_WINDOW = 100


@dataclass(frozen=True)
class ExperimentConfig:
    paradigm: str = "dyme_full"
    seed: int = 0
    steps: int = 5000
    K: int = 8
    lr: float = 3e-3
    lr_final_fraction: float = 0.1     # linear decay from lr to lr * this over the run
    max_grad_norm: float | None = None
    temperature: float = 1.0
    lam: float = 0.5
    kappa: float = 0.5
    adv_epsilon: float = 1e-4
    clip_epsilon: float = 0.2
    kl_beta: float = 0.04              # grpo, two_stage_kl and the RL half of sft_anneal
    inner_epochs: int = 1
    c_low: float = 0.25
    c_high: float = 0.75
    s_style: float = 0.5
    hard_fraction: float = 0.8
    trace_style: str = "minimal"       # style of the static reference traces
    eval_size: int = 200
    eval_every: int = 0                # 0: evaluate only before and after training
    probe_tasks: int = 50              # prompts used to measure initial group success
    threshold: float = 0.8
    anneal_weight: float = 1.0
    budget_size: int = 16
    stage1_steps: int = 1000
    refine_enabled: bool = False
    pool_capacity: int = 64
    embed_dim: int = 16
    hidden1: int = 128
    hidden2: int = 64
    window: int = 8
    max_len: int = 128
    output: str = "runs"

    def __post_init__(self):
        problems = []
        if self.paradigm not in PARADIGMS:
            problems.append(f"unknown paradigm {self.paradigm!r}")
        if self.trace_style not in STYLES:
            problems.append(f"unknown trace_style {self.trace_style!r}")
        for name in ("steps", "stage1_steps", "eval_every", "probe_tasks"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("K", "inner_epochs", "budget_size", "pool_capacity", "eval_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("lr", "lam", "kappa", "kl_beta", "clip_epsilon", "anneal_weight"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.temperature <= 0 or self.adv_epsilon <= 0:
            problems.append("temperature and adv_epsilon must be positive")
        if not 0.0 <= self.hard_fraction <= 1.0 or not 0.0 <= self.lr_final_fraction <= 1.0:
            problems.append("hard_fraction and lr_final_fraction must lie in [0, 1]")
        if self.paradigm == "dyme_full" and self.kappa <= 0:
            problems.append("dyme_full needs kappa > 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def digest(self) -> str:
        """Hash of the serialized config; the output directory is excluded."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolved(self) -> ExperimentConfig:
        """Apply the fixed settings of the DyME presets."""
        if self.paradigm == "dyme_pure":
            return replace(self, refine_enabled=False, kappa=0.0)
        if self.paradigm == "dyme_full":
            return replace(self, refine_enabled=True)
        return self

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(embed_dim=self.embed_dim, window=self.window, hidden1=self.hidden1,
                            hidden2=self.hidden2, max_len=self.max_len)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(lam=self.lam, kappa=self.kappa, c_low=self.c_low, c_high=self.c_high,
                            s_style=self.s_style)

    def clipped_grpo(self, kl: bool = True) -> GrpoConfig:
        return GrpoConfig(clip_epsilon=self.clip_epsilon, kl_beta=self.kl_beta if kl else 0.0,
                          inner_epochs=self.inner_epochs, use_clip=True, use_kl=kl and self.kl_beta > 0)

    def step_config(self, grpo: GrpoConfig | None = None) -> StepConfig:
        return StepConfig(K=self.K, temperature=self.temperature, adv_epsilon=self.adv_epsilon,
                          grpo=grpo or GrpoConfig.dyme(self.inner_epochs), rewards=self.reward_config())


def eval_tasks(config: ExperimentConfig) -> list[TaskInstance]:
    return TaskSampler(config.seed, config.hard_fraction, config.trace_style, offset=EVAL_OFFSET).take(config.eval_size)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: PolicyParameters, tasks: Sequence[TaskInstance], greedy: bool = True, rng=None) -> dict:
    """Relaxed-correct accuracy, parse rate, mean thinking reward and grade histogram."""
    if not tasks:
        return {"n": 0, "accuracy": 0.0, "parse_rate": 0.0, "mean_r_t": 0.0,
                "grades": {g: 0 for g in GRADES}, "by_kind": {}}
    outs = generate(params, [t.prompt for t in tasks], rng=rng, greedy=greedy)
    correct, parsed_ok, r_t, grades, by_kind = [], [], [], Counter(), {}
    for task, out in zip(tasks, outs):
        parsed = parse_response(out.tokens)
        ok = answer_reward(parsed, task.gold_answer)
        canonical = build_reference_trace(task.facts, task.question, task.gold_answer)
        correct.append(ok)
        parsed_ok.append(parsed.parse_ok)
        r_t.append(thinking_reward(parsed.trace_tokens, parse_response(task.reference_trace).trace_tokens))
        grades[check_trace(parsed.trace_tokens, task.facts, [canonical], task.question) if parsed.parse_ok else "Low"] += 1
        by_kind.setdefault(task.question.kind, []).append(ok)
    return {
        "n": len(tasks),
        "accuracy": float(np.mean(correct)),
        "parse_rate": float(np.mean(parsed_ok)),
        "mean_r_t": float(np.mean(r_t)),
        "grades": {g: grades[g] for g in GRADES},
        "by_kind": {k: float(np.mean(v)) for k, v in sorted(by_kind.items())},
    }


def group_success_probe(params: PolicyParameters, config: ExperimentConfig) -> float:
    """Mean per-rollout success of K samples on the first training prompts."""
    if config.probe_tasks == 0:
        return 0.0
    tasks = TaskSampler(config.seed, config.hard_fraction, config.trace_style).take(config.probe_tasks)
    rng = np.random.default_rng([config.seed, 7])
    outs = generate(params, [t.prompt for t in tasks for _ in range(config.K)], rng=rng,
                    temperature=config.temperature)
    gold = [t.gold_answer for t in tasks for _ in range(config.K)]
    return float(np.mean([answer_reward(parse_response(o.tokens), g) for o, g in zip(outs, gold)]))


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    mode: Mode
    loss: float
    grad_norm: float
    sft_weight: float = 0.0


class Trainer:
    """Owns the live parameters and optimizer; one ``step`` per training prompt."""

    def __init__(self, config: ExperimentConfig):
        self.config = config = config.resolved()
        self.params = init_params(config.policy_config(), config.seed)
        self.ref = snapshot(self.params)
        self.opt = AdamState(lr=config.lr, max_grad_norm=config.max_grad_norm)
        self.rng = np.random.default_rng(config.seed)
        self.sampler = TaskSampler(config.seed, config.hard_fraction, config.trace_style)
        self.pool = ExemplarPool(config.pool_capacity)
        self.tally = ModeTally()
        self.queue: list[tuple[TaskInstance, list[int]]] = []
        self.step_index = 0
        self._dyme_cfg = config.step_config()
        self._rl_cfg = config.step_config(config.clipped_grpo(kl=config.paradigm != "two_stage"))

    def _lr(self, step: int) -> float:
        c = self.config
        if c.steps <= 1:
            return c.lr
        return c.lr * (1.0 - (1.0 - c.lr_final_fraction) * step / (c.steps - 1))

    def _sft(self, task: TaskInstance, target) -> StepResult:
        loss, grad = sft_loss_and_grad(self.params, task.prompt, target)
        optimizer_update(self.params, grad, self.opt)
        return StepResult(Mode.MEMORIZE, loss, grad.norm())

    def _explore(self, task: TaskInstance, group: Group, cfg: StepConfig) -> StepResult:
        loss, grad_norm = explore_update(self.params, task, group, cfg, self.opt, self.ref)
        return StepResult(Mode.EXPLORE, loss, grad_norm)

    def _anneal(self, task: TaskInstance, group: Group, target, step: int) -> StepResult:
        c = self.config
        w = c.anneal_weight * 0.5 * (1.0 + math.cos(math.pi * step / max(c.steps, 1)))
        # both gradient paths are always computed; the SFT one only enters when weighted
        loss, grad = grpo_loss_and_grad(self.params, task.prompt, group.rollouts, group.rewards,
                                        self._rl_cfg.grpo, self.ref)
        sft_loss, sft_grad = sft_loss_and_grad(self.params, task.prompt, target)
        if w > 0.0:
            grad.add_(sft_grad, w)
            loss += w * sft_loss
        optimizer_update(self.params, grad, self.opt)
        return StepResult(Mode.EXPLORE, loss, grad.norm(), sft_weight=w)

    def _budget(self, task: TaskInstance, group: Group, target) -> StepResult:
        if mode_select(group.answer_rewards) == Mode.EXPLORE:
            return self._explore(task, group, self._dyme_cfg)
        self.queue.append((task, target))
        loss, norm = 0.0, 0.0
        if len(self.queue) >= self.config.budget_size:
            for queued, queued_target in self.queue:
                r = self._sft(queued, queued_target)
                loss, norm = loss + r.loss, max(norm, r.grad_norm)
            loss /= len(self.queue)
            self.queue.clear()
        return StepResult(Mode.MEMORIZE, loss, norm)

    def step(self) -> dict:
        c = self.config
        step = self.step_index
        task = self.sampler.task(step)
        self.opt.lr = self._lr(step)
        canonical = build_reference_trace(task.facts, task.question, task.gold_answer)
        exemplars = [canonical, *self.pool.traces()]
        target = supervision_target(task, self.pool, c.refine_enabled)
        cfg = self._rl_cfg if c.paradigm in ("grpo", "two_stage", "two_stage_kl", "sft_anneal") else self._dyme_cfg
        group = rollout_group(self.params, task, cfg, self.rng, target, exemplars)
        p = c.paradigm
        try:
            if p == "sft" or (p in ("two_stage", "two_stage_kl") and step < c.stage1_steps):
                result = self._sft(task, target)
            elif p in ("grpo", "two_stage", "two_stage_kl"):
                if p != "grpo" and step == c.stage1_steps:
                    self.ref = snapshot(self.params)
                result = self._explore(task, group, cfg)
            elif p == "reward_threshold":
                if group.mean_reward / c.reward_config().max_combined > c.threshold:
                    result = self._explore(task, group, cfg)
                else:
                    result = self._sft(task, target)
            elif p == "sft_anneal":
                result = self._anneal(task, group, target, step)
            elif p == "sft_budget":
                result = self._budget(task, group, target)
            else:
                if mode_select(group.answer_rewards) == Mode.EXPLORE:
                    result = self._explore(task, group, cfg)
                else:
                    result = self._sft(task, target)
        except NaNGradientError as exc:
            exc.step = step
            raise
        for rollout, reward in zip(group.rollouts, group.rewards):
            if reward.r_a == 1:
                admit_exemplar(self.pool, rollout.tokens, reward.grade, task.task_id, step, task.question.kind)
        self.step_index += 1
        adv = np.asarray(group.advantages.advantages)
        return {
            "step": step,
            "paradigm": p,
            "mode": result.mode.value,
            "loss": float(result.loss),
            "grad_norm": float(result.grad_norm),
            "mean_reward": group.mean_reward,
            "success_rate": group.success_rate,
            "sft_fraction_running": self.tally.record(result.mode),
            "sft_weight": result.sft_weight,
            "advantage_mean": float(adv.mean()),
            "advantage_std": float(adv.std()),
            "advantage_max": float(adv.max()),
            "pool_size": len(self.pool),
            "rewards": [
                {"k": k, "r_a": b.r_a, "r_t": b.r_t, "grade": b.grade, "combined": b.combined}
                for k, b in enumerate(group.rewards)
            ],
        }


def run_dir(config: ExperimentConfig) -> Path:
    return Path(config.output) / f"{config.paradigm}-seed{config.seed}"


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None, eval_set=None) -> dict:
    """Train, evaluate and write ``metrics.jsonl``, ``summary.json``, the checkpoint and the pool."""
    out = Path(out_dir) if out_dir is not None else run_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config)
    digest = config.digest()
    tasks = list(eval_set) if eval_set is not None else eval_tasks(config)
    initial = evaluate(trainer.params, tasks)
    initial_success = group_success_probe(trainer.params, trainer.config)
    curve = [{"step": 0, "accuracy": initial["accuracy"]}]
    rolling: deque = deque(maxlen=ROLLING_WINDOW)
    first_success = None
    modes = []
    t0 = time.perf_counter()
    with open(out / "metrics.jsonl", "w") as f:
        for _ in range(config.steps):
            record = trainer.step()
            rolling.append(record["success_rate"])
            record["train_accuracy"] = float(np.mean(rolling))
            record["config_hash"] = digest
            if first_success is None and record["success_rate"] > 0:
                first_success = record["step"]
            modes.append(record["mode"])
            f.write(json.dumps(record, sort_keys=True) + "\n")
            done = record["step"] + 1
            if config.eval_every and done % config.eval_every == 0 and done < config.steps:
                curve.append({"step": done, "accuracy": evaluate(trainer.params, tasks)["accuracy"]})
    seconds = time.perf_counter() - t0
    final = evaluate(trainer.params, tasks)
    curve.append({"step": config.steps, "accuracy": final["accuracy"]})
    save_checkpoint(trainer.params, out / "checkpoint")
    trainer.pool.save(out / "pool.json")
    summary = {
        "paradigm": config.paradigm,
        "seed": config.seed,
        "config_hash": digest,
        "config": config.to_dict(),
        "steps": config.steps,
        "initial_accuracy": initial["accuracy"],
        "initial_group_success": initial_success,
        "final_accuracy": final["accuracy"],
        "peak_accuracy": max(p["accuracy"] for p in curve),
        "final_eval": final,
        "accuracy_curve": curve,
        "steps_to_first_success": first_success,
        "sft_fraction": modes.count(Mode.MEMORIZE.value) / len(modes) if modes else 0.0,
        "mode_curve": windowed_sft_fraction(modes, 10),
        "seconds": seconds,
        "seconds_per_step": seconds / config.steps if config.steps else 0.0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def windowed_sft_fraction(modes: Sequence[str], n_windows: int = 10) -> list[float]:
    """Fraction of Memorize steps in each of ``n_windows`` consecutive equal slices."""
    if not modes:
        return []
    edges = np.linspace(0, len(modes), n_windows + 1).round().astype(int)
    return [
        float(sum(m == Mode.MEMORIZE.value for m in modes[a:b]) / (b - a)) if b > a else 0.0
        for a, b in zip(edges[:-1], edges[1:])
    ]


# ---------------------------------------------------------------------------
# baseline suite

SUITE_ROWS = (
    ("sft", {}),
    ("grpo", {}),
    ("two_stage", {}),
    ("two_stage_kl", {}),
    ("reward_threshold@0.5", {"threshold": 0.5}),
    ("reward_threshold@0.8", {"threshold": 0.8}),
    ("reward_threshold@0.9", {"threshold": 0.9}),
    ("sft_anneal", {}),
    ("sft_budget", {}),
    ("dyme_pure", {}),
    ("dyme_full", {}),
)


def run_baseline_suite(config: ExperimentConfig, rows=SUITE_ROWS, seeds: Sequence[int] | None = None,
                       out_dir: str | Path | None = None) -> list[dict]:
    """Run every row on identical seeds and tasks; writes ``suite.json`` and ``suite.csv``."""
    out = Path(out_dir) if out_dir is not None else Path(config.output)
    seeds = list(seeds) if seeds is not None else [config.seed]
    table = []
    for name, overrides in rows:
        paradigm = name.split("@")[0]
        for seed in seeds:
            cfg = replace(config, paradigm=paradigm, seed=seed, **overrides)
            s = run_experiment(cfg, out / f"{name}-seed{seed}")
            table.append({
                "row": name,
                "paradigm": paradigm,
                "seed": seed,
                "config_hash": s["config_hash"],
                "final_accuracy": s["final_accuracy"],
                "peak_accuracy": s["peak_accuracy"],
                "steps_to_first_success": s["steps_to_first_success"],
                "sft_fraction": s["sft_fraction"],
                "seconds_per_step": s["seconds_per_step"],
            })
    out.mkdir(parents=True, exist_ok=True)
    (out / "suite.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    with open(out / "suite.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(table[0]) if table else ["row"])
        writer.writeheader()
        writer.writerows(table)
    return table


# ---------------------------------------------------------------------------
# curve export

CURVES = {
    "reward": ("step", "mean_reward", "success_rate", "train_accuracy"),
    "mode_fraction": ("step", "mode", "sft_fraction_running"),
    "advantage_std": ("step", "advantage_mean", "advantage_std", "advantage_max"),
}


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed metrics line ({exc.msg})") from exc
            if not isinstance(record, dict) or "step" not in record:
                raise InvalidInputError(f"{path}:{lineno}: metrics record without a step field")
            records.append(record)
    return records


def export_curves(metrics_path: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    """One CSV per signal next to the metrics file (or in ``out_dir``)."""
    records = read_metrics(metrics_path)
    out = Path(out_dir) if out_dir is not None else Path(metrics_path).parent
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, columns in CURVES.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([*columns, "config_hash"])
            for r in records:
                writer.writerow([*(r.get(c) for c in columns), r.get("config_hash", "")])
        paths[name] = path
    return paths
