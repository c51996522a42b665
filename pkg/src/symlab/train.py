"""Training the toy transformer on identity-rule prompts, and accuracy evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import Transformer
from .tasks import (
    IDENTITY_RULES, AnswerSpec, Prompt, Vocab, identity_prompt, is_heldout_set, rule_variables,
    sample_partitioned_sets,
)

SCORINGS = ("argmax", "logit_comparison")
LOSS_MODES = ("answer", "examples", "full")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    learning_rate: float = 3e-3
    warmup: int = 200
    weight_decay: float = 0.01
    mixture: dict[str, float] = field(default_factory=lambda: {"ABA": 0.5, "ABB": 0.5})
    eval_every: int = 250
    eval_prompts: int = 200
    seed: int = 0
    target_accuracy: float = 0.95
    n_shots: int = 2
    loss_mode: str = "examples"  # also scores later in-context items; "answer" or "full" (every position)
    beta1: float = 0.9
    beta2: float = 0.98
    grad_clip: float = 1.0
    heldout_fraction: float = 0.2

    def __post_init__(self):
        for name in ("steps", "batch_size", "eval_every", "eval_prompts", "n_shots"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.warmup < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate and grad_clip must be positive; warmup and weight_decay non-negative")
        if not 0 < self.target_accuracy <= 1:
            raise ValueError("target_accuracy must lie in (0, 1]")
        if not self.mixture or any(r not in IDENTITY_RULES for r in self.mixture):
            raise ValueError(f"mixture rules must be drawn from {IDENTITY_RULES}")
        if any(w < 0 for w in self.mixture.values()) or not math.isclose(sum(self.mixture.values()), 1.0, abs_tol=1e-9):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


# --------------------------------------------------------------------- data


def sample_examples(
    rng: np.random.Generator, vocab: Vocab, n: int, mixture: dict[str, float], n_shots: int,
    heldout: bool, fraction: float = 0.2,
) -> list[tuple[Prompt, AnswerSpec, str]]:
    """Identity-rule prompts whose token sets all fall on one side of the hash partition."""
    rules = sorted(mixture)
    probs = np.array([mixture[r] for r in rules])
    out = []
    for idx in rng.choice(len(rules), size=n, p=probs / probs.sum()):
        rule = rules[idx]
        sets = sample_partitioned_sets(rng, vocab.generic_ids, n_shots + 1, len(rule_variables(rule)), heldout, fraction)
        prompt, answer = identity_prompt(rule, sets, vocab)
        out.append((prompt, answer, rule))
    return out


def heldout_examples(vocab: Vocab, n: int, seed: int, mixture: dict[str, float] | None = None,
                     n_shots: int = 2, fraction: float = 0.2) -> list[tuple[Prompt, AnswerSpec, str]]:
    rng = np.random.default_rng([seed, 7919])
    return sample_examples(rng, vocab, n, mixture or {"ABA": 0.5, "ABB": 0.5}, n_shots, True, fraction)


def _batch(examples: Sequence[tuple[Prompt, AnswerSpec, str]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = {len(p) for p, _, _ in examples}
    if len(lengths) != 1:
        raise ValueError("a batch must share one prompt length")
    return np.array([p.tokens for p, _, _ in examples]), np.array([a.tokens[0] for _, a, _ in examples])


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Decoupled weight decay Adam; gains of norm layers and biases are not decayed."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, betas=(0.9, 0.98), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    @staticmethod
    def decays(name: str) -> bool:
        return not (name.endswith(("ln1", "ln2", "bias")) or name == "ln_final")

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            data = p.data
            if self.weight_decay and self.decays(k):
                data = data * (1 - lr * self.weight_decay)
            p.data = data - lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to 10% of the peak."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.learning_rate * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def clip_gradients(params: dict[str, T.Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))
    if norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def example_answer_positions(prompt: Prompt) -> list[int]:
    """Positions that predict the final item of every in-context example after the first."""
    return [prompt.content_positions(e)[-1] - 1 for e in range(1, prompt.n_examples - 1)]


def batch_loss(model: Transformer, tokens: np.ndarray, targets: np.ndarray, loss_mode: str = "answer") -> T.Tensor:
    logits = model.logits_batch(tokens)
    if loss_mode == "answer":
        return T.cross_entropy(T.index(logits, (slice(None), -1)), targets)
    if loss_mode == "examples":
        # one template per batch, so positions come from the first row
        pos = example_answer_positions(Prompt.from_tokens(tokens[0])) + [tokens.shape[1] - 1]
        tgt = np.concatenate([tokens[:, 1:], targets[:, None]], axis=1)[:, pos]
        picked = T.index(logits, (slice(None), pos))
        return T.cross_entropy(T.reshape(picked, (-1, logits.shape[2])), tgt.reshape(-1))
    B, L, V = logits.shape
    nxt = np.concatenate([tokens[:, 1:], targets[:, None]], axis=1)
    return T.cross_entropy(T.reshape(logits, (B * L, V)), nxt.reshape(-1))


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    steps_run: int
    final_loss: float
    best_accuracy: float
    reached_target: bool
    log: list[dict] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "accuracy"])
            for row in self.log:
                acc = "" if row["accuracy"] is None else repr(row["accuracy"])
                w.writerow([row["step"], repr(row["loss"]), acc])


def train(
    model: Transformer, cfg: TrainConfig, vocab: Vocab | None = None,
    batch_fn: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]] | None = None,
    eval_fn: Callable[[Transformer], float] | None = None,
    log_every: int = 50,
) -> TrainResult:
    """Minimise cross-entropy under ``cfg.loss_mode``; stop early at the target held-out accuracy.

    ``batch_fn`` and ``eval_fn`` override the default identity-rule stream and
    held-out evaluation.
    """
    vocab = vocab or Vocab.for_size(model.config.vocab_size)
    rng = np.random.default_rng(cfg.seed)
    if batch_fn is None:
        def batch_fn(r, n):
            return _batch(sample_examples(r, vocab, n, cfg.mixture, cfg.n_shots, False, cfg.heldout_fraction))
    if eval_fn is None:
        held = heldout_examples(vocab, cfg.eval_prompts, cfg.seed, cfg.mixture, cfg.n_shots, cfg.heldout_fraction)
        assert all(is_heldout_set(s) for s in _example_sets(held))

        def eval_fn(m):
            return evaluate_accuracy(m, held).accuracy
    opt = AdamW(model.parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    result = TrainResult(0, float("nan"), 0.0, False)
    for step in range(cfg.steps):
        tokens, targets = batch_fn(rng, cfg.batch_size)
        model.zero_grad()
        try:
            loss = batch_loss(model, tokens, targets, cfg.loss_mode)
            loss.backward()
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite values at step {step} (lr={lr_at(step, cfg):.3g}): {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss is {value} at step {step}")
        clip_gradients(opt.params, cfg.grad_clip)
        opt.step(lr_at(step, cfg))
        result.steps_run = step + 1
        result.final_loss = value
        done = (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps
        acc = eval_fn(model) if done else None
        if acc is not None:
            result.best_accuracy = max(result.best_accuracy, acc)
        if done or step % log_every == 0:
            result.log.append({"step": step + 1, "loss": value, "accuracy": acc})
        if acc is not None and acc >= cfg.target_accuracy:
            result.reached_target = True
            break
    return result


def _example_sets(examples):
    for prompt, _, _ in examples:
        for e in range(prompt.n_examples):
            pos = prompt.content_positions(e)
            yield tuple(sorted({prompt.tokens[p] for p in pos}))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


# --------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class AccuracyReport:
    accuracy: float
    n_correct: int
    n: int
    ci_low: float
    ci_high: float
    scoring: str


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    from scipy.stats import binomtest

    if n < 1:
        raise ValueError("n must be positive")
    ci = binomtest(k, n).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def _is_correct(model: Transformer, prompt: Prompt, answer: AnswerSpec, foil: AnswerSpec | None, scoring: str) -> bool:
    from .model import score_answer

    if scoring == "logit_comparison":
        if foil is None:
            raise ValueError("logit_comparison needs a foil answer")
        return score_answer(model, prompt.tokens, answer.tokens) > score_answer(model, prompt.tokens, foil.tokens)
    tokens = list(prompt.tokens) + list(answer.tokens[:-1])
    logits = model.forward(tokens)
    start = len(prompt) - 1
    return all(int(np.argmax(logits[start + i])) == t for i, t in enumerate(answer.tokens))


def evaluate_accuracy(
    model: Transformer, examples: Sequence[tuple], scoring: str = "argmax", batch_size: int = 256
) -> AccuracyReport:
    """Accuracy with a 95% Wilson interval.

    ``argmax`` requires every answer token to be the teacher-forced argmax;
    ``logit_comparison`` compares the answer against the foil in slot 3 of
    each example tuple.
    """
    if scoring not in SCORINGS:
        raise ValueError(f"unknown scoring {scoring!r}")
    if not examples:
        raise ValueError("need at least one prompt")
    single = scoring == "argmax" and all(len(ex[1].tokens) == 1 for ex in examples)
    same_len = len({len(ex[0]) for ex in examples}) == 1
    correct = 0
    if single and same_len:
        tokens = np.array([ex[0].tokens for ex in examples])
        targets = np.array([ex[1].tokens[0] for ex in examples])
        with T.no_grad():
            for s in range(0, len(tokens), batch_size):
                logits = model.logits_batch(tokens[s : s + batch_size]).data[:, -1]
                correct += int((logits.argmax(axis=1) == targets[s : s + batch_size]).sum())
    else:
        for ex in examples:
            foil = ex[3] if len(ex) > 3 else (ex[2] if isinstance(ex[2], AnswerSpec) else None)
            correct += _is_correct(model, ex[0], ex[1], foil, scoring)
    n = len(examples)
    lo, hi = wilson_interval(correct, n)
    return AccuracyReport(correct / n, correct, n, lo, hi, scoring)
