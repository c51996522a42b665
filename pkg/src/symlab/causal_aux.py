"""Head ablation curves, prefix-matching scores and function-vector effects."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cma import HeadScoreMatrix, format_number, write_matrix_csv
from .model import HookSite, Intervention, Transformer
from .representation import ScalarStatistic, pearson
from .tasks import BOS, AnswerSpec, Prompt

ABLATION_CONDITIONS = ("ranked", "control", "random")
FV_POSITION_MODES = ("final_position", "third_item")

Head = tuple[int, int]
Example = tuple[Prompt, AnswerSpec, str]


# ----------------------------------------------------------------- ablation


@dataclass
class AblationReport:
    curve: np.ndarray  # index h = number of heads ablated, h = 0 is the baseline
    std: np.ndarray
    condition: str
    random_runs: int
    mode: str
    head_sets: list[list[Head]] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "mean_prob", "std"])
            for h, (m, s) in enumerate(zip(self.curve, self.std)):
                w.writerow([h, format_number(m), format_number(s)])


def _ranking_array(ranking: HeadScoreMatrix | np.ndarray, model: Transformer) -> np.ndarray:
    scores = ranking.scores if isinstance(ranking, HeadScoreMatrix) else np.asarray(ranking, dtype=np.float64)
    shape = (model.config.n_layers, model.config.n_heads)
    if scores.shape != shape:
        raise ValueError(f"ranking shape {scores.shape} does not cover all heads {shape}")
    return scores


def ranked_order(scores: np.ndarray) -> list[Head]:
    """Heads by descending score; ties go to the lower (layer, head)."""
    L, H = scores.shape
    return sorted(((l, h) for l in range(L) for h in range(H)), key=lambda k: (-scores[k], k))


def control_order(scores: np.ndarray) -> list[Head]:
    """For each ranked head in turn, the lowest-scored unused head of its layer."""
    used: list[Head] = []
    for layer, _ in ranked_order(scores):
        candidates = [(layer, h) for h in range(scores.shape[1]) if (layer, h) not in used]
        used.append(min(candidates, key=lambda k: (scores[k], k)))
    return used


def mean_head_outputs(model: Transformer, examples: Sequence[Example]) -> dict[Head, np.ndarray]:
    """Mean per-position head output over prompts of one shared length."""
    lengths = {len(p) for p, _, _ in examples}
    if len(lengths) != 1:
        raise ValueError("mean ablation needs prompts of equal length")
    acc: dict[Head, np.ndarray] = {}
    for prompt, _, _ in examples:
        _, cache = model.run(prompt.tokens, with_cache=True)
        for head, z in cache.head_output.items():
            acc[head] = acc.get(head, 0.0) + z
    return {k: v / len(examples) for k, v in acc.items()}


def ablation_interventions(
    heads: Sequence[Head], seq_len: int, d_head: int, means: dict[Head, np.ndarray] | None = None
) -> list[Intervention]:
    out = []
    for l, h in sorted(set(heads)):
        site = HookSite(l, "head_output", h, tuple(range(seq_len)))
        values = np.zeros((seq_len, d_head)) if means is None else means[(l, h)][:seq_len]
        out.append(Intervention(site, values))
    return out


def correct_probability(
    model: Transformer, examples: Sequence[Example], heads: Sequence[Head] = (),
    means: dict[Head, np.ndarray] | None = None,
) -> float:
    """Mean full-vocabulary softmax probability of the first answer token.

    Averaged within each rule first, then across rules.
    """
    by_rule: dict[str, list[float]] = {}
    for prompt, answer, rule in examples:
        ivs = ablation_interventions(heads, len(prompt), model.config.d_head, means) if heads else ()
        logits, _ = model.run(prompt.tokens, interventions=ivs)
        z = logits[-1] - logits[-1].max()
        p = np.exp(z) / np.exp(z).sum()
        by_rule.setdefault(rule, []).append(float(p[answer.tokens[0]]))
    return float(np.mean([np.mean(v) for _, v in sorted(by_rule.items())]))


def cumulative_ablation(
    model: Transformer,
    examples: Sequence[Example],
    ranking: HeadScoreMatrix | np.ndarray,
    condition: str = "ranked",
    max_heads: int | None = None,
    n_random_runs: int = 10,
    seed: int = 0,
    mode: str = "zero",
) -> AblationReport:
    """Correct-answer probability as the top-h heads are knocked out, h = 0..max_heads."""
    if condition not in ABLATION_CONDITIONS:
        raise ValueError(f"unknown ablation condition {condition!r}")
    if mode not in ("zero", "mean"):
        raise ValueError("mode must be zero or mean")
    if not examples:
        raise ValueError("need at least one prompt")
    scores = _ranking_array(ranking, model)
    total = scores.size
    max_heads = total if max_heads is None else max_heads
    if not 0 <= max_heads <= total:
        raise ValueError(f"cannot ablate {max_heads} heads out of {total}")
    means = mean_head_outputs(model, examples) if mode == "mean" else None

    if condition == "random":
        rng = np.random.default_rng(seed)
        all_heads = ranked_order(np.zeros_like(scores))
        orders = [[all_heads[i] for i in rng.permutation(total)] for _ in range(n_random_runs)]
    else:
        orders = [ranked_order(scores) if condition == "ranked" else control_order(scores)]
    baseline = correct_probability(model, examples)
    runs = np.empty((len(orders), max_heads + 1))
    for r, order in enumerate(orders):
        runs[r, 0] = baseline
        for h in range(1, max_heads + 1):
            runs[r, h] = correct_probability(model, examples, order[:h], means)
    return AblationReport(
        runs.mean(axis=0), runs.std(axis=0), condition, len(orders) if condition == "random" else 0, mode,
        [list(o[:max_heads]) for o in orders],
    )


# ---------------------------------------------------------- prefix matching


def repeated_sequence(pool: Sequence[int], n_unique: int, seed: int) -> list[int]:
    if len(pool) < n_unique:
        raise ValueError(f"pool of {len(pool)} tokens cannot supply {n_unique} unique tokens")
    rng = np.random.default_rng(seed)
    seq = [int(t) for t in rng.choice(np.asarray(pool), size=n_unique, replace=False)]
    return [BOS] + seq + seq


def prefix_matching_score(
    model: Transformer, pool: Sequence[int], n_unique: int = 50, seeds: Sequence[int] = (0, 1, 2, 3)
) -> np.ndarray:
    """Mean attention from each second-repeat token to the successor of its first occurrence."""
    if 2 * n_unique + 1 > model.config.max_seq_len:
        raise ValueError(f"context of {model.config.max_seq_len} is too short for {n_unique} tokens repeated twice")
    L, H = model.config.n_layers, model.config.n_heads
    out = np.zeros((L, H))
    for s in seeds:
        tokens = repeated_sequence(pool, n_unique, s)
        _, cache = model.run(tokens, with_cache=True)
        q = np.arange(n_unique + 1, 2 * n_unique + 1)
        k = q - n_unique + 1
        for (l, h), pattern in cache.attention_pattern.items():
            out[l, h] += pattern[q, k].mean()
    return out / len(seeds)


def uniform_prefix_baseline(n_unique: int = 50) -> float:
    """Score of a head attending uniformly over its causal window."""
    q = np.arange(n_unique + 1, 2 * n_unique + 1)
    return float(np.mean(1.0 / (q + 1)))


# ---------------------------------------------------------- function vectors


@dataclass
class FunctionVectorReport:
    aie: np.ndarray  # layers x heads
    position_mode: str
    n_prompts_per_rule: dict[str, int]
    per_rule: dict[str, np.ndarray]

    def to_csv(self, path: str | Path) -> None:
        write_matrix_csv(path, self.aie, "layer", "head")


def corrupt_prompt(prompt: Prompt, rng: np.random.Generator, max_tries: int = 1000) -> Prompt:
    """Shuffle in-context example answers so that no answer stays in place."""
    finals = prompt.example_final_positions()
    if len(finals) < 2:
        raise ValueError("need at least two in-context examples to corrupt the rule")
    tokens = list(prompt.tokens)
    answers = [tokens[p] for p in finals]
    for _ in range(max_tries):
        perm = rng.permutation(len(finals))
        if np.all(perm != np.arange(len(finals))):
            shuffled = [answers[i] for i in perm]
            if shuffled != answers:
                for p, t in zip(finals, shuffled):
                    tokens[p] = t
                return Prompt.from_tokens(tokens)
    raise ValueError("could not find a corrupting shuffle; in-context answers may coincide")


def fv_positions(prompt: Prompt, position_mode: str) -> list[int]:
    if position_mode == "final_position":
        return [prompt.final_position]
    if position_mode == "third_item":
        return prompt.example_final_positions()
    raise ValueError(f"unknown position mode {position_mode!r}")


def _p_answer(logits: np.ndarray, answer: AnswerSpec) -> float:
    z = logits[-1] - logits[-1].max()
    return float(np.exp(z[answer.tokens[0]]) / np.exp(z).sum())


def function_vector_aie(
    model: Transformer, examples: Sequence[Example], position_mode: str = "final_position",
    seed: int = 0, mean_source: str = "clean",
) -> FunctionVectorReport:
    """Average indirect effect of injecting each head's mean clean output into corrupted prompts.

    ``mean_source='self'`` patches each corrupted prompt with its own
    activations instead, a null control whose effects are exactly zero.
    """
    if mean_source not in ("clean", "self"):
        raise ValueError("mean_source must be clean or self")
    if position_mode not in FV_POSITION_MODES:
        raise ValueError(f"unknown position mode {position_mode!r}")
    rng = np.random.default_rng(seed)
    L, H, dh = model.config.n_layers, model.config.n_heads, model.config.d_head
    by_rule: dict[str, list[Example]] = {}
    for ex in examples:
        by_rule.setdefault(ex[2], []).append(ex)
    per_rule = {}
    for rule, group in sorted(by_rule.items()):
        positions = fv_positions(group[0][0], position_mode)
        means = np.zeros((L, H, len(positions), dh))
        for prompt, _, _ in group:
            if fv_positions(prompt, position_mode) != positions:
                raise ValueError("prompts of one rule must share a template")
            _, cache = model.run(prompt.tokens, with_cache=True)
            for (l, h), z in cache.head_output.items():
                means[l, h] += z[positions]
        means /= len(group)
        cie = np.zeros((L, H))
        for prompt, answer, _ in group:
            corrupted = corrupt_prompt(prompt, rng)
            logits, own = model.run(corrupted.tokens, with_cache=True)
            base = _p_answer(logits, answer)
            for l in range(L):
                for h in range(H):
                    vals = np.zeros((len(corrupted), dh))
                    vals[positions] = own.head_output[(l, h)][positions] if mean_source == "self" else means[l, h]
                    iv = Intervention(HookSite(l, "head_output", h, tuple(positions)), vals)
                    patched, _ = model.run(corrupted.tokens, interventions=[iv])
                    cie[l, h] += _p_answer(patched, answer) - base
        per_rule[rule] = cie / len(group)
    aie = np.mean([per_rule[r] for r in sorted(per_rule)], axis=0)
    return FunctionVectorReport(aie, position_mode, {r: len(g) for r, g in sorted(by_rule.items())}, per_rule)


# -------------------------------------------------------------- correlation


def score_correlation(
    a: HeadScoreMatrix | np.ndarray, b: HeadScoreMatrix | np.ndarray, n_permutations: int = 10000, seed: int = 0
) -> ScalarStatistic:
    """Pearson r over flattened head scores with a two-sided head-shuffle p-value."""
    x = (a.scores if isinstance(a, HeadScoreMatrix) else np.asarray(a, dtype=np.float64))
    y = (b.scores if isinstance(b, HeadScoreMatrix) else np.asarray(b, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    x, y = x.ravel(), y.ravel()
    r = pearson(x, y)
    rng = np.random.default_rng(seed)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc @ xc) * (yc @ yc))
    hits = 0
    for start in range(0, n_permutations, 1000):
        n = min(1000, n_permutations - start)
        perms = np.argsort(rng.random((n, len(y))), axis=1)
        rs = (yc[perms] @ xc) / denom
        hits += int(np.sum(np.abs(rs) >= abs(r) - 1e-12))
    return ScalarStatistic("pearson_r", r, (1 + hits) / (1 + n_permutations), n=len(x))
