"""Causal mediation analysis by activation patching.

For a pair (c1, c2) with answers y (correct for c1) and y* (expected once
c2's activations are patched in), the score of a set of sites is

    s = (f(c1*)[y*] - f(c1*)[y]) - (f(c1)[y*] - f(c1)[y])

where c1* is the run on c1 with those sites copied from c2. Pairs with
readout positions sum this difference over the positions.

Significance uses a max-statistic sign-flip permutation test: each trial's
two differences are swapped with probability 1/2 (which negates s), the
same swap pattern is applied to every head, and the family-wise threshold
is the (1 - alpha) quantile of the maximum mean score over heads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import HookSite, Intervention, PairingError, Transformer, answer_log_prob, patch_from
from .tasks import ContextPair

SCAN_COMPONENTS = ("block_output", "mlp_output")


@dataclass(frozen=True)
class CmTrialRecord:
    pair_id: int
    site: str
    delta_f_c1: float
    delta_f_c1_star: float

    @property
    def s(self) -> float:
        return self.delta_f_c1_star - self.delta_f_c1


@dataclass
class PermutationResult:
    n_permutations: int
    fwer_alpha: float
    threshold_epsilon: float
    null_max: np.ndarray
    seed: int

    def summary(self) -> dict:
        q = np.quantile(self.null_max, [0.5, 0.95, 0.99])
        return {
            "n_permutations": self.n_permutations,
            "fwer_alpha": self.fwer_alpha,
            "threshold_epsilon": float(self.threshold_epsilon),
            "null_max_mean": float(self.null_max.mean()),
            "null_max_std": float(self.null_max.std()),
            "null_max_q50": float(q[0]),
            "null_max_q95": float(q[1]),
            "null_max_q99": float(q[2]),
            "seed": self.seed,
        }


@dataclass
class HeadScoreMatrix:
    scores: np.ndarray
    n_pairs: int
    condition: str
    target_head_type: str
    positions: str
    deltas: np.ndarray | None = None  # (layers, heads, pairs, 2): delta_f_c1, delta_f_c1_star
    significance_mask: np.ndarray | None = None
    threshold_epsilon: float | None = None
    permutation: PermutationResult | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("scores must be layers x heads")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.significance_mask is not None and self.permutation is None:
            raise ValueError("a significance mask needs a permutation result")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def significant_heads(self) -> list[tuple[int, int]]:
        if self.significance_mask is None:
            return []
        return [(int(l), int(h)) for l, h in zip(*np.nonzero(self.significance_mask))]

    def with_permutation_test(self, n_permutations: int = 5000, alpha: float = 0.05, seed: int = 0) -> "HeadScoreMatrix":
        if self.deltas is None:
            raise ValueError("per-trial deltas are required for the permutation test")
        L, H = self.shape
        result, mask = permutation_test(self.deltas.reshape(L * H, -1, 2), n_permutations, alpha, seed)
        self.permutation = result
        self.threshold_epsilon = result.threshold_epsilon
        self.significance_mask = mask.reshape(L, H)
        return self

    def metadata(self) -> dict:
        meta = {
            "condition": self.condition,
            "target_head_type": self.target_head_type,
            "positions": self.positions,
            "n_pairs": self.n_pairs,
            "epsilon": self.threshold_epsilon,
            "alpha": self.permutation.fwer_alpha if self.permutation else None,
            "n_permutations": self.permutation.n_permutations if self.permutation else None,
            "seed": self.permutation.seed if self.permutation else None,
            "significant_heads": [list(h) for h in self.significant_heads()],
        }
        if self.permutation:
            meta["null_max"] = self.permutation.summary()
        meta.update(self.meta)
        return meta

    def save(self, directory: str | Path, stem: str) -> list[Path]:
        directory = Path(directory)
        paths = [directory / f"{stem}.csv", directory / f"{stem}.json"]
        write_matrix_csv(paths[0], self.scores, "layer", "head")
        if self.significance_mask is not None:
            paths.append(directory / f"{stem}_mask.csv")
            write_matrix_csv(paths[-1], self.significance_mask.astype(int), "layer", "head")
        paths[1].write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def write_matrix_csv(path: str | Path, matrix: np.ndarray, row_name: str, col_name: str,
                     col_labels: Sequence | None = None, row_labels: Sequence | None = None) -> None:
    matrix = np.asarray(matrix)
    cols = list(col_labels) if col_labels is not None else list(range(matrix.shape[1]))
    rows = list(row_labels) if row_labels is not None else list(range(matrix.shape[0]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([row_name] + [f"{col_name}_{c}" for c in cols])
        for label, row in zip(rows, matrix):
            w.writerow([label] + [format_number(x) for x in row])


def format_number(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if x == 0.0:
        return "0.0"  # folds -0.0 so reruns hash identically
    return repr(x)


# ------------------------------------------------------------------ scoring


def _diff(logits: np.ndarray, pair: ContextPair, model: Transformer, tokens, interventions) -> float:
    """f(c)[y*] - f(c)[y] read from all-position logits of a run on ``tokens``."""
    if pair.readouts:
        return float(sum(logits[r.position, r.y_star] - logits[r.position, r.y] for r in pair.readouts))
    y, y_star = pair.y_c1.tokens, pair.y_c1_star.tokens
    return _answer_score(model, tokens, y_star, interventions, logits) - _answer_score(
        model, tokens, y, interventions, logits
    )


def _answer_score(model, tokens, answer, interventions, logits) -> float:
    if len(answer) == 1:
        return float(logits[-1, answer[0]])
    full = list(tokens) + list(answer[:-1])
    ext = []
    for iv in interventions:
        pad = np.zeros((len(full) - len(iv.values), iv.values.shape[1]))
        ext.append(Intervention(iv.site, np.concatenate([iv.values, pad])))
    all_logits, _ = model.run(full, ext)
    return answer_log_prob(all_logits, len(tokens) - 1, answer)


class PairRun:
    """Clean c1 run and c2 cache for one pair, reused across many site sets."""

    def __init__(self, model: Transformer, pair: ContextPair):
        if len(pair.c1) != len(pair.c2):
            raise PairingError("c1 and c2 differ in length")
        self.model = model
        self.pair = pair
        logits, _ = model.run(pair.c1.tokens)
        self.delta_clean = _diff(logits, pair, model, pair.c1.tokens, [])
        _, self.source = model.run(pair.c2.tokens, with_cache=True)

    def record(self, sites: Sequence[HookSite], label: str = "") -> CmTrialRecord:
        tokens = self.pair.c1.tokens
        if not sites:
            return CmTrialRecord(self.pair.pair_id, label, self.delta_clean, self.delta_clean)
        interventions = patch_from(self.source, sites, len(tokens))
        logits, _ = self.model.run(tokens, interventions)
        patched = _diff(logits, self.pair, self.model, tokens, interventions)
        return CmTrialRecord(self.pair.pair_id, label, self.delta_clean, patched)


def compute_cm_score(model: Transformer, pair: ContextPair, sites: Sequence[HookSite]) -> CmTrialRecord:
    for site in sites:
        site.validate(model.config, len(pair.c1))
    return PairRun(model, pair).record(list(sites), ";".join(_site_label(s) for s in sites))


def _site_label(site: HookSite) -> str:
    head = "" if site.head is None else f".h{site.head}"
    return f"L{site.layer}.{site.component}{head}@{','.join(map(str, site.positions))}"


# ------------------------------------------------------------------- scans


@dataclass
class LayerPositionMap:
    scores: np.ndarray  # (layers, positions)
    positions: tuple[int, ...]
    component: str
    condition: str
    n_pairs: int

    def save(self, directory: str | Path, stem: str) -> list[Path]:
        directory = Path(directory)
        path = directory / f"{stem}.csv"
        write_matrix_csv(path, self.scores, "layer", "pos", col_labels=self.positions)
        meta = directory / f"{stem}.json"
        meta.write_text(json.dumps({
            "component": self.component, "condition": self.condition, "n_pairs": self.n_pairs,
            "positions": list(self.positions),
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return [path, meta]


def _common_length(pairs: Sequence[ContextPair]) -> int:
    if not pairs:
        raise ValueError("need at least one pair")
    lengths = {len(p.c1) for p in pairs}
    if len(lengths) != 1:
        raise ValueError(f"pairs have misaligned lengths {sorted(lengths)}")
    return lengths.pop()


def _condition(pairs: Sequence[ContextPair]) -> str:
    conds = sorted({p.condition for p in pairs})
    return conds[0] if len(conds) == 1 else "+".join(conds)


def scan_layer_position(model: Transformer, pairs: Sequence[ContextPair], component: str = "block_output") -> LayerPositionMap:
    """Mean score of patching one (layer, position) at a time, BOS excluded."""
    if component not in SCAN_COMPONENTS:
        raise ValueError(f"component must be one of {SCAN_COMPONENTS}")
    T_len = _common_length(pairs)
    L = model.config.n_layers
    positions = tuple(range(1, T_len))
    total = np.zeros((L, len(positions)))
    for pair in sorted(pairs, key=lambda p: p.pair_id):
        run = PairRun(model, pair)
        for layer in range(L):
            for j, pos in enumerate(positions):
                total[layer, j] += run.record([HookSite(layer, component, None, (pos,))]).s
    return LayerPositionMap(total / len(pairs), positions, component, _condition(pairs), len(pairs))


def scan_heads(model: Transformer, pairs: Sequence[ContextPair], target_head_type: str | None = None) -> HeadScoreMatrix:
    """Per-head mean score, patching each head at its pair's patch positions.

    Pools built for both rule directions are averaged together; with equal
    counts per direction this is the average of the two direction means.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    target = target_head_type or pairs[0].target_head_type
    L, H = model.config.n_layers, model.config.n_heads
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    deltas = np.zeros((L, H, len(ordered), 2))
    for i, pair in enumerate(ordered):
        run = PairRun(model, pair)
        for layer in range(L):
            for head in range(H):
                rec = run.record([HookSite(layer, "head_output", head, pair.patch_positions)])
                deltas[layer, head, i] = (rec.delta_f_c1, rec.delta_f_c1_star)
    scores = (deltas[..., 1] - deltas[..., 0]).mean(axis=2)
    positions = sorted({p for pair in ordered for p in pair.patch_positions})
    return HeadScoreMatrix(
        scores, len(ordered), _condition(ordered), target, ",".join(map(str, positions)), deltas,
        meta={"rules": sorted({p.rule for p in ordered})},
    )


# ------------------------------------------------------------- permutation


def permutation_test(
    deltas: np.ndarray, n_permutations: int = 5000, alpha: float = 0.05, seed: int = 0
) -> tuple[PermutationResult, np.ndarray]:
    """Max-statistic sign-flip test over K units with P trials each.

    ``deltas`` has shape (K, P, 2) holding (delta_f_c1, delta_f_c1_star) per
    trial. Returns the result and a boolean mask ``mean score > epsilon``.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 3 or deltas.shape[2] != 2 or deltas.shape[0] == 0 or deltas.shape[1] == 0:
        raise ValueError("deltas must have shape (units, trials, 2) with at least one of each")
    if n_permutations < 1:
        raise ValueError("n_permutations must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    s = deltas[..., 1] - deltas[..., 0]
    observed = s.mean(axis=1)
    rng = np.random.default_rng(seed)
    null_max = np.empty(n_permutations)
    chunk = 1000
    for start in range(0, n_permutations, chunk):
        n = min(chunk, n_permutations - start)
        keep = rng.random((n, s.shape[1])) < 0.5
        signs = np.where(keep, 1.0, -1.0)
        null_max[start : start + n] = (signs @ s.T / s.shape[1]).max(axis=1)
    eps = float(np.quantile(null_max, 1.0 - alpha))
    return PermutationResult(n_permutations, alpha, eps, null_max, seed), observed > eps


# ------------------------------------------------------------------ filters


def _prompt_correct(model: Transformer, pair: ContextPair, which: int, scoring: str) -> bool:
    prompt = pair.c1 if which == 1 else pair.c2
    logits, _ = model.run(prompt.tokens)
    if pair.readouts:
        return all(int(np.argmax(logits[r.position])) == prompt.tokens[r.position + 1] for r in pair.readouts)
    answer = pair.y_c1 if which == 1 else pair.y_c2
    if scoring == "argmax":
        if len(answer.tokens) == 1:
            return int(np.argmax(logits[-1])) == answer.tokens[0]
        full = list(prompt.tokens) + list(answer.tokens[:-1])
        all_logits, _ = model.run(full)
        start = len(prompt) - 1
        return all(int(np.argmax(all_logits[start + i])) == a for i, a in enumerate(answer.tokens))
    if which == 1:
        alt = pair.y_c1_star
    else:
        alt = pair.y_c1_star if pair.condition == "abstract" else pair.y_c1
    return _answer_score(model, prompt.tokens, answer.tokens, [], logits) > _answer_score(
        model, prompt.tokens, alt.tokens, [], logits
    )


def filter_correct_pairs(model: Transformer, pairs: Iterable[ContextPair], scoring: str = "argmax") -> list[ContextPair]:
    """Keep pairs whose two prompts the model answers correctly."""
    if scoring not in ("argmax", "logit_comparison"):
        raise ValueError("scoring must be argmax or logit_comparison")
    return [p for p in pairs if _prompt_correct(model, p, 1, scoring) and _prompt_correct(model, p, 2, scoring)]
