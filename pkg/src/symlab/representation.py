"""Attention-pattern aggregation, representational similarity and probes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .cma import HeadScoreMatrix, format_number
from .model import Transformer
from .tasks import AnswerSpec, Prompt

HYPOTHESIS_KINDS = ("abstract", "token", "within_instance_position", "previous_abstract")
COMPONENTS = ("query", "key", "value", "output")


@dataclass(frozen=True)
class ScalarStatistic:
    name: str
    value: float | None
    p_value: float | None = None
    n: int | None = None
    note: str = ""


# ---------------------------------------------------------------- attention


@dataclass
class AttentionMap:
    matrix: np.ndarray  # (T-1, T-1), BOS row and column removed
    labels: tuple[str, ...]
    heads: tuple[tuple[int, int], ...]
    weights: tuple[float, ...]
    n_prompts: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["query"] + list(self.labels))
            for label, row in zip(self.labels, self.matrix):
                w.writerow([label] + [format_number(x) for x in row])


def template_labels(prompt: Prompt) -> tuple[str, ...]:
    """Readable per-position labels without BOS, e.g. ``A1 ^ B1 ^ A1 \\n``."""
    out = []
    for p in range(1, len(prompt)):
        role = prompt.roles[p]
        if role in ("separator", "query_blank"):
            out.append({1: "^", 2: "\\n", 3: "[", 4: "]", 5: ":", 6: "_"}.get(prompt.tokens[p], "?")
                       + ("*" if role == "query_blank" else ""))
        else:
            out.append(f"{role}{prompt.example_index[p] + 1}")
    return tuple(out)


def _template_signature(prompt: Prompt) -> tuple:
    return tuple(t if t < 7 else -1 for t in prompt.tokens)


def head_weights(scores: HeadScoreMatrix | Mapping[tuple[int, int], float], only_significant: bool = True) -> dict[tuple[int, int], float]:
    """Non-negative head weights max(score, 0), restricted to significant heads if known."""
    if isinstance(scores, HeadScoreMatrix):
        L, H = scores.shape
        allowed = (
            set(scores.significant_heads())
            if only_significant and scores.significance_mask is not None
            else {(l, h) for l in range(L) for h in range(H)}
        )
        pairs = {(l, h): float(scores.scores[l, h]) for l, h in allowed}
    else:
        pairs = {k: float(v) for k, v in scores.items()}
    out = {k: max(v, 0.0) for k, v in sorted(pairs.items()) if v > 0}
    if not out:
        raise ValueError("no head has a positive weight")
    return out


def aggregate_attention(
    model: Transformer, prompts: Sequence[Prompt], weights: Mapping[tuple[int, int], float]
) -> AttentionMap:
    """Weighted average over heads of the mean attention pattern over prompts."""
    if not prompts:
        raise ValueError("need at least one prompt")
    sig = _template_signature(prompts[0])
    for p in prompts[1:]:
        if _template_signature(p) != sig:
            raise ValueError("prompts do not share a template")
    heads = tuple(sorted(weights))
    w = np.array([weights[h] for h in heads], dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    T_len = len(prompts[0])
    acc = np.zeros((T_len, T_len))
    for prompt in prompts:
        _, cache = model.run(prompt.tokens, with_cache=True)
        for wi, head in zip(w, heads):
            acc += wi * cache.attention_pattern[head]
    acc /= len(prompts)
    return AttentionMap(acc[1:, 1:], template_labels(prompts[0]), heads, tuple(float(x) for x in w), len(prompts))


def predicted_cells(prompt: Prompt, rule: str, head_type: str) -> list[tuple[int, int]]:
    """(query, key) positions, BOS-indexed, where each head type should attend."""
    if rule not in ("ABA", "ABB"):
        raise ValueError("attention predictions are defined for ABA and ABB")
    item = 0 if rule == "ABA" else 1
    final = prompt.final_position
    if head_type == "abstraction":
        cells = []
        for e, third in enumerate(prompt.example_final_positions()):
            cells.append((third, prompt.content_positions(e)[item]))
        return cells
    if head_type == "symbolic_induction":
        return [(final, k) for k in prompt.example_final_positions()]
    if head_type == "retrieval":
        return [(final, prompt.content_positions(prompt.n_examples - 1)[item])]
    raise ValueError(f"unknown head type {head_type!r}")


def attention_prediction_score(amap: AttentionMap | np.ndarray, prompt: Prompt, rule: str, head_type: str) -> float:
    """Mass on predicted cells over all non-BOS mass in the predicted rows."""
    matrix = amap.matrix if isinstance(amap, AttentionMap) else np.asarray(amap)
    cells = predicted_cells(prompt, rule, head_type)
    rows = sorted({q for q, _ in cells})
    hit = sum(matrix[q - 1, k - 1] for q, k in cells)
    total = sum(matrix[q - 1, : q].sum() for q in rows)
    if total <= 0:
        return 0.0
    return float(hit / total)


# --------------------------------------------------------------------- RSA


@dataclass(frozen=True)
class RsaItem:
    """One compared embedding and the labels the hypotheses read."""

    context: int
    position: int
    variable: str
    token: int
    within: int
    previous_variable: str

    @property
    def label(self) -> str:
        return f"c{self.context + 1}:p{self.position}:{self.variable}"


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    labels: tuple[str, ...]
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        K = len(self.labels)
        if self.values.shape != (K, K):
            raise ValueError("similarity matrix must be K x K with K labels")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["item"] + list(self.labels))
            for label, row in zip(self.labels, self.values):
                w.writerow([label] + [format_number(x) for x in row])


def item_at(context: int, prompt: Prompt, answer: AnswerSpec, position: int) -> RsaItem:
    """Labels for a content position, or for the answer when ``position`` is final."""
    if position == prompt.final_position:
        q = prompt.content_positions(prompt.n_examples - 1)
        tok = answer.tokens[0]
        match = [p for p in q if prompt.tokens[p] == tok]
        variable = prompt.roles[match[0]] if match else "new"
        return RsaItem(context, position, variable, tok, len(q), prompt.roles[q[-1]] if q else "none")
    if prompt.roles[position] in ("separator", "query_blank"):
        raise ValueError(f"position {position} holds no item")
    ex = prompt.example_index[position]
    content = prompt.content_positions(ex)
    k = content.index(position)
    prev = prompt.roles[content[k - 1]] if k > 0 else "none"
    return RsaItem(context, position, prompt.roles[position], prompt.tokens[position], prompt.within_example_position[position], prev)


def rsa_positions(prompt: Prompt, head_type: str, component: str) -> list[int]:
    """Positions compared for one head type and component.

    abstraction: queries/outputs at third items of the first two in-context
    examples, keys/values at their first two items. symbolic_induction:
    values at those third items, outputs at the final position, keys/queries
    at the third and fourth items of every in-context example (use length-4
    rules). retrieval: queries/outputs at the final position, keys/values at
    the query example's items.
    """
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    first_two = range(min(2, prompt.n_examples - 1))
    if head_type == "abstraction":
        if component in ("query", "output"):
            return [prompt.content_positions(e)[2] for e in first_two]
        return [p for e in first_two for p in prompt.content_positions(e)[:2]]
    if head_type == "symbolic_induction":
        if component == "value":
            return [prompt.content_positions(e)[2] for e in first_two]
        if component == "output":
            return [prompt.final_position]
        return [p for e in range(prompt.n_examples - 1) for p in prompt.content_positions(e)[2:4]]
    if head_type == "retrieval":
        if component in ("query", "output"):
            return [prompt.final_position]
        return prompt.content_positions(prompt.n_examples - 1)[:2]
    raise ValueError(f"unknown head type {head_type!r}")


def layout_items(contexts: Sequence[tuple[Prompt, AnswerSpec, str]], positions: Callable[[Prompt], list[int]]) -> list[RsaItem]:
    """Context-major list of compared items."""
    return [item_at(c, p, a, pos) for c, (p, a, _) in enumerate(contexts) for pos in positions(p)]


def build_hypothesis_matrix(kind: str, items: Sequence[RsaItem]) -> SimilarityMatrix:
    key = {
        "abstract": lambda it: it.variable,
        "token": lambda it: it.token,
        "within_instance_position": lambda it: it.within,
        "previous_abstract": lambda it: it.previous_variable,
    }
    if kind not in key:
        raise ValueError(f"unknown hypothesis kind {kind!r}")
    f = key[kind]
    vals = np.array([[1.0 if f(a) == f(b) else 0.0 for b in items] for a in items])
    return SimilarityMatrix(vals, tuple(it.label for it in items), f"hypothesis_{kind}")


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; zero vectors get 0 off the diagonal and 1 on it."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = v / safe[:, None]
    sim = unit @ unit.T
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def empirical_similarity(
    model: Transformer,
    context_groups: Sequence[Sequence[tuple[Prompt, AnswerSpec, str]]],
    weights: Mapping[tuple[int, int], float],
    component: str,
    positions: Callable[[Prompt], list[int]],
    mode: str = "per_head",
) -> SimilarityMatrix:
    """Cosine similarity of head embeddings, averaged over token sets.

    Each group is one token set rendered into the same list of contexts.
    ``per_head`` averages per-head similarity matrices with the given weights;
    ``concatenated`` stacks weighted head embeddings before taking cosines.
    """
    if mode not in ("per_head", "concatenated"):
        raise ValueError("mode must be per_head or concatenated")
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    heads = sorted(weights)
    w = np.array([weights[h] for h in heads], dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    acc = None
    labels = None
    for group in context_groups:
        items = layout_items(group, positions)
        if labels is None:
            labels = tuple(it.label for it in items)
        elif len(items) != len(labels):
            raise ValueError("token sets produce different layouts")
        per_head = {h: [] for h in heads}
        for prompt, _, _ in group:
            _, cache = model.run(prompt.tokens, with_cache=True)
            pos = positions(prompt)
            for h in heads:
                per_head[h].append(cache.component(component, *h)[pos])
        stacked = {h: np.concatenate(per_head[h]) for h in heads}
        if mode == "per_head":
            sim = sum(wi * cosine_matrix(stacked[h]) for wi, h in zip(w, heads))
        else:
            sim = cosine_matrix(np.concatenate([np.sqrt(wi) * stacked[h] for wi, h in zip(w, heads)], axis=1))
        acc = sim if acc is None else acc + sim
    if acc is None:
        raise ValueError("need at least one token set")
    return SimilarityMatrix(acc / len(context_groups), labels, "empirical")


def lower_triangle(m: np.ndarray) -> np.ndarray:
    return m[np.tril_indices(m.shape[0], k=-1)]


def rsa_correlation(empirical: SimilarityMatrix | np.ndarray, hypothesis: SimilarityMatrix | np.ndarray) -> ScalarStatistic:
    """Pearson r over the strict lower triangles."""
    a = empirical.values if isinstance(empirical, SimilarityMatrix) else np.asarray(empirical, dtype=np.float64)
    b = hypothesis.values if isinstance(hypothesis, SimilarityMatrix) else np.asarray(hypothesis, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if isinstance(empirical, SimilarityMatrix) and isinstance(hypothesis, SimilarityMatrix):
        if empirical.labels != hypothesis.labels:
            raise ValueError("similarity matrices have different labels")
    x, y = lower_triangle(a), lower_triangle(b)
    return ScalarStatistic("rsa_r", pearson(x, y), n=len(x))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    denom = np.sqrt((x @ x) * (y @ y))
    if denom == 0:
        raise ValueError("zero-variance input; correlation undefined")
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


# ------------------------------------------------------------------ probes


@dataclass
class ProbeReport:
    train_accuracy: float
    val_accuracy: float
    test_accuracy: float
    split_sizes: tuple[int, int, int]
    token_disjoint: bool
    chosen_c: float
    test_ci: tuple[float, float]


@dataclass
class ProbeSplit:
    features: np.ndarray
    labels: np.ndarray
    tokens: frozenset[int]


def linear_probe(train: ProbeSplit, val: ProbeSplit, test: ProbeSplit, c_grid: Sequence[float] = (0.01, 0.1, 1.0, 10.0, 100.0)) -> ProbeReport:
    """Logistic-regression probe; C chosen on validation accuracy."""
    from sklearn.linear_model import LogisticRegression

    from .train import wilson_interval

    for a, b, names in ((train, val, "train/val"), (train, test, "train/test"), (val, test, "val/test")):
        if a.tokens & b.tokens:
            raise ValueError(f"{names} splits share tokens; refusing to probe")
    if len(np.unique(train.labels)) < 2:
        raise ValueError("training labels have a single class")
    best = None
    for c in c_grid:
        clf = LogisticRegression(C=c, max_iter=5000)
        clf.fit(train.features, train.labels)
        acc = float(clf.score(val.features, val.labels))
        if best is None or acc > best[0]:
            best = (acc, c, clf)
    val_acc, c, clf = best
    test_acc = float(clf.score(test.features, test.labels))
    n_test = len(test.labels)
    return ProbeReport(
        float(clf.score(train.features, train.labels)), val_acc, test_acc,
        (len(train.labels), len(val.labels), n_test), True, c,
        wilson_interval(int(round(test_acc * n_test)), n_test),
    )


def probe_splits(
    model: Transformer, head: tuple[int, int], vocab, sizes: tuple[int, int, int] = (200, 100, 200),
    seed: int = 0, n_shots: int = 2, component: str = "output", shuffle_labels: bool = False,
) -> tuple[ProbeSplit, ProbeSplit, ProbeSplit]:
    """Head embeddings at the last in-context third item, labelled by rule.

    The content pool is cut into three disjoint token pools, one per split.
    ``shuffle_labels`` permutes the labels of all splits jointly.
    """
    from .tasks import make_identity_prompts

    rng = np.random.default_rng(seed)
    pool = np.array(vocab.generic_ids)
    rng.shuffle(pool)
    pools = np.array_split(pool, 3)
    splits = []
    for k, (n, sub) in enumerate(zip(sizes, pools)):
        half = n // 2
        prompts = make_identity_prompts(["ABA", "ABB"], half, seed * 7 + k + 1, vocab, n_shots, pool=tuple(int(t) for t in sub))
        if n % 2:
            prompts += make_identity_prompts(["ABA"], 1, seed * 7 + k + 101, vocab, n_shots, pool=tuple(int(t) for t in sub))
        feats, labels = [], []
        for prompt, _, rule in prompts:
            _, cache = model.run(prompt.tokens, with_cache=True)
            pos = prompt.example_final_positions()[-1]
            feats.append(cache.component(component, *head)[pos])
            labels.append(0 if rule == "ABA" else 1)
        splits.append(ProbeSplit(np.array(feats), np.array(labels), frozenset(int(t) for t in sub)))
    if shuffle_labels:
        all_labels = np.concatenate([s.labels for s in splits])
        rng.shuffle(all_labels)
        bounds = np.cumsum([len(s.labels) for s in splits])[:-1]
        for s, lab in zip(splits, np.split(all_labels, bounds)):
            s.labels = lab
    return tuple(splits)


# --------------------------------------------------- correct vs error trials


@dataclass
class CorrectnessComparison:
    r_correct: ScalarStatistic
    r_error: ScalarStatistic
    difference: float | None
    p_value: float | None
    status: str  # "ok" or "not_applicable"


def _abstract_r(embeddings: np.ndarray, variables: Sequence[str]) -> float:
    sim = cosine_matrix(embeddings)
    hyp = np.array([[1.0 if a == b else 0.0 for b in variables] for a in variables])
    return pearson(lower_triangle(sim), lower_triangle(hyp))


def rsa_by_correctness_embeddings(
    embeddings: np.ndarray, variables: Sequence[str], correct: Sequence[bool],
    n_permutations: int = 2000, seed: int = 0,
) -> CorrectnessComparison:
    """Abstract-variable RSA for correct vs error trials, one-sided permutation p."""
    emb = np.asarray(embeddings, dtype=np.float64)
    variables = list(variables)
    correct = np.asarray(correct, dtype=bool)
    n_c, n_e = int(correct.sum()), int((~correct).sum())
    if n_c < 3 or n_e < 3:
        r_c = ScalarStatistic("rsa_correct", _safe_r(emb[correct], [v for v, c in zip(variables, correct) if c]), n=n_c)
        return CorrectnessComparison(r_c, ScalarStatistic("rsa_error", None, n=n_e, note="group too small"), None, None, "not_applicable")

    def diff(mask: np.ndarray) -> float:
        rc = _abstract_r(emb[mask], [v for v, m in zip(variables, mask) if m])
        re = _abstract_r(emb[~mask], [v for v, m in zip(variables, mask) if not m])
        return rc - re

    r_c = _abstract_r(emb[correct], [v for v, c in zip(variables, correct) if c])
    r_e = _abstract_r(emb[~correct], [v for v, c in zip(variables, correct) if not c])
    observed = r_c - r_e
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(correct)
        try:
            hits += diff(perm) >= observed
        except ValueError:
            continue
    p = (1 + hits) / (1 + n_permutations)
    return CorrectnessComparison(
        ScalarStatistic("rsa_correct", r_c, n=n_c), ScalarStatistic("rsa_error", r_e, n=n_e), observed, p, "ok"
    )


def _safe_r(emb: np.ndarray, variables: Sequence[str]) -> float | None:
    try:
        return _abstract_r(emb, variables)
    except (ValueError, IndexError):
        return None


def rsa_by_correctness(
    model: Transformer, prompts: Sequence[tuple[Prompt, AnswerSpec, str]], head: tuple[int, int],
    component: str = "output", n_permutations: int = 2000, seed: int = 0,
) -> CorrectnessComparison:
    """Split prompts by whether the model answers them, then compare abstract RSA."""
    emb, variables, correct = [], [], []
    for prompt, answer, _ in prompts:
        logits, cache = model.run(prompt.tokens, with_cache=True)
        pos = prompt.example_final_positions()[-1]
        emb.append(cache.component(component, *head)[pos])
        variables.append(prompt.roles[pos])
        correct.append(int(np.argmax(logits[-1])) == answer.tokens[0])
    return rsa_by_correctness_embeddings(np.array(emb), variables, correct, n_permutations, seed)
