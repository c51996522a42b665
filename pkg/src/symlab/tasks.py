"""Prompt generators for identity rules, letter-string and verbal analogies.

Every prompt starts with a BOS token. Annotations are derived from the token
sequence alone, so a rendered prompt parses back to the same object:

* examples are separated by newline tokens;
* content tokens get their within-example index and a role letter by
  first-occurrence order inside the example (A, B, C, ...);
* reserved tokens are ``separator``; the final position is ``query_blank``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RESERVED = ("<bos>", "^", "\n", "[", "]", ":", " ")
BOS, CARET, NEWLINE, LBRACK, RBRACK, COLON, SPACE = range(len(RESERVED))
N_RESERVED = len(RESERVED)
_SPLIT_CHARS = {"^": CARET, "\n": NEWLINE, "[": LBRACK, "]": RBRACK, ":": COLON}

LETTERS = "abcdefghijklmnopqrstuvwxyz"
ROLE_NAMES = "ABCDEFGH"
SEPARATOR = "separator"
QUERY_BLANK = "query_blank"

IDENTITY_RULES = ("ABA", "ABB", "AABA", "ABCB", "ABCC")
LETTER_RULES = ("successor", "predecessor")
VERBAL_RULES = ("synonym", "antonym")
ALL_RULES = IDENTITY_RULES + LETTER_RULES + VERBAL_RULES
OTHER_RULE = {
    "ABA": "ABB",
    "ABB": "ABA",
    "successor": "predecessor",
    "predecessor": "successor",
    "synonym": "antonym",
    "antonym": "synonym",
}
HEAD_TYPES = ("abstraction", "symbolic_induction", "retrieval")


class VocabExhausted(ValueError):
    pass


class Vocab:
    """Bijective token string <-> id map with the reserved tokens first."""

    def __init__(self, content: Sequence[str]):
        content = tuple(content)
        for tok in content:
            if not tok or any(c in tok for c in "^\n[]: \t") or tok in RESERVED:
                raise ValueError(f"invalid content token {tok!r}")
        if len(set(content)) != len(content):
            raise ValueError("duplicate content tokens")
        self.tokens: tuple[str, ...] = RESERVED + content
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, n_generic: int = 57, letters: bool = False, words: Sequence[str] = ()) -> "Vocab":
        content = [f"t{i:02d}" for i in range(n_generic)]
        if letters:
            content += list(LETTERS)
        content += [w for w in words if w not in content]
        return cls(content)

    @classmethod
    def for_size(cls, vocab_size: int) -> "Vocab":
        if vocab_size <= N_RESERVED:
            raise ValueError("vocab_size must exceed the reserved tokens")
        return cls.build(vocab_size - N_RESERVED)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def content_ids(self) -> tuple[int, ...]:
        return tuple(range(N_RESERVED, len(self)))

    @property
    def generic_ids(self) -> tuple[int, ...]:
        ids = tuple(i for i in self.content_ids if self.tokens[i][0] == "t" and self.tokens[i][1:].isdigit())
        return ids or self.content_ids

    def letter_id(self, index: int) -> int:
        if not 0 <= index < 26:
            raise ValueError(f"letter index {index} outside the alphabet")
        return self.id(LETTERS[index])

    def to_json(self) -> list[str]:
        return list(self.tokens[N_RESERVED:])


def is_content(token_id: int) -> bool:
    return token_id >= N_RESERVED


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[int, ...]
    example_index: tuple[int, ...]
    within_example_position: tuple[int, ...]
    roles: tuple[str, ...]

    @classmethod
    def from_tokens(cls, tokens: Sequence[int]) -> "Prompt":
        tokens = tuple(int(t) for t in tokens)
        if not tokens or tokens[0] != BOS:
            raise ValueError("prompt must start with BOS")
        ex_idx, within, roles = [-1], [-1], [SEPARATOR]
        example, count, seen = 0, 0, {}
        for tok in tokens[1:]:
            if is_content(tok):
                if tok not in seen:
                    seen[tok] = ROLE_NAMES[min(len(seen), len(ROLE_NAMES) - 1)]
                ex_idx.append(example)
                within.append(count)
                roles.append(seen[tok])
                count += 1
            else:
                ex_idx.append(example)
                within.append(-1)
                roles.append(SEPARATOR)
                if tok == NEWLINE:
                    example, count, seen = example + 1, 0, {}
        roles[-1] = QUERY_BLANK
        return cls(tokens, tuple(ex_idx), tuple(within), tuple(roles))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def final_position(self) -> int:
        return len(self.tokens) - 1

    @property
    def n_examples(self) -> int:
        return self.example_index[-1] + 1

    def content_positions(self, example: int) -> list[int]:
        return [
            p
            for p, (e, t) in enumerate(zip(self.example_index, self.tokens))
            if e == example and is_content(t)
        ]

    def example_final_positions(self) -> list[int]:
        """Last content position of every complete (in-context) example."""
        return [self.content_positions(e)[-1] for e in range(self.n_examples - 1)]

    def role_at(self, position: int) -> str:
        return self.roles[position]


@dataclass(frozen=True)
class AnswerSpec:
    tokens: tuple[int, ...]
    text: str

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("empty answer")

    @classmethod
    def of(cls, ids: Sequence[int], vocab: Vocab) -> "AnswerSpec":
        ids = tuple(int(i) for i in ids)
        return cls(ids, " ".join(vocab.decode(ids)))


@dataclass(frozen=True)
class Readout:
    """One scored position: logits at ``position`` compare ``y`` against ``y_star``."""

    position: int
    y: int
    y_star: int


@dataclass(frozen=True)
class ContextPair:
    c1: Prompt
    c2: Prompt
    y_c1: AnswerSpec
    y_c1_star: AnswerSpec
    y_c2: AnswerSpec
    condition: str
    target_head_type: str
    patch_positions: tuple[int, ...]
    rule: str
    readouts: tuple[Readout, ...] = ()
    pair_id: int = 0

    def __post_init__(self):
        if len(self.c1) != len(self.c2):
            raise ValueError("paired prompts must have equal length")
        if self.condition not in ("abstract", "token"):
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.target_head_type not in HEAD_TYPES:
            raise ValueError(f"unknown head type {self.target_head_type!r}")

    def swapped(self) -> "ContextPair":
        """Same pair with the roles of c1 and c2 exchanged."""
        return ContextPair(
            self.c2, self.c1, self.y_c2, self.y_c1_star, self.y_c1, self.condition,
            self.target_head_type, self.patch_positions, self.rule, self.readouts, self.pair_id,
        )


@dataclass(frozen=True)
class TaskConfig:
    rule: str
    n_shots: int = 2
    seed: int = 0
    vocab: Vocab = field(default_factory=Vocab.build)
    pool: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.rule not in ALL_RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.n_shots < 1:
            raise ValueError("n_shots must be at least 1")

    def token_pool(self) -> tuple[int, ...]:
        return self.pool if self.pool is not None else self.vocab.generic_ids


# ---------------------------------------------------------------- rendering


def render(prompt: Prompt | Sequence[int], vocab: Vocab) -> str:
    tokens = prompt.tokens if isinstance(prompt, Prompt) else tuple(prompt)
    out: list[str] = []
    prev = BOS
    for tok in tokens[1:]:
        if out and ((is_content(prev) and is_content(tok)) or tok == COLON or prev == COLON):
            out.append(" ")
        out.append(vocab.token(tok))
        prev = tok
    return "".join(out)


def parse(text: str, vocab: Vocab) -> Prompt:
    ids = [BOS]
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == " ":
            if ids[-1] == RBRACK:
                ids.append(SPACE)
            i += 1
        elif ch in _SPLIT_CHARS:
            ids.append(_SPLIT_CHARS[ch])
            i += 1
        else:
            j = i
            while j < len(text) and text[j] != " " and text[j] not in _SPLIT_CHARS:
                j += 1
            ids.append(vocab.id(text[i:j]))
            i = j
    return Prompt.from_tokens(ids)


def prompt_record(prompt: Prompt, answer: AnswerSpec, vocab: Vocab) -> str:
    """One JSON line {tokens, annotations, answer}."""
    rec = {
        "tokens": vocab.decode(prompt.tokens),
        "annotations": {
            "example_index": list(prompt.example_index),
            "within_example_position": list(prompt.within_example_position),
            "role": list(prompt.roles),
        },
        "answer": vocab.decode(answer.tokens),
    }
    return json.dumps(rec, sort_keys=True)


# ----------------------------------------------------------- identity rules


def rule_variables(rule: str) -> str:
    return "".join(dict.fromkeys(rule))


def sample_token_sets(rng: np.random.Generator, pool: Sequence[int], n_sets: int, size: int) -> list[tuple[int, ...]]:
    need = n_sets * size
    if need > len(pool):
        raise VocabExhausted(f"need {need} distinct tokens, pool has {len(pool)}")
    chosen = rng.choice(np.asarray(pool), size=need, replace=False)
    return [tuple(int(t) for t in chosen[i * size : (i + 1) * size]) for i in range(n_sets)]


def identity_tokens(rule: str, sets: Sequence[Sequence[int]]) -> tuple[list[int], int]:
    """Token ids and answer id for ``rule`` over one token set per example."""
    if rule not in IDENTITY_RULES:
        raise ValueError(f"{rule!r} is not an identity rule")
    names = rule_variables(rule)
    ids = [BOS]
    for n, tset in enumerate(sets):
        if len(tset) < len(names):
            raise ValueError(f"rule {rule} needs {len(names)} tokens per example")
        items = [tset[names.index(ch)] for ch in rule]
        if n < len(sets) - 1:
            for k, tok in enumerate(items):
                ids.append(tok)
                ids.append(CARET if k < len(items) - 1 else NEWLINE)
        else:
            for tok in items[:-1]:
                ids += [tok, CARET]
            answer = items[-1]
    return ids, answer


def identity_prompt(rule: str, sets: Sequence[Sequence[int]], vocab: Vocab) -> tuple[Prompt, AnswerSpec]:
    ids, answer = identity_tokens(rule, sets)
    return Prompt.from_tokens(ids), AnswerSpec.of([answer], vocab)


def make_identity_prompt(cfg: TaskConfig) -> tuple[Prompt, AnswerSpec]:
    rng = np.random.default_rng(cfg.seed)
    sets = sample_token_sets(rng, cfg.token_pool(), cfg.n_shots + 1, len(rule_variables(cfg.rule)))
    return identity_prompt(cfg.rule, sets, cfg.vocab)


def make_identity_prompts(
    rules: Sequence[str], n_per_rule: int, seed: int, vocab: Vocab, n_shots: int = 2,
    pool: Sequence[int] | None = None,
) -> list[tuple[Prompt, AnswerSpec, str]]:
    """``n_per_rule`` prompts for each rule, rule-major order."""
    rng = np.random.default_rng(seed)
    pool = tuple(pool) if pool is not None else vocab.generic_ids
    out = []
    for rule in rules:
        k = len(rule_variables(rule))
        for _ in range(n_per_rule):
            sets = sample_token_sets(rng, pool, n_shots + 1, k)
            prompt, answer = identity_prompt(rule, sets, vocab)
            out.append((prompt, answer, rule))
    return out


def _swap_sets(sets: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    return [(b, a) for a, b in sets]


def abstract_pair_from_sets(
    rule: str, sets: Sequence[tuple[int, int]], vocab: Vocab, target: str = "abstraction", pair_id: int = 0
) -> ContextPair:
    """c1 follows ``rule``; c2 follows the other rule over sets with A/B swapped.

    Both contexts end every example with the same token, so they share the
    correct answer; patching c2's rule into c1 predicts the other query token.
    """
    if rule not in ("ABA", "ABB"):
        raise ValueError("abstract pairs are defined for ABA and ABB")
    other = OTHER_RULE[rule]
    c1, y = identity_prompt(rule, sets, vocab)
    c2, y2 = identity_prompt(other, _swap_sets(sets), vocab)
    _, y_star = identity_prompt(other, sets, vocab)
    if target == "abstraction":
        positions = tuple(c1.example_final_positions())
    elif target == "symbolic_induction":
        positions = (c1.final_position,)
    else:
        raise ValueError("abstract pairs target abstraction or symbolic_induction heads")
    return ContextPair(c1, c2, y, y_star, y2, "abstract", target, positions, rule, (), pair_id)


def token_pair_from_sets(rule: str, sets: Sequence[tuple[int, ...]], vocab: Vocab, pair_id: int = 0) -> ContextPair:
    """Same rule in both contexts; c2 swaps the two tokens of the final example."""
    if rule not in ("ABA", "ABB"):
        raise ValueError("token pairs are defined for ABA and ABB")
    c1, y = identity_prompt(rule, sets, vocab)
    swapped = list(sets[:-1]) + [tuple(reversed(sets[-1]))]
    c2, y2 = identity_prompt(rule, swapped, vocab)
    return ContextPair(c1, c2, y, y2, y2, "token", "retrieval", (c1.final_position,), rule, (), pair_id)


def make_abstract_pair(cfg: TaskConfig, target: str = "abstraction") -> ContextPair:
    rng = np.random.default_rng(cfg.seed)
    sets = sample_token_sets(rng, cfg.token_pool(), cfg.n_shots + 1, 2)
    return abstract_pair_from_sets(cfg.rule, sets, cfg.vocab, target)


def make_token_pair(cfg: TaskConfig) -> ContextPair:
    rng = np.random.default_rng(cfg.seed)
    sets = sample_token_sets(rng, cfg.token_pool(), cfg.n_shots + 1, 2)
    return token_pair_from_sets(cfg.rule, sets, cfg.vocab)


def make_identity_pairs(
    target: str, n_per_direction: int, seed: int, vocab: Vocab, n_shots: int = 2,
    pool: Sequence[int] | None = None,
) -> list[ContextPair]:
    """CMA pool for one head type, both rule directions, pair ids in order.

    Abstract targets emit, for every sampled token set S, the ABA pair over S
    followed by its mirror (the ABB pair over the swapped sets). Retrieval
    targets emit one token pair per rule.
    """
    rng = np.random.default_rng(seed)
    pool = tuple(pool) if pool is not None else vocab.generic_ids
    pairs: list[ContextPair] = []
    for _ in range(n_per_direction):
        sets = sample_token_sets(rng, pool, n_shots + 1, 2)
        if target == "retrieval":
            pairs.append(token_pair_from_sets("ABA", sets, vocab, len(pairs)))
            pairs.append(token_pair_from_sets("ABB", sets, vocab, len(pairs)))
        else:
            pairs.append(abstract_pair_from_sets("ABA", sets, vocab, target, len(pairs)))
            pairs.append(abstract_pair_from_sets("ABB", _swap_sets(sets), vocab, target, len(pairs)))
    return pairs


def rsa_contexts(sets: Sequence[tuple[int, int]], vocab: Vocab) -> list[tuple[Prompt, AnswerSpec, str]]:
    """The four contexts that dissociate variables from tokens, in fixed order.

    1. A B A ... A_N B_N    2. A B A ... B_N A_N
    3. B A A ... B_N A_N    4. B A A ... A_N B_N
    """
    last_swapped = list(sets[:-1]) + [tuple(reversed(sets[-1]))]
    swapped = _swap_sets(sets)
    swapped_last = list(swapped[:-1]) + [tuple(reversed(swapped[-1]))]
    out = []
    for rule, s in (("ABA", sets), ("ABA", last_swapped), ("ABB", swapped), ("ABB", swapped_last)):
        p, a = identity_prompt(rule, s, vocab)
        out.append((p, a, rule))
    return out


def length4_contexts(sets: Sequence[tuple[int, int, int]], vocab: Vocab) -> list[tuple[Prompt, AnswerSpec, str]]:
    """One context per length-4 rule (AABA, ABCB, ABCC) over the same token sets."""
    out = []
    for rule in ("AABA", "ABCB", "ABCC"):
        p, a = identity_prompt(rule, sets, vocab)
        out.append((p, a, rule))
    return out


# ------------------------------------------------------------ held-out split


def token_set_key(tokens: Sequence[int]) -> str:
    return "-".join(str(t) for t in sorted(tokens))


def is_heldout_set(tokens: Sequence[int], fraction: float = 0.2) -> bool:
    """Deterministic hash partition of unordered token sets."""
    digest = hashlib.sha256(token_set_key(tokens).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64 < fraction


def sample_partitioned_sets(
    rng: np.random.Generator, pool: Sequence[int], n_sets: int, size: int, heldout: bool,
    fraction: float = 0.2, max_tries: int = 10000,
) -> list[tuple[int, ...]]:
    """Like :func:`sample_token_sets`, with every set on one side of the partition."""
    for _ in range(max_tries):
        sets = sample_token_sets(rng, pool, n_sets, size)
        if all(is_heldout_set(s, fraction) == heldout for s in sets):
            return sets
    raise VocabExhausted("could not sample token sets from the requested partition")


# -------------------------------------------------------- letter strings


def letter_example(rule: str, base: int) -> tuple[list[int], list[int]]:
    """Source and completion letter indices for one letter-string example."""
    if rule == "successor":
        src, tgt = [base, base + 1, base + 2], [base, base + 1, base + 3]
    elif rule == "predecessor":
        src, tgt = [base + 1, base + 2, base + 3], [base, base + 2, base + 3]
    else:
        raise ValueError(f"{rule!r} is not a letter-string rule")
    if min(src + tgt) < 0 or max(src + tgt) > 25:
        raise ValueError(f"letter base {base} leaves the alphabet under {rule}")
    return src, tgt


def apply_letter_rule(rule: str, letters: Sequence[int]) -> list[int]:
    a, b, c = letters
    if rule == "successor":
        out = [a, b, c + 1]
    elif rule == "predecessor":
        out = [a - 1, b, c]
    else:
        raise ValueError(f"{rule!r} is not a letter-string rule")
    if min(out) < 0 or max(out) > 25:
        raise ValueError(f"{rule} of {letters} leaves the alphabet")
    return out


def _bracket(ids: Sequence[int]) -> list[int]:
    return [LBRACK, *ids, RBRACK]


def letter_tokens(
    rule: str, bases: Sequence[int], vocab: Vocab, query_letters: Sequence[int] | None = None,
    append_answer: bool = False,
) -> tuple[list[int], list[int], list[int]]:
    """Token ids, completion-letter positions of the query, and answer ids.

    ``bases`` gives one base letter per example; the last one is the query
    unless ``query_letters`` overrides the query source.
    """
    ids = [BOS]
    for base in bases[:-1]:
        src, tgt = letter_example(rule, base)
        ids += _bracket([vocab.letter_id(i) for i in src]) + [SPACE]
        ids += _bracket([vocab.letter_id(i) for i in tgt]) + [NEWLINE]
    if query_letters is None:
        query_letters, answer = letter_example(rule, bases[-1])
    else:
        answer = apply_letter_rule(rule, query_letters)
    answer_ids = [vocab.letter_id(i) for i in answer]
    ids += _bracket([vocab.letter_id(i) for i in query_letters]) + [SPACE, LBRACK]
    slots = [len(ids), len(ids) + 1, len(ids) + 2]
    if append_answer:
        ids += answer_ids + [RBRACK]
    return ids, slots, answer_ids


def _sample_letter_bases(rng: np.random.Generator, n: int) -> list[int]:
    """Bases whose four-letter spans are pairwise disjoint; the query base lies in [1, 21]."""
    for _ in range(10000):
        bases = [int(b) for b in rng.integers(0, 23, size=n - 1)] + [int(rng.integers(1, 22))]
        spans = [set(range(b, b + 4)) for b in bases]
        if all(spans[i].isdisjoint(spans[j]) for i in range(n) for j in range(i + 1, n)):
            return bases
    raise VocabExhausted("could not sample disjoint letter spans")


def make_letter_string_prompt(cfg: TaskConfig) -> tuple[Prompt, AnswerSpec]:
    if cfg.rule not in LETTER_RULES:
        raise ValueError(f"{cfg.rule!r} is not a letter-string rule")
    rng = np.random.default_rng(cfg.seed)
    bases = _sample_letter_bases(rng, cfg.n_shots + 1)
    ids, _, answer = letter_tokens(cfg.rule, bases, cfg.vocab)
    return Prompt.from_tokens(ids), AnswerSpec.of(answer, cfg.vocab)


def make_letter_string_pair(cfg: TaskConfig, target: str = "abstraction", pair_id: int = 0) -> ContextPair:
    """Successor/predecessor pair; scores sum over the listed readout positions.

    Abstract targets pair the two rules over the same letters, whose
    completions share their first and third letters. Retrieval targets pair
    the same rule with a query over different letters.
    """
    rule, vocab = cfg.rule, cfg.vocab
    if rule not in LETTER_RULES:
        raise ValueError(f"{rule!r} is not a letter-string rule")
    rng = np.random.default_rng(cfg.seed)
    bases = _sample_letter_bases(rng, cfg.n_shots + 2)
    in_ctx, qbase, alt_base = bases[: cfg.n_shots], bases[cfg.n_shots], bases[cfg.n_shots + 1]
    ids1, slots, ans1 = letter_tokens(rule, in_ctx + [qbase], vocab, append_answer=True)
    query_src, _ = letter_example(rule, qbase)
    c1 = Prompt.from_tokens(ids1)
    if target in ("abstraction", "symbolic_induction"):
        other = OTHER_RULE[rule]
        ids2, _, ans2 = letter_tokens(other, in_ctx + [qbase], vocab, append_answer=True)
        star = [vocab.letter_id(i) for i in apply_letter_rule(other, query_src)]
        readouts = (
            Readout(slots[0] - 1, ans1[0], star[0]),
            Readout(slots[2] - 1, ans1[2], star[2]),
        )
        if target == "abstraction":
            positions = []
            for e in range(cfg.n_shots):
                content = c1.content_positions(e)
                positions += [content[3], content[5]]
        else:
            positions = [r.position for r in readouts]
        condition = "abstract"
    elif target == "retrieval":
        alt_src, _ = letter_example(rule, alt_base)
        ids2, _, ans2 = letter_tokens(rule, in_ctx + [alt_base], vocab, append_answer=True)
        star = ans2
        readouts = tuple(Readout(slots[k] - 1, ans1[k], ans2[k]) for k in range(3))
        positions = [r.position for r in readouts]
        condition = "token"
    else:
        raise ValueError(f"unknown head type {target!r}")
    return ContextPair(
        c1, Prompt.from_tokens(ids2), AnswerSpec.of(ans1, vocab), AnswerSpec.of(star, vocab),
        AnswerSpec.of(ans2, vocab), condition, target, tuple(sorted(positions)), rule, readouts, pair_id,
    )


# -------------------------------------------------------- verbal analogies


@dataclass(frozen=True)
class WordSet:
    """Two synonym pairs that are antonyms of each other."""

    a1: str
    a2: str
    b1: str
    b2: str

    def words(self) -> tuple[str, str, str, str]:
        return (self.a1, self.a2, self.b1, self.b2)

    def synonym(self, w: str) -> str:
        return {self.a1: self.a2, self.a2: self.a1, self.b1: self.b2, self.b2: self.b1}[w]

    def antonym(self, w: str) -> str:
        return {self.a1: self.b2, self.b2: self.a1, self.a2: self.b1, self.b1: self.a2}[w]

    def apply(self, relation: str, w: str) -> str:
        if relation == "synonym":
            return self.synonym(w)
        if relation == "antonym":
            return self.antonym(w)
        raise ValueError(f"{relation!r} is not a verbal relation")


def parse_wordsets(text: str) -> list[WordSet]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        words = [w.strip() for w in line.split(",")]
        if len(words) != 4 or any(not w or " " in w for w in words) or len(set(words)) != 4:
            raise ValueError(f"line {lineno}: expected four distinct comma-separated words, got {line!r}")
        out.append(WordSet(*words))
    return out


def load_wordsets(path: str | Path | None = None) -> list[WordSet]:
    if path is None:
        text = resources.files("symlab").joinpath("data/wordsets.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_wordsets(text)


def verbal_vocab(wordsets: Sequence[WordSet], n_generic: int = 0) -> Vocab:
    return Vocab.build(n_generic, words=[w for s in wordsets for w in s.words()])


def _verbal_tokens(relation: str, items: Sequence[tuple[WordSet, str]], vocab: Vocab) -> tuple[list[int], int]:
    """``items`` holds (set, answer word) per example; the last one is the query."""
    ids = [BOS]
    for k, (ws, answer) in enumerate(items):
        cue = ws.apply(relation, answer)
        if k < len(items) - 1:
            ids += [vocab.id(cue), COLON, vocab.id(answer), NEWLINE]
        else:
            ids += [vocab.id(cue), COLON]
    return ids, vocab.id(items[-1][1])


def _sample_verbal_items(rng: np.random.Generator, wordsets: Sequence[WordSet], n: int) -> list[tuple[WordSet, str]]:
    if len(wordsets) < n:
        raise VocabExhausted(f"need {n} word sets, have {len(wordsets)}")
    idx = rng.choice(len(wordsets), size=n, replace=False)
    return [(wordsets[i], wordsets[i].words()[int(rng.integers(4))]) for i in idx]


def make_verbal_prompt(cfg: TaskConfig, wordsets: Sequence[WordSet]) -> tuple[Prompt, AnswerSpec, AnswerSpec]:
    """Prompt, correct answer and the wrong-relation foil."""
    if cfg.rule not in VERBAL_RULES:
        raise ValueError(f"{cfg.rule!r} is not a verbal relation")
    rng = np.random.default_rng(cfg.seed)
    items = _sample_verbal_items(rng, wordsets, cfg.n_shots + 1)
    ids, answer = _verbal_tokens(cfg.rule, items, cfg.vocab)
    ws, w = items[-1]
    cue = ws.apply(cfg.rule, w)
    foil = ws.apply(OTHER_RULE[cfg.rule], cue)
    return Prompt.from_tokens(ids), AnswerSpec.of([answer], cfg.vocab), AnswerSpec.of([cfg.vocab.id(foil)], cfg.vocab)


def make_verbal_pair(
    cfg: TaskConfig, wordsets: Sequence[WordSet], target: str = "abstraction", pair_id: int = 0
) -> ContextPair:
    """Synonym/antonym pair sharing every second word and the correct answer."""
    rule, vocab = cfg.rule, cfg.vocab
    if rule not in VERBAL_RULES:
        raise ValueError(f"{rule!r} is not a verbal relation")
    rng = np.random.default_rng(cfg.seed)
    items = _sample_verbal_items(rng, wordsets, 2 * (cfg.n_shots + 1))
    mine, alt = items[: cfg.n_shots + 1], items[cfg.n_shots + 1 :]
    ids1, y = _verbal_tokens(rule, mine, vocab)
    c1 = Prompt.from_tokens(ids1)
    ws, w = mine[-1]
    if target in ("abstraction", "symbolic_induction"):
        other = OTHER_RULE[rule]
        ids2, y2 = _verbal_tokens(other, mine, vocab)
        star = vocab.id(ws.apply(other, ws.apply(rule, w)))
        condition = "abstract"
        if target == "abstraction":
            positions = tuple(c1.example_final_positions())
        else:
            positions = (c1.final_position,)
    elif target == "retrieval":
        ids2, y2 = _verbal_tokens(rule, alt, vocab)
        star = y2
        condition = "token"
        positions = (c1.final_position,)
    else:
        raise ValueError(f"unknown head type {target!r}")
    return ContextPair(
        c1, Prompt.from_tokens(ids2), AnswerSpec.of([y], vocab), AnswerSpec.of([star], vocab),
        AnswerSpec.of([y2], vocab), condition, target, positions, rule, (), pair_id,
    )
