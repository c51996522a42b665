import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symlab.tasks import (
    BOS, CARET, NEWLINE, OTHER_RULE, TaskConfig, Vocab, VocabExhausted, WordSet, abstract_pair_from_sets,
    apply_letter_rule, identity_prompt, is_heldout_set, length4_contexts, letter_example, load_wordsets,
    make_identity_pairs, make_identity_prompts, make_letter_string_pair, make_letter_string_prompt, make_verbal_pair,
    make_verbal_prompt, parse, parse_wordsets, prompt_record, render, rsa_contexts, sample_token_sets,
    token_pair_from_sets, verbal_vocab,
)

seeds = st.integers(0, 2**31 - 1)


def test_identity_prompt_layout(vocab):
    a1, b1, a2, b2, a3, b3 = vocab.generic_ids[:6]
    p, ans = identity_prompt("ABA", [(a1, b1), (a2, b2), (a3, b3)], vocab)
    assert p.tokens == (BOS, a1, CARET, b1, CARET, a1, NEWLINE, a2, CARET, b2, CARET, a2, NEWLINE, a3, CARET, b3, CARET)
    assert ans.tokens == (a3,)
    assert p.roles[1:6:2] == ("A", "B", "A")
    assert p.roles[-1] == "query_blank"
    assert p.example_final_positions() == [5, 11]
    assert p.n_examples == 3
    _, ans_abb = identity_prompt("ABB", [(a1, b1), (a2, b2), (a3, b3)], vocab)
    assert ans_abb.tokens == (b3,)


def test_length4_rules(vocab):
    sets = [tuple(vocab.generic_ids[3 * i : 3 * i + 3]) for i in range(3)]
    ctx = length4_contexts(sets, vocab)
    assert [r for _, _, r in ctx] == ["AABA", "ABCB", "ABCC"]
    p, _, _ = ctx[1]
    assert [p.roles[q] for q in p.content_positions(0)] == ["A", "B", "C", "B"]


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(["ABA", "ABB", "AABA", "ABCB", "ABCC"]))
def test_render_parse_round_trip(seed, rule):
    vocab = Vocab.for_size(64)
    p, _ = make_identity_prompts([rule], 1, seed, vocab)[0][:2]
    assert parse(render(p, vocab), vocab) == p


@settings(max_examples=20, deadline=None)
@given(seeds, st.sampled_from(["successor", "predecessor"]))
def test_letter_render_parse_round_trip(seed, rule):
    vocab = Vocab.build(letters=True)
    p, _ = make_letter_string_prompt(TaskConfig(rule, 2, seed, vocab))
    assert parse(render(p, vocab), vocab) == p


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(["abstraction", "symbolic_induction", "retrieval"]))
def test_identity_pair_invariants(seed, target):
    vocab = Vocab.for_size(64)
    for pair in make_identity_pairs(target, 1, seed, vocab):
        assert len(pair.c1) == len(pair.c2)
        assert pair.y_c1 != pair.y_c1_star
        if pair.condition == "abstract":
            # same tokens, same answer, different rule
            assert sorted(pair.c1.tokens) == sorted(pair.c2.tokens)
            assert pair.y_c1 == pair.y_c2
            assert pair.c2.roles != pair.c1.roles
        else:
            assert pair.y_c1_star == pair.y_c2
            assert pair.c1.roles == pair.c2.roles


def test_abstract_pair_patch_positions(vocab):
    sets = sample_token_sets(np.random.default_rng(0), vocab.generic_ids, 3, 2)
    a = abstract_pair_from_sets("ABA", sets, vocab, "abstraction")
    assert a.patch_positions == (5, 11)
    s = abstract_pair_from_sets("ABA", sets, vocab, "symbolic_induction")
    assert s.patch_positions == (16,)
    t = token_pair_from_sets("ABB", sets, vocab)
    assert t.patch_positions == (16,)
    assert a.swapped().swapped() == a


def test_other_rule_is_an_involution():
    for rule, other in OTHER_RULE.items():
        assert OTHER_RULE[other] == rule


def test_rsa_contexts_order(vocab):
    sets = sample_token_sets(np.random.default_rng(3), vocab.generic_ids, 3, 2)
    ctx = rsa_contexts(sets, vocab)
    (a, b) = sets[-1]
    answers = [ans.tokens[0] for _, ans, _ in ctx]
    assert answers == [a, b, a, b]
    assert [r for _, _, r in ctx] == ["ABA", "ABA", "ABB", "ABB"]


def test_heldout_partition_is_deterministic_and_order_free():
    keys = [(i, j) for i in range(7, 40) for j in range(i + 1, 40)]
    flags = [is_heldout_set(k) for k in keys]
    assert flags == [is_heldout_set(k[::-1]) for k in keys]
    assert 0.1 < np.mean(flags) < 0.3


def test_vocab_exhaustion():
    with pytest.raises(VocabExhausted):
        sample_token_sets(np.random.default_rng(0), range(5), 3, 2)


@pytest.mark.parametrize("rule", ["successor", "predecessor"])
def test_letter_rules(rule):
    src, tgt = letter_example(rule, 4)
    assert apply_letter_rule(rule, src) == tgt
    with pytest.raises(ValueError):
        letter_example(rule, 24)


def test_letter_pairs_share_first_and_third_completion_letters():
    vocab = Vocab.build(letters=True)
    for seed in range(10):
        pair = make_letter_string_pair(TaskConfig("successor", 2, seed, vocab), "abstraction")
        y, star = pair.y_c1.tokens, pair.y_c1_star.tokens
        assert y[1] != star[1] or y[0] != star[0] or y[2] != star[2]
        assert len(pair.readouts) == 2
        assert len(pair.patch_positions) == 4
        r = make_letter_string_pair(TaskConfig("predecessor", 2, seed, vocab), "retrieval")
        assert len(r.readouts) == 3


def test_wordsets():
    sets = load_wordsets()
    assert len(sets) >= 40
    words = [w for s in sets for w in s.words()]
    assert len(words) == len(set(words))
    ws = WordSet("lazy", "idle", "energetic", "active")
    assert ws.synonym(ws.synonym("lazy")) == "lazy"
    assert ws.antonym("lazy") == "active"
    with pytest.raises(ValueError):
        parse_wordsets("a,b,c")


def test_verbal_prompt_and_pair():
    sets = load_wordsets()
    vocab = verbal_vocab(sets)
    p, ans, foil = make_verbal_prompt(TaskConfig("antonym", 2, 1, vocab), sets)
    assert ans != foil
    pair = make_verbal_pair(TaskConfig("synonym", 2, 1, vocab), sets, "abstraction")
    assert pair.y_c1 == pair.y_c2
    assert len(pair.c1) == len(pair.c2)


def test_prompt_record_json(vocab):
    p, ans, _ = make_identity_prompts(["ABA"], 1, 0, vocab)[0]
    rec = json.loads(prompt_record(p, ans, vocab))
    assert rec["tokens"][0] == "<bos>"
    assert len(rec["annotations"]["role"]) == len(p)


def test_prompt_requires_bos(vocab):
    from symlab.tasks import Prompt

    with pytest.raises(ValueError):
        Prompt.from_tokens([NEWLINE, 9])
