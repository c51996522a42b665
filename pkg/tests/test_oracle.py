import numpy as np
import pytest

from symlab.oracle import (
    ABSTRACTION_HEAD, CRITICAL_HEADS, INDUCTION_HEAD, RETRIEVAL_HEAD, OracleDimensionError, OracleSpec, build_oracle,
    symbol_subspace,
)
from symlab.causal_aux import repeated_sequence
from symlab.tasks import make_identity_prompts
from symlab.train import evaluate_accuracy


def test_identity_accuracy(oracle, vocab):
    examples = make_identity_prompts(["ABA", "ABB"], 250, 11, vocab)
    assert evaluate_accuracy(oracle, examples).accuracy == 1.0


@pytest.mark.parametrize("shots", [1, 3, 5])
def test_accuracy_across_shot_counts(oracle, vocab, shots):
    examples = make_identity_prompts(["ABA", "ABB"], 20, shots, vocab, n_shots=shots)
    assert evaluate_accuracy(oracle, examples).accuracy == 1.0


def test_stage_attention(oracle, vocab):
    prompt, _, _ = make_identity_prompts(["ABB"], 1, 2, vocab)[0]
    _, cache = oracle.run(prompt.tokens, with_cache=True)
    final = prompt.final_position
    third = prompt.example_final_positions()
    # abstraction: third item -> second item (ABB)
    for e, q in enumerate(third):
        assert cache.attention_pattern[ABSTRACTION_HEAD][q, prompt.content_positions(e)[1]] > 0.999
    # induction: final -> both example-final items, evenly
    np.testing.assert_allclose(cache.attention_pattern[INDUCTION_HEAD][final, third], 0.5, atol=1e-6)
    # retrieval: final -> second query item
    assert cache.attention_pattern[RETRIEVAL_HEAD][final, prompt.content_positions(2)[1]] > 0.999


def test_abstraction_output_lives_in_symbol_subspace(oracle, vocab):
    sub = symbol_subspace()
    prompt, _, rule = make_identity_prompts(["ABA"], 1, 4, vocab)[0]
    _, cache = oracle.run(prompt.tokens, with_cache=True)
    q = prompt.example_final_positions()[0]
    z = cache.head_output[ABSTRACTION_HEAD][q]
    W_o = oracle.params["layer.0.attn.o"].data[: oracle.config.d_head]
    written = z @ W_o
    assert np.abs(written[sub]).max() > 0.99
    outside = np.delete(written, np.arange(sub.start, sub.stop))
    assert np.abs(outside).max() < 1e-3


def test_dummy_heads_write_nothing(oracle):
    dh = oracle.config.d_head
    for layer in range(oracle.config.n_layers):
        W_o = oracle.params[f"layer.{layer}.attn.o"].data
        for h in range(1, oracle.config.n_heads):
            assert not W_o[h * dh : (h + 1) * dh].any()
    assert set(CRITICAL_HEADS) == {(0, 0), (1, 0), (2, 0)}


def test_oracle_is_deterministic():
    a, b = build_oracle(OracleSpec(seed=3)), build_oracle(OracleSpec(seed=3))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_dimension_errors():
    with pytest.raises(OracleDimensionError):
        build_oracle(OracleSpec(d_head=8))
    with pytest.raises(ValueError):
        OracleSpec(saturation_scale=5)
    with pytest.raises(ValueError):
        OracleSpec(alphabet_size=4)


def test_literal_oracle_copies_repeated_sequences(literal_oracle, vocab):
    tokens = repeated_sequence(vocab.generic_ids, 40, 0)
    logits, _ = literal_oracle.run(tokens)
    n = 40
    pred = logits[n + 1 : 2 * n].argmax(axis=1)
    np.testing.assert_array_equal(pred, tokens[n + 2 : 2 * n + 1])
