import numpy as np
import pytest

from symlab import tensor as T
from symlab.model import ModelConfig, Transformer
from symlab.tasks import Vocab, is_heldout_set, make_identity_prompts
from symlab.train import (
    AdamW, TrainConfig, TrainingDiverged, _batch, _example_sets, batch_loss, clip_gradients, evaluate_accuracy,
    example_answer_positions, heldout_examples, lr_at, sample_examples, train, wilson_interval,
)

VOCAB = Vocab.for_size(64)


def tiny(seed=0, **kw):
    cfg = dict(n_layers=2, n_heads=2, d_model=16, d_head=8, vocab_size=64, max_seq_len=32, seed=seed)
    cfg.update(kw)
    return Transformer.init_random(ModelConfig(**cfg))


def test_memorises_a_single_prompt():
    model = tiny()
    tokens, targets = _batch(make_identity_prompts(["ABA"], 1, 0, VOCAB))
    cfg = TrainConfig(steps=500, learning_rate=1e-2, warmup=10, weight_decay=0.0, eval_every=500, loss_mode="answer")
    result = train(model, cfg, VOCAB, batch_fn=lambda r, n: (tokens, targets), eval_fn=lambda m: 0.0)
    assert result.final_loss < 1e-3


def test_wilson_interval():
    lo, hi = wilson_interval(95, 100)
    assert lo < 0.95 < hi
    assert (lo, hi) == pytest.approx((0.8883, 0.9785), abs=1e-4)
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_random_init_is_near_chance():
    report = evaluate_accuracy(tiny(3), heldout_examples(VOCAB, 400, 0))
    assert report.accuracy < 0.1


def test_oracle_is_perfect(oracle):
    report = evaluate_accuracy(oracle, heldout_examples(VOCAB, 300, 1))
    assert report.n_correct == 300 and report.ci_high == 1.0


def test_fast_and_slow_scoring_agree(oracle):
    exs = make_identity_prompts(["ABA", "ABB"], 10, 5, VOCAB)
    model = tiny(1)
    fast = evaluate_accuracy(model, exs)
    slow = sum(int(np.argmax(model.forward(p.tokens))) == a.tokens[0] for p, a, _ in exs)
    assert fast.n_correct == slow


def test_logit_comparison_scoring(oracle):
    exs = make_identity_prompts(["ABA"], 5, 6, VOCAB)
    foils = [(p, a, r, type(a)((p.tokens[p.content_positions(p.n_examples - 1)[1]],), "foil")) for p, a, r in exs]
    assert evaluate_accuracy(oracle, foils, "logit_comparison").accuracy == 1.0
    with pytest.raises(ValueError):
        evaluate_accuracy(oracle, exs, "logit_comparison")
    with pytest.raises(ValueError):
        evaluate_accuracy(oracle, exs, "nope")


@pytest.mark.parametrize("bad", [
    dict(steps=0), dict(learning_rate=0.0), dict(mixture={"ABA": 0.7}), dict(mixture={"XYZ": 1.0}),
    dict(target_accuracy=1.5), dict(loss_mode="all"), dict(batch_size=0),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_divergence_is_reported():
    model = tiny()
    tokens, targets = _batch(make_identity_prompts(["ABA"], 2, 0, VOCAB))
    model.params["embed"].data[:] = np.inf
    cfg = TrainConfig(steps=5, eval_every=5)
    with pytest.raises(TrainingDiverged):
        train(model, cfg, VOCAB, batch_fn=lambda r, n: (tokens, targets), eval_fn=lambda m: 0.0)


def test_training_is_reproducible():
    cfg = TrainConfig(steps=15, batch_size=4, eval_every=15, eval_prompts=20)
    a, b = tiny(), tiny()
    ra, rb = train(a, cfg, VOCAB), train(b, cfg, VOCAB)
    assert ra.log == rb.log
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_heldout_and_training_sets_disjoint():
    rng = np.random.default_rng(0)
    train_sets = set(_example_sets(sample_examples(rng, VOCAB, 300, {"ABA": 0.5, "ABB": 0.5}, 2, False)))
    held_sets = set(_example_sets(heldout_examples(VOCAB, 300, 0)))
    assert not train_sets & held_sets
    assert all(is_heldout_set(s) for s in held_sets)
    assert not any(is_heldout_set(s) for s in train_sets)


def test_example_loss_positions():
    prompt = make_identity_prompts(["ABA"], 1, 0, VOCAB, n_shots=3)[0][0]
    pos = example_answer_positions(prompt)
    assert len(pos) == 2
    for e, p in zip((1, 2), pos):
        assert p + 1 == prompt.content_positions(e)[-1]


def test_loss_modes_agree_where_they_overlap():
    model = tiny(2)
    tokens, targets = _batch(make_identity_prompts(["ABA", "ABB"], 2, 0, VOCAB))
    with T.no_grad():
        a = batch_loss(model, tokens, targets, "answer").item()
        logits = model.logits_batch(tokens).data[:, -1]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert a == pytest.approx(-logp[np.arange(len(targets)), targets].mean(), rel=1e-12)


def test_schedule_and_clipping():
    cfg = TrainConfig(steps=1000, warmup=100, learning_rate=1e-3)
    assert lr_at(0, cfg) < lr_at(99, cfg) <= 1e-3
    assert lr_at(999, cfg) == pytest.approx(1e-4, rel=0.05)
    p = {"w": T.Tensor(np.ones(4), requires_grad=True)}
    p["w"].grad = np.full(4, 10.0)
    norm = clip_gradients(p, 1.0)
    assert norm == pytest.approx(20.0)
    assert np.linalg.norm(p["w"].grad) == pytest.approx(1.0)


def test_adamw_skips_decay_on_norm_gains():
    assert AdamW.decays("layer.0.attn.q")
    assert not AdamW.decays("layer.0.ln1")
    assert not AdamW.decays("layer.0.mlp.in_bias")
    assert not AdamW.decays("ln_final")
