import json
import zipfile

import numpy as np
import pytest

from symlab.model import (
    CheckpointError, HookSite, Intervention, ModelConfig, PairingError, Transformer, patch_from, score_answer,
)
from symlab import tensor as T
from symlab.tensor import grad_check
from symlab.train import batch_loss

TINY = dict(n_layers=2, n_heads=2, d_model=8, d_head=4, vocab_size=11, max_seq_len=8)


def tiny(pos="rotary", seed=0, std=0.3):
    return Transformer.init_random(ModelConfig(**TINY, pos_encoding=pos, seed=seed, d_mlp=12), std=std)


@pytest.mark.parametrize("pos", ["rotary", "learned_absolute"])
def test_full_model_loss_gradient(pos):
    """Every parameter of a small model passes the finite-difference check."""
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, TINY["vocab_size"], size=(2, 6))
    targets = rng.integers(0, TINY["vocab_size"], size=2)
    for seed in range(2):
        model = tiny(pos, seed)
        for name, p in model.parameters().items():
            def f(x, name=name):
                saved = model.params[name]
                model.params[name] = x
                try:
                    return batch_loss(model, tokens, targets, "full")
                finally:
                    model.params[name] = saved
            err = grad_check(f, p.data)
            assert err < 1e-4, f"{pos} seed {seed} {name}: {err:.2e}"


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(**{**TINY, "d_head": 3})
    with pytest.raises(ValueError):
        ModelConfig(**TINY, pos_encoding="sinusoidal")
    assert ModelConfig(**TINY).d_mlp == 32


def test_cache_shapes_and_consistency():
    model = tiny()
    tokens = [0, 3, 4, 5, 6]
    logits, cache = model.run(tokens, with_cache=True)
    assert logits.shape == (5, TINY["vocab_size"])
    assert cache.head_output[(1, 1)].shape == (5, 4)
    pattern = cache.attention_pattern[(0, 0)]
    np.testing.assert_allclose(pattern.sum(-1), 1.0)
    assert np.all(np.triu(pattern, 1) == 0)
    np.testing.assert_allclose(
        cache.residual_stream_post[0], cache.residual_stream_pre[0] + cache.block_output[0], atol=1e-12
    )
    np.testing.assert_allclose(cache.block_output[0], cache.attn_output[0] + cache.mlp_output[0], atol=1e-12)
    np.testing.assert_array_equal(model.forward(tokens), logits[-1])


def test_batch_matches_single():
    model = tiny()
    batch = np.array([[0, 1, 2, 3], [0, 4, 5, 6]])
    with T.no_grad():
        out = model.logits_batch(batch).data
    for i in range(2):
        np.testing.assert_allclose(out[i], model.run(batch[i])[0], atol=1e-12)


@pytest.mark.parametrize("component,head", [("head_output", 1), ("mlp_output", None), ("block_output", None)])
def test_self_patch_is_identity(component, head):
    model = tiny()
    tokens = [0, 2, 3, 4, 5, 6]
    logits, cache = model.run(tokens, with_cache=True)
    ivs = patch_from(cache, [HookSite(1, component, head, (2, 5))], len(tokens))
    np.testing.assert_array_equal(model.run(tokens, ivs)[0], logits)


def test_patch_changes_only_later_positions():
    model = tiny()
    tokens = [0, 2, 3, 4, 5, 6]
    base, _ = model.run(tokens)
    site = HookSite(0, "block_output", None, (3,))
    patched, _ = model.run(tokens, [Intervention(site, np.ones((6, 8)))])
    np.testing.assert_array_equal(patched[:3], base[:3])
    assert not np.allclose(patched[3:], base[3:])


def test_head_patch_positions_out_of_range():
    model = tiny()
    with pytest.raises(ValueError):
        model.run([0, 1, 2], [Intervention(HookSite(0, "head_output", 0, (5,)), np.zeros((3, 4)))])
    with pytest.raises(ValueError):
        HookSite(0, "head_output", None, (1,))


def test_patch_from_missing_source_position():
    model = tiny()
    _, cache = model.run([0, 1, 2], with_cache=True)
    with pytest.raises(PairingError):
        patch_from(cache, [HookSite(0, "mlp_output", None, (4,))], 6)


def test_checkpoint_round_trip_and_bytes(tmp_path):
    model = tiny("learned_absolute")
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    model.save(a)
    model.save(b)
    assert a.read_bytes() == b.read_bytes()
    loaded = Transformer.load(a)
    assert loaded.config == model.config
    np.testing.assert_array_equal(loaded.forward([0, 1, 2]), model.forward([0, 1, 2]))


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.npz"
    np.savez(bad, x=np.zeros(3))
    with pytest.raises(CheckpointError):
        Transformer.load(bad)
    with pytest.raises(FileNotFoundError):
        Transformer.load(tmp_path / "missing.npz")
    model = tiny()
    state = model.state_dict()
    state.pop("embed")
    with pytest.raises(CheckpointError):
        Transformer(model.config, state)


def test_checkpoint_metadata_is_json(tmp_path):
    model = tiny()
    path = tmp_path / "m.npz"
    model.save(path)
    with zipfile.ZipFile(path) as zf:
        assert "__meta__.npy" in zf.namelist()
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
    assert meta["config"]["n_layers"] == 2


def test_score_answer_single_and_multi_token():
    model = tiny()
    tokens = [0, 1, 2]
    logits, _ = model.run(tokens)
    assert score_answer(model, tokens, [5]) == pytest.approx(logits[-1, 5])
    full, _ = model.run(tokens + [5])
    lp = lambda row: row - np.log(np.exp(row - row.max()).sum()) - row.max()
    expected = lp(full[2])[5] + lp(full[3])[7]
    assert score_answer(model, tokens, [5, 7]) == pytest.approx(expected, abs=1e-10)


def test_zero_model_gives_uniform_logits():
    model = Transformer.zeros(ModelConfig(**TINY))
    assert np.all(model.forward([0, 1, 2]) == 0)


def test_token_validation():
    model = tiny()
    with pytest.raises(ValueError):
        model.run([0, 99])
    with pytest.raises(ValueError):
        model.run(list(range(9)))
