"""Hand-wired transformers whose weights implement known mechanisms.

Symbolic oracle (three layers, head 0 of each layer does the work)
------------------------------------------------------------------
Layer 0, abstraction head: an example-final item attends to the earlier
item of its own example carrying the same token and copies that item's
within-example position, which the output projection writes as a symbol
(A for the first item, B for the second). Items also attend to themselves,
so the first two items of every example carry their own symbol.

Layer 1, induction head: second separators attend to the example-final
items of earlier examples and copy their symbol into a prediction subspace.

Layer 2, retrieval head: a position holding a predicted symbol attends to
the item of its own example bound to that symbol and copies its token
identity into an output subspace that the unembedding reads.

Positions that have nothing to do attend to BOS, whose value writes a
filler direction of the same norm. Every template position therefore gains
exactly unit norm per layer, the residual norm is known in advance, and
RMS normalisation becomes a fixed rescaling that the gains undo. Attention
logits are integers times ``saturation_scale`` with a margin of one.
Other heads have random queries/keys/values and a zero output projection;
MLPs are zero.

Literal induction oracle (two layers)
-------------------------------------
A previous-token head writes each position's predecessor token; a second
head attends to positions whose predecessor equals the current token and
copies their token, the classic [A][B] ... [A] -> [B] circuit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Transformer
from .tasks import BOS, N_RESERVED

PERIOD = 6  # tokens per in-context example: item ^ item ^ item \n
ITEM_SLOTS = {0: 0, 2: 1, 4: 2}  # slot within period -> within-example position
SECOND_SEPARATOR_SLOT = 3
ORACLE_MLP_WIDTH = 4  # MLPs are all-zero; keep them cheap

ABSTRACTION_HEAD = (0, 0)
INDUCTION_HEAD = (1, 0)
RETRIEVAL_HEAD = (2, 0)
CRITICAL_HEADS = (ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD)


class OracleDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class OracleSpec:
    alphabet_size: int = 64  # full vocabulary size, reserved tokens included
    n_incontext: int = 2
    saturation_scale: float = 50.0
    n_heads: int = 4
    logit_scale: float = 10.0
    max_seq_len: int = 128
    seed: int = 0
    d_head: int | None = None

    def __post_init__(self):
        if self.alphabet_size <= N_RESERVED:
            raise ValueError("alphabet_size must exceed the reserved tokens")
        if self.n_heads < 1 or self.n_incontext < 1:
            raise ValueError("n_heads and n_incontext must be positive")
        if self.saturation_scale < 20:
            raise ValueError("saturation_scale below 20 leaves non-negligible attention leakage")
        if self.max_seq_len < 1 + PERIOD * self.n_incontext + 4:
            raise ValueError("max_seq_len too short for the prompt template")


class _Layout:
    """Named disjoint blocks of residual dimensions."""

    def __init__(self):
        self.size = 0
        self.blocks: dict[str, slice] = {}

    def add(self, name: str, n: int) -> slice:
        self.blocks[name] = slice(self.size, self.size + n)
        self.size += n
        return self.blocks[name]

    def __getitem__(self, name: str) -> slice:
        return self.blocks[name]

    def idx(self, name: str, k: int = 0) -> int:
        return self.blocks[name].start + k


def symbolic_layout(spec: OracleSpec) -> _Layout:
    V = spec.alphabet_size
    n_ex = math.ceil((spec.max_seq_len - 1) / PERIOD)
    lay = _Layout()
    lay.add("tok", V)
    lay.add("const", 1)
    lay.add("wpos", 3)
    lay.add("example", n_ex)
    lay.add("second_sep", 1)
    lay.add("fill", 1)
    lay.add("sym", 2)
    lay.add("pred", 2)
    lay.add("out", V)
    lay.add("sink", 3)
    return lay


def _slot(p: int) -> tuple[int, int]:
    """(example index, slot within period) of a non-BOS position."""
    return (p - 1) // PERIOD, (p - 1) % PERIOD


def _head_dims(config: ModelConfig, head: int) -> slice:
    return slice(head * config.d_head, (head + 1) * config.d_head)


def _random_dummy_heads(params: dict, config: ModelConfig, layer: int, rng: np.random.Generator) -> None:
    d = config.d_model
    for h in range(1, config.n_heads):
        cols = _head_dims(config, h)
        for w in ("q", "k", "v"):
            params[f"layer.{layer}.attn.{w}"][:, cols] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, config.d_head))


def build_oracle(spec: OracleSpec = OracleSpec()) -> Transformer:
    """The three-stage symbolic oracle as an ordinary checkpointable model."""
    lay = symbolic_layout(spec)
    V = spec.alphabet_size
    n_ex = lay["example"].stop - lay["example"].start
    need_head = V + n_ex + 2
    d_head = spec.d_head or max(need_head, math.ceil(lay.size / spec.n_heads))
    if d_head < need_head or d_head * spec.n_heads < lay.size:
        raise OracleDimensionError(
            f"d_head={d_head} with {spec.n_heads} heads cannot hold {lay.size} residual "
            f"dimensions and {need_head} head dimensions"
        )
    d_head += d_head % 2
    config = ModelConfig(
        n_layers=3, n_heads=spec.n_heads, d_model=spec.n_heads * d_head, d_head=d_head,
        vocab_size=V, max_seq_len=spec.max_seq_len, pos_encoding="learned_absolute",
        seed=spec.seed, d_mlp=ORACLE_MLP_WIDTH, norm_eps=0.0,
    )
    d = config.d_model
    params = {k: np.zeros(s) for k, s in config.param_shapes().items()}
    rng = np.random.default_rng(spec.seed)
    content = range(N_RESERVED, V)
    tok = lambda t: lay.idx("tok", t)  # noqa: E731
    bos = tok(BOS)
    const = lay.idx("const")

    # embeddings: every template position has squared norm 4
    params["embed"][np.arange(V), lay["tok"].start + np.arange(V)] = 1.0
    pos = params["pos"]
    for p in range(spec.max_seq_len):
        pos[p, const] = 1.0
        if p == 0:
            pos[p, lay.idx("fill")] = math.sqrt(2.0)
            continue
        ex, slot = _slot(p)
        pos[p, lay.idx("example", ex)] = 1.0
        if slot in ITEM_SLOTS:
            pos[p, lay.idx("wpos", ITEM_SLOTS[slot])] = 1.0
        elif slot == SECOND_SEPARATOR_SLOT:
            pos[p, lay.idx("second_sep")] = 1.0
        else:
            pos[p, lay.idx("fill")] = 1.0

    S = spec.saturation_scale * math.sqrt(d_head)
    for layer in range(3):
        # residual norm before this layer is sqrt(4 + layer) on template positions
        params[f"layer.{layer}.ln1"][:] = math.sqrt(4.0 + layer) / math.sqrt(d)
        params[f"layer.{layer}.ln2"][:] = 1.0
        _random_dummy_heads(params, config, layer, rng)
    params["ln_final"][:] = math.sqrt(7.0) / math.sqrt(d)

    # layer 0: abstraction head
    Wq, Wk = params["layer.0.attn.q"], params["layer.0.attn.k"]
    Wv, Wo = params["layer.0.attn.v"], params["layer.0.attn.o"]
    f_ex, f_w2, f_bos = V, V + n_ex, V + n_ex + 1
    for t in content:
        Wq[tok(t), t] = S
        Wk[tok(t), t] = 2.0
    for e in range(n_ex):
        Wq[lay.idx("example", e), f_ex + e] = S
        Wk[lay.idx("example", e), f_ex + e] = 2.0
    Wq[const, f_w2] = S
    Wk[lay.idx("wpos", 2), f_w2] = -4.0
    Wq[const, f_bos] = S
    Wk[bos, f_bos] = 3.0
    Wv[lay.idx("wpos", 0), 0] = 1.0
    Wv[lay.idx("wpos", 1), 1] = 1.0
    Wv[bos, 2] = 1.0
    Wo[0, lay.idx("sym", 0)] = 1.0
    Wo[1, lay.idx("sym", 1)] = 1.0
    Wo[2, lay.idx("sink", 0)] = 1.0

    # layer 1: symbolic induction head
    Wq, Wk = params["layer.1.attn.q"], params["layer.1.attn.k"]
    Wv, Wo = params["layer.1.attn.v"], params["layer.1.attn.o"]
    Wq[lay.idx("second_sep"), 0] = S
    Wk[lay.idx("wpos", 2), 0] = 2.0
    Wq[const, 1] = S
    Wk[bos, 1] = 1.0
    Wv[lay.idx("sym", 0), 0] = 1.0
    Wv[lay.idx("sym", 1), 1] = 1.0
    Wv[bos, 2] = 1.0
    Wo[0, lay.idx("pred", 0)] = 1.0
    Wo[1, lay.idx("pred", 1)] = 1.0
    Wo[2, lay.idx("sink", 1)] = 1.0

    # layer 2: retrieval head
    Wq, Wk = params["layer.2.attn.q"], params["layer.2.attn.k"]
    Wv, Wo = params["layer.2.attn.v"], params["layer.2.attn.o"]
    for s in range(2):
        Wq[lay.idx("pred", s), s] = S
        Wk[lay.idx("sym", s), s] = 2.0
    for e in range(n_ex):
        Wq[lay.idx("example", e), 2 + e] = S
        Wk[lay.idx("example", e), 2 + e] = 2.0
    Wq[const, 2 + n_ex] = S
    Wk[bos, 2 + n_ex] = 3.0
    for t in content:
        Wv[tok(t), t] = 1.0
        Wo[t, lay.idx("out", t)] = 1.0
    Wv[bos, BOS] = 1.0
    Wo[BOS, lay.idx("sink", 2)] = 1.0

    for t in content:
        params["unembed"][lay.idx("out", t), t] = spec.logit_scale
    return Transformer(config, params)


def symbol_subspace(spec: OracleSpec = OracleSpec()) -> slice:
    """Residual dimensions holding the bound symbols (A, B)."""
    return symbolic_layout(spec)["sym"]


def build_literal_induction_oracle(spec: OracleSpec = OracleSpec()) -> Transformer:
    """Previous-token head (0, 0) feeding a literal induction head (1, 0)."""
    V, T_max = spec.alphabet_size, spec.max_seq_len
    lay = _Layout()
    lay.add("tok", V)
    lay.add("pos", T_max)
    lay.add("const", 1)
    lay.add("prev", V)
    lay.add("out", V)
    lay.add("sink", 1)
    n_heads = max(spec.n_heads, 1)
    need_head = max(T_max + 1, V + 1)
    d_head = spec.d_head or max(need_head, math.ceil(lay.size / n_heads))
    if d_head < need_head or d_head * n_heads < lay.size:
        raise OracleDimensionError(f"d_head={d_head} too small for the literal induction oracle")
    d_head += d_head % 2
    config = ModelConfig(
        n_layers=2, n_heads=n_heads, d_model=n_heads * d_head, d_head=d_head, vocab_size=V,
        max_seq_len=T_max, pos_encoding="learned_absolute", seed=spec.seed,
        d_mlp=ORACLE_MLP_WIDTH, norm_eps=0.0,
    )
    d = config.d_model
    params = {k: np.zeros(s) for k, s in config.param_shapes().items()}
    rng = np.random.default_rng(spec.seed)
    params["embed"][np.arange(V), lay["tok"].start + np.arange(V)] = 1.0
    for p in range(T_max):
        params["pos"][p, lay.idx("pos", p)] = 1.0
        params["pos"][p, lay.idx("const")] = 1.0
    S = spec.saturation_scale * math.sqrt(d_head)
    for layer in range(2):
        params[f"layer.{layer}.ln1"][:] = math.sqrt(3.0 + layer) / math.sqrt(d)
        params[f"layer.{layer}.ln2"][:] = 1.0
        _random_dummy_heads(params, config, layer, rng)
    params["ln_final"][:] = math.sqrt(5.0) / math.sqrt(d)

    Wq, Wk = params["layer.0.attn.q"], params["layer.0.attn.k"]
    Wv, Wo = params["layer.0.attn.v"], params["layer.0.attn.o"]
    for p in range(T_max):
        Wq[lay.idx("pos", p), p] = S
        if p + 1 < T_max:
            Wk[lay.idx("pos", p), p + 1] = 1.0
    for t in range(V):
        Wv[lay.idx("tok", t), t] = 1.0
        Wo[t, lay.idx("prev", t)] = 1.0

    Wq, Wk = params["layer.1.attn.q"], params["layer.1.attn.k"]
    Wv, Wo = params["layer.1.attn.v"], params["layer.1.attn.o"]
    for t in range(N_RESERVED, V):
        Wq[lay.idx("tok", t), t] = S
        Wk[lay.idx("prev", t), t] = 2.0
        Wv[lay.idx("tok", t), t] = 1.0
        Wo[t, lay.idx("out", t)] = 1.0
        params["unembed"][lay.idx("out", t), t] = spec.logit_scale
    Wq[lay.idx("const"), BOS] = S
    Wk[lay.idx("tok", BOS), BOS] = 1.0
    Wv[lay.idx("tok", BOS), BOS] = 1.0
    Wo[BOS, lay.idx("sink")] = 1.0
    return Transformer(config, params)
