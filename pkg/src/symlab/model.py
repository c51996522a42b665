"""Decoder-only transformer with activation caching and patching.

Architecture: token embedding (+ learned absolute positions, or rotary
queries/keys), pre-norm residual blocks of multi-head causal attention and a
GELU MLP, RMS normalisation, final norm and unembedding.

Hook sites
----------
``head_output``   per-head attention output before the output projection
``mlp_output``    MLP sublayer output, before it is added to the residual
``block_output``  attention-sublayer output plus MLP output, i.e. everything
                  the layer adds to the residual stream

Patching a site replaces the activation at the chosen positions and lets
the forward pass continue; the residual stream coming into the layer is
left as it was.

Checkpoint keys
---------------
``embed`` (V, d), ``unembed`` (d, V), ``pos`` (max_seq_len, d; learned
absolute only), ``ln_final`` (d,), and per layer ``i``:
``layer.{i}.ln1`` (d,), ``layer.{i}.ln2`` (d,),
``layer.{i}.attn.{q|k|v}`` (d, n_heads*d_head), ``layer.{i}.attn.o``
(n_heads*d_head, d), ``layer.{i}.mlp.in`` (d, d_mlp), ``layer.{i}.mlp.in_bias``
(d_mlp,), ``layer.{i}.mlp.out`` (d_mlp, d), ``layer.{i}.mlp.out_bias`` (d,).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "symlab-checkpoint"
CHECKPOINT_VERSION = 1

COMPONENTS = ("head_output", "block_output", "mlp_output")
POS_ENCODINGS = ("learned_absolute", "rotary")


class PairingError(ValueError):
    """Source and destination prompts cannot be aligned for patching."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    max_seq_len: int
    pos_encoding: str = "rotary"
    seed: int = 0
    d_mlp: int = 0  # 0 means 4 * d_model
    norm_eps: float = 1e-6
    rotary_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError("n_heads * d_head must equal d_model")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ValueError(f"pos_encoding must be one of {POS_ENCODINGS}")
        if self.pos_encoding == "rotary" and self.d_head % 2:
            raise ValueError("rotary positions need an even d_head")
        if self.d_mlp == 0:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hd, m, V = self.d_model, self.n_heads * self.d_head, self.d_mlp, self.vocab_size
        shapes: dict[str, tuple[int, ...]] = {"embed": (V, d)}
        if self.pos_encoding == "learned_absolute":
            shapes["pos"] = (self.max_seq_len, d)
        for i in range(self.n_layers):
            shapes[f"layer.{i}.ln1"] = (d,)
            shapes[f"layer.{i}.attn.q"] = (d, hd)
            shapes[f"layer.{i}.attn.k"] = (d, hd)
            shapes[f"layer.{i}.attn.v"] = (d, hd)
            shapes[f"layer.{i}.attn.o"] = (hd, d)
            shapes[f"layer.{i}.ln2"] = (d,)
            shapes[f"layer.{i}.mlp.in"] = (d, m)
            shapes[f"layer.{i}.mlp.in_bias"] = (m,)
            shapes[f"layer.{i}.mlp.out"] = (m, d)
            shapes[f"layer.{i}.mlp.out_bias"] = (d,)
        shapes["ln_final"] = (d,)
        shapes["unembed"] = (d, V)
        return shapes


@dataclass(frozen=True)
class HookSite:
    layer: int
    component: str
    head: int | None = None
    positions: tuple[int, ...] = ()

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        if (self.component == "head_output") != (self.head is not None):
            raise ValueError("head is required for head_output and only for head_output")
        object.__setattr__(self, "positions", tuple(sorted(set(int(p) for p in self.positions))))

    def validate(self, config: ModelConfig, seq_len: int) -> None:
        if not 0 <= self.layer < config.n_layers:
            raise ValueError(f"layer {self.layer} out of range")
        if self.head is not None and not 0 <= self.head < config.n_heads:
            raise ValueError(f"head {self.head} out of range")
        if any(not 0 <= p < seq_len for p in self.positions):
            raise ValueError(f"positions {self.positions} out of range for length {seq_len}")


@dataclass(frozen=True)
class Intervention:
    """Replace the activation at ``site.positions`` by rows of ``values``.

    ``values`` is a full-length array for the site: (T, d_head) for heads,
    (T, d_model) otherwise. Only the rows listed in the site are used.
    """

    site: HookSite
    values: np.ndarray


@dataclass
class ActivationCache:
    """Activations of one forward pass; arrays are indexed by position first."""

    tokens: tuple[int, ...]
    queries: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    keys: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    values: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    attention_pattern: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    head_output: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    attn_output: dict[int, np.ndarray] = field(default_factory=dict)
    mlp_output: dict[int, np.ndarray] = field(default_factory=dict)
    block_output: dict[int, np.ndarray] = field(default_factory=dict)
    residual_stream_pre: dict[int, np.ndarray] = field(default_factory=dict)
    residual_stream_post: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def site_values(self, site: HookSite) -> np.ndarray:
        if site.component == "head_output":
            return self.head_output[(site.layer, site.head)]
        if site.component == "mlp_output":
            return self.mlp_output[site.layer]
        return self.block_output[site.layer]

    def component(self, kind: str, layer: int, head: int) -> np.ndarray:
        """Per-head ``query``/``key``/``value``/``output`` array (T, d_head)."""
        table = {
            "query": self.queries,
            "key": self.keys,
            "value": self.values,
            "output": self.head_output,
        }
        if kind not in table:
            raise ValueError(f"unknown head component {kind!r}")
        return table[kind][(layer, head)]


def _rotary_tables(T_len: int, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(T_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles), np.sin(angles)


class Transformer:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        shapes = config.param_shapes()
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise CheckpointError(f"parameter keys mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise CheckpointError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True)
        self._rope: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def init_random(cls, config: ModelConfig, std: float = 0.02) -> "Transformer":
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith(("ln1", "ln2")) or name == "ln_final":
                params[name] = np.ones(shape)
            elif name.endswith("bias"):
                params[name] = np.zeros(shape)
            else:
                s = std
                if name.endswith(("attn.o", "mlp.out")):
                    s = std / np.sqrt(2 * config.n_layers)
                params[name] = rng.normal(0.0, s, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "Transformer":
        return cls(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------------ core

    def _check_tokens(self, tokens: np.ndarray) -> None:
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ValueError("prompt must be a non-empty token sequence")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ValueError(f"prompt length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id outside the vocabulary")

    def _rope_tables(self, T_len: int) -> tuple[np.ndarray, np.ndarray]:
        if T_len not in self._rope:
            self._rope[T_len] = _rotary_tables(T_len, self.config.d_head, self.config.rotary_base)
        return self._rope[T_len]

    def _forward(
        self,
        tokens: np.ndarray,
        interventions: Sequence[Intervention] = (),
        cache: ActivationCache | None = None,
    ) -> Tensor:
        """Logits (B, T, V) for a (B, T) token batch."""
        cfg = self.config
        P = self.params
        self._check_tokens(tokens)
        B, T_len = tokens.shape
        H, dh = cfg.n_heads, cfg.d_head
        if interventions and B != 1:
            raise ValueError("interventions require a single prompt")
        by_layer: dict[int, list[Intervention]] = {}
        for iv in interventions:
            iv.site.validate(cfg, T_len)
            by_layer.setdefault(iv.site.layer, []).append(iv)

        x = T.embedding(P["embed"], tokens)
        if cfg.pos_encoding == "learned_absolute":
            x = T.add(x, T.embedding(P["pos"], np.broadcast_to(np.arange(T_len), (B, T_len))))
        else:
            cos, sin = self._rope_tables(T_len)
        inv_sqrt = 1.0 / np.sqrt(dh)

        for layer in range(cfg.n_layers):
            ivs = by_layer.get(layer, ())
            if cache is not None:
                cache.residual_stream_pre[layer] = x.data[0].copy()
            h = T.rms_norm(x, P[f"layer.{layer}.ln1"], cfg.norm_eps)

            def heads(w: str) -> Tensor:
                proj = T.matmul(h, P[f"layer.{layer}.attn.{w}"])
                return T.transpose(T.reshape(proj, (B, T_len, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            if cfg.pos_encoding == "rotary":
                q = T.rotary(q, cos, sin)
                k = T.rotary(k, cos, sin)
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            pattern = T.causal_softmax(scores)
            z = T.matmul(pattern, v)  # (B, H, T, dh)

            head_ivs = [iv for iv in ivs if iv.site.component == "head_output"]
            if head_ivs:
                zd = z.data.copy()
                for iv in head_ivs:
                    pos = list(iv.site.positions)
                    zd[0, iv.site.head, pos, :] = np.asarray(iv.values)[pos]
                z = Tensor(zd)
            if cache is not None:
                for hh in range(H):
                    cache.queries[(layer, hh)] = q.data[0, hh].copy()
                    cache.keys[(layer, hh)] = k.data[0, hh].copy()
                    cache.values[(layer, hh)] = v.data[0, hh].copy()
                    cache.attention_pattern[(layer, hh)] = pattern.data[0, hh].copy()
                    cache.head_output[(layer, hh)] = z.data[0, hh].copy()

            merged = T.reshape(T.transpose(z, (0, 2, 1, 3)), (B, T_len, H * dh))
            attn_out = T.matmul(merged, P[f"layer.{layer}.attn.o"])
            mid = T.add(x, attn_out)
            m = T.rms_norm(mid, P[f"layer.{layer}.ln2"], cfg.norm_eps)
            m = T.add_bias(T.matmul(m, P[f"layer.{layer}.mlp.in"]), P[f"layer.{layer}.mlp.in_bias"])
            m = T.gelu(m)
            m = T.add_bias(T.matmul(m, P[f"layer.{layer}.mlp.out"]), P[f"layer.{layer}.mlp.out_bias"])
            m = _replace(m, [iv for iv in ivs if iv.site.component == "mlp_output"])
            block = _replace(T.add(attn_out, m), [iv for iv in ivs if iv.site.component == "block_output"])
            x = T.add(x, block)
            if cache is not None:
                cache.attn_output[layer] = attn_out.data[0].copy()
                cache.mlp_output[layer] = m.data[0].copy()
                cache.block_output[layer] = block.data[0].copy()
                cache.residual_stream_post[layer] = x.data[0].copy()

        x = T.rms_norm(x, P["ln_final"], cfg.norm_eps)
        return T.matmul(x, P["unembed"])

    # ------------------------------------------------------------ public API

    def logits_batch(self, tokens) -> Tensor:
        """Differentiable logits (B, T, V) for a rectangular token batch."""
        return self._forward(np.asarray(tokens, dtype=np.int64))

    def run(
        self,
        tokens: Sequence[int],
        interventions: Sequence[Intervention] = (),
        with_cache: bool = False,
    ) -> tuple[np.ndarray, ActivationCache | None]:
        """Logits at every position (T, V) for one prompt, optionally cached."""
        arr = np.asarray(tokens, dtype=np.int64)[None, :]
        cache = ActivationCache(tuple(int(t) for t in arr[0])) if with_cache else None
        with T.no_grad():
            logits = self._forward(arr, interventions, cache)
        return logits.data[0], cache

    def forward(self, tokens: Sequence[int]) -> np.ndarray:
        return self.run(tokens)[0][-1]

    def forward_with_cache(self, tokens: Sequence[int]) -> tuple[np.ndarray, ActivationCache]:
        logits, cache = self.run(tokens, with_cache=True)
        return logits[-1], cache

    def forward_with_patch(
        self, tokens: Sequence[int], source: ActivationCache, patches: Iterable[HookSite]
    ) -> np.ndarray:
        return self.run(tokens, patch_from(source, patches, len(tokens)))[0][-1]

    # ------------------------------------------------------------ checkpoint

    def save(self, path: str | Path) -> None:
        meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        arrays = {k: v.data for k, v in self.params.items()}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        # np.savez stamps zip entries with the wall clock; fixed stamps keep bytes reproducible
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "Transformer":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path}: missing metadata")
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
            params = {k: data[k] for k in data.files if k != "__meta__"}
        return cls(ModelConfig(**meta["config"]), params)


def _replace(t: Tensor, ivs: list[Intervention]) -> Tensor:
    if not ivs:
        return t
    d = t.data.copy()
    for iv in ivs:
        pos = list(iv.site.positions)
        d[0, pos, :] = np.asarray(iv.values)[pos]
    return Tensor(d)


def patch_from(source: ActivationCache, sites: Iterable[HookSite], seq_len: int) -> list[Intervention]:
    """Interventions that copy ``source`` activations into a run of ``seq_len`` tokens.

    The destination may be longer than the source (an appended answer), but
    every patched position must exist in the source.
    """
    out = []
    for site in sites:
        if site.positions and max(site.positions) >= len(source):
            raise PairingError(f"position {max(site.positions)} missing from a source of length {len(source)}")
        vals = source.site_values(site)
        if len(vals) < seq_len:
            pad = np.zeros((seq_len - len(vals), vals.shape[1]))
            vals = np.concatenate([vals, pad])
        out.append(Intervention(site, vals[:seq_len] if len(vals) > seq_len else vals))
    return out


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def score_answer(
    model: Transformer,
    tokens: Sequence[int],
    answer: Sequence[int],
    interventions: Sequence[Intervention] = (),
    logits: np.ndarray | None = None,
) -> float:
    """Model score f(c)[y] for an answer continuing ``tokens``.

    A one-token answer scores as its raw logit at the final position; longer
    answers score as the teacher-forced sum of log-probabilities. ``logits``
    (all positions of ``tokens``) may be passed to skip the forward pass for
    one-token answers.
    """
    answer = [int(a) for a in answer]
    if not answer:
        raise ValueError("empty answer")
    if any(not 0 <= a < model.config.vocab_size for a in answer):
        raise ValueError("answer token outside the vocabulary")
    if len(answer) == 1:
        if logits is None:
            logits, _ = model.run(tokens, interventions)
        return float(logits[-1, answer[0]])
    full = list(tokens) + answer[:-1]
    all_logits, _ = model.run(full, _extend(interventions, len(full)))
    return answer_log_prob(all_logits, len(tokens) - 1, answer)


def answer_log_prob(all_logits: np.ndarray, start: int, answer: Sequence[int]) -> float:
    """Sum of log p(answer[i]) read from rows ``start + i`` of ``all_logits``."""
    lp = log_softmax_np(all_logits[start : start + len(answer)])
    return float(sum(lp[i, a] for i, a in enumerate(answer)))


def _extend(interventions: Sequence[Intervention], seq_len: int) -> list[Intervention]:
    out = []
    for iv in interventions:
        vals = iv.values
        if len(vals) < seq_len:
            vals = np.concatenate([vals, np.zeros((seq_len - len(vals), vals.shape[1]))])
        out.append(Intervention(iv.site, vals))
    return out
