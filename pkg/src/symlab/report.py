"""Command-line orchestration, run manifests and SVG heatmaps.

Every subcommand writes into ``<out>/<timestamp>-<name>/`` and finishes by
writing ``manifest.json``, which lists the resolved configuration and a
sha256 for every output file. ``symlab replay <manifest>`` reruns the
command and checks that all outputs hash identically.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import html
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import causal_aux as ca
from . import cma
from . import representation as rep
from .model import ModelConfig, Transformer
from .oracle import OracleSpec, build_literal_induction_oracle, build_oracle
from .tasks import (
    HEAD_TYPES, TaskConfig, Vocab, length4_contexts, load_wordsets, make_identity_pairs, make_identity_prompts,
    make_letter_string_prompt, make_verbal_prompt, rsa_contexts, sample_token_sets, verbal_vocab,
)
from .train import TrainConfig, evaluate_accuracy, heldout_examples, train

TOOL_VERSION = "0.1.0"
MANIFEST = "manifest.json"
TARGETS = {"abstraction": "abstraction", "induction": "symbolic_induction", "retrieval": "retrieval"}


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


# ------------------------------------------------------------------- config

# key -> (type, default, help). Shared by every subcommand that declares the key.
SCHEMA: dict[str, tuple[type, object, str]] = {
    "name": (str, None, "run name; defaults to the subcommand"),
    "out": (str, "runs", "parent directory for run folders"),
    "seed": (int, 0, "master seed; SYMLAB_SEED overrides the config file"),
    "model": (str, "oracle", "oracle, literal-oracle, or a checkpoint path"),
    "shots": (int, 2, "in-context examples per prompt"),
    "pairs": (int, 200, "context pairs per rule direction"),
    "perms": (int, 5000, "permutations for the family-wise threshold"),
    "alpha": (float, 0.05, "family-wise error rate"),
    "target": (str, "abstraction", "analysis target"),
    "n": (int, 2000, "number of prompts"),
    "task": (str, "identity", "identity, letter or verbal"),
    "kind": (str, "symbolic", "oracle kind: symbolic or literal"),
    "steps": (int, 20000, "training steps"),
    "batch_size": (int, 32, "training batch size"),
    "lr": (float, 3e-3, "peak learning rate"),
    "warmup": (int, 200, "linear warmup steps"),
    "weight_decay": (float, 0.01, "decoupled weight decay"),
    "target_accuracy": (float, 0.95, "early-stop held-out accuracy"),
    "eval_every": (int, 250, "steps between held-out evaluations"),
    "n_layers": (int, 4, "layers of a freshly trained model"),
    "n_heads": (int, 4, "heads per layer"),
    "d_model": (int, 64, "residual width"),
    "vocab_size": (int, 64, "vocabulary size, reserved tokens included"),
    "pos_encoding": (str, "rotary", "rotary or learned_absolute"),
    "token_sets": (int, 40, "token sets averaged in RSA"),
    "prompts": (int, 50, "prompts per rule for ablation and function vectors"),
    "random_runs": (int, 10, "random-ablation repetitions"),
    "ablation": (str, "zero", "zero or mean ablation"),
    "results": (str, "", "directory holding CSV results"),
    "a": (str, "abstraction", "first score matrix for correlate"),
    "b": (str, "fv_third_item", "second score matrix for correlate"),
    "manifest": (str, "", "manifest to replay"),
}

COMMON = ("name", "out", "seed")
MODEL_KEYS = ("model", "shots")
CMA_KEYS = ("pairs", "perms", "alpha")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def coerce(key: str, value) -> object:
    typ = SCHEMA[key][0]
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from exc


def resolve_config(keys: Sequence[str], cli: dict, file_values: dict[str, str], env: dict[str, str]) -> dict:
    """defaults < config file < SYMLAB_SEED < explicit flags."""
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise ConfigError(f"unknown config keys for this subcommand: {', '.join(unknown)}")
    cfg = {k: SCHEMA[k][1] for k in keys}
    for k, v in file_values.items():
        cfg[k] = coerce(k, v)
    if "seed" in keys and env.get("SYMLAB_SEED") not in (None, ""):
        cfg["seed"] = coerce("seed", env["SYMLAB_SEED"])
    for k, v in cli.items():
        if k in keys and v is not None:
            cfg[k] = coerce(k, v)
    return cfg


# ---------------------------------------------------------------- manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def make_run_dir(out: str, name: str, stamp: str | None = None) -> Path:
    stamp = stamp or _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(out) / f"{stamp}-{name}"
    path, k = base, 1
    while path.exists():
        k += 1
        path = base.with_name(f"{base.name}-{k}")
    path.mkdir(parents=True)
    return path


def output_hashes(run_dir: Path) -> dict[str, str]:
    return {
        p.relative_to(run_dir).as_posix(): sha256_file(p)
        for p in sorted(run_dir.rglob("*")) if p.is_file() and p.name != MANIFEST
    }


def write_manifest(run_dir: Path, command: str, cfg: dict, checkpoint: dict | None, started: float) -> Path:
    manifest = {
        "tool_version": TOOL_VERSION,
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "checkpoint": checkpoint,
        "outputs": output_hashes(run_dir),
        "wall_clock": {  # excluded from replay comparison
            "finished_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "elapsed_s": round(time.time() - started, 3),
        },
    }
    return write_json(run_dir / MANIFEST, manifest)


def verify_manifest(path: str | Path) -> list[str]:
    """Files whose current hash differs from the manifest, or that are missing."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    bad = []
    for rel, digest in manifest["outputs"].items():
        f = path.parent / rel
        if not f.exists() or sha256_file(f) != digest:
            bad.append(rel)
    return bad


# ------------------------------------------------------------------- SVG

COLORMAP_LOW = (247, 251, 255)
COLORMAP_HIGH = (8, 48, 107)


def colormap(t: float) -> str:
    """Linear sRGB ramp from near-white (t=0) to dark blue (t=1); monotone in luminance."""
    t = min(max(t, 0.0), 1.0)
    rgb = [round(lo + (hi - lo) * t) for lo, hi in zip(COLORMAP_LOW, COLORMAP_HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap(
    matrix, out: str | Path, row_labels: Sequence | None = None, col_labels: Sequence | None = None,
    mask=None, title: str = "", vmin: float | None = None, vmax: float | None = None, cell: int = 28,
) -> Path:
    """Deterministic SVG heatmap; cells where ``mask`` is false are left blank."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap matrix must be finite")
    R, C = m.shape
    mask = np.ones_like(m, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    if mask.shape != m.shape:
        raise ValueError("mask shape differs from matrix")
    rows = [str(x) for x in (row_labels if row_labels is not None else range(R))]
    cols = [str(x) for x in (col_labels if col_labels is not None else range(C))]
    shown = m[mask]
    lo = float(vmin if vmin is not None else (shown.min() if shown.size else 0.0))
    hi = float(vmax if vmax is not None else (shown.max() if shown.size else 1.0))
    left = 12 + 7 * max((len(r) for r in rows), default=1)
    top = 30 + 7 * max((len(c) for c in cols), default=1)
    width, height = left + C * cell + 80, top + R * cell + 10
    out_lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<text x="4" y="14">{html.escape(title)}</text>',
    ]
    for j, c in enumerate(cols):
        x = left + j * cell + cell // 2
        out_lines.append(f'<text x="{x}" y="{top - 4}" transform="rotate(-90 {x} {top - 4})">{html.escape(c)}</text>')
    for i, r in enumerate(rows):
        y = top + i * cell
        out_lines.append(f'<text x="4" y="{y + cell // 2 + 4}">{html.escape(r)}</text>')
        for j in range(C):
            x = left + j * cell
            if not mask[i, j]:
                out_lines.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="none" stroke="#dddddd"/>')
                continue
            t = 0.5 if hi == lo else (m[i, j] - lo) / (hi - lo)
            out_lines.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{colormap(t)}">'
                f"<title>{html.escape(f'{r},{cols[j]}: {m[i, j]:.6g}')}</title></rect>"
            )
    lx = left + C * cell + 12
    for k in range(11):
        out_lines.append(f'<rect x="{lx}" y="{top + (10 - k) * 8}" width="12" height="8" fill="{colormap(k / 10)}"/>')
    out_lines.append(f'<text x="{lx + 16}" y="{top + 8}">{hi:.3g}</text>')
    out_lines.append(f'<text x="{lx + 16}" y="{top + 88}">{lo:.3g}</text>')
    out_lines.append("</svg>")
    path = Path(out)
    path.write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    return path


def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, list[str], list[str]]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    values = np.array([[float(x) for x in r[1:]] for r in body])
    return values, [r[0] for r in body], header[1:]


# ----------------------------------------------------------------- context


def load_model(spec: str) -> tuple[Transformer, dict]:
    if spec == "oracle":
        return build_oracle(OracleSpec()), {"kind": "oracle", "spec": asdict(OracleSpec())}
    if spec == "literal-oracle":
        return build_literal_induction_oracle(OracleSpec()), {"kind": "literal-oracle", "spec": asdict(OracleSpec())}
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {spec} (train one with `symlab train` or use model = oracle)")
    return Transformer.load(path), {"kind": "checkpoint", "path": str(path), "sha256": sha256_file(path)}


class Analysis:
    """Model plus shared, lazily computed head scans for one run."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.model, self.checkpoint = load_model(cfg["model"])
        self.vocab = Vocab.for_size(self.model.config.vocab_size)
        self.seed = cfg["seed"]
        self._scans: dict[str, cma.HeadScoreMatrix] = {}
        self._pair_tokens: set[tuple[int, ...]] = set()

    def pairs(self, target: str) -> list:
        raw = make_identity_pairs(target, self.cfg["pairs"], self.seed + HEAD_TYPES.index(target), self.vocab, self.cfg["shots"])
        kept = cma.filter_correct_pairs(self.model, raw)
        if not kept:
            raise UsageError(f"no {target} pairs answered correctly by the model; nothing to analyse")
        for p in kept:
            self._pair_tokens.update({p.c1.tokens, p.c2.tokens})
        return kept

    def scan(self, target: str) -> cma.HeadScoreMatrix:
        if target not in self._scans:
            m = cma.scan_heads(self.model, self.pairs(target), target)
            self._scans[target] = m.with_permutation_test(self.cfg["perms"], self.cfg["alpha"], self.seed)
        return self._scans[target]

    def weights(self, target: str) -> dict:
        scan = self.scan(target)
        try:
            return rep.head_weights(scan, only_significant=True)
        except ValueError:
            return rep.head_weights(scan, only_significant=False)

    def eval_prompts(self, n_per_rule: int, offset: int) -> list:
        """Prompts disjoint from every CMA prompt seen so far."""
        out = [
            ex for ex in make_identity_prompts(["ABA", "ABB"], n_per_rule, self.seed + offset, self.vocab, self.cfg["shots"])
            if ex[0].tokens not in self._pair_tokens
        ]
        return out


def _save_matrix(run_dir: Path, stem: str, matrix, title: str, mask=None, rows=None, cols=None, row_name="layer",
                 col_name="head") -> list[Path]:
    csv_path = run_dir / f"{stem}.csv"
    cma.write_matrix_csv(csv_path, np.asarray(matrix), row_name, col_name, cols, rows)
    svg = render_heatmap(matrix, run_dir / f"{stem}.svg", rows, cols, mask, title)
    return [csv_path, svg]


# ---------------------------------------------------------------- commands


def cmd_oracle_build(cfg: dict, run_dir: Path) -> dict | None:
    if cfg["kind"] not in ("symbolic", "literal"):
        raise ConfigError("kind must be symbolic or literal")
    model = build_oracle(OracleSpec()) if cfg["kind"] == "symbolic" else build_literal_induction_oracle(OracleSpec())
    model.save(run_dir / "model.npz")
    write_json(run_dir / "oracle.json", {"kind": cfg["kind"], "spec": asdict(OracleSpec()), "config": asdict(model.config)})
    return None


def cmd_train(cfg: dict, run_dir: Path) -> dict | None:
    mcfg = ModelConfig(
        n_layers=cfg["n_layers"], n_heads=cfg["n_heads"], d_model=cfg["d_model"], d_head=cfg["d_model"] // cfg["n_heads"],
        vocab_size=cfg["vocab_size"], max_seq_len=64, pos_encoding=cfg["pos_encoding"], seed=cfg["seed"],
    )
    tcfg = TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"], warmup=cfg["warmup"],
        weight_decay=cfg["weight_decay"], eval_every=cfg["eval_every"], seed=cfg["seed"],
        target_accuracy=cfg["target_accuracy"], n_shots=cfg["shots"],
    )
    model = Transformer.init_random(mcfg)
    result = train(model, tcfg)
    model.save(run_dir / "model.npz")
    result.write_log(run_dir / "train_log.csv")
    held = heldout_examples(Vocab.for_size(mcfg.vocab_size), 1000, cfg["seed"] + 1, n_shots=cfg["shots"])
    acc = evaluate_accuracy(model, held)
    write_json(run_dir / "train_summary.json", {
        "steps_run": result.steps_run, "final_loss": result.final_loss, "reached_target": result.reached_target,
        "heldout_accuracy": acc.accuracy, "heldout_ci": [acc.ci_low, acc.ci_high], "heldout_n": acc.n,
        "model_config": asdict(mcfg), "train_config": asdict(tcfg),
    })
    return None


def cmd_eval(cfg: dict, run_dir: Path) -> dict | None:
    model, ckpt = load_model(cfg["model"])
    rng_seed = cfg["seed"]
    task = cfg["task"]
    if task == "identity":
        vocab = Vocab.for_size(model.config.vocab_size)
        examples = make_identity_prompts(["ABA", "ABB"], cfg["n"] // 2, rng_seed, vocab, cfg["shots"])
        report = evaluate_accuracy(model, examples)
    elif task == "letter":
        vocab = Vocab.build(letters=True)
        _check_vocab(model, vocab)
        examples = []
        for i in range(cfg["n"]):
            rule = ("successor", "predecessor")[i % 2]
            p, a = make_letter_string_prompt(TaskConfig(rule, cfg["shots"], rng_seed * 100003 + i, vocab))
            examples.append((p, a, rule))
        report = evaluate_accuracy(model, examples)
    elif task == "verbal":
        wordsets = load_wordsets()
        vocab = verbal_vocab(wordsets)
        _check_vocab(model, vocab)
        examples = []
        for i in range(cfg["n"]):
            rule = ("synonym", "antonym")[i % 2]
            p, a, foil = make_verbal_prompt(TaskConfig(rule, cfg["shots"], rng_seed * 100003 + i, vocab), wordsets)
            examples.append((p, a, rule, foil))
        report = evaluate_accuracy(model, examples, scoring="logit_comparison")
    else:
        raise ConfigError("task must be identity, letter or verbal")
    write_json(run_dir / "accuracy.json", {"task": task, **asdict(report)})
    return ckpt


def _check_vocab(model: Transformer, vocab: Vocab) -> None:
    if len(vocab) != model.config.vocab_size:
        raise UsageError(f"model vocabulary {model.config.vocab_size} does not match the task vocabulary {len(vocab)}")


def cmd_cma(cfg: dict, run_dir: Path) -> dict | None:
    an = Analysis(cfg)
    target = cfg["target"]
    if target in TARGETS:
        scan = an.scan(TARGETS[target])
        scan.save(run_dir, f"cma_{target}")
        render_heatmap(scan.scores, run_dir / f"cma_{target}.svg", mask=scan.significance_mask,
                       title=f"{target} CM scores (significant only)")
    elif target in ("layer-position", "mlp"):
        component = "block_output" if target == "layer-position" else "mlp_output"
        # layer-position scans patch every position, so only the pool's condition matters
        for condition, head_type in (("abstract", "symbolic_induction"), ("token", "retrieval")):
            pairs = an.pairs(head_type)
            lp = cma.scan_layer_position(an.model, pairs, component)
            stem = f"{target}_{condition}"
            lp.save(run_dir, stem)
            render_heatmap(lp.scores, run_dir / f"{stem}.svg", col_labels=lp.positions, title=f"{component} {condition}")
    else:
        raise ConfigError("target must be abstraction, induction, retrieval, layer-position or mlp")
    return an.checkpoint


def _attention(an: Analysis, run_dir: Path) -> dict:
    out = {}
    for head_type in HEAD_TYPES:
        weights = an.weights(head_type)
        for rule in ("ABA", "ABB"):
            prompts = [p for p, _, _ in make_identity_prompts([rule], 50, an.seed + 11, an.vocab, an.cfg["shots"])]
            amap = rep.aggregate_attention(an.model, prompts, weights)
            stem = f"attn_{head_type}_{rule}"
            amap.to_csv(run_dir / f"{stem}.csv")
            render_heatmap(amap.matrix, run_dir / f"{stem}.svg", amap.labels, amap.labels,
                           np.tril(np.ones_like(amap.matrix, dtype=bool)), f"{head_type} attention, {rule}")
            out[f"{head_type}/{rule}"] = {
                "prediction_score": rep.attention_prediction_score(amap, prompts[0], rule, head_type),
                "heads": [list(h) for h in amap.heads], "weights": list(amap.weights),
            }
    write_json(run_dir / "attention_scores.json", out)
    return out


def cmd_attn(cfg: dict, run_dir: Path) -> dict | None:
    an = Analysis(cfg)
    _attention(an, run_dir)
    return an.checkpoint


def _rsa(an: Analysis, run_dir: Path) -> dict:
    rng = np.random.default_rng(an.seed + 23)
    pool = an.vocab.generic_ids
    shots = an.cfg["shots"]
    groups2 = [rsa_contexts(sample_token_sets(rng, pool, shots + 1, 2), an.vocab) for _ in range(an.cfg["token_sets"])]
    groups4 = [length4_contexts(sample_token_sets(rng, pool, shots + 1, 3), an.vocab) for _ in range(an.cfg["token_sets"])]
    out: dict = {}
    for head_type in HEAD_TYPES:
        weights = an.weights(head_type)
        for component in rep.COMPONENTS:
            uses_len4 = head_type == "symbolic_induction" and component in ("key", "query")
            groups = groups4 if uses_len4 else groups2

            def positions(p, ht=head_type, c=component):
                return rep.rsa_positions(p, ht, c)

            emp = rep.empirical_similarity(an.model, groups, weights, component, positions)
            items = rep.layout_items(groups[0], positions)
            stem = f"rsa_{head_type}_{component}"
            emp.to_csv(run_dir / f"{stem}.csv")
            render_heatmap(emp.values, run_dir / f"{stem}.svg", emp.labels, emp.labels, title=f"{head_type} {component}")
            kinds = ("within_instance_position", "previous_abstract") if uses_len4 else ("abstract", "token")
            res = {}
            for kind in kinds:
                hyp = rep.build_hypothesis_matrix(kind, items)
                try:
                    res[kind] = rep.rsa_correlation(emp, hyp).value
                except ValueError as exc:
                    res[kind] = None
                    res[f"{kind}_note"] = str(exc)
            out[f"{head_type}/{component}"] = res
    for kind in ("abstract", "token"):
        items = rep.layout_items(groups2[0], lambda p: rep.rsa_positions(p, "retrieval", "output"))
        hyp = rep.build_hypothesis_matrix(kind, items)
        hyp.to_csv(run_dir / f"hypothesis_{kind}.csv")
        render_heatmap(hyp.values, run_dir / f"hypothesis_{kind}.svg", hyp.labels, hyp.labels, title=f"{kind} hypothesis")
    write_json(run_dir / "rsa.json", out)
    return out


def cmd_rsa(cfg: dict, run_dir: Path) -> dict | None:
    an = Analysis(cfg)
    _rsa(an, run_dir)
    return an.checkpoint


def combined_ranking(an: Analysis) -> np.ndarray:
    """Elementwise max of the three head-type score matrices."""
    return np.max([an.scan(t).scores for t in HEAD_TYPES], axis=0)


def _ablate(an: Analysis, run_dir: Path) -> dict:
    ranking = combined_ranking(an)
    examples = an.eval_prompts(an.cfg["prompts"], 31)
    out = {}
    for condition in ca.ABLATION_CONDITIONS:
        report = ca.cumulative_ablation(an.model, examples, ranking, condition, n_random_runs=an.cfg["random_runs"],
                                        seed=an.seed, mode=an.cfg["ablation"])
        report.to_csv(run_dir / f"ablation_{condition}.csv")
        out[condition] = {"curve": report.curve.tolist(), "std": report.std.tolist(),
                          "order": [list(h) for h in report.head_sets[0]] if condition != "random" else None}
    out["chance"] = 1.0 / an.model.config.vocab_size
    out["n_prompts"] = len(examples)
    _save_matrix(run_dir, "ablation_ranking", ranking, "combined head ranking")
    write_json(run_dir / "ablation.json", out)
    return out


def cmd_ablate(cfg: dict, run_dir: Path) -> dict | None:
    an = Analysis(cfg)
    _ablate(an, run_dir)
    return an.checkpoint


def _prefix(model: Transformer, run_dir: Path) -> np.ndarray:
    pool = Vocab.for_size(model.config.vocab_size).generic_ids
    n_unique = min(50, len(pool), (model.config.max_seq_len - 1) // 2)
    scores = ca.prefix_matching_score(model, pool, n_unique)
    _save_matrix(run_dir, "prefix_matching", scores, f"prefix matching ({n_unique} tokens x2)")
    write_json(run_dir / "prefix_matching.json", {"n_unique": n_unique, "uniform_baseline": ca.uniform_prefix_baseline(n_unique)})
    return scores


def cmd_prefix_match(cfg: dict, run_dir: Path) -> dict | None:
    model, ckpt = load_model(cfg["model"])
    _prefix(model, run_dir)
    return ckpt


def _fv(an: Analysis, run_dir: Path) -> dict[str, np.ndarray]:
    examples = an.eval_prompts(an.cfg["prompts"], 41)
    out = {}
    for mode in ca.FV_POSITION_MODES:
        report = ca.function_vector_aie(an.model, examples, mode, seed=an.seed)
        _save_matrix(run_dir, f"fv_{mode}", report.aie, f"function-vector AIE ({mode})")
        out[mode] = report.aie
    return out


def cmd_fv(cfg: dict, run_dir: Path) -> dict | None:
    an = Analysis(cfg)
    _fv(an, run_dir)
    return an.checkpoint


def _probe(an: Analysis, run_dir: Path) -> dict:
    scan = an.scan("abstraction")
    head = tuple(int(x) for x in np.unravel_index(np.argmax(scan.scores), scan.shape))
    out = {"head": list(head)}
    for label, shuffle in (("probe", False), ("shuffled_control", True)):
        splits = rep.probe_splits(an.model, head, an.vocab, seed=an.seed, n_shots=an.cfg["shots"], shuffle_labels=shuffle)
        out[label] = asdict(rep.linear_probe(*splits))
    write_json(run_dir / "probe.json", out)
    return out


def cmd_probe(cfg: dict, run_dir: Path) -> dict | None:
    an = Analysis(cfg)
    _probe(an, run_dir)
    return an.checkpoint


def _matrix_by_name(an: Analysis, name: str, cache: dict) -> np.ndarray:
    if name in cache:
        return cache[name]
    if name in TARGETS:
        m = an.scan(TARGETS[name]).scores
    elif name == "prefix":
        pool = an.vocab.generic_ids
        m = ca.prefix_matching_score(an.model, pool, min(50, len(pool), (an.model.config.max_seq_len - 1) // 2))
    elif name in ("fv_final_position", "fv_third_item"):
        m = ca.function_vector_aie(an.model, an.eval_prompts(an.cfg["prompts"], 41), name[3:], seed=an.seed).aie
    else:
        raise ConfigError(f"unknown score matrix {name!r}")
    cache[name] = m
    return m


CORRELATIONS = (
    ("induction", "fv_final_position"),
    ("abstraction", "fv_third_item"),
    ("induction", "prefix"),
    ("retrieval", "prefix"),
)


def _correlate(an: Analysis, run_dir: Path, pairs: Sequence[tuple[str, str]], cache: dict) -> dict:
    out = {}
    for a, b in pairs:
        try:
            stat = ca.score_correlation(_matrix_by_name(an, a, cache), _matrix_by_name(an, b, cache), seed=an.seed)
            out[f"{a}~{b}"] = {"r": stat.value, "p": stat.p_value, "n": stat.n}
        except ValueError as exc:
            out[f"{a}~{b}"] = {"r": None, "p": None, "note": str(exc)}
    write_json(run_dir / "correlations.json", out)
    return out


def cmd_correlate(cfg: dict, run_dir: Path) -> dict | None:
    an = Analysis(cfg)
    _correlate(an, run_dir, [(cfg["a"], cfg["b"])], {})
    return an.checkpoint


def bundle_report(results: Path, run_dir: Path) -> Path:
    """SVG heatmaps for every layer x head CSV under ``results`` plus an index page."""
    csvs = sorted(p for p in results.rglob("*.csv") if run_dir not in p.parents)
    if not csvs:
        raise UsageError(f"no CSV results under {results}; run an analysis (e.g. `symlab cma`) first")
    entries = []
    for path in csvs:
        try:
            values, rows, cols = read_matrix_csv(path)
        except (ValueError, IndexError):
            continue
        if values.size == 0 or not np.all(np.isfinite(values)):
            continue
        rel = path.relative_to(results)
        stem = "__".join(rel.with_suffix("").parts)
        render_heatmap(values, run_dir / f"{stem}.svg", rows, cols, title=rel.as_posix())
        entries.append((rel.as_posix(), f"{stem}.svg"))
    if not entries:
        raise UsageError(f"no numeric matrices found under {results}")
    body = "\n".join(f'<h3>{html.escape(src)}</h3>\n<img src="{svg}"/>' for src, svg in entries)
    index = run_dir / "index.html"
    index.write_text(f"<!DOCTYPE html>\n<html><body>\n<h1>symlab report</h1>\n{body}\n</body></html>\n", encoding="utf-8")
    return index


def cmd_report(cfg: dict, run_dir: Path) -> dict | None:
    if not cfg["results"]:
        raise UsageError("report needs results = <directory of CSV outputs>")
    results = Path(cfg["results"])
    if not results.is_dir():
        raise UsageError(f"results directory not found: {results}")
    bundle_report(results, run_dir)
    return None


def cmd_pipeline(cfg: dict, run_dir: Path) -> dict | None:
    """Every analysis on one model, in one run directory, plus the report bundle."""
    an = Analysis(cfg)
    summary: dict = {}
    for name, target in TARGETS.items():
        scan = an.scan(target)
        scan.save(run_dir, f"cma_{name}")
        render_heatmap(scan.scores, run_dir / f"cma_{name}.svg", mask=scan.significance_mask, title=f"{name} CM scores")
        summary[f"significant_{name}"] = [list(h) for h in scan.significant_heads()]
    for condition, pairs in (("abstract", an.pairs("symbolic_induction")), ("token", an.pairs("retrieval"))):
        lp = cma.scan_layer_position(an.model, pairs, "block_output")
        lp.save(run_dir, f"layer_position_{condition}")
        render_heatmap(lp.scores, run_dir / f"layer_position_{condition}.svg", col_labels=lp.positions,
                       title=f"block output, {condition}")
    summary["attention"] = _attention(an, run_dir)
    summary["rsa"] = _rsa(an, run_dir)
    summary["ablation"] = {k: v for k, v in _ablate(an, run_dir).items() if k in ("chance", "n_prompts")}
    cache = {"prefix": _prefix(an.model, run_dir)}
    fv = _fv(an, run_dir)
    cache["fv_final_position"], cache["fv_third_item"] = fv["final_position"], fv["third_item"]
    summary["correlations"] = _correlate(an, run_dir, CORRELATIONS, cache)
    summary["probe"] = _probe(an, run_dir)
    held = make_identity_prompts(["ABA", "ABB"], 500, an.seed + 51, an.vocab, an.cfg["shots"])
    summary["accuracy"] = asdict(evaluate_accuracy(an.model, held))
    write_json(run_dir / "summary.json", summary)
    report_dir = run_dir / "report"
    report_dir.mkdir()
    bundle_report(run_dir, report_dir)
    return an.checkpoint


COMMANDS: dict[str, tuple[Callable[[dict, Path], dict | None], tuple[str, ...], str]] = {
    "oracle-build": (cmd_oracle_build, COMMON + ("kind",), "write a hand-wired oracle checkpoint"),
    "train": (cmd_train, COMMON + ("shots", "steps", "batch_size", "lr", "warmup", "weight_decay", "target_accuracy",
                                   "eval_every", "n_layers", "n_heads", "d_model", "vocab_size", "pos_encoding"),
              "train a toy transformer on identity rules"),
    "eval": (cmd_eval, COMMON + MODEL_KEYS + ("task", "n"), "accuracy with a 95% Wilson interval"),
    "cma": (cmd_cma, COMMON + MODEL_KEYS + CMA_KEYS + ("target",), "causal mediation scans"),
    "attn": (cmd_attn, COMMON + MODEL_KEYS + CMA_KEYS, "score-weighted attention maps"),
    "rsa": (cmd_rsa, COMMON + MODEL_KEYS + CMA_KEYS + ("token_sets",), "representational similarity analysis"),
    "ablate": (cmd_ablate, COMMON + MODEL_KEYS + CMA_KEYS + ("prompts", "random_runs", "ablation"),
               "cumulative head ablation curves"),
    "prefix-match": (cmd_prefix_match, COMMON + ("model",), "prefix-matching scores per head"),
    "fv": (cmd_fv, COMMON + MODEL_KEYS + ("prompts",), "function-vector average indirect effects"),
    "probe": (cmd_probe, COMMON + MODEL_KEYS + CMA_KEYS, "token-disjoint linear probe with shuffled control"),
    "correlate": (cmd_correlate, COMMON + MODEL_KEYS + CMA_KEYS + ("prompts", "a", "b"), "correlate two head-score matrices"),
    "report": (cmd_report, COMMON + ("results",), "bundle SVG heatmaps and an index page"),
    "pipeline": (cmd_pipeline, COMMON + MODEL_KEYS + CMA_KEYS + ("token_sets", "prompts", "random_runs", "ablation"),
                 "run every analysis and the report bundle"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        for key in keys:
            typ, default, h = SCHEMA[key]
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None, help=f"{h} (default {default})")
    rp = sub.add_parser("replay", help="rerun a manifest and compare output hashes")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="parent directory for the replay run (default: a temp dir)")
    return parser


def run_command(command: str, cfg: dict, stamp: str | None = None) -> Path:
    fn = COMMANDS[command][0]
    started = time.time()
    run_dir = make_run_dir(cfg.get("out", "runs"), cfg.get("name") or command, stamp)
    try:
        ckpt = fn(cfg, run_dir)
    except BaseException:
        if not any(run_dir.iterdir()):
            run_dir.rmdir()
        raise
    write_manifest(run_dir, command, cfg, ckpt, started)
    return run_dir


def replay(manifest_path: str | Path, out: str | None = None) -> tuple[Path, list[str]]:
    """Rerun a manifest; returns the new run directory and mismatching outputs."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise UsageError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    ckpt = manifest.get("checkpoint") or {}
    if ckpt.get("kind") == "checkpoint" and sha256_file(ckpt["path"]) != ckpt["sha256"]:
        raise UsageError(f"checkpoint {ckpt['path']} changed since the original run")
    cfg = dict(manifest["config"])
    parent = out or tempfile.mkdtemp(prefix="symlab-replay-")
    cfg["out"] = parent
    run_dir = run_command(manifest["command"], cfg)
    new = json.loads((run_dir / MANIFEST).read_text(encoding="utf-8"))["outputs"]
    old = manifest["outputs"]
    diffs = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
    return run_dir, diffs


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            run_dir, diffs = replay(args.manifest, args.out)
            if diffs:
                print(f"replay {run_dir}: {len(diffs)} outputs differ: {', '.join(diffs)}", file=sys.stderr)
                return 1
            print(f"replay {run_dir}: all outputs identical")
            return 0
        keys = COMMANDS[args.command][1]
        file_values = parse_config_file(args.config) if args.config else {}
        cli = {k: getattr(args, k) for k in keys}
        cfg = resolve_config(keys, cli, file_values, dict(os.environ))
        run_dir = run_command(args.command, cfg)
        print(run_dir)
        return 0
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"symlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
