import json

import numpy as np
import pytest

from symlab import report
from symlab.report import (
    ConfigError, UsageError, colormap, main, parse_config_file, read_matrix_csv, render_heatmap, replay,
    resolve_config, run_command, verify_manifest,
)

KEYS = report.COMMANDS["cma"][1]


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# comment\nseed = 3\npairs = 7  # trailing\nmodel = oracle\n", encoding="utf-8")
    values = parse_config_file(cfg_file)
    assert values == {"seed": "3", "pairs": "7", "model": "oracle"}
    cfg = resolve_config(KEYS, {}, values, {})
    assert cfg["seed"] == 3 and cfg["pairs"] == 7 and cfg["perms"] == 5000
    assert resolve_config(KEYS, {}, values, {"SYMLAB_SEED": "9"})["seed"] == 9
    assert resolve_config(KEYS, {"seed": 4}, values, {"SYMLAB_SEED": "9"})["seed"] == 4


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        resolve_config(KEYS, {}, {"layers": "3"}, {})
    with pytest.raises(ConfigError):
        resolve_config(KEYS, {}, {"pairs": "many"}, {})
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_config_file(bad)


def test_unknown_config_key_exits_nonzero(tmp_path, capsys):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("frobnicate = 1\n", encoding="utf-8")
    assert main(["cma", "--config", str(cfg_file), "--out", str(tmp_path)]) == 2
    assert "frobnicate" in capsys.readouterr().err


def test_heatmap_one_by_one(tmp_path):
    path = render_heatmap([[0.5]], tmp_path / "one.svg")
    svg = path.read_text(encoding="utf-8")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<rect") >= 1


def test_heatmap_mask_and_determinism(tmp_path):
    m = np.arange(6.0).reshape(2, 3)
    mask = np.array([[True, False, True], [True, True, False]])
    a = render_heatmap(m, tmp_path / "a.svg", mask=mask, title="t").read_bytes()
    b = render_heatmap(m, tmp_path / "b.svg", mask=mask, title="t").read_bytes()
    assert a == b
    assert a.count(b'fill="none"') == 2
    with pytest.raises(ValueError):
        render_heatmap([[np.nan]], tmp_path / "n.svg")
    with pytest.raises(ValueError):
        render_heatmap(m, tmp_path / "m.svg", mask=np.ones((3, 2), bool))


def test_colormap_endpoints():
    assert colormap(0.0) == "#f7fbff"
    assert colormap(1.0) == "#08306b"
    assert colormap(-3) == colormap(0.0)


def test_report_on_empty_dir_fails(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", "--results", str(empty), "--out", str(tmp_path / "runs")]) == 2
    assert "no CSV" in capsys.readouterr().err


def test_missing_checkpoint_is_a_usage_error(tmp_path, capsys):
    code = main(["eval", "--model", str(tmp_path / "nope.npz"), "--out", str(tmp_path), "--n", "5"])
    assert code == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_cma_cli_on_oracle_and_replay(tmp_path):
    out = tmp_path / "runs"
    assert main(["cma", "--target", "retrieval", "--pairs", "5", "--perms", "200", "--out", str(out), "--name", "r"]) == 0
    (run_dir,) = out.iterdir()
    meta = json.loads((run_dir / "cma_retrieval.json").read_text())
    assert meta["significant_heads"] == [[2, 0]]
    values, rows, cols = read_matrix_csv(run_dir / "cma_retrieval.csv")
    assert values.shape == (3, 4) and cols == ["head_0", "head_1", "head_2", "head_3"]
    manifest = run_dir / "manifest.json"
    assert verify_manifest(manifest) == []
    m = json.loads(manifest.read_text())
    assert {"tool_version", "command", "config", "seed", "checkpoint", "outputs", "wall_clock"} <= set(m)
    new_dir, diffs = replay(manifest, str(tmp_path / "replays"))
    assert diffs == [] and new_dir != run_dir


def test_replay_detects_tampering(tmp_path):
    cfg = resolve_config(report.COMMANDS["prefix-match"][1], {"out": str(tmp_path / "runs")}, {}, {})
    run_dir = run_command("prefix-match", cfg, stamp="fixed")
    (run_dir / "prefix_matching.csv").write_text("tampered\n", encoding="utf-8")
    assert verify_manifest(run_dir / "manifest.json") == ["prefix_matching.csv"]
    with pytest.raises(UsageError):
        replay(tmp_path / "missing.json")


def test_run_dirs_never_collide(tmp_path):
    a = report.make_run_dir(str(tmp_path), "x", "s")
    b = report.make_run_dir(str(tmp_path), "x", "s")
    assert a != b and a.exists() and b.exists()


def test_report_bundles_existing_results(tmp_path):
    res = tmp_path / "res"
    res.mkdir()
    (res / "m.csv").write_text("layer,head_0,head_1\n0,1.0,2.0\n1,3.0,4.0\n", encoding="utf-8")
    assert main(["report", "--results", str(res), "--out", str(tmp_path / "runs")]) == 0
    (run_dir,) = (tmp_path / "runs").iterdir()
    assert (run_dir / "index.html").exists() and (run_dir / "m.svg").exists()
