import re

import numpy as np
import pytest

from aldistill.alloop import run_experiment
from aldistill.cli import build_parser, main
from aldistill.config import dump_config, parse_config_text
from aldistill.exceptions import ConfigError
from aldistill.metrics import LearningCurve, export_curves
from aldistill.report import render_line_plot

from conftest import tiny_config

MINIMAL = "[data]\nmanifest = pool.tsv\n"


def test_minimal_config_defaults():
    cfg = parse_config_text(MINIMAL, base_dir="/data")
    assert cfg.manifest == "/data/pool.tsv"
    assert cfg.init_size == 1041 and cfg.budget == 800 and cfg.heuristic == "bald"
    assert cfg.mc_iterations == 8 and cfg.channels == ("x", "y", "r", "remission")
    assert cfg.aug is None


def test_negative_budget_rejected_with_line():
    with pytest.raises(ConfigError, match=r"line 4: budget") as info:
        parse_config_text(MINIMAL + "[al]\nbudget = -1\n")
    assert info.value.exit_code == 2 and info.value.line == 4


def test_table1_transcription():
    text = MINIMAL + """
[al]
init_size = 1041
budget = 800
[model]
dropout = 0.2
[train]
lr = 0.01
lr_decay = 0.99
weight_decay = 0.0001
batch_size = 16
eval_period = 500
patience = 15
max_iterations = 100000
"""
    cfg = parse_config_text(text)
    t = cfg.train
    assert (cfg.init_size, cfg.budget, cfg.dropout) == (1041, 800, 0.2)
    assert (t.lr, t.lr_decay, t.weight_decay, t.batch_size, t.eval_period, t.patience, t.max_iterations) == \
        (0.01, 0.99, 0.0001, 16, 500, 15, 100000)


@pytest.mark.parametrize("text,line,pattern", [
    ("[data]\nmanifest = a\nbogus = 1\n", 3, "unknown key"),
    ("[data]\nmanifest = a\n[wat]\nx = 1\n", 3, "unknown section"),
    ("[data]\nmanifest = a\n[train]\nlr = fast\n", 4, "not a valid float"),
    ("[sensor]\nwidth = 64\n", 2, "missing required key 'manifest'"),
    ("[data]\nmanifest = a\n[al]\nheuristic = coin\n", 4, "heuristic"),
    ("[data]\nmanifest = a\nmanifest = b\n", 3, "duplicate"),
])
def test_config_errors_carry_line(text, line, pattern):
    with pytest.raises(ConfigError, match=pattern) as info:
        parse_config_text(text)
    assert info.value.line == line


def test_snapshot_sorted_and_order_independent():
    a = parse_config_text(MINIMAL + "[al]\nbudget = 5\ninit_size = 3\n[model]\ndropout = 0.3\n")
    b = parse_config_text("[model]\ndropout = 0.3\n[al]\ninit_size = 3\nbudget = 5\n" + MINIMAL)
    assert dump_config(a) == dump_config(b)
    sections = re.findall(r"^\[(\w+)\]", dump_config(a), re.M)
    assert sections == sorted(sections)
    assert a.config_hash() == b.config_hash()


def test_snapshot_reparses():
    cfg = parse_config_text(MINIMAL + "[augment]\nenabled = true\n")
    assert cfg.aug is not None and len(cfg.aug.steps) == 6


def test_two_point_svg(tmp_path):
    (tmp_path / "d.csv").write_text("x,y\n0,1\n1,2\n")
    svg = render_line_plot(tmp_path / "d.csv", "x", ["y"], tmp_path / "p.svg").read_text()
    polys = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(polys) == 1 and len(polys[0].split()) == 2
    assert "href" not in svg and "<image" not in svg
    assert "<text" in svg and 'class="axis"' in svg


def test_svg_deterministic(tmp_path):
    (tmp_path / "d.csv").write_text("x,y,z\n0,1,3\n1,2,1\n2,0.5,2\n")
    a = render_line_plot(tmp_path / "d.csv", "x", ["y", "z"], tmp_path / "a.svg").read_bytes()
    b = render_line_plot(tmp_path / "d.csv", "x", ["y", "z"], tmp_path / "b.svg").read_bytes()
    assert a == b


def test_svg_one_polyline_per_class_column(tmp_path, rng):
    c = LearningCurve("bald")
    for s in range(5):
        c.append(60 * (s + 1), 10 * (s + 1), rng.random(), rng.random(6))
    path = export_curves(c, tmp_path)
    cols = [f"ciou_{k}" for k in range(6)]
    svg = render_line_plot(path, "pct_labeled", cols, tmp_path / "c.svg").read_text()
    polys = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(polys) == 6
    assert all(len(p.split()) == 5 for p in polys)


def test_svg_errors(tmp_path):
    (tmp_path / "d.csv").write_text("x,y\n0,1\n")
    with pytest.raises(KeyError):
        render_line_plot(tmp_path / "d.csv", "x", ["nope"], tmp_path / "p.svg")
    (tmp_path / "e.csv").write_text("x,y\n")
    with pytest.raises(ValueError):
        render_line_plot(tmp_path / "e.csv", "x", ["y"], tmp_path / "p.svg")


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #
def test_every_subcommand_help_lists_flags(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"gen-synth", "project", "augment-preview", "train-full", "al-run", "le", "report"}
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            assert action.help, (name, action.dest)
        for flag in ("--config", "--seed", "--out", "--threads", "--le-convention"):
            assert flag in text


def test_gen_synth_cli_deterministic(tmp_path):
    assert main(["gen-synth", "--n-scans", "6", "--k", "2", "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    assert main(["--seed", "4", "gen-synth", "--n-scans", "6", "--k", "2", "--out", str(tmp_path / "b")]) == 0
    for p in (tmp_path / "a/synthetic").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b/synthetic" / p.relative_to(tmp_path / "a/synthetic")).read_bytes()


def test_truncated_scan_exit_code_3(tmp_path, capsys):
    main(["gen-synth", "--n-scans", "1", "--out", str(tmp_path)])
    good = tmp_path / "synthetic/velodyne/000000.bin"
    bad = tmp_path / "bad.bin"
    bad.write_bytes(good.read_bytes()[:-7])
    assert main(["project", str(bad), "--out", str(tmp_path / "p")]) == 3
    assert "truncated scan" in capsys.readouterr().err


def test_bad_config_exit_code_2(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(MINIMAL + "[al]\nbudget = -1\n")
    assert main(["--config", str(tmp_path / "c.ini"), "al-run"]) == 2
    assert "line 4" in capsys.readouterr().err


def test_runtime_error_exit_code_4(tmp_path):
    (tmp_path / "c.ini").write_text("[data]\nmanifest = missing.tsv\n[al]\ninit_size = 2\nbudget = 2\n")
    assert main(["--config", str(tmp_path / "c.ini"), "--out", str(tmp_path), "al-run"]) == 4


def test_dry_run_table1(capsys):
    assert main(["al-run", "--dry-run", "--pool-size", "16241"]) == 0
    out = capsys.readouterr().out
    assert "steps=20" in out and "step 19: |L| = 16241" in out


def test_out_precedence(tmp_path, monkeypatch):
    main(["gen-synth", "--n-scans", "1", "--out", str(tmp_path / "flag")])
    assert (tmp_path / "flag/synthetic/manifest.tsv").exists()
    monkeypatch.setenv("ALD_OUT", str(tmp_path / "env"))
    main(["gen-synth", "--n-scans", "1"])
    assert (tmp_path / "env/synthetic/manifest.tsv").exists()
    main(["gen-synth", "--n-scans", "1", "--out", str(tmp_path / "flag2")])
    assert (tmp_path / "flag2/synthetic/manifest.tsv").exists()
    (tmp_path / "c.ini").write_text(MINIMAL + f"[report]\nout_dir = {tmp_path / 'cfg'}\n")
    main(["--config", str(tmp_path / "c.ini"), "gen-synth", "--n-scans", "1"])
    assert (tmp_path / "env/synthetic").exists() and not (tmp_path / "cfg").exists()
    monkeypatch.delenv("ALD_OUT")
    main(["--config", str(tmp_path / "c.ini"), "gen-synth", "--n-scans", "1"])
    assert (tmp_path / "cfg/synthetic/manifest.tsv").exists()


def test_augment_preview_writes_images(tmp_path):
    from PIL import Image

    main(["gen-synth", "--n-scans", "2", "--out", str(tmp_path)])
    d = tmp_path / "synthetic"
    rc = main(["augment-preview", str(d / "velodyne/000000.bin"), "--label", str(d / "labels/000000.label"),
               "--donor-scan", str(d / "velodyne/000001.bin"), "--donor-label", str(d / "labels/000001.label"),
               "--width", "256", "--height", "16", "--out", str(tmp_path / "prev")])
    assert rc == 0
    pngs = sorted((tmp_path / "prev/augment_preview").glob("*.png"))
    assert len(pngs) == 6
    with Image.open(pngs[0]) as im:
        assert im.size == (256, 3 * 16 + 4)


def _write_cfg(tmp_path, manifest, heuristic, name):
    text = f"""[data]
manifest = {manifest}
name = {name}
[model]
hidden = 8, 8
mc_iterations = 3
[train]
max_iterations = 20
batch_size = 4
eval_period = 10
patience = 2
[al]
init_size = 10
budget = 10
heuristic = {heuristic}
max_steps = 3
[report]
out_dir = {tmp_path / 'runs'}
"""
    p = tmp_path / f"{name}.ini"
    p.write_text(text)
    return p


def test_al_run_le_report_pipeline(tmp_path, synth_small, capsys):
    bald_cfg = _write_cfg(tmp_path, synth_small, "bald", "b")
    rand_cfg = _write_cfg(tmp_path, synth_small, "random", "r")
    assert main(["--config", str(bald_cfg), "al-run"]) == 0
    assert main(["--config", str(rand_cfg), "al-run"]) == 0
    runs = tmp_path / "runs"
    first = (runs / "b/curves.csv").read_bytes()
    # rerun from scratch into another root: identical artifacts
    assert main(["--config", str(bald_cfg), "--out", str(tmp_path / "again"), "al-run"]) == 0
    assert (tmp_path / "again/b/curves.csv").read_bytes() == first
    assert (tmp_path / "again/b/step_1/selected.txt").read_bytes() == (runs / "b/step_1/selected.txt").read_bytes()

    assert main(["--config", str(bald_cfg), "train-full"]) == 0
    assert (runs / "b/full_supervision.json").exists()

    curves = [str(runs / "b/curves.csv"), str(runs / "r/curves.csv")]
    assert main(["le", *curves, "--other", "bald", "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep/le.csv").read_text().startswith("target_miou,n_baseline,n_other,le\n")
    assert main(["report", *curves, "--miou-fs", "0.5", "--out", str(tmp_path / "rep")]) == 0
    svgs = {p.name for p in (tmp_path / "rep").glob("*.svg")}
    assert {"miou.svg", "le.svg", "ciou_bald.svg", "delta_ciou_random.svg"} <= svgs


def test_le_unknown_method(tmp_path, capsys):
    c = LearningCurve("bald")
    c.append(1, 1.0, 0.5, [0.5])
    path = export_curves(c, tmp_path)
    assert main(["le", str(path), "--other", "entropy", "--out", str(tmp_path)]) == 2
