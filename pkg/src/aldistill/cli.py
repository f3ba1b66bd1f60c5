"""Command line entry point: ``aldistill <subcommand> [options]``.

Exit codes: 0 success, 2 config error, 3 data-format error, 4 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment as aug
from .alloop import (
    ExperimentConfig,
    Dataset,
    dry_run,
    evaluate,
    load_dataset,
    load_test_dataset,
    n_al_steps,
    run_experiment,
)
from .config import SCHEMA, parse_config, read_config_text
from .exceptions import ALDistillError, ConfigError
from .metrics import delta_ciou, le_table, read_curves, write_le_csv
from .model import Architecture, TrainConfig, init_model, save_checkpoint, train
from .projection import SensorConfig, dump_tensor, project
from .report import line_plot_svg, render_line_plot
from .scan_io import SyntheticSpec, content_hash, encode_labels, encode_scan, gen_synthetic_dataset, load_labels, load_scan

log = logging.getLogger("aldistill")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4


def _common(suppress=False):
    # Subcommand copies must not reset values given before the subcommand.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False, argument_default=kw.get("default"))
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="experiment config file (INI sections)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", metavar="DIR", help="output root (default: $ALD_OUT, then config out_dir)")
    g.add_argument("--threads", type=int, help="parallel pool-scoring width (results do not depend on it)")
    g.add_argument("--le-convention", choices=("as-written", "inverted"),
                   help="LE ratio orientation: n_other/n_baseline (as-written) or its inverse")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr", **kw)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="aldistill", parents=[_common()],
                                     description="Bayesian active-learning distillation of LiDAR range-image datasets.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = _common(suppress=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic labeled dataset")
    p.add_argument("--n-scans", type=int, default=10, help="number of scans to write")
    p.add_argument("--rho", type=float, default=0.0, help="fraction of jittered near-duplicates")
    p.add_argument("--k", type=int, default=1, help="exact-duplicate multiplicity per base scan")
    p.add_argument("--dup-bases", type=int, default=None, help="number of bases duplicated (default all)")
    p.add_argument("--sigma", type=float, default=0.1, help="jitter standard deviation in meters")
    p.add_argument("--name", default="synthetic", help="dataset directory name under the output root")

    p = sub.add_parser("project", parents=[common], help="project one scan to a range image")
    p.add_argument("scan", help=".bin scan file")
    p.add_argument("--label", help=".label file")
    p.add_argument("--width", type=int, default=64, help="image width in pixels")
    p.add_argument("--height", type=int, default=16, help="image height in pixels")
    p.add_argument("--fov-up", type=float, default=3.0, help="degrees above the horizon")
    p.add_argument("--fov-down", type=float, default=25.0, help="degrees below the horizon")

    p = sub.add_parser("augment-preview", parents=[common],
                       help="before/after/error images for each augmentation")
    p.add_argument("scan", help=".bin scan file")
    p.add_argument("--label", help=".label file (needed for cut-paste)")
    p.add_argument("--donor-scan", help="donor .bin for instance cut-paste")
    p.add_argument("--donor-label", help="donor .label for instance cut-paste")
    p.add_argument("--width", type=int, default=1024, help="image width in pixels")
    p.add_argument("--height", type=int, default=64, help="image height in pixels")

    sub.add_parser("train-full", parents=[common],
                   help="train on the whole pool and report the full-supervision mIoU")

    p = sub.add_parser("al-run", parents=[common], help="run (or resume) an active-learning experiment")
    p.add_argument("--dry-run", action="store_true", help="pool arithmetic only; print |L| per step")
    p.add_argument("--pool-size", type=int, help="pool size for --dry-run without a manifest")
    p.add_argument("--fresh", action="store_true", help="ignore existing resume state")
    p.add_argument("--stop-after", type=int, help="stop after this many steps in this invocation")

    p = sub.add_parser("le", parents=[common], help="labeling efficiency of one method against a baseline")
    p.add_argument("curves", nargs="+", help="curves.csv file(s)")
    p.add_argument("--baseline", default="random", help="baseline method name")
    p.add_argument("--other", required=True, help="compared method name")
    p.add_argument("--targets", type=float, nargs="*", help="target mIoU values (default: 10 levels)")

    p = sub.add_parser("report", parents=[common], help="SVG plots for learning curves and class IoU")
    p.add_argument("curves", nargs="+", help="curves.csv file(s)")
    p.add_argument("--miou-fs", type=float, help="full-supervision mIoU for the class-deviation plots")
    return parser


def _out_root(args, cfg=None):
    """Output root: ``--out``, then ``$ALD_OUT``, then the config's ``out_dir``."""
    if args.out:
        return Path(args.out)
    if os.environ.get("ALD_OUT"):
        return Path(os.environ["ALD_OUT"])
    if cfg is not None:
        return Path(cfg.out_dir)
    return Path(_report_settings(args)["out_dir"])


def _load_cfg(args, required=True) -> ExperimentConfig | None:
    if not args.config:
        if required:
            raise ConfigError("--config is required for this command")
        return None
    cfg = parse_config(args.config)
    changes = {"out_dir": str(_out_root(args, cfg))}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    return replace(cfg, **changes)


def _report_settings(args):
    """The ``[report]`` section of ``--config`` (defaults when no config is given)."""
    if not args.config:
        return {k: d for k, (_, d) in SCHEMA["report"].items()}
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    values, _ = read_config_text(text, args.config)
    return values["report"]


def _load_cloud(scan, label=None):
    cloud = load_scan(scan)
    return load_labels(label, cloud) if label else cloud


def cmd_gen_synth(args):
    seed = args.seed if args.seed is not None else 0
    spec = SyntheticSpec(n_scans=args.n_scans, redundancy_rho=args.rho, duplication_k=args.k,
                         n_dup_bases=args.dup_bases, jitter_sigma=args.sigma, seed=seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_root(args) / args.name
    manifest = gen_synthetic_dataset(spec, out)
    print(f"wrote {len(manifest)} scans to {out} ({len(set(manifest.hashes.tolist()))} distinct)")
    return EXIT_OK


def cmd_project(args):
    cfg = SensorConfig.from_degrees(args.width, args.height, args.fov_up, args.fov_down)
    img = project(_load_cloud(args.scan, args.label), cfg)
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (Path(args.scan).stem + ".tensor")
    dump_tensor(img, path)
    print(f"{path}: {img.valid.sum()} valid pixels of {img.valid.size}, "
          f"{img.meta['out_of_fov']} out-of-FoV, {img.meta['zero_range']} zero-range points")
    return EXIT_OK


def _to_gray(values, valid, lo, hi):
    v = np.where(valid, (values - lo) / max(hi - lo, 1e-12), 0.0)
    return (np.clip(v, 0, 1) * 255).astype(np.uint8)


def _triptych(before, after, channel):
    from PIL import Image

    a, b = before.channel(channel), after.channel(channel)
    lo = float(min(a[before.valid].min(initial=0), b[after.valid].min(initial=0)))
    hi = float(max(a[before.valid].max(initial=1), b[after.valid].max(initial=1)))
    err = np.abs(np.where(before.valid, a, 0) - np.where(after.valid, b, 0))
    rows = [_to_gray(a, before.valid, lo, hi), _to_gray(b, after.valid, lo, hi),
            _to_gray(err, np.ones_like(err, bool), 0.0, float(err.max()) or 1.0)]
    sep = np.full((2, a.shape[1]), 128, np.uint8)
    return Image.fromarray(np.vstack([rows[0], sep, rows[1], sep, rows[2]]))


def cmd_augment_preview(args):
    cfg = SensorConfig.from_degrees(args.width, args.height, 3.0, 25.0)
    seed = args.seed if args.seed is not None else 0
    cloud = _load_cloud(args.scan, args.label)
    img = project(cloud, cfg)
    h = content_hash(encode_scan(cloud), encode_labels(cloud))
    out = _out_root(args) / "augment_preview"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    results = {
        "random_pixel_dropout": (aug.random_pixel_dropout(img, 0.1, rng.integers(2**63)), "r"),
        "coarse_dropout": (aug.coarse_dropout(img, (1, 5), seed=rng.integers(2**63)), "r"),
        "gaussian_noise_depth": (aug.gaussian_noise_channel(img, "r", 0.1, rng.integers(2**63)), "r"),
        "gaussian_noise_remission": (aug.gaussian_noise_channel(img, "remission", 0.03, rng.integers(2**63)),
                                     "remission"),
        "cyclic_shift": (aug.cyclic_shift(img, int(rng.integers(img.width))), "r"),
    }
    if args.donor_scan:
        donor = project(_load_cloud(args.donor_scan, args.donor_label), cfg)
        results["instance_cut_paste"] = (aug.instance_cut_paste(img, donor, (2, 3, 4), 3, rng.integers(2**63)), "r")
    for name, (after, channel) in results.items():
        _triptych(img, after, channel).save(out / f"{name}.png")
    print(f"wrote {len(results)} previews to {out} (sample hash {h:016x})")
    return EXIT_OK


def _datasets(cfg):
    data = load_dataset(cfg.manifest, cfg, cfg.pool_size, cfg.seed)
    test = load_test_dataset(cfg, data)
    return data, test


def cmd_train_full(args):
    cfg = _load_cfg(args)
    data, test = _datasets(cfg)
    arch = Architecture(len(cfg.channels), data.n_classes, tuple(cfg.hidden), 3, cfg.dropout)
    params0 = init_model(arch, cfg.effective_model_seed)
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": cfg.effective_model_seed})
    params, tlog = train(params0, data.images, tcfg, cfg.aug, data.hashes)
    res = evaluate(params, test)
    out = Path(cfg.out_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "full_supervision.ckpt")
    summary = {"miou_fs": res.miou, "ciou": [None if np.isnan(v) else v for v in res.iou.tolist()],
               "n_labeled": len(data.images), "best_iteration": tlog.best_iteration}
    (out / "full_supervision.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"full-supervision mIoU = {res.miou:.4f} ({out / 'full_supervision.json'})")
    return EXIT_OK


def cmd_al_run(args):
    cfg = _load_cfg(args, required=not (args.dry_run and args.pool_size))
    if args.dry_run:
        if args.pool_size:
            n = args.pool_size
            init = cfg.init_size if cfg else 1041
            budget = cfg.budget if cfg else 800
        else:
            from .scan_io import DatasetManifest

            n = cfg.pool_size or len(DatasetManifest.read(cfg.manifest))
            init, budget = cfg.init_size, cfg.budget
        seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
        sizes = dry_run(n, init, budget, seed, cfg.max_steps if cfg else None)
        print(f"pool={n} init={init} budget={budget} steps={len(sizes)} "
              f"(rule: 1 + ceil((pool - init) / budget) = {n_al_steps(n, init, budget)})")
        for i, s in enumerate(sizes):
            print(f"step {i}: |L| = {s}")
        return EXIT_OK
    res = run_experiment(cfg, stop_after=args.stop_after, resume=not args.fresh)
    state = "complete" if res.completed else "interrupted"
    print(f"{state}: {len(res.records)} steps, curves in {res.out_dir}")
    return EXIT_OK


def cmd_le(args):
    curves = {c.method: c for path in args.curves for c in read_curves(path)}
    for m in (args.baseline, args.other):
        if m not in curves:
            raise ConfigError(f"method {m!r} not found; available: {sorted(curves)}")
    base, other = curves[args.baseline], curves[args.other]
    settings = _report_settings(args)
    convention = args.le_convention or settings["le_convention"]
    targets = args.targets or settings["le_targets"]
    if not targets:
        top = min(max(base.miou), max(other.miou))
        bottom = max(min(base.miou), min(other.miou))
        targets = np.linspace(bottom, top, 10).tolist()
    rows = le_table(other, base, targets, convention)
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    write_le_csv(rows, out / "le.csv")
    render_line_plot(out / "le.csv", "target_miou", ["le"], out / "le.svg",
                     title=f"LE {args.other} vs {args.baseline}")
    for a, nb, no, le in rows:
        print(f"a={a:.4f} n_baseline={nb:.1f} n_other={no:.1f} LE={le:.4f}")
    return EXIT_OK


def cmd_report(args):
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    curves = [c for path in args.curves for c in read_curves(path)]
    series = [(c.method, c.pct_labeled, c.miou) for c in curves]
    (out / "miou.svg").write_text(line_plot_svg(series, "pct_labeled", "mIoU", "Mean IoU vs dataset size"))
    written = ["miou.svg"]
    miou_fs = args.miou_fs if args.miou_fs is not None else _report_settings(args)["miou_fs"]
    for c in curves:
        C = c.ciou_matrix.shape[1]
        series = [(f"class {k}", c.pct_labeled, c.ciou_matrix[:, k]) for k in range(C)]
        name = f"ciou_{c.method}.svg"
        (out / name).write_text(line_plot_svg(series, "pct_labeled", "class IoU", f"Class IoU ({c.method})"))
        written.append(name)
        if miou_fs is not None:
            d = delta_ciou(c, miou_fs)
            series = [(f"class {k}", c.pct_labeled, d[:, k]) for k in range(C)]
            name = f"delta_ciou_{c.method}.svg"
            (out / name).write_text(line_plot_svg(series, "pct_labeled", "cIoU - mIoU_FS",
                                                  f"Class IoU deviation ({c.method})"))
            written.append(name)
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "project": cmd_project,
    "augment-preview": cmd_augment_preview,
    "train-full": cmd_train_full,
    "al-run": cmd_al_run,
    "le": cmd_le,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ALDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
