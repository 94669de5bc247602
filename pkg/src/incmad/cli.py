"""Command-line interface for the incremental anomaly-detection harness.

Subcommands:
  config init    write a default configuration file
  data synth     generate the procedural dataset and save it to disk
  data validate  check an on-disk dataset for structural problems
  train          run one seed, saving a checkpoint after every step
  run            run every configured seed and write per-seed + aggregate reports
  ablate         component on/off grid and fusion-variant grid
  inject-study   redundancy / spurious-correlation corruption grid
  verify         run the self-verification suites (nonzero exit on failure)
  report         rebuild reports from stored per-seed metrics files

Seeds run serially by default; set INCMAD_THREADS to run them in parallel
threads (each seed gets an independent view of the dataset so the access
audits stay per-run).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import Config, load_config, save_config
from .data import (
    Dataset,
    IngestionError,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from .fusion import FUSION_KINDS
from .report import rebuild_reports, write_aggregate_summary, write_seed_report
from .training import METRIC_KINDS, run_incremental
from .verify import run_all


def _dataset_for(cfg: Config) -> Dataset:
    """Loads cfg.data_dir if set, otherwise generates the dataset in memory."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        if not root.is_dir():
            raise SystemExit(
                f"data_dir {root} does not exist; run `incmad data synth` first"
            )
        return load_dataset(root)
    return generate_synthetic_dataset(
        cfg.n_objects,
        cfg.per_object_train,
        cfg.per_object_test,
        cfg.image_size,
        seed=cfg.data_seed,
    )


def _fresh_view(dataset: Dataset) -> Dataset:
    """Same objects and order, new audit counters."""
    return Dataset(list(dataset.objects.values()), dataset.image_size)


def _run_seeds(dataset: Dataset, cfg: Config, checkpoint_root=None) -> list:
    n_threads = max(1, int(os.environ.get("INCMAD_THREADS", "1")))

    def one(seed: int):
        ckpt = None
        if checkpoint_root is not None:
            ckpt = str(Path(checkpoint_root) / f"seed_{seed}" / "checkpoints")
        return run_incremental(_fresh_view(dataset), cfg, seed, checkpoint_dir=ckpt)

    if n_threads == 1:
        return [one(s) for s in cfg.seeds]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(one, cfg.seeds))


def _print_report_line(rep) -> None:
    fm = rep.fm.get("iauroc")
    fm_txt = "--" if fm is None else f"{fm:.2f}"
    print(
        f"  seed {rep.seed}: "
        + " ".join(f"{k}={rep.final_means[k]:.2f}" for k in METRIC_KINDS)
        + f" fm={fm_txt} ({rep.wall_clock:.1f}s)"
    )


def _write_rows_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _mean_std(values: list) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def _fmt_cell(v) -> str:
    return "--" if v is None else repr(round(v, 6))


def _grid_row(label: str, reports: list) -> list:
    final_m, final_s = _mean_std([r.final_means["iauroc"] for r in reports])
    fm_m, fm_s = _mean_std([r.fm["iauroc"] for r in reports])
    return [label, _fmt_cell(final_m), _fmt_cell(final_s), _fmt_cell(fm_m), _fmt_cell(fm_s)]


# -- subcommands -----------------------------------------------------------


def cmd_config_init(args) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        print(f"{path} already exists (use --force to overwrite)", file=sys.stderr)
        return 1
    save_config(Config(), path)
    print(f"wrote default config to {path}")
    return 0


def cmd_data_synth(args) -> int:
    cfg = load_config(args.config) if args.config else Config()
    out = args.out or cfg.data_dir
    if not out:
        print("no output directory: pass --out or set data_dir", file=sys.stderr)
        return 1
    ds = generate_synthetic_dataset(
        cfg.n_objects,
        cfg.per_object_train,
        cfg.per_object_test,
        cfg.image_size,
        seed=cfg.data_seed,
    )
    save_dataset(ds, out)
    n_train = sum(len(o.train) for o in ds.objects.values())
    n_test = sum(len(o.test) for o in ds.objects.values())
    print(
        f"wrote {len(ds.names)} objects ({n_train} train, {n_test} test, "
        f"{cfg.image_size}x{cfg.image_size}) to {out}"
    )
    return 0


def cmd_data_validate(args) -> int:
    try:
        ds = load_dataset(args.path)
    except IngestionError as e:
        print(f"INVALID: {e}", file=sys.stderr)
        return 2
    for name in ds.names:
        obj = ds.objects[name]
        n_defect = sum(1 for s in obj.test if s.is_anomalous)
        print(
            f"  {name}: {len(obj.train)} train, {len(obj.test)} test "
            f"({n_defect} defect)"
        )
    print(f"OK: {len(ds.names)} objects, image size {ds.image_size}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    dataset = _dataset_for(cfg)
    rep = run_incremental(
        _fresh_view(dataset),
        cfg,
        seed,
        checkpoint_dir=str(out / f"seed_{seed}" / "checkpoints"),
    )
    write_seed_report(rep, out / f"seed_{seed}")
    save_config(cfg, out / "config.yaml")
    _print_report_line(rep)
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    dataset = _dataset_for(cfg)
    reports = _run_seeds(dataset, cfg)
    for rep in reports:
        write_seed_report(rep, out / f"seed_{rep.seed}")
        _print_report_line(rep)
    summary = write_aggregate_summary(reports, out, extra={"setting": cfg.setting})
    save_config(cfg, out / "config.yaml")
    final = summary["final"]["iauroc"]
    fm = summary["fm"]["iauroc"]
    fm_txt = "--" if fm["mean"] == "--" else f"{fm['mean']:.2f}+-{fm['std']:.2f}"
    print(
        f"aggregate over {len(reports)} seeds: "
        f"iauroc {final['mean']:.2f}+-{final['std']:.2f}, fm {fm_txt}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    dataset = _dataset_for(cfg)

    component_grid = [
        ("full", True, True),
        ("no_scan", False, True),
        ("no_bottleneck", True, False),
        ("neither", False, False),
    ]
    rows = []
    for label, scan, bottleneck in component_grid:
        sub = replace(cfg, use_mamba=scan, use_ibfm=bottleneck)
        reports = _run_seeds(dataset, sub)
        for rep in reports:
            write_seed_report(rep, out / "components" / label / f"seed_{rep.seed}")
        write_aggregate_summary(reports, out / "components" / label)
        rows.append([label, scan, bottleneck] + _grid_row(label, reports)[1:])
        print(f"  components/{label}: " + ", ".join(map(str, rows[-1][3:])))
    _write_rows_csv(
        out / "components.csv",
        ["variant", "scan", "bottleneck", "final_iauroc_mean", "final_iauroc_std",
         "fm_iauroc_mean", "fm_iauroc_std"],
        rows,
    )

    rows = []
    for kind in FUSION_KINDS:
        sub = replace(cfg, fusion_kind=kind)
        reports = _run_seeds(dataset, sub)
        for rep in reports:
            write_seed_report(rep, out / "fusion" / kind / f"seed_{rep.seed}")
        write_aggregate_summary(reports, out / "fusion" / kind)
        rows.append(_grid_row(kind, reports))
        print(f"  fusion/{kind}: " + ", ".join(map(str, rows[-1][1:])))
    _write_rows_csv(
        out / "fusion.csv",
        ["fusion", "final_iauroc_mean", "final_iauroc_std",
         "fm_iauroc_mean", "fm_iauroc_std"],
        rows,
    )
    save_config(cfg, out / "config.yaml")
    return 0


def cmd_inject_study(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    dataset = _dataset_for(cfg)
    spurious_on = cfg.spurious_strength if cfg.spurious_strength > 0 else 0.6

    rows = []
    for redundant in (0.0, 0.2, 0.5):
        for spurious in (0.0, spurious_on):
            sub = replace(
                cfg, redundant_intensity=redundant, spurious_strength=spurious
            )
            label = f"r{redundant:g}_s{spurious:g}"
            reports = _run_seeds(dataset, sub)
            for rep in reports:
                write_seed_report(rep, out / "injections" / label / f"seed_{rep.seed}")
            write_aggregate_summary(reports, out / "injections" / label)
            rows.append([repr(redundant), repr(spurious)] + _grid_row(label, reports)[1:])
            print(f"  injections/{label}: " + ", ".join(map(str, rows[-1][2:])))
    _write_rows_csv(
        out / "injections.csv",
        ["redundant", "spurious", "final_iauroc_mean", "final_iauroc_std",
         "fm_iauroc_mean", "fm_iauroc_std"],
        rows,
    )
    save_config(cfg, out / "config.yaml")
    return 0


def cmd_verify(args) -> int:
    results = run_all()
    failed = 0
    for r in results:
        tag = "PASS" if r.passed else "FAIL"
        print(f"[{tag}] {r.name}: {r.detail} ({r.seconds:.1f}s)")
        failed += not r.passed
    if failed:
        print(f"{failed} suite(s) failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} suites passed")
    return 0


def cmd_report(args) -> int:
    summary = rebuild_reports(args.run_dir)
    print(f"rebuilt reports for seeds {summary['seeds']} in {args.run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="incmad", description="incremental multimodal anomaly detection"
    )
    sub = p.add_subparsers(dest="command", required=True)

    pc = sub.add_parser("config", help="configuration files")
    pcs = pc.add_subparsers(dest="subcommand", required=True)
    pci = pcs.add_parser("init", help="write a default config")
    pci.add_argument("--out", default="config.yaml")
    pci.add_argument("--force", action="store_true")
    pci.set_defaults(fn=cmd_config_init)

    pd = sub.add_parser("data", help="dataset generation and validation")
    pds = pd.add_subparsers(dest="subcommand", required=True)
    pd1 = pds.add_parser("synth", help="generate and save the dataset")
    pd1.add_argument("--config", default=None)
    pd1.add_argument("--out", default=None)
    pd1.set_defaults(fn=cmd_data_synth)
    pd2 = pds.add_parser("validate", help="validate an on-disk dataset")
    pd2.add_argument("path")
    pd2.set_defaults(fn=cmd_data_validate)

    pt = sub.add_parser("train", help="single-seed run with checkpoints")
    pt.add_argument("config")
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--out", default=None)
    pt.set_defaults(fn=cmd_train)

    pr = sub.add_parser("run", help="all seeds, reports and aggregate")
    pr.add_argument("config")
    pr.add_argument("--out", default=None)
    pr.set_defaults(fn=cmd_run)

    pa = sub.add_parser("ablate", help="component and fusion grids")
    pa.add_argument("config")
    pa.add_argument("--out", default=None)
    pa.set_defaults(fn=cmd_ablate)

    pi = sub.add_parser("inject-study", help="corruption injection grid")
    pi.add_argument("config")
    pi.add_argument("--out", default=None)
    pi.set_defaults(fn=cmd_inject_study)

    pv = sub.add_parser("verify", help="self-verification suites")
    pv.set_defaults(fn=cmd_verify)

    pp = sub.add_parser("report", help="rebuild reports from metrics files")
    pp.add_argument("run_dir")
    pp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
