"""Command-line entry point.

Subcommands: gen-data, run, anatomy, spectra, emit-plots, ablation and
init-config. Settings resolve as command-line flag, then environment
(NSGP_REPRE_OUTPUT_DIR, NSGP_REPRE_SEED), then config file, then defaults.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import container, data, harness
from .nsgp import NumericalError

log = logging.getLogger("nsgp_repre")


def _config(args) -> harness.ExperimentConfig:
    cfg = (harness.ExperimentConfig.from_json(args.config, env={}) if args.config
           else harness.ExperimentConfig())
    cfg = cfg.apply_env()
    if getattr(args, "method", None):
        cfg = dataclasses.replace(cfg, method=args.method)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=str(args.out))
    return cfg


def _out_dir(cfg: harness.ExperimentConfig, default: str) -> Path:
    return Path(cfg.output_dir) if cfg.output_dir else Path("runs") / default


def _write_json(path, doc) -> None:
    container.atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def cmd_init_config(args) -> int:
    text = json.dumps(harness.ExperimentConfig().to_dict(), indent=1, sort_keys=True) + "\n"
    if args.path:
        container.atomic_write_text(args.path, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, f"data-seed{cfg.task.seed}")
    stages = data.generate(cfg.task)
    data.save(stages, out / "datasets.bin")
    if args.csv:
        data.save(stages, out / "datasets.csv")
    _write_json(out / "task.json", {"task": cfg.task.to_dict(), "sha256": data.checksum(stages)})
    print(f"wrote {len(stages)} stages to {out} (sha256 {data.checksum(stages)})")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, f"{cfg.method}-seed{cfg.seed}")
    stages = data.load(args.data) if args.data else None
    result = harness.run_experiment(cfg, stages)
    result.record.validate()
    harness.write_run(result, out)
    if stages is not None:
        data.save(stages, out / "datasets.bin")
    summary = result.record.summary()
    print(f"{cfg.method} seed={cfg.seed}: avg old-stage accuracy {summary['avg_old_accuracy']:.4f}, "
          f"avg accuracy {summary['avg_accuracy']:.4f} -> {out}")
    return 0


def _run_tests(run: Path, cfg: harness.ExperimentConfig):
    stored = run / "datasets.bin"
    stages = data.load(stored) if stored.exists() else data.generate(cfg.task)
    return [s.test for s in stages]


def cmd_anatomy(args) -> int:
    run = Path(args.run)
    cfg, _, checkpoints = harness.load_run(run)
    if cfg.method == "joint":
        raise ValueError("anatomy needs per-stage checkpoints; joint runs have one")
    tests = data.load(args.data) if args.data else None
    tests = [s.test for s in tests] if tests else _run_tests(run, cfg)
    rows = harness.anatomy_report(checkpoints, tests)
    container.atomic_write_text(run / "anatomy.csv", harness.rows_to_csv(rows, harness.ANATOMY_COLUMNS))
    _write_json(run / "anatomy.json", {"schema_version": harness.SCHEMA_VERSION, "rows": rows})
    last = max(r["model_stage"] for r in rows)
    for r in rows:
        if r["model_stage"] == last and r["eval_stage"] < last:
            print(f"stage {r['eval_stage']}: plain acc {r['plain_accuracy']:.3f} vs fresh {r['fresh_accuracy']:.3f}; "
                  f"designated mse {r['designated_mse']:.4f} vs fresh {r['fresh_mse']:.4f}")
    return 0


def cmd_spectra(args) -> int:
    run = Path(args.run)
    rows = harness.spectra_rows(run)
    if not rows:
        raise ValueError(f"{run} holds no projections (method without null-space projection?)")
    container.atomic_write_text(run / "spectra.csv", harness.rows_to_csv(rows, ["layer", "index", "lambda"]))
    print(f"wrote {len(rows)} singular values to {run / 'spectra.csv'}")
    return 0


def _read_spectra(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"layer": int(r["layer"]), "index": int(r["index"]), "lambda": float(r["lambda"])} for r in rows]


def cmd_emit_plots(args) -> int:
    from . import plots

    run = Path(args.run)
    written = []
    metrics = run / "metrics.json"
    if metrics.exists():
        record = harness.MetricsRecord.from_json(metrics.read_text())
        written.append(plots.accuracy_heatmap(record, run / "plots" / "accuracy.png"))
    if (run / "anatomy.json").exists():
        rows = json.loads((run / "anatomy.json").read_text())["rows"]
        written.append(plots.anatomy_curves(rows, run / "plots" / "anatomy.png"))
    if (run / "spectra.csv").exists():
        written.append(plots.spectra_plot(_read_spectra(run / "spectra.csv"), run / "plots" / "spectra.png"))
    if (run / "ablation.json").exists():
        table = json.loads((run / "ablation.json").read_text())["table"]
        written.append(plots.ablation_bars(table, run / "plots" / "ablation.png"))
    if not written:
        raise FileNotFoundError(f"nothing to plot in {run}")
    for p in written:
        print(p)
    return 0


def cmd_ablation(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, "ablation")
    methods = args.methods.split(",")
    results = harness.ablation(cfg, methods, range(args.seeds))
    table = harness.ablation_table(results)
    for method, records in results.items():
        for rec in records:
            rec.validate()
            harness.emit(rec, "csv", out / "runs" / f"{method}-seed{rec.seed}.csv")
    container.atomic_write_text(out / "ablation.csv", harness.rows_to_csv(table, list(table[0])))
    _write_json(out / "ablation.json", {"schema_version": harness.SCHEMA_VERSION, "config": cfg.to_dict(),
                                        "table": table})
    for row in table:
        print(f"{row['method']:>18s}  median avg old-stage accuracy {row['median_avg_old_accuracy']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nsgp-repre", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, method=False):
        p.add_argument("--config", help="experiment config JSON (see init-config)")
        p.add_argument("--seed", type=int, help="data and training seed")
        p.add_argument("--out", help="output directory")
        if method:
            p.add_argument("--method", choices=sorted(harness.METHODS))
        return p

    p = sub.add_parser("init-config", help="print or write the default config JSON")
    p.add_argument("path", nargs="?")
    p.set_defaults(func=cmd_init_config)

    p = with_config(sub.add_parser("gen-data", help="generate the synthetic task"))
    p.add_argument("--csv", action="store_true", help="also write datasets.csv")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("run", help="run one incremental experiment"), method=True)
    p.add_argument("--data", help="datasets file from gen-data instead of regenerating")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("anatomy", help="plain vs designated-classification table for a run")
    p.add_argument("run")
    p.add_argument("--data", help="datasets file (default: regenerate from the run config)")
    p.set_defaults(func=cmd_anatomy)

    p = sub.add_parser("spectra", help="dump singular-value spectra of a run's projections")
    p.add_argument("run")
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("emit-plots", help="render PNG figures for a run or ablation directory")
    p.add_argument("run")
    p.set_defaults(func=cmd_emit_plots)

    p = with_config(sub.add_parser("ablation", help="all methods over several seeds"))
    p.add_argument("--methods", default=",".join(harness.METHODS))
    p.add_argument("--seeds", type=int, default=5, help="run seeds 0..N-1")
    p.set_defaults(func=cmd_ablation)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, NumericalError, container.ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
