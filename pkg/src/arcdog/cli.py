"""Command-line entry point: ``arcdog <subcommand> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. Failures print one line to stderr::

    arcdog: error kind=<kind> exit=<code> message=<text>
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from .errors import ArcdogError, ConfigError, DataError

log = logging.getLogger("arcdog")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser, data=True, out=True):
    p.add_argument("--config", help="YAML or JSON run config")
    if data:
        p.add_argument("--data", help="dataset cache (.bin) or ingestion CSV")
    if out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _experiment_axes(p, multi_c=False):
    p.add_argument("--test-region", type=int, choices=range(4))
    if multi_c:
        p.add_argument("--c", type=float, nargs="+", help="c values to sweep")
    else:
        p.add_argument("--c", type=float, help="regression weight c")
    p.add_argument("--climate-input", choices=D.CLIMATE_MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arcdog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset cache")
    _common(p, data=False)

    p = sub.add_parser("ingest", help="convert an ingestion CSV into a dataset cache")
    _common(p, data=False)
    p.add_argument("input", help="CSV file")
    p.add_argument("--no-curate", action="store_true",
                   help="reject labels outside the curated class list instead of dropping them")

    p = sub.add_parser("train", help="train one leave-one-out run")
    _common(p)
    _experiment_axes(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a region")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-region", type=int, choices=range(4))

    p = sub.add_parser("grid", help="run the c or climate-input experiment grid")
    _common(p)
    _experiment_axes(p, multi_c=True)
    p.add_argument("--sweep", choices=("c", "climate"))
    p.add_argument("--trials", type=int)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("knn", help="cross-region 1-NN maps on climate or model features")
    _common(p)
    p.add_argument("--test-region", type=int, choices=range(4))
    p.add_argument("--checkpoint", help="use max-pool features of this model instead of climate")
    p.add_argument("--climate-subset", choices=("all", "temperature", "precipitation"), default="all")
    p.add_argument("--no-raster", action="store_true")

    p = sub.add_parser("report", help="collate per-run metrics JSON into the summary")
    p.add_argument("runs", help="directory of per-run metrics JSON files")
    p.add_argument("--out", help="output directory (default: parent of runs)")
    p.add_argument("--metric", choices=("macro", "overall"), default="macro")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args, cfg: C.RunConfig) -> Path:
    out = args.out or cfg.output
    if not out:
        raise ConfigError("no output directory: pass --out or set 'output' in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_dataset(args, cfg: C.RunConfig) -> D.Dataset:
    path = getattr(args, "data", None) or cfg.data
    if not path:
        raise ConfigError("no dataset: pass --data or set 'data' in the config")
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset {path} does not exist")
    if path.suffix.lower() == ".csv":
        return D.ingest_csv(path)
    return D.load_cache(path)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _stats_doc(ds: D.Dataset) -> dict:
    return {
        "samples": len(ds),
        "classes": ds.class_names,
        "class_counts": np.bincount(ds.labels, minlength=ds.num_classes).tolist(),
        "region_counts": np.bincount(ds.regions, minlength=4).tolist(),
        "median_lat": ds.median_lat,
        "median_lon": ds.median_lon,
        "imputed_cells": ds.imputed_cells,
        "normalization": ds.stats.to_dict() if ds.stats else None,
        "provenance": ds.provenance,
    }


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", text).strip("_")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, cfg):
    cfg = C.override(cfg, "synthetic", seed=args.seed)
    out = _out_dir(args, cfg)
    ds = D.generate_synthetic(cfg.synthetic)
    D.save_cache(ds, out / "dataset.bin")
    _write_json(out / "stats.json", _stats_doc(ds))
    C.write_echo(cfg, out)
    print(f"wrote {out / 'dataset.bin'} ({len(ds)} samples)")


def cmd_ingest(args, cfg):
    out = _out_dir(args, cfg)
    ds = D.ingest_csv(args.input, curate=not args.no_curate)
    D.save_cache(ds, out / "dataset.bin")
    _write_json(out / "stats.json", _stats_doc(ds))
    C.write_echo(cfg, out, {"input": str(args.input)})
    print(f"wrote {out / 'dataset.bin'} ({len(ds)} samples, "
          f"{ds.imputed_cells} imputed cells, {ds.provenance.get('dropped_rows', 0)} rows dropped)")


def _train_setup(args, cfg):
    cfg = C.override(cfg, "train", seed=args.seed)
    cfg = C.override(cfg, "loss", c=args.c)
    exp = {}
    if args.test_region is not None:
        exp["test_regions"] = [args.test_region]
    if args.climate_input is not None:
        exp["climate_input"] = args.climate_input
    return C.override(cfg, "experiment", **exp)


def cmd_train(args, cfg):
    from . import model as M
    from .plotting import training_curves
    from .training import run_metrics, train

    cfg = _train_setup(args, cfg)
    exp = cfg.experiment_config()
    if len(exp.test_regions) != 1:
        raise ConfigError("train needs exactly one test region (--test-region)")
    region = exp.test_regions[0]
    mode = exp.climate_input
    out = _out_dir(args, cfg)
    ds = _load_dataset(args, cfg)
    plan = D.SplitPlan(region, exp.validation_fraction, cfg.train.seed)
    res = train(ds, plan, cfg.model, cfg.loss, cfg.train, mode)
    echo = cfg.to_dict()
    echo["model"] = asdict(res.model_config)
    echo["resolved"] = {"test_region": region, "climate_input": mode,
                        "batch_size": cfg.train.resolved_batch_size(len(ds))}
    metrics = run_metrics(res, echo)
    _write_json(out / "metrics.json", metrics)
    M.save_checkpoint(out / "checkpoint.bin", res.params, res.model_config, extra={
        "climate_input": mode,
        "test_region": region,
        "seed": cfg.train.seed,
        "stats": res.stats.to_dict(),
        "class_names": ds.class_names,
    })
    C.write_echo(cfg, out)
    training_curves(out / "training_curves.png", res.epoch_log,
                    f"test region {region}, climate {mode}, c = {cfg.loss.c:g}")
    test = res.metrics.get("test")
    summary = f"test macro {test.macro_accuracy:.4f} overall {test.overall_accuracy:.4f}" if test else ""
    print(f"trained {len(res.epoch_log)} epochs (best {res.best_epoch}); {summary}")


def _checkpoint_stats(extra) -> D.NormalizationStats:
    s = extra["stats"]
    return D.NormalizationStats(*(np.asarray(s[k], dtype=np.float64) for k in
                                  ("obs_mean", "obs_std", "climate_mean", "climate_std")))


def cmd_eval(args, cfg):
    from . import model as M
    from .analysis import compute_metrics
    from .training import predict

    params, mcfg, extra = M.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args, cfg)
    region = extra.get("test_region") if args.test_region is None else args.test_region
    idx = np.flatnonzero(ds.regions == region)
    if not len(idx):
        raise DataError(f"region {region} has no samples")
    x = D.make_model_input(ds, extra["climate_input"], _checkpoint_stats(extra), idx)
    pred, _ = predict(params, x, mcfg)
    report = compute_metrics(pred.numpy(), ds.labels[idx], ds.num_classes).to_dict()
    doc = {"checkpoint": str(args.checkpoint), "region": region, "metrics": report}
    out = args.out or cfg.output
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(out) / f"eval_region{region}.json", doc)
    print(json.dumps({"region": region, "macro_accuracy": report["macro_accuracy"],
                      "overall_accuracy": report["overall_accuracy"], "count": report["count"]}))


def _write_summaries(out: Path, grid_or_rows, metric_rows_fn, title: str):
    from .plotting import grid_summary

    paths = []
    for metric in ("macro", "overall"):
        header, rows = metric_rows_fn(metric)
        name = "summary.csv" if metric == "macro" else "summary_overall.csv"
        _write_csv(out / name, header, rows)
        paths.append(out / name)
        if metric == "macro" and rows:
            grid_summary(out / "summary.png", header, rows, title)
    return paths


def cmd_grid(args, cfg):
    from .training import run_experiment_grid, summary_rows

    cfg = C.override(cfg, "experiment", sweep=args.sweep, trials=args.trials, base_seed=args.seed,
                      c_values=args.c, climate_input=args.climate_input,
                      test_regions=None if args.test_region is None else [args.test_region])
    exp = cfg.experiment_config()
    out = _out_dir(args, cfg)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    ds = _load_dataset(args, cfg)
    C.write_echo(cfg, out)

    def persist(run):
        name = f"{_slug(run.setting.label)}_r{run.test_region}_s{run.seed}.json"
        doc = run.metrics if run.metrics is not None else {
            "config": {"setting": asdict(run.setting), "test_region": run.test_region},
            "seed": run.seed, "error": run.error}
        _write_json(runs_dir / name, doc)
        log.info("finished %s", name)

    grid = run_experiment_grid(ds, exp, jobs=args.jobs, on_run=persist)
    title = "c sweep" if exp.sweep == "c" else "climate input ablation"
    _write_summaries(out, grid, lambda m: summary_rows(grid, m), title)
    header, rows = summary_rows(grid)
    print(",".join(header))
    for r in rows:
        print(",".join(r))
    failed = sum(1 for r in grid.runs if r.error)
    if failed:
        print(f"{failed} run(s) failed; see {runs_dir}", file=sys.stderr)


def cmd_knn(args, cfg):
    from . import analysis as A
    from .plotting import heatmap

    cfg = C.override(cfg, "train", seed=args.seed)
    out = _out_dir(args, cfg)
    ds = _load_dataset(args, cfg)
    regions = range(4) if args.test_region is None else [args.test_region]
    params = mcfg = extra = None
    if args.checkpoint:
        from . import model as M
        from .training import predict

        params, mcfg, extra = M.load_checkpoint(args.checkpoint)
    written = []
    for region in regions:
        test = np.flatnonzero(ds.regions == region)
        train = np.flatnonzero(ds.regions != region)
        if not len(test):
            continue
        if params is not None:
            stats = _checkpoint_stats(extra)
            _, f_train = predict(params, D.make_model_input(ds, extra["climate_input"], stats, train), mcfg)
            _, f_test = predict(params, D.make_model_input(ds, extra["climate_input"], stats, test), mcfg)
            res = A.knn_features(f_train.numpy(), ds.regions[train], f_test.numpy(), ds.lat[test], ds.lon[test])
            kind = "features"
        else:
            cols = ds.climate_columns(args.climate_subset)
            res = A.knn_climate(ds.climate[train], ds.regions[train], ds.climate[test],
                                columns=cols, lat=ds.lat[test], lon=ds.lon[test])
            kind = f"climate_{args.climate_subset}"
        prefix = out / f"knn_{kind}_region{region}"
        written += A.emit_knn(res, prefix, raster=not args.no_raster, grid_lat=ds.lat, grid_lon=ds.lon)
        heatmap(prefix.with_name(prefix.name + "_region.png"), res.lat, res.lon, res.nearest_region,
                f"region {region}: nearest training region ({kind})", categorical=True)
        heatmap(prefix.with_name(prefix.name + "_distance.png"), res.lat, res.lon,
                res.nearest_distance, f"region {region}: nearest distance ({kind})")
        written += [prefix.with_name(prefix.name + s) for s in ("_region.png", "_distance.png")]
    C.write_echo(cfg, out, {"knn": {"checkpoint": args.checkpoint, "climate_subset": args.climate_subset}})
    for p in written:
        print(p)


def collate_runs(runs_dir: Path, metric: str = "macro"):
    """Rebuild the summary table from per-run metrics JSON files."""
    key = "macro_accuracy" if metric == "macro" else "overall_accuracy"
    cells: dict[tuple[str, int], list[float]] = {}
    failed: set[tuple[str, int]] = set()
    order: list[str] = []
    regions: set[int] = set()
    files = sorted(Path(runs_dir).glob("*.json"))
    if not files:
        raise DataError(f"no run JSON files in {runs_dir}")
    for f in files:
        doc = json.loads(f.read_text(encoding="utf-8"))
        setting = doc["config"]["setting"]
        label, region = setting["label"], int(doc["config"]["test_region"])
        regions.add(region)
        if label not in order:
            order.append(label)
        if doc.get("error"):
            failed.add((label, region))
            continue
        cells.setdefault((label, region), []).append(doc["metrics"]["test"][key])

    from .training import MODE_LABELS

    modes = list(MODE_LABELS.values())

    def rank(label):
        # baseline, then c ascending, then climate modes in table order
        if label == "Baseline":
            return (0, 0.0)
        m = re.fullmatch(r"c = (.+)", label)
        if m:
            return (1, float(m.group(1)))
        return (2, float(modes.index(label)) if label in modes else 99.0)

    cols = sorted(regions)
    header = ["method", "metric", *[str(r) for r in cols]]
    rows = []
    for label in sorted(order, key=rank):
        row = [label, f"{metric}_accuracy"]
        for r in cols:
            vals = cells.get((label, r))
            row.append("failed" if (label, r) in failed or not vals else f"{float(np.mean(vals)):.4f}")
        rows.append(row)
    return header, rows


def cmd_report(args, cfg):
    runs = Path(args.runs)
    if not runs.is_dir():
        raise DataError(f"{runs} is not a directory")
    out = Path(args.out) if args.out else runs.parent
    out.mkdir(parents=True, exist_ok=True)
    _write_summaries(out, None, lambda m: collate_runs(runs, m), "collated runs")
    header, rows = collate_runs(runs, args.metric)
    print(",".join(header))
    for r in rows:
        print(",".join(r))


COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "knn": cmd_knn,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = C.load(getattr(args, "config", None))
        COMMANDS[args.command](args, cfg)
    except ArcdogError as exc:
        print(f"arcdog: error kind={exc.kind} exit={exc.exit_code} message={exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"arcdog: error kind=io exit=2 message={exc}", file=sys.stderr)
        return 2
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
