"""Command-line entry point.

    grcl gen-data --config FILE --out DIR
    grcl run      --config FILE --out DIR [--jobs K]
    grcl report   --in DIR
    grcl qp-trace --config FILE --out DIR [--steps K]

Exit codes: 0 success, 1 config error, 2 runtime failure in any run cell,
3 report input error. Setting GRCL_TRACE=1 writes a per-step trace.jsonl
next to each run's metrics.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics, plots, trainer
from .config import ConfigError, ExperimentConfig, load_config
from .domains import generate_sequence, load_dataset, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_REPORT = 0, 1, 2, 3


def _load_datasets(cfg: ExperimentConfig):
    if cfg.dataset_files:
        datasets = [load_dataset(p, num_classes=cfg.num_classes)
                    for p in cfg.dataset_files]
        datasets.sort(key=lambda d: d.domain_id)
        return datasets
    return generate_sequence(cfg.domain_spec())


def cmd_gen_data(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    for ds in generate_sequence(cfg.domain_spec()):
        path = out_dir / f"domain_{ds.domain_id}.csv"
        save_dataset(ds, path)
        print(f"wrote {path} ({len(ds.train)} train / {len(ds.test)} test rows)")
    return EXIT_OK


def _run_cell(cfg: ExperimentConfig, datasets, method: str, seed: int,
              cell_dir: Path, tracing: bool):
    cell_dir.mkdir(parents=True, exist_ok=True)
    trace_fh = None
    trace = None
    if tracing:
        trace_fh = open(cell_dir / "trace.jsonl", "w", encoding="utf-8")

        def trace(record):
            trace_fh.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        R = trainer.run_sequence(cfg.model_spec(), datasets,
                                 cfg.train_config(method, seed), trace=trace)
    finally:
        if trace_fh is not None:
            trace_fh.close()

    R.save_csv(cell_dir / "accuracy_matrix.csv")
    acc = metrics.compute_acc(R, denominator_n=cfg.acc_denominator_n)
    bwt = metrics.compute_bwt(R) if R.num_targets >= 2 else None
    payload = {method: {"acc": acc, "bwt": bwt, "seed": seed,
                        "rows": R.rows_list()}}
    with open(cell_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return acc, bwt


def _sample_std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def cmd_run(cfg: ExperimentConfig, out_dir: Path, jobs: int) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = _load_datasets(cfg)
    tracing = os.environ.get("GRCL_TRACE") == "1"
    cells = [(m, s) for m in cfg.methods for s in cfg.seeds]

    def work(cell):
        method, seed = cell
        cell_dir = out_dir / method / f"seed_{seed}"
        try:
            return cell, _run_cell(cfg, datasets, method, seed, cell_dir, tracing), None
        except Exception as exc:  # record and keep other cells running
            cell_dir.mkdir(parents=True, exist_ok=True)
            with open(cell_dir / "error.txt", "w", encoding="utf-8") as fh:
                fh.write(f"{type(exc).__name__}: {exc}\n")
            return cell, None, exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]

    failed = [(cell, exc) for cell, _, exc in results if exc is not None]
    by_method: dict[str, dict[int, tuple]] = {}
    for (method, seed), ok, _ in results:
        if ok is not None:
            by_method.setdefault(method, {})[seed] = ok

    lines = ["method,n_seeds,acc_mean,acc_std,bwt_mean,bwt_std,failures"]
    print(f"{'method':<16} {'ACC':>16} {'BWT':>16}")
    for method in cfg.methods:
        cells_ok = by_method.get(method, {})
        accs = [v[0] for v in cells_ok.values()]
        bwts = [v[1] for v in cells_ok.values() if v[1] is not None]
        n_fail = sum(1 for (m, _), e in failed if m == method)
        if accs:
            am, asd = float(np.mean(accs)), _sample_std(accs)
            bm = float(np.mean(bwts)) if bwts else float("nan")
            bsd = _sample_std(bwts) if bwts else float("nan")
            lines.append(f"{method},{len(accs)},{am:.17g},{asd:.17g},"
                         f"{bm:.17g},{bsd:.17g},{n_fail}")
            print(f"{method:<16} {am:>7.4f} ±{asd:<7.4f} {bm:>7.4f} ±{bsd:<7.4f}")
        else:
            lines.append(f"{method},0,,,,,{n_fail}")
            print(f"{method:<16} {'all cells failed':>16}")
    with open(out_dir / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    for (method, seed), exc in failed:
        print(f"FAILED {method}/seed_{seed}: {exc}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def _read_results(results_dir: Path):
    """Per-method, per-seed metrics payloads from a cmd_run output tree."""
    if not results_dir.is_dir():
        raise FileNotFoundError(f"{results_dir} is not a directory")
    found = {}
    for metrics_path in sorted(results_dir.glob("*/seed_*/metrics.json")):
        method = metrics_path.parent.parent.name
        with open(metrics_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if method not in payload:
            raise ValueError(f"{metrics_path}: missing method key {method!r}")
        entry = payload[method]
        found.setdefault(method, []).append(entry)
    if not found:
        raise FileNotFoundError(f"no metrics.json files under {results_dir}")
    return found


def cmd_report(results_dir: Path) -> int:
    try:
        found = _read_results(results_dir)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_REPORT

    print(f"{'method':<16} {'ACC':>16} {'BWT':>16}")
    summary_rows = []
    for method in sorted(found):
        entries = found[method]
        accs = [e["acc"] for e in entries]
        bwts = [e["bwt"] for e in entries if e["bwt"] is not None]
        am, asd = float(np.mean(accs)), _sample_std(accs)
        bm = float(np.mean(bwts)) if bwts else float("nan")
        bsd = _sample_std(bwts) if bwts else float("nan")
        summary_rows.append((method, am, asd, bm, bsd))
        print(f"{method:<16} {am:>7.4f} ±{asd:<7.4f} {bm:>7.4f} ±{bsd:<7.4f}")

    # accuracy on the first target domain after each task, per method
    evolution = {}
    for method in sorted(found):
        per_seed = []
        for e in found[method]:
            rows = e["rows"]
            if len(rows) >= 2:
                per_seed.append([rows[i][1] for i in range(1, len(rows))])
        if per_seed:
            evolution[method] = np.mean(np.array(per_seed), axis=0).tolist()
    if evolution:
        n_tasks = len(next(iter(evolution.values())))
        methods = sorted(evolution)
        with open(results_dir / "evolution_domain1.csv", "w", encoding="utf-8") as fh:
            fh.write("tasks_observed," + ",".join(methods) + "\n")
            for i in range(n_tasks):
                fh.write(f"{i + 1},"
                         + ",".join(f"{evolution[m][i]:.17g}" for m in methods) + "\n")
        plots.plot_first_domain_evolution(
            evolution, results_dir / "evolution_domain1.png")

    # final source accuracy vs mean accuracy over target domains
    st_rows = []
    for method in sorted(found):
        src, tgt = [], []
        for e in found[method]:
            final = e["rows"][-1]
            src.append(final[0])
            if len(final) > 1:
                tgt.append(float(np.mean(final[1:])))
        st_rows.append((method, float(np.mean(src)),
                        float(np.mean(tgt)) if tgt else float("nan")))
    with open(results_dir / "source_target.csv", "w", encoding="utf-8") as fh:
        fh.write("method,source_acc,target_acc_mean\n")
        for method, s, t in st_rows:
            fh.write(f"{method},{s:.17g},{t:.17g}\n")
    plots.plot_source_target(st_rows, results_dir / "source_target.png")
    plots.plot_summary(summary_rows, results_dir / "summary.png")
    print(f"wrote evolution_domain1.csv/.png, source_target.csv/.png, "
          f"summary.png under {results_dir}")
    return EXIT_OK


def cmd_qp_trace(cfg: ExperimentConfig, out_dir: Path, max_steps: int) -> int:
    """Debug dump of the per-step projection state for the first method/seed."""
    out_dir.mkdir(parents=True, exist_ok=True)
    method = cfg.methods[0]
    seed = cfg.seeds[0]
    tcfg = cfg.train_config(method, seed)
    if not tcfg.is_projected:
        print(f"method {method!r} does not project gradients", file=sys.stderr)
        return EXIT_CONFIG
    datasets = _load_datasets(cfg)
    rows = []

    def trace(record):
        if "distortion" not in record or len(rows) >= max_steps:
            return
        labels = record["constraints"]
        rows.append({
            "task": record["task"], "step": record["step"],
            "distortion": record["distortion"],
            "violated": dict(zip(labels, record["violated"])),
            "multipliers": dict(zip(labels, record["multipliers"])),
        })

    trainer.run_sequence(cfg.model_spec(), datasets, tcfg, trace=trace)
    all_labels = sorted({l for r in rows for l in r["violated"]})
    with open(out_dir / "qp_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("task,step,distortion,"
                 + ",".join(f"violated_{l}" for l in all_labels) + ","
                 + ",".join(f"u_{l}" for l in all_labels) + "\n")
        for r in rows:
            fh.write(f"{r['task']},{r['step']},{r['distortion']:.17g},"
                     + ",".join(str(int(r["violated"].get(l, False)))
                                for l in all_labels) + ","
                     + ",".join(f"{r['multipliers'].get(l, 0.0):.17g}"
                                for l in all_labels) + "\n")
    print(f"wrote {out_dir / 'qp_trace.csv'} ({len(rows)} projected steps)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grcl",
        description="Continual domain adaptation benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="write one CSV per domain")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)

    p_run = sub.add_parser("run", help="run every (method, seed) cell")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--jobs", type=int, default=1)

    p_rep = sub.add_parser("report", help="summarize a results directory")
    p_rep.add_argument("--in", dest="results_dir", required=True)

    p_qp = sub.add_parser("qp-trace", help="dump per-step projection state")
    p_qp.add_argument("--config", required=True)
    p_qp.add_argument("--out", required=True)
    p_qp.add_argument("--steps", type=int, default=200)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(load_config(args.config), Path(args.out))
        if args.command == "run":
            return cmd_run(load_config(args.config), Path(args.out),
                           max(1, args.jobs))
        if args.command == "report":
            return cmd_report(Path(args.results_dir))
        if args.command == "qp-trace":
            return cmd_qp_trace(load_config(args.config), Path(args.out),
                                max(1, args.steps))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    raise AssertionError("unreachable")


if __name__ == "__main__":
    raise SystemExit(main())
