"""Command-line entry point: ``agentserve profile | run | compare``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .profiler.pfa import TraceError, group_by_workflow, read_traces, validate_trace
from .profiler.store import ProfileStore
from .sim.config import ConfigError, load_experiment, policy_from
from .sim.engine import Simulation, SimulationError
from .workflow.analysis import match_trace
from .workflow.pathexpr import path_expr_to_text

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# (label, path into the summary); queue depth rows are added per model
COMPARE_METRICS = [
    ("jct_mean_s", ("jct", "mean")),
    ("jct_p95_s", ("jct", "p95")),
    ("throughput_tok_s", ("throughput_tok_s",)),
    ("ttft_mean_s", ("ttft", "mean")),
    ("queuing_delay_mean_s", ("queuing_delay", "mean")),
    ("queuing_delay_p95_s", ("queuing_delay", "p95")),
    ("hit_ratio_L1", ("cache", "hit_ratio", "L1")),
    ("hit_ratio_L2", ("cache", "hit_ratio", "L2")),
    ("hit_ratio_L3", ("cache", "hit_ratio", "L3")),
    ("preemptions", ("preemptions",)),
]


# -- profile ----------------------------------------------------------------------


def _load_traces(paths):
    records, skipped = [], 0
    for path in paths:
        if not os.path.exists(path):
            raise ConfigError(f"trace file not found: {path}")
        recs, errors = read_traces(path)
        for lineno, msg in errors:
            print(f"{path}:{lineno}: skipped malformed line: {msg}", file=sys.stderr)
        skipped += len(errors)
        records.extend(recs)
    return records, skipped


def holdout_acceptance(store, records):
    """Per workflow type: (accepted, total) held-out traces."""
    out = {}
    for recs in group_by_workflow(records):
        wtype = recs[0].workflow_type_id
        expr = store.expression(wtype)
        ok, n = out.get(wtype, (0, 0))
        hit = expr is not None and match_trace(expr, [r.role_id for r in recs])
        out[wtype] = (ok + int(hit), n + 1)
    return dict(sorted(out.items()))


def cmd_profile(args) -> int:
    store = ProfileStore(theta=args.theta, confidence=args.confidence,
                         max_output_len=args.max_output_len)
    records, skipped = _load_traces(args.traces)
    n_traces = bad = 0
    for recs in group_by_workflow(records):
        try:
            validate_trace(recs)
        except TraceError as exc:
            print(f"skipped trace {recs[0].workflow_id}: {exc}", file=sys.stderr)
            bad += 1
            continue
        store.ingest(recs)
        n_traces += 1
    store.refresh()
    store.save(args.output)
    print(f"ingested {n_traces} traces ({len(records)} records), "
          f"skipped {skipped} lines and {bad} invalid traces")
    print(f"wrote {args.output}")
    for wtype, wf in sorted(store.workflows.items()):
        expr = path_expr_to_text(wf.synthesized) if wf.synthesized else "(none)"
        print(f"\n[{wtype}] {expr}")
        print(f"  {'role':<16}{'n':>7}{'mean':>10}{'cv':>7}{'lo':>8}{'u':>8}")
        for role, p in sorted(wf.profiles.items()):
            print(f"  {role:<16}{p.sample_count:>7}{p.mean_len:>10.1f}{p.cv:>7.3f}"
                  f"{p.lo:>8}{p.u:>8}")
    if not store.workflows:
        print("no roles profiled")
    if args.holdout:
        held, _ = _load_traces(args.holdout)
        print()
        for wtype, (ok, n) in holdout_acceptance(store, held).items():
            print(f"held-out acceptance [{wtype}]: {ok}/{n} = {ok / n:.4f}")
    return EXIT_OK


# -- run -----------------------------------------------------------------------------


def _apply_overrides(exp, args):
    if args.policy:
        names = list(dict.fromkeys(args.policy))
        exp.policies = [policy_from(name) for name in names]
        exp.raw = dict(exp.raw, policy=names)
    if args.seeds:
        exp.seeds = list(args.seeds)
    if args.output_dir:
        exp.output_dir = args.output_dir
    if args.concurrency:
        exp.concurrency = list(args.concurrency)
    if args.n_workflows is not None:
        exp.workload = replace(exp.workload, n_workflows=args.n_workflows)
    return exp


def _jobs(exp):
    sweep = exp.concurrency or [None]
    for conc in sweep:
        wl = exp.workload if conc is None else replace(exp.workload, concurrency=conc)
        out = exp.output_dir if conc is None else os.path.join(exp.output_dir,
                                                               f"concurrency_{conc}")
        for policy in exp.policies:
            for seed in exp.seeds:
                yield wl, exp.cluster, policy, seed, out


def _run_one(job):
    wl, cluster, policy, seed, out = job
    report = Simulation(wl, cluster, policy, seed).run()
    stem = os.path.join(out, f"{policy.name}_{seed}")
    report.write(stem + ".json")
    report.write_queue_csv(stem + "_queue.csv")
    report.write_jct_csv(stem + "_jct.csv")
    return stem + ".json", report.summary["jct"]["mean"]


def cmd_run(args) -> int:
    exp = _apply_overrides(load_experiment(args.config), args)
    jobs = list(_jobs(exp))
    for d in sorted({j[-1] for j in jobs}):
        os.makedirs(d, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    for path, jct in results:
        print(f"{path}  mean_jct={_fmt(jct)}")
    return EXIT_OK


# -- compare ---------------------------------------------------------------------


def _get(summary, path):
    cur = summary
    for key in path:
        if not isinstance(cur, dict) or key not in cur:
            return None
        cur = cur[key]
    if isinstance(cur, bool) or not isinstance(cur, (int, float)):
        return None
    return float(cur)


def _fmt(x):
    return "absent" if x is None else f"{x:.4g}"


def _label(summary, path):
    return f"{summary.get('policy', os.path.basename(path))}_{summary.get('seed', '?')}"


def compare_reports(reports, baseline=0):
    """Rows of (metric, [values], [baseline/candidate ratios]).

    ``reports`` is a list of (label, summary). A metric missing or null in a
    report is ``None`` in that column; its ratios are ``None`` too.
    """
    ids = {s.get("workload_id") for _, s in reports}
    if len(ids) != 1 or None in ids:
        raise ConfigError(f"reports come from different workloads: {sorted(map(str, ids))}")
    metrics = list(COMPARE_METRICS)
    models = sorted({m for _, s in reports for m in (s.get("queue_depth") or {})})
    for m in models:
        metrics.append((f"queue_waiting_{m}", ("queue_depth", m, "waiting")))
    rows = []
    for label, path in metrics:
        vals = [_get(s, path) for _, s in reports]
        base = vals[baseline]
        ratios = []
        for v in vals:
            if base is None or v is None:
                ratios.append(None)
            elif v == 0:
                ratios.append(1.0 if base == 0 else None)
            else:
                ratios.append(base / v)
        rows.append((label, vals, ratios))
    return rows


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise ConfigError("compare needs at least two reports")
    reports = []
    for path in args.reports:
        try:
            with open(path, encoding="utf-8") as fh:
                summary = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
        if not isinstance(summary, dict):
            raise ConfigError(f"{path}: not a report")
        reports.append((_label(summary, path), summary))
    labels = [lab for lab, _ in reports]
    if args.baseline is None:
        base = 0
    elif args.baseline in labels:
        base = labels.index(args.baseline)
    elif args.baseline in args.reports:
        base = args.reports.index(args.baseline)
    else:
        raise ConfigError(f"baseline {args.baseline!r} matches no report; have {labels}")
    rows = compare_reports(reports, base)
    header = ["metric"] + labels + [f"ratio_{lab}" for lab in labels]
    with open(args.csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for label, vals, ratios in rows:
            w.writerow([label] + ["absent" if v is None else repr(v) for v in vals + ratios])
    width = max(12, *(len(x) for x in labels))
    print(f"baseline: {labels[base]}  (ratio = baseline / candidate)")
    print(f"{'metric':<24}" + "".join(f"{lab:>{width + 2}}" for lab in labels)
          + "".join(f"{'x ' + lab:>{width + 4}}" for lab in labels))
    for label, vals, ratios in rows:
        print(f"{label:<24}" + "".join(f"{_fmt(v):>{width + 2}}" for v in vals)
              + "".join(f"{_fmt(r):>{width + 4}}" for r in ratios))
    print(f"wrote {args.csv}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def _int_csv(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser():
    parser = argparse.ArgumentParser(prog="agentserve", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="build a profile store from NDJSON traces")
    p.add_argument("traces", nargs="+", help="trace files (one JSON record per line)")
    p.add_argument("-o", "--output", default="profiles.json")
    p.add_argument("--theta", type=float, default=0.05, help="edge pruning threshold")
    p.add_argument("--confidence", type=float, default=0.99)
    p.add_argument("--max-output-len", type=int, default=16_384)
    p.add_argument("--holdout", nargs="+", help="trace files to score the synthesized expressions on")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config", help="YAML or JSON experiment file")
    p.add_argument("--policy", action="append",
                   help="policy preset (repeatable); replaces the file's policy list")
    p.add_argument("--seeds", type=_int_csv, help="e.g. 1,2,3")
    p.add_argument("--output-dir")
    p.add_argument("--concurrency", type=_int_csv, help="sweep, e.g. 8,16,32,64")
    p.add_argument("--n-workflows", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel simulation processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="tabulate reports against a baseline")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", help="report label (<policy>_<seed>) or path; default first")
    p.add_argument("--csv", default="comparison.csv")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
