"""Command line driver: simulate, run, compare, metrics."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import yaml

from robvio import metrics, plots
from robvio.runner import METHODS, RunResult, run_method
from robvio.sim import (PRESETS, ScenarioError, export_bundle, generate, load_bundle, load_scenario,
                        preset, save_scenario)

log = logging.getLogger("robvio")

TRACE_FLAGS = ("weights", "bias", "bcc")
METRIC_COLUMNS = ["method", "scenario", "seed", "ate_rmse", "rte_rmse", "recovery_count", "mean_ba_ms",
                  "status", "detail"]
TRAJ_COLUMNS = ["stamp", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "keyframe"]
BIAS_COLUMNS = ["stamp", "bax", "bay", "baz", "bwx", "bwy", "bwz",
                "gt_bax", "gt_bay", "gt_baz", "gt_bwx", "gt_bwy", "gt_bwz"]
BCC_COLUMNS = ["window", "n_a", "round", "stamp", "consistent", "max_ratio"]
COMPARE_COLUMNS = ["run", "method", "scenario", "seeds", "ate_rmse_mean", "rte_rmse_mean", "failures",
                   "mean_ba_ms"]


class CliError(RuntimeError):
    pass


def _f(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- scenarios

def resolve(ref, seed):
    """Return ``(scenario, bundle_or_None)`` for a preset name, YAML file or simulate output."""
    if ref in PRESETS:
        return preset(ref, seed=seed), None
    if os.path.isdir(ref):
        path = os.path.join(ref, "scenario.yaml")
        if not os.path.exists(path):
            raise CliError("%s has no scenario.yaml" % ref)
        sc = load_scenario(path)
        if sc.seed != seed:
            raise CliError("%s was simulated with seed %d, not %d" % (ref, sc.seed, seed))
        return sc, load_bundle(ref, sc)
    if os.path.isfile(ref):
        return replace(load_scenario(ref), seed=seed), None
    raise CliError("%r is neither a preset (%s) nor a scenario file" % (ref, ", ".join(PRESETS)))


def _onset(scenario):
    t = [c.motion.t_move for c in scenario.clusters if c.motion.kind == "abrupt"]
    return min(t) if t else None


# ---------------------------------------------------------------- simulate

def cmd_simulate(args):
    sc, bundle = resolve(args.scenario, args.seed)
    bundle = bundle or generate(sc)
    os.makedirs(args.out, exist_ok=True)
    save_scenario(sc, os.path.join(args.out, "scenario.yaml"))
    export_bundle(bundle, args.out)
    for w in bundle.warnings:
        log.warning("simulation warning: %s", w)
    log.info("wrote %d frames, %d IMU samples to %s", len(bundle.frames), len(bundle.imu_stamps), args.out)
    return 0


# ---------------------------------------------------------------- run

def _metric_row(res: RunResult, bundle):
    if res.failed:
        return [res.method, res.scenario, res.seed, "nan", "nan", res.recoveries, _f(res.mean_ba_ms),
                "failed", res.failure]
    pair = metrics.run_pair(res, bundle)
    _, _, rte_rmse = metrics.rte(pair)
    return [res.method, res.scenario, res.seed, _f(metrics.ate_rmse(pair)), _f(rte_rmse), res.recoveries,
            _f(res.mean_ba_ms), "ok", ""]


def run_seed(ref, method, seed, out_dir, trace):
    """Run one seed and write its per-seed files; returns the metrics row."""
    sc, bundle = resolve(ref, seed)
    bundle = bundle or generate(sc)
    res = run_method(bundle, sc, method, trace_weights="weights" in trace)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for t, x, kf in zip(res.stamps, res.states, res.keyframe):
        rows.append([_f(t), *map(_f, x.p_wb), *map(_f, x.q_wb), *map(_f, x.v_wb), int(kf)])
    _write_csv(os.path.join(out_dir, "trajectory.csv"), TRAJ_COLUMNS, rows)
    if "weights" in trace:
        _write_csv(os.path.join(out_dir, "weights.csv"), ["stamp", "feature_id", "weight"],
                   [[_f(t), fid, _f(w)] for t, fid, w in res.weights])
    if "bias" in trace:
        gt = {round(s.stamp, 9): s for s in bundle.gt_states}
        rows = []
        for t, x in zip(res.stamps, res.states):
            g = gt[round(t, 9)]
            rows.append([_f(t), *map(_f, x.b_a), *map(_f, x.b_w), *map(_f, g.b_a), *map(_f, g.b_w)])
        _write_csv(os.path.join(out_dir, "bias.csv"), BIAS_COLUMNS, rows)
    if "bcc" in trace:
        _write_csv(os.path.join(out_dir, "bcc.csv"), BCC_COLUMNS,
                   [[win, n_a, rnd, _f(t), int(ok), _f(max(ratios) if len(ratios) else 0.0)]
                    for win, t, n_a, rnd, ok, ratios in res.bcc])
    row = _metric_row(res, bundle)
    _write_csv(os.path.join(out_dir, "metrics.csv"), METRIC_COLUMNS, [row])
    return row


def parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError("bad seed list %r" % text) from exc
    if not seeds:
        raise CliError("at least one seed is required")
    return seeds


def parse_trace(text):
    flags = [s.strip() for s in (text or "").split(",") if s.strip()]
    bad = [f for f in flags if f not in TRACE_FLAGS]
    if bad:
        raise CliError("unknown trace flag(s) %s (choose from %s)" % (", ".join(bad), ", ".join(TRACE_FLAGS)))
    return tuple(flags)


def cmd_run(args):
    if args.method not in METHODS:
        raise CliError("unknown method %r (choose from %s)" % (args.method, ", ".join(METHODS)))
    seeds = parse_seeds(args.seeds)
    trace = parse_trace(args.trace)
    resolve(args.scenario, seeds[0])  # fail fast on a bad reference
    os.makedirs(args.out, exist_ok=True)
    jobs = [(args.scenario, args.method, s, os.path.join(args.out, "seed_%d" % s), trace) for s in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_seed, *zip(*jobs)))
    else:
        rows = [run_seed(*j) for j in jobs]
    _write_csv(os.path.join(args.out, "metrics.csv"), METRIC_COLUMNS, rows)
    spec = {"scenario": os.path.abspath(args.scenario) if os.path.exists(args.scenario) else args.scenario,
            "method": args.method, "seeds": seeds, "trace": list(trace)}
    with open(os.path.join(args.out, "run.yaml"), "w") as fh:
        yaml.safe_dump(spec, fh, sort_keys=False)
    for r in rows:
        log.info("%s %s seed %s: ate %s m, status %s", r[0], r[1], r[2], r[3], r[7])
    return 0


# ---------------------------------------------------------------- compare

def _load_metrics(run_dir):
    path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise CliError("%s has no metrics.csv" % run_dir)
    rows = _read_csv(path)
    if not rows:
        raise CliError("%s has an empty metrics.csv" % run_dir)
    return rows


def summarize(run_dir, rows):
    ok = [r for r in rows if r["status"] == "ok"]
    mean = (lambda k: float(np.mean([float(r[k]) for r in ok])) if ok else math.nan)
    ba = [float(r["mean_ba_ms"]) for r in rows]
    return {
        "run": os.path.basename(os.path.normpath(run_dir)),
        "method": ",".join(sorted({r["method"] for r in rows})),
        "scenario": ",".join(sorted({r["scenario"] for r in rows})),
        "seeds": len(rows),
        "ate_rmse_mean": mean("ate_rmse"),
        "rte_rmse_mean": mean("rte_rmse"),
        "failures": len(rows) - len(ok),
        "mean_ba_ms": float(np.mean(ba)),
    }


def compare(run_dirs):
    if len(run_dirs) < 2:
        raise CliError("compare needs at least two run directories")
    loaded = [(d, _load_metrics(d)) for d in run_dirs]
    keys = [(tuple(sorted({r["scenario"] for r in rows})), tuple(sorted(int(r["seed"]) for r in rows)))
            for _, rows in loaded]
    if len(set(k[0] for k in keys)) != 1:
        raise CliError("runs are on different scenarios: %s"
                       % "; ".join("%s=%s" % (d, ",".join(k[0])) for (d, _), k in zip(loaded, keys)))
    if len(set(k[1] for k in keys)) != 1:
        raise CliError("runs use different seed lists")
    return [summarize(d, rows) for d, rows in loaded]


def format_table(summary):
    def cell(v):
        return "%.4f" % v if isinstance(v, float) else str(v)
    table = [COMPARE_COLUMNS] + [[cell(s[c]) for c in COMPARE_COLUMNS] for s in summary]
    widths = [max(len(r[i]) for r in table) for i in range(len(COMPARE_COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in table)


def cmd_compare(args):
    summary = compare(args.dirs)
    print(format_table(summary))
    rows = [[_f(s[c]) if isinstance(s[c], float) else s[c] for c in COMPARE_COLUMNS] for s in summary]
    if args.out:
        _write_csv(args.out, COMPARE_COLUMNS, rows)
    else:
        print()
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        w.writerows(rows)
    return 0


# ---------------------------------------------------------------- metrics / report

def _load_trajectory(path):
    a = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return a[:, 0], a[:, 1:4]


def report_seed(seed_dir, scenario, bundle, method):
    """Recompute ATE/RTE for one seed directory and render its figures."""
    stamps, est_p = _load_trajectory(os.path.join(seed_dir, "trajectory.csv"))
    gt_stamps = [s.stamp for s in bundle.gt_states]
    gt_p = np.array([s.p_wb for s in bundle.gt_states])
    pair = metrics.make_pair(stamps, est_p, gt_stamps, gt_p)
    ate = metrics.ate_rmse(pair)
    t_rte, errs, rte_rmse = metrics.rte(pair)
    _write_csv(os.path.join(seed_dir, "rte.csv"), ["stamp", "error"], [[_f(t), _f(e)] for t, e in zip(t_rte, errs)])
    onset = _onset(scenario)
    title = "%s / %s / seed %d" % (method, scenario.name, scenario.seed)
    plots.plot_rte({method: (t_rte, errs)}, os.path.join(seed_dir, "rte.png"), title, onset)
    wpath = os.path.join(seed_dir, "weights.csv")
    if os.path.exists(wpath):
        rows = [(float(r["stamp"]), int(r["feature_id"]), float(r["weight"])) for r in _read_csv(wpath)]
        dyn = {fid for fid in bundle.feature_cluster if bundle.is_dynamic(fid)}
        plots.plot_weights(rows, dyn, os.path.join(seed_dir, "weights.png"), title, onset)
    bpath = os.path.join(seed_dir, "bias.csv")
    if os.path.exists(bpath):
        b = np.loadtxt(bpath, delimiter=",", skiprows=1, ndmin=2)
        plots.plot_bias(b[:, 0], b[:, 1:7], b[:, 7:13], os.path.join(seed_dir, "bias.png"), title)
    return ate, rte_rmse, (t_rte, errs)


def cmd_metrics(args):
    spec_path = os.path.join(args.dir, "run.yaml")
    if not os.path.exists(spec_path):
        raise CliError("%s has no run.yaml (not a run directory)" % args.dir)
    with open(spec_path) as fh:
        spec = yaml.safe_load(fh)
    rows = {int(r["seed"]): r for r in _load_metrics(args.dir)}
    series = {}
    out = []
    for seed in spec["seeds"]:
        seed_dir = os.path.join(args.dir, "seed_%d" % seed)
        sc, bundle = resolve(spec["scenario"], seed)
        bundle = bundle or generate(sc)
        ate, rte_rmse, s = report_seed(seed_dir, sc, bundle, spec["method"])
        series["seed %d" % seed] = s
        status = rows[seed]["status"] if seed in rows else "missing"
        out.append((seed, ate, rte_rmse, status))
        onset = _onset(sc)
    plots.plot_rte(series, os.path.join(args.dir, "rte.png"), "%s / %s" % (spec["method"], sc.name), onset)
    print("seed  ate_rmse  rte_rmse  status")
    for seed, ate, rte_rmse, status in out:
        print("%-5d %-9.4f %-9.4f %s" % (seed, ate, rte_rmse, status))
    return 0


# ---------------------------------------------------------------- entry

def build_parser():
    p = argparse.ArgumentParser(prog="robvio", description="Robust sliding-window VIO experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a scenario bundle")
    s.add_argument("scenario", help="preset name or scenario YAML file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run an estimator variant over seeds")
    r.add_argument("scenario", help="preset name, scenario YAML file or simulate output directory")
    r.add_argument("--method", required=True, help="one of %s" % ", ".join(METHODS))
    r.add_argument("--seeds", default="0", help="comma separated list")
    r.add_argument("--out", required=True)
    r.add_argument("--trace", default="", help="comma separated subset of %s" % ",".join(TRACE_FLAGS))
    r.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate several run directories")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--out", help="write the CSV table here instead of stdout")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("metrics", help="recompute metrics and render figures for a run directory")
    m.add_argument("dir")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ScenarioError, metrics.MetricsError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
