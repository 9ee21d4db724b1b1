"""``safeguide`` command line: run a scenario, run the verification suites, or sweep.

Exit codes: 0 clean, 1 configuration error, 2 safety violation,
3 QP infeasible, 4 numerical failure (non-finite state).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import clf, sim, verify
from .errors import ConfigError
from .scenario import ScenarioFile, resolve, sample_initial_states

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3, 4
SWEEP_CHUNK = 128

log = logging.getLogger("safeguide")


def exit_code(tr: sim.Trajectory) -> int:
    if tr.error is not None:
        return EXIT_NUMERIC
    if tr.violation is None:
        return EXIT_OK
    return EXIT_VIOLATION if tr.violation[1] == "safety_violation" else EXIT_INFEASIBLE


def _num(x) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else format(x, ".17g")


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def write_csv(tr: sim.Trajectory, path: Path) -> None:
    cols = tr.columns
    numeric = [np.asarray(cols[k], float) for k in sim.CSV_COLUMNS[:-1]]
    with open(path, "w") as fh:
        fh.write(",".join(sim.CSV_COLUMNS) + "\n")
        for i in range(len(tr)):
            fh.write(",".join(_num(float(c[i])) for c in numeric) + "," + cols["qp_status"][i] + "\n")


def write_json(tr: sim.Trajectory, path: Path, meta: dict) -> None:
    doc = {"metadata": meta, "columns": list(sim.CSV_COLUMNS),
           "data": {k: (list(tr.columns[k]) if k == "qp_status" else np.asarray(tr.columns[k], float).tolist())
                    for k in sim.CSV_COLUMNS}}
    path.write_text(json.dumps(_json_safe(doc)))


def write_gnuplot(data: Path, path: Path, has_barrier: bool) -> None:
    """A small gnuplot script: path in the plane, then rho and h over time."""
    lines = ["set datafile separator ','", "set key autotitle columnhead",
             "set multiplot layout 1,2", "set size ratio -1",
             f"plot '{data.name}' using 'x':'y' with lines title 'path'", "set size noratio"]
    series = f"plot '{data.name}' using 't':'rho' with lines"
    if has_barrier:
        series += f", '' using 't':'h' with lines"
    lines += [series, "unset multiplot"]
    path.write_text("\n".join(lines) + "\n")


def run_metadata(sf: ScenarioFile, sc: sim.Scenario, tr: sim.Trajectory, report: sim.MonitorReport) -> dict:
    L = clf.lyapunov_data(sc.gains)
    return {
        "scenario": sf.name, "source": sf.source, "controller": sc.controller, "dt": sc.dt,
        "t_final": sc.t_final, "epsilon": sc.epsilon, "hold": sc.hold,
        "status": tr.status, "exit_code": exit_code(tr),
        "violation": {"t": tr.violation[0], "kind": tr.violation[1]} if tr.violation else None,
        "error": tr.error, "converged_at": tr.converged_at, "final_rho": tr.final_rho(),
        "min_h": tr.min_h(), "h_crossing": tr.h_crossing, "samples": len(tr),
        "classification": sim.classify(tr),
        "nu": sc.gains.nu, "nu_lower_bound": clf.nu_lower_bound(sc.gains, L), "c": L.c,
        "monitor": report.as_dict(),
    }


# ----------------------------------------------------------------- commands

def cmd_run(args) -> int:
    sf = ScenarioFile.load(resolve(args.file))
    sc = sf.to_scenario()
    tr = sim.run(sc)
    g = sc.gains
    report = sim.monitor_invariants(tr, g, clf.lyapunov_data(g), sc.barrier, sc.rho_stop)
    meta = run_metadata(sf, sc, tr, report)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = sf.name or Path(args.file).stem
    data = out / f"{stem}.{args.format}"
    if args.format == "csv":
        write_csv(tr, data)
        write_gnuplot(data, out / f"{stem}.gp", sc.barrier is not None)
    else:
        write_json(tr, data, meta)
    (out / f"{stem}_report.json").write_text(json.dumps(_json_safe(meta), indent=2) + "\n")

    print(f"scenario {stem}: {tr.status} ({meta['classification']}), {len(tr)} samples")
    print(f"  final rho {tr.final_rho():.6g}, converged at {tr.converged_at}")
    if sc.barrier is not None:
        print(f"  min h {tr.min_h():.6g}" + (f", h <= 0 first at t={tr.h_crossing:.6g}" if tr.h_crossing is not None
                                              else ""))
    for b in report.breaches:
        print(f"  monitor: {b}")
    if tr.violation:
        print(f"  {tr.violation[1]} at t={tr.violation[0]:.6g}", file=sys.stderr)
    print(f"  wrote {data}")
    return exit_code(tr)


def cmd_verify(args) -> int:
    checks = verify.run_suite(args.suite, args.samples, args.seed)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.ok]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return 1
    return 0


def thread_cap() -> int:
    raw = os.environ.get("SAFEGUIDE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SAFEGUIDE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SAFEGUIDE_THREADS must be a positive integer, got {raw!r}")
    return n


def _sweep_chunk(doc: dict, X0: np.ndarray) -> list:
    sc = ScenarioFile.from_dict(doc).to_scenario()
    out = []
    for tr in sim.integrate_batch(X0, sc, record=False):
        out.append({"status": tr.status, "class": sim.classify(tr), "final_rho": tr.final_rho(),
                    "min_h": tr.min_h(), "converged_at": tr.converged_at,
                    "violation_t": tr.violation[0] if tr.violation else None})
    return out


def sweep(sf: ScenarioFile, n: int, seed: int, workers: int | None = None) -> dict:
    """Run ``n`` random safe initial states and summarize them.

    Work is split into fixed chunks of :data:`SWEEP_CHUNK` states, so the
    result does not depend on how many worker processes run them.
    """
    X0 = sample_initial_states(sf, n, seed) if n else np.empty((0, 5))
    doc = sf.to_dict()
    chunks = [X0[i:i + SWEEP_CHUNK] for i in range(0, n, SWEEP_CHUNK)]
    workers = min(workers or thread_cap(), max(len(chunks), 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sweep_chunk, [doc] * len(chunks), chunks))
    else:
        parts = [_sweep_chunk(doc, c) for c in chunks]
    runs = [dict(id=i, x0=X0[i].tolist(), **r) for i, r in enumerate(x for p in parts for x in p)]
    counts = {k: sum(r["class"] == k for r in runs) for k in sim.RUN_CLASSES}
    not_stalled = n - counts["stalled"]
    return {"scenario": sf.name, "n": n, "seed": seed, "controller": sf.controller.get("kind", "qp"),
            "counts": counts,
            "convergence_rate": counts["converged"] / n if n else None,
            "convergence_rate_excluding_stalled": counts["converged"] / not_stalled if not_stalled else None,
            "runs": runs}


def cmd_sweep(args) -> int:
    sf = ScenarioFile.load(resolve(args.file))
    cfg = sf.sweep_settings()
    n = cfg["count"] if args.n is None else args.n
    if n < 0:
        raise ConfigError("--n must be nonnegative")
    seed = cfg["seed"] if args.seed is None else args.seed
    summary = sweep(sf, n, seed)
    text = json.dumps(_json_safe(summary), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    c = summary["counts"]
    print(f"{n} runs: {c['violation']} violations, {c['infeasible']} infeasible, {c['converged']} converged, "
          f"{c['stalled']} stalled, {c['unconverged']} unconverged, {c['error']} errors", file=sys.stderr)
    if c["violation"]:
        return EXIT_VIOLATION
    if c["infeasible"]:
        return EXIT_INFEASIBLE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safeguide", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings from the controller")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario file (or a bundled scenario name)")
    r.add_argument("file")
    r.add_argument("--out", default=".", help="output directory (default: current)")
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run numerical certificates")
    v.add_argument("suite", choices=verify.SUITES + ("all",))
    v.add_argument("--samples", type=int, default=None)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="simulate many random safe initial states")
    s.add_argument("file")
    s.add_argument("--n", type=int, default=None, help="number of runs (default: [sweep].count)")
    s.add_argument("--seed", type=int, default=None, help="sampling seed (default: [sweep].seed)")
    s.add_argument("--out", default=None, help="summary JSON path (default: stdout)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
