"""Command-line driver: ``posefusion {simulate,fuse,eval,gradcheck,bench}``.

Exit codes: 0 success, 1 gradient check failed, 2 usage, 3 I/O or parse
error, 4 solver failure, 5 data length mismatch. Output files go to
``--out``, defaulting to ``$POSEFUSION_OUT`` or the current directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import (
    CORRUPTIONS,
    METHODS,
    BenchConfig,
    RobustnessConfig,
    make_streams,
    robustness_seed,
    robustness_verdict,
    run_seed,
    summarize,
)
from .dataio import Trajectory, load_rpr_csv, load_tum, save_rpr_csv, save_tum
from .errors import (
    LengthMismatch,
    NonMonotoneTimestamps,
    ParseError,
    SolverError,
    StreamLengthMismatch,
)
from .gradcheck import DEFAULT_STEP, DEFAULT_TOL, KERNELS, run_suite
from .metrics import evaluate
from .pose_graph import FusionConfig, SolverConfig, fuse_streams_with_stats

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_IO, EXIT_SOLVER, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5
OUT_ENV = "POSEFUSION_OUT"
REPORT_KEYS = ("e_med_p", "e_med_q", "d_e_med_p", "d_e_med_q", "e_ate_p", "e_atle_p", "frames")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Parsed and validated command line."""

    command: str
    seed: int
    out: Path
    fmt: str
    flags: dict = field(default_factory=dict)

    def echo(self) -> dict:
        d = {"command": self.command, "seed": self.seed, "out": str(self.out), "format": self.fmt}
        d.update({k: (str(v) if isinstance(v, Path) else v) for k, v in self.flags.items()})
        return d


# -- argument parsing ----------------------------------------------------------


def _stiffness_arg(text: str) -> tuple:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) not in (1, 6):
        raise argparse.ArgumentTypeError("stiffness takes 1 or 6 numbers")
    return tuple(vals * 6 if len(vals) == 1 else vals)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--format", dest="fmt", choices=("json", "csv", "both"), default="both",
                        help="machine-readable outputs to write (default both)")

    p = argparse.ArgumentParser(prog="posefusion", description="Absolute/relative pose fusion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write synthetic gt.tum, apr.tum and rpr.csv")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--rate", type=float, default=20.0, help="frame rate in Hz")
    s.add_argument("--amplitude", type=float, default=2.0, help="trajectory amplitude in m")
    s.add_argument("--apr-sigma-t", type=float, default=0.5)
    s.add_argument("--apr-sigma-theta", type=float, default=0.05)
    s.add_argument("--rpr-sigma-t", type=float, default=0.005)
    s.add_argument("--rpr-sigma-theta", type=float, default=0.001)
    s.add_argument("--rpr-bias", type=float, nargs=3, default=(0.001, 0.0, 0.0), metavar=("X", "Y", "Z"))

    f = sub.add_parser("fuse", parents=[common], help="sliding-window pose-graph fusion")
    f.add_argument("--apr", type=Path, default=None, help="absolute stream, TUM (default OUT/apr.tum)")
    f.add_argument("--rpr", type=Path, default=None, help="relative stream, CSV (default OUT/rpr.csv)")
    f.add_argument("--window", type=int, default=5)
    f.add_argument("--stride", type=int, default=1)
    f.add_argument("--skip", type=int, default=1, help="relative constraints link frames f and f+skip")
    f.add_argument("--apr-stiffness", type=_stiffness_arg, default=FusionConfig.apr_stiffness)
    f.add_argument("--rpr-stiffness", type=_stiffness_arg, default=FusionConfig.rpr_stiffness)
    f.add_argument("--drop-repeated", action="store_true", help="treat exact APR repeats as missing")
    f.add_argument("--jacobian", choices=("fd", "analytic"), default="fd")
    f.add_argument("--max-iters", type=int, default=SolverConfig.max_iters)
    f.add_argument("--verbose", action="store_true", help="print every window")

    e = sub.add_parser("eval", parents=[common], help="trajectory metrics report")
    e.add_argument("--est", type=Path, required=True, help="estimated trajectory, TUM")
    e.add_argument("--gt", type=Path, required=True, help="ground truth, TUM")
    e.add_argument("--rpr", type=Path, default=None, help="relative predictions, CSV (enables ATLE)")
    e.add_argument("--label", default="", help="row label for CSV output")
    e.add_argument("--name", default="report", help="output file stem (default report)")

    g = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    g.add_argument("--seeds", type=int, default=100)
    g.add_argument("--step", type=float, default=DEFAULT_STEP)
    g.add_argument("--tol", type=float, default=DEFAULT_TOL)
    g.add_argument("--kernels", nargs="+", choices=KERNELS, default=list(KERNELS))
    g.add_argument("--sabotage", choices=KERNELS, default=None, help=argparse.SUPPRESS)

    b = sub.add_parser("bench", parents=[common], help="seeded synthetic benchmark")
    b.add_argument("--seeds", type=int, default=20)
    b.add_argument("--frames", type=int, default=200)
    b.add_argument("--threshold", type=float, default=0.8, help="fused/apr ratio threshold")
    b.add_argument("--window", type=int, default=5)
    b.add_argument("--corruption", action="store_true", help="also run the APR corruption sweep")
    b.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    return p


def _validate(cmd: str, a: argparse.Namespace) -> None:
    def need(ok, msg):
        if not ok:
            raise UsageError(msg)

    if cmd == "simulate":
        need(a.frames >= 2, "--frames must be >= 2")
        need(a.rate > 0, "--rate must be > 0")
        need(min(a.apr_sigma_t, a.apr_sigma_theta, a.rpr_sigma_t, a.rpr_sigma_theta) >= 0, "noise sigmas must be >= 0")
    elif cmd == "fuse":
        need(a.window >= 2, "--window must be >= 2")
        need(a.stride >= 1, "--stride must be >= 1")
        need(a.stride < a.window, "--stride must be smaller than --window")
        need(a.skip >= 1, "--skip must be >= 1")
        need(a.max_iters >= 1, "--max-iters must be >= 1")
        need(min(a.apr_stiffness + a.rpr_stiffness) >= 0, "stiffness must be >= 0")
    elif cmd == "gradcheck":
        need(a.seeds >= 1, "--seeds must be >= 1")
        need(a.step > 0, "--step must be > 0")
        need(a.tol > 0, "--tol must be > 0")
    elif cmd == "bench":
        need(a.seeds >= 1, "--seeds must be >= 1")
        need(a.window >= 2, "--window must be >= 2")
        need(a.frames >= a.window, "--frames must be >= --window")
        need(a.jobs >= 1, "--jobs must be >= 1")
        if a.corruption:
            need(a.frames >= 120, "--corruption needs --frames >= 120 (the corrupted span is frames 80-120)")


def parse_config(argv=None) -> RunConfig:
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        _validate(a.command, a)
    except UsageError as exc:
        parser.error(str(exc))
    flags = {k: v for k, v in vars(a).items() if k not in ("command", "seed", "out", "fmt")}
    out = a.out if a.out is not None else Path(os.environ.get(OUT_ENV, "."))
    return RunConfig(a.command, a.seed, out, a.fmt, flags)


# -- output helpers ------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _wants(cfg: RunConfig, kind: str) -> bool:
    return cfg.fmt in (kind, "both")


def _bench_config(frames: int, window: int = 5, **noise) -> BenchConfig:
    return BenchConfig(frames=frames, fusion=FusionConfig(window=window), **noise)


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    fl = cfg.flags
    bcfg = replace(
        _bench_config(fl["frames"], window=2),
        rate_hz=fl["rate"],
        amplitude=fl["amplitude"],
        apr_sigma_t=fl["apr_sigma_t"],
        apr_sigma_theta=fl["apr_sigma_theta"],
        rpr_sigma_t=fl["rpr_sigma_t"],
        rpr_sigma_theta=fl["rpr_sigma_theta"],
        rpr_bias=tuple(fl["rpr_bias"]),
    )
    gt, apr, rpr, _ = make_streams(cfg.seed, bcfg)
    out = _out_dir(cfg)
    save_tum(gt, out / "gt.tum")
    save_tum(Trajectory(gt.timestamps, apr), out / "apr.tum")
    save_rpr_csv(rpr, out / "rpr.csv")
    print(f"simulate: seed={cfg.seed} frames={len(gt)} wrote gt.tum apr.tum rpr.csv to {out}")
    return EXIT_OK


def cmd_fuse(cfg: RunConfig) -> int:
    fl = cfg.flags
    apr_path = fl["apr"] or cfg.out / "apr.tum"
    rpr_path = fl["rpr"] or cfg.out / "rpr.csv"
    apr = load_tum(apr_path)
    rpr = load_rpr_csv(rpr_path)
    fcfg = FusionConfig(
        window=fl["window"], stride=fl["stride"], skip=fl["skip"],
        apr_stiffness=fl["apr_stiffness"], rpr_stiffness=fl["rpr_stiffness"], drop_repeated=fl["drop_repeated"],
    )
    scfg = SolverConfig(max_iters=fl["max_iters"], jacobian=fl["jacobian"])
    fused, stats = fuse_streams_with_stats(list(apr.poses), rpr, fcfg, scfg)
    out = _out_dir(cfg)
    save_tum(Trajectory(apr.timestamps, fused), out / "fused.tum")
    if fl["verbose"]:
        for k, s in enumerate(stats):
            print(f"window {k} start={s.start} energy_before={s.energy_before:.6g} "
                  f"energy_after={s.energy_after:.6g} iterations={s.iterations}")
    before = float(np.mean([s.energy_before for s in stats]))
    after = float(np.mean([s.energy_after for s in stats]))
    print(f"fuse: windows={len(stats)} mean_energy_before={before:.6g} mean_energy_after={after:.6g} "
          f"wrote {out / 'fused.tum'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    fl = cfg.flags
    est, gt = load_tum(fl["est"]), load_tum(fl["gt"])
    rpr = load_rpr_csv(fl["rpr"]) if fl["rpr"] is not None else None
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated poses for {len(gt)} ground-truth poses")
    report = evaluate(list(est.poses), list(gt.poses), rel_pred=rpr).as_dict()
    out = _out_dir(cfg)
    if _wants(cfg, "json"):
        _write_json(out / f"{fl['name']}.json", {**report, "config": cfg.echo()})
    if _wants(cfg, "csv"):
        _write_csv(out / f"{fl['name']}.csv", ("label",) + REPORT_KEYS,
                   [[fl["label"]] + ["" if report[k] is None else report[k] for k in REPORT_KEYS]])
    print(" ".join(f"{k}={report[k]}" for k in REPORT_KEYS))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    fl = cfg.flags
    reports = run_suite(fl["seeds"], fl["step"], fl["tol"], fl["kernels"], fl["sabotage"])
    width = max(len(r.kernel) for r in reports)
    print(f"{'kernel':<{width}}  seeds  worst_rel_error  worst_seed  status")
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.kernel:<{width}}  {r.seeds:5d}  {r.worst:15.3e}  {r.worst_seed:10d}  {status}")
    out = _out_dir(cfg)
    rows = [[r.kernel, r.seeds, r.worst, r.worst_seed, r.tolerance, r.passed] for r in reports]
    header = ("kernel", "seeds", "worst_rel_error", "worst_seed", "tolerance", "passed")
    if _wants(cfg, "json"):
        _write_json(out / "gradcheck.json", {"kernels": [dict(zip(header, row)) for row in rows],
                                             "config": cfg.echo()})
    if _wants(cfg, "csv"):
        _write_csv(out / "gradcheck.csv", header, rows)
    failed = [r.kernel for r in reports if not r.passed]
    if failed:
        print(f"gradcheck: FAILED kernels: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


class _SeedFailure(Exception):
    def __init__(self, seed: int, exc: SolverError):
        super().__init__(f"seed {seed}: {exc}")
        self.seed = seed
        self.window = exc.window


def _bench_one(args):
    seed, bcfg, corruption = args
    try:
        res = run_seed(seed, bcfg)
        rows = robustness_seed(seed, bcfg, RobustnessConfig()) if corruption else []
    except SolverError as exc:
        raise _SeedFailure(seed, exc) from None
    return res, rows


def cmd_bench(cfg: RunConfig) -> int:
    fl = cfg.flags
    bcfg = _bench_config(fl["frames"], fl["window"])
    seeds = list(range(cfg.seed, cfg.seed + fl["seeds"]))
    jobs = [(s, bcfg, fl["corruption"]) for s in seeds]
    if fl["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=fl["jobs"]) as pool:
            done = list(pool.map(_bench_one, jobs))
    else:
        done = [_bench_one(j) for j in jobs]
    results = [r for r, _ in done]
    rob_rows = [row for _, rows in done for row in rows]

    summary = summarize(results, fl["threshold"])
    summary["config"] = cfg.echo()
    summary["bench"] = {"frames": bcfg.frames, "window": bcfg.fusion.window, "apr_sigma_t": bcfg.apr_sigma_t,
                        "rpr_sigma_t": bcfg.rpr_sigma_t, "rpr_bias": list(bcfg.rpr_bias)}
    if fl["corruption"]:
        summary["robustness"] = {"kinds": list(CORRUPTIONS), "verdict": robustness_verdict(rob_rows)}

    out = _out_dir(cfg)
    if _wants(cfg, "json"):
        _write_json(out / "bench.json", summary)
    if _wants(cfg, "csv"):
        keys = [k for k in REPORT_KEYS if k != "frames"]
        rows = []
        for r in results:
            for m in METHODS:
                d = r.reports[m].as_dict()
                rows.append([r.seed, m] + ["" if d[k] is None else d[k] for k in keys] + [r.ratio])
        _write_csv(out / "bench.csv", ["seed", "method"] + keys + ["fused_apr_ratio"], rows)
        if fl["corruption"]:
            header = list(rob_rows[0]._fields) if rob_rows else []
            _write_csv(out / "robustness.csv", header, [list(row) for row in rob_rows])

    print(f"{'method':<16}{'e_med_p':>10}{'e_med_q':>10}{'e_ate_p':>10}{'e_atle_p':>10}")
    for m in METHODS:
        d = summary["methods"][m]
        atle = "-" if d["e_atle_p"] is None else f"{d['e_atle_p']:.4f}"
        print(f"{m:<16}{d['e_med_p']:>10.4f}{d['e_med_q']:>10.4f}{d['e_ate_p']:>10.4f}{atle:>10}")
    ratio = summary["ratio"]
    print(f"fused/apr ratio: median={ratio['median']:.4f} seeds<={ratio['threshold']}: "
          f"{ratio['seeds_within']}/{len(seeds)}")
    if fl["corruption"]:
        for kind, v in summary["robustness"]["verdict"].items():
            print(f"robustness {kind}: degradation_ok={v['degradation_ok']}/{v['seeds']} "
                  f"mask_monotone={v['mask_monotone']}/{v['seeds']}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    cfg = parse_config(argv)
    try:
        return COMMANDS[cfg.command](cfg)
    except _SeedFailure as exc:
        where = "" if exc.window is None else f" window {exc.window}"
        print(f"error: solver failed at seed {exc.seed}{where}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"error: solver failed at window {exc.window}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (LengthMismatch, StreamLengthMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, ParseError, NonMonotoneTimestamps) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
