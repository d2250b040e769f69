"""Command-line entry point: ``tailfuse estimate|compare|pot|mrl``.

Exit codes: 0 success, 1 bad input, 2 the method itself failed (for example
no Down-Up shift), so scripts can tell the two apart.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .drm import DrmError
from .fusion import DEFAULT_SUPPORT_RATIO, FusionConfig, FusionError, run_rosf, write_bcurve_csv
from .harness import PRESET_NOTES, HarnessError, ScenarioError, load_scenario, run_comparison
from .io import InputError, load_reference_csv, write_manifest
from .iterative import (
    DEFAULT_CAP,
    DEFAULT_SUBSAMPLE,
    DownUpFailure,
    PGrid,
    down_up_estimate,
    write_estimate_json,
    write_traces_csv,
)
from .pot import GpdFitError, mean_excess_curve, pot_tail, write_mrl_csv

EXIT_OK, EXIT_INPUT, EXIT_METHOD = 0, 1, 2

log = logging.getLogger("tailfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI but got {text!r}") from None
    return lo, hi


def _triple(text: str) -> tuple[float, float, float]:
    try:
        lo, hi, step = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI,STEP but got {text!r}") from None
    return lo, hi, step


def _column(text: str):
    return int(text) if text.isdigit() else text


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _config(args, exclude=("out", "workers", "func", "verbose")) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items()) if k not in exclude}


def cmd_estimate(args) -> int:
    started = time.perf_counter()
    x = load_reference_csv(args.input, args.column)
    support = args.support or (0.0, DEFAULT_SUPPORT_RATIO * args.threshold)
    cfg = FusionConfig(
        n_fusions=args.fusions,
        n_1=args.n1 or x.size,
        support=support,
        ci_level=args.level,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    coll = run_rosf(x, args.threshold, cfg, workers=args.workers)
    write_bcurve_csv(coll, out / "bcurve.csv")
    (out / "bounds.json").write_text(coll.to_json() + "\n")
    artifacts = ["bcurve.csv", "bounds.json", "trace.csv"]
    k = min(args.subsample, len(coll))
    sub_seed = args.seed if args.subsample_seed is None else args.subsample_seed
    notes = []
    if k < args.subsample:
        notes.append(f"only {len(coll)} bounds; the iteration used all of them")
    try:
        est = down_up_estimate(
            coll,
            PGrid(args.increment),
            k=k,
            seed=sub_seed if k < len(coll) else None,
            cap=args.cap,
            use_full_ecdf=args.full_ecdf,
            estimator=args.estimator,
            start=args.start,
            anchor=args.anchor,
        )
    except DownUpFailure as exc:
        write_traces_csv(exc.traces, out / "trace.csv")
        write_manifest(out, "estimate", _config(args), args.seed, artifacts, started, notes + [str(exc)])
        print(f"iteration failed: {exc}", file=sys.stderr)
        return EXIT_METHOD
    write_traces_csv(est.traces, out / "trace.csv")
    write_estimate_json(est, out / "estimate.json")
    artifacts.append("estimate.json")
    write_manifest(out, "estimate", _config(args), args.seed, artifacts, started, notes)
    print(f"p_hat = {est.p_hat:.10g}  (shift {est.shift_pair[0]:.10g} -> {est.shift_pair[1]:.10g})")
    return EXIT_OK


def cmd_compare(args) -> int:
    started = time.perf_counter()
    scn = load_scenario(args.scenario)
    if args.preset:
        scn = scn.with_preset(args.preset)
    if args.seed is not None:
        scn = replace(scn, seed=args.seed)
    notes = [PRESET_NOTES[args.preset]] if args.preset in PRESET_NOTES else []
    for note in notes:
        log.warning(note)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_comparison(scn, workers=args.workers)
    (out / "report.json").write_text(report.to_json())
    (out / "table.csv").write_text(report.table_csv())
    config = _config(args)
    config["scenario"] = scn.to_dict()
    write_manifest(out, "compare", config, scn.seed, ["report.json", "table.csv"], started, notes)
    print(report.table_csv(), end="")
    return EXIT_OK


def cmd_pot(args) -> int:
    started = time.perf_counter()
    x = load_reference_csv(args.input, args.column, positive=False)
    ci, fit = pot_tail(x, args.threshold, u_quantile=args.u_quantile, level=args.level)
    result = {
        "schema_version": 1,
        "p_hat": ci.point,
        "lower": ci.lower,
        "upper": ci.upper,
        "level": ci.level,
        "u": fit.u,
        "xi": fit.xi,
        "sigma": fit.sigma,
        "n_exceed": fit.n_exceed,
        "loglik": fit.loglik,
        "vcov_xi_sigma": fit.vcov.tolist(),
    }
    print(f"p_hat = {ci.point:.10g}  {ci.level:.0%} CI ({ci.lower:.10g}, {ci.upper:.10g})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(result, out / "pot.json")
        write_manifest(out, "pot", _config(args), None, ["pot.json"], started)
    return EXIT_OK


def cmd_mrl(args) -> int:
    started = time.perf_counter()
    x = load_reference_csv(args.input, args.column, positive=False)
    lo, hi, step = args.grid
    if not step > 0 or hi < lo:
        raise InputError("--grid needs LO <= HI and STEP > 0")
    grid = lo + step * np.arange(int(np.floor((hi - lo) / step + 1e-9)) + 1)
    points = mean_excess_curve(x, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mrl_csv(points, out / "mrl.csv")
    write_manifest(out, "mrl", _config(args), None, ["mrl.csv"], started)
    print(f"{len(points)} thresholds written to {out / 'mrl.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tailfuse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"tailfuse {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(p):
        p.add_argument("--input", required=True, help="CSV file with the reference sample")
        p.add_argument("--column", type=_column, default=0, help="column name or 0-based index")

    p = sub.add_parser("estimate", help="ROSF bounds plus the Down-Up iteration")
    data_args(p)
    p.add_argument("--threshold", type=float, required=True, help="threshold T")
    p.add_argument("--fusions", type=_positive_int, default=10_000)
    p.add_argument("--n1", type=_positive_int, default=None, help="fusion sample size (default: reference size)")
    p.add_argument("--support", type=_pair, default=None, help="uniform support LO,HI (default 0,1.35T)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--increment", type=float, default=0.0001, help="p grid increment")
    p.add_argument("--subsample", type=_positive_int, default=DEFAULT_SUBSAMPLE)
    p.add_argument("--subsample-seed", type=int, default=None, help="defaults to --seed")
    p.add_argument("--cap", type=float, default=DEFAULT_CAP)
    p.add_argument("--level", type=float, default=0.95, help="confidence level behind each bound")
    p.add_argument("--estimator", choices=["shift_mean", "window_mean"], default="shift_mean")
    p.add_argument("--start", choices=["quartile", "top"], default="quartile")
    p.add_argument("--anchor", choices=["increment", "min_bound"], default="increment")
    p.add_argument("--full-ecdf", action="store_true", help="F_B from all bounds, not the subsample")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("compare", help="ROSF versus POT coverage study")
    p.add_argument("--scenario", required=True, help="scenario JSON file or built-in scenario name")
    p.add_argument("--preset", choices=["desk", "paper"], default=None)
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("pot", help="peaks-over-threshold tail estimate")
    data_args(p)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--u-quantile", type=float, default=0.8)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pot)

    p = sub.add_parser("mrl", help="mean residual life curve")
    data_args(p)
    p.add_argument("--grid", type=_triple, required=True, help="LO,HI,STEP")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mrl)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ScenarioError, DrmError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FusionError, GpdFitError, HarnessError) as exc:
        print(f"method failure: {exc}", file=sys.stderr)
        return EXIT_METHOD


if __name__ == "__main__":
    sys.exit(main())
