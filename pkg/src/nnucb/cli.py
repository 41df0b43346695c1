"""Command-line entry point (``nnucb``).

Exit codes: 0 success, 1 generic failure, 2 bad arguments/config/domain,
3 malformed data file, 4 numerical failure, 5 internal invariant violated,
6 verification found failing invariants.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import kernels, metrics
from .config import load_config
from .errors import ArgumentError, DataError, NNUCBError
from .experiment import run_experiment
from .gp import greedy_info_gain_curve
from .kernels import KernelSpec
from .report import load_csv, verify_trace

VERIFY_FAILED = 6


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output.csv = args.out
    if args.plotdata:
        cfg.output.plotdata = args.plotdata
    log = run_experiment(cfg)
    last = log[-1]
    print(f"T={last.t} cum_regret={last.cum_regret:.6g} info_gain={last.info_gain_cum:.6g}")
    return 0


def _read_points(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read points from {path}: {exc}") from exc


def _cmd_gram(args) -> int:
    spec = KernelSpec(args.kind, args.depth, normalized=not args.unnormalized)
    K = kernels.gram(_read_points(args.points), spec)
    np.savetxt(args.out, K, delimiter=",", fmt="%.17g")
    return 0


def _cmd_infogain(args) -> int:
    rng = np.random.default_rng(args.seed)
    pool = kernels.sample_sphere(rng, args.pool, args.d)
    trace = greedy_info_gain_curve(pool, KernelSpec("ntk", args.depth), args.sigma2, args.T)
    print("t,increment,cumulative")
    for t, (inc, cum) in enumerate(zip(trace.per_step, trace.cumulative), start=1):
        print(f"{t},{float(inc)!r},{float(cum)!r}")
    return 0


def _cmd_spectrum(args) -> int:
    spec = KernelSpec("ntk", args.depth)
    spectrum = kernels.spectrum_estimate(args.d, args.n, spec, args.seed)
    print("rank,eigenvalue")
    for r, v in spectrum:
        print(f"{r},{float(v)!r}")
    return 0


def _cmd_bound(args) -> int:
    print(repr(float(metrics.gamma_bound(args.T, args.d, args.sigma2, args.C, cntk=args.cntk))))
    return 0


def _cmd_fit(args) -> int:
    log = load_csv(args.csv)
    if not log:
        raise DataError(f"{args.csv} holds no steps")
    window = None
    if args.from_ is not None or args.to is not None:
        window = (args.from_ if args.from_ is not None else max(1, log[-1].t // 2),
                  args.to if args.to is not None else log[-1].t)
    rep = metrics.fit_growth(log, args.metric, window)
    print(json.dumps({"exponent": rep.exponent, "stderr": rep.stderr,
                      "window": list(rep.window), "n_points": rep.n_points}))
    return 0


def _cmd_verify(args) -> int:
    rep = verify_trace(load_csv(args.csv), load_config(args.config))
    for line in rep.lines():
        print(line)
    return 0 if rep.passed else VERIFY_FAILED


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nnucb", description="Neural and kernel contextual bandits.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="CSV log path (overrides output.csv)")
    r.add_argument("--plotdata", help="downsampled plot-data CSV path")
    r.set_defaults(func=_cmd_run)

    k = sub.add_parser("kernel", help="kernel utilities")
    ksub = k.add_subparsers(dest="kernel_command", required=True, parser_class=_Parser)
    g = ksub.add_parser("gram", help="Gram matrix of points from CSV")
    g.add_argument("--kind", choices=("ntk", "cntk"), default="ntk")
    g.add_argument("--depth", type=int, default=1)
    g.add_argument("--points", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--unnormalized", action="store_true")
    g.set_defaults(func=_cmd_gram)

    i = sub.add_parser("infogain", help="information-gain curves")
    isub = i.add_subparsers(dest="infogain_command", required=True, parser_class=_Parser)
    gr = isub.add_parser("greedy", help="greedy curve on a random sphere pool")
    gr.add_argument("--d", type=int, required=True)
    gr.add_argument("--T", type=int, required=True)
    gr.add_argument("--sigma2", type=float, default=1.0)
    gr.add_argument("--depth", type=int, default=1)
    gr.add_argument("--seed", type=int, default=0)
    gr.add_argument("--pool", type=int, default=2000)
    gr.set_defaults(func=_cmd_infogain)

    s = sub.add_parser("spectrum", help="empirical NTK eigenvalues on the sphere")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--depth", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_spectrum)

    b = sub.add_parser("bound", help="information-gain bound")
    b.add_argument("--T", type=float, required=True)
    b.add_argument("--d", type=int, required=True)
    b.add_argument("--sigma2", type=float, required=True)
    b.add_argument("--C", type=float, required=True)
    b.add_argument("--cntk", action="store_true")
    b.set_defaults(func=_cmd_bound)

    f = sub.add_parser("fit", help="log-log growth exponent of a logged metric")
    f.add_argument("--csv", required=True)
    f.add_argument("--metric", choices=metrics.METRICS, default="cum_regret")
    f.add_argument("--from", dest="from_", type=int)
    f.add_argument("--to", type=int)
    f.set_defaults(func=_cmd_fit)

    v = sub.add_parser("verify", help="check structural invariants of a run log")
    v.add_argument("--csv", required=True)
    v.add_argument("--config", required=True)
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except NNUCBError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [IOError]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
