"""Command-line entry point: ``simulate`` and ``verify``."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 1, 2

SUITES = ("weight-sum", "det-weight", "outlier-count", "delay-bias", "coverage")


def run_suite(name: str, scale: float = 1.0, seed: int = 0):
    """Run one named check suite at the default (acceptance) sizes times ``scale``."""
    from . import lemmas
    from .simulate import RunConfig, run_experiment

    n = lambda k: max(1, int(round(k * scale)))  # noqa: E731
    if name == "weight-sum":
        rep = lemmas.LemmaReport("weight-sum")
        for V in (1, 4):
            tr = run_experiment(RunConfig(protocol="dcb", V=V, d=3, T=n(500), seed=seed, track_weights=True))
            rep.merge(lemmas.check_weight_sum(tr))
        return rep
    if name == "det-weight":
        rep = lemmas.LemmaReport("det-weight")
        for V in (2, 4):
            tr = run_experiment(RunConfig(protocol="dcb", V=V, d=3, T=n(500), seed=seed, track_weights=True))
            rep.merge(lemmas.check_det_weight_bound(tr))
        return rep
    if name == "outlier-count":
        return lemmas.outlier_suite(trials=n(1000), seed=seed)
    if name == "delay-bias":
        rep = lemmas.delay_bias_suite(trials=n(200), seed=seed)
        for V in (2, 4):
            tr = run_experiment(RunConfig(protocol="dcb", V=V, d=3, T=n(500), seed=seed))
            rep.merge(lemmas.trace_delay_bias(tr))
        return rep
    if name == "coverage":
        cfg = RunConfig(protocol="dcb", V=4, d=3, T=200, seed=seed)
        return lemmas.check_coverage(cfg, checkpoints=(50, 200), runs=max(100, n(200)))
    raise ConfigurationError(f"unknown suite {name!r}; expected one of {', '.join(SUITES)} or all")


def _simulate(args) -> int:
    from .simulate import parse_config, run_experiment, write_outputs

    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None
    overrides = {"seed": args.seed, "protocol": args.protocol}
    if args.bounds:
        overrides["emit_bounds"] = True
    cfg = parse_config(text, **overrides)
    trace = run_experiment(cfg)
    for path in write_outputs(trace, args.out):
        print(path)
    print(f"{trace.run_id}: final cumulative regret {trace.cum_regret[-1]:.3f}, "
          f"bits {int(trace.comm_cum[-1])}")
    return EXIT_OK


def _verify(args) -> int:
    from .lemmas import reports_csv

    names = SUITES if args.suite == "all" else (args.suite,)
    reports = [run_suite(name, scale=args.scale, seed=args.seed) for name in names]
    text = reports_csv(reports)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="p2pbandit", description="Peer-to-peer linear bandit simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one configured experiment and write CSV files")
    s.add_argument("--config", required=True, help="flat key=value file")
    s.add_argument("--out", default=".", help="output directory (default: current)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--protocol", default=None)
    s.add_argument("--bounds", action="store_true", help="add the bound_value column")
    s.set_defaults(func=_simulate)

    v = sub.add_parser("verify", help="run lemma check suites")
    v.add_argument("--suite", default="all", help=f"one of {', '.join(SUITES)}, or all")
    v.add_argument("--scale", type=float, default=1.0, help="multiply trial counts and horizons")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None, help="also write the report CSV here")
    v.set_defaults(func=_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
