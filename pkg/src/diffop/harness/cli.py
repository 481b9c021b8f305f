"""``diffop`` command-line entry point.

Exit codes: 0 success, 1 assertion or tolerance failure (including
solver and domain errors during a run), 2 configuration error.
"""

import argparse
import json
import logging
import os
import sys

from ..exceptions import ConfigError, DiffOPError
from . import experiments as ex
from .config import U64_MAX, load_config
from .io import write_csv, write_json, write_jsonl

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("train", "gradcheck", "nonconvexity", "theory", "rollout")

# flags that map onto top-level config fields, per command
FLAG_FIELDS = {
    "train": ("seed", "repeats"),
    "gradcheck": ("seed", "trials"),
    "nonconvexity": (),
    "theory": ("seed", "measure"),
    "rollout": ("seed",),
}

log = logging.getLogger("diffop")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", ConfigError(message))
        sys.exit(EXIT_CONFIG)


def _u64(text):
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    p = _Parser(prog="diffop", description="Optimization-based policy experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="JSON config document")
    p.add_argument("--seed", type=_u64, help="base seed (unsigned 64-bit)")
    p.add_argument("--out", metavar="DIR", default="diffop_out", help="output directory")
    p.add_argument("--repeats", type=_positive, help="training seeds (train)")
    p.add_argument("--trials", type=_positive, help="random instances (gradcheck)")
    p.add_argument("--measure", action="store_true", default=None, help="estimate constants (theory)")
    return p


def _report(command, exc):
    doc = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    for key in ("k", "n", "t"):
        if getattr(exc, key, None) is not None:
            doc[key] = getattr(exc, key)
    print(json.dumps(doc), file=sys.stderr)


def _overrides(args):
    given = {f: getattr(args, f) for f in ("seed", "repeats", "trials", "measure") if getattr(args, f) is not None}
    bad = sorted(set(given) - set(FLAG_FIELDS[args.command]))
    if bad:
        raise ConfigError(f"flags {['--' + b for b in bad]} do not apply to {args.command}")
    return given


# ------------------------------------------------------------ commands


def cmd_train(cfg, out):
    per_seed, agg, opt = ex.run_train(cfg, out)
    for seed, res in per_seed.items():
        write_csv(os.path.join(out, f"train_seed{seed}.csv"), ex.seed_rows(res))
    write_csv(os.path.join(out, "train_aggregate.csv"), agg)
    last = agg[-2] if agg[-2][0] == "final" else agg[-1]
    print(f"train: {len(per_seed)} seed(s), K={cfg.K}; final mean cost {last[1]:.6g}, optimal {opt:.6g}")
    return EXIT_OK


def cmd_gradcheck(cfg, out):
    worst, failures = ex.run_gradcheck(cfg)
    for pair in sorted(worst):
        tol = cfg.tol_fd if "fd" in pair.split("|") else cfg.tol_analytic
        print(f"gradcheck {cfg.family}: {pair} worst rel err {worst[pair]:.3e} (tol {tol:.0e})")
    write_json(os.path.join(out, "gradcheck_report.json"), {"family": cfg.family, "worst": worst, "n_failed": len(failures)})
    if failures:
        path = os.path.join(out, "gradcheck_failures.json")
        write_json(path, {"failures": failures})
        print(f"gradcheck: {len(failures)} instance(s) out of tolerance; replay with {path}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_nonconvexity(cfg, out):
    r = ex.run_nonconvexity()
    print(f"C(theta1) = {r['C_theta1']!r}")
    print(f"C(theta2) = {r['C_theta2']!r}")
    print(f"C(theta_mid) = {r['C_mid']!r}")
    print(f"alpha*C(theta1) + (1-alpha)*C(theta2) = {r['chord']!r}")
    write_json(os.path.join(out, "nonconvexity.json"), r)
    if not r["violated"]:
        print("nonconvexity: Jensen inequality not violated")
        return EXIT_FAIL
    print("nonconvexity: C(theta_mid) exceeds the chord; C is not convex in theta")
    return EXIT_OK


def cmd_theory(cfg, out):
    r = ex.run_theory(cfg)
    if cfg.measure:
        print(f"measured mu_hat = {r['mu_hat']!r}, L1_hat = {r['L1_hat']!r} (analytic mu = {r['mu_exact']!r})")
    print(f"L_C = {r['L_C']!r}")
    print(f"eta_rec = {r['eta_rec']!r}")
    print(f"N = {r['N']!r}")
    write_json(os.path.join(out, "theory.json"), r)
    if cfg.measure and not r["mu_hat"] <= r["mu_exact"] + 1e-9:
        print("theory: measured mu exceeds the analytic minimum eigenvalue")
        return EXIT_FAIL
    return EXIT_OK


def cmd_rollout(cfg, out):
    docs = ex.run_rollout(cfg)
    path = os.path.join(out, "rollout.jsonl")
    write_jsonl(path, docs)
    print(f"rollout: {len(docs) - 1} steps, total cost {docs[-1]['total_cost']:.6g} -> {path}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "nonconvexity": cmd_nonconvexity,
    "theory": cmd_theory,
    "rollout": cmd_rollout,
}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, _overrides(args))
        os.makedirs(args.out, exist_ok=True)
    except (ConfigError, OSError) as exc:
        _report(args.command, exc)
        return EXIT_CONFIG
    try:
        return HANDLERS[args.command](cfg, args.out)
    except ConfigError as exc:
        _report(args.command, exc)
        return EXIT_CONFIG
    except (DiffOPError, ArithmeticError, AssertionError) as exc:
        _report(args.command, exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
