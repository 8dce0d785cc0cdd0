"""Command line entry point.

    stepcredit run CONFIG [--seed N] [--stage STAGE]
    stepcredit eval CHECKPOINT --tasks 5000:5050 [--seeds 0,1]
    stepcredit compare RUN_DIR [RUN_DIR ...] --out DIR [--baseline NAME] [--no-plots]
    stepcredit gradcheck [--configs 64]
    stepcredit theory [--out FILE]

Exit codes: 0 success, 2 configuration or usage error, 3 a pipeline stage
failed, 4 an invariant check failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from ..agentcore import Featurizer
from ..envsim import make_env
from ..errors import ConfigError, InvariantViolation, UsageError
from ..tinynn import load_net

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_INVARIANT = 0, 2, 3, 4


def _parse_ids(text: str) -> list[int]:
    if ":" in text:
        a, b = text.split(":")
        return list(range(int(a), int(b)))
    return [int(x) for x in text.split(",") if x]


def cmd_run(args) -> int:
    from .config import load_config
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    if args.output_dir:
        cfg = cfg.with_overrides(output_dir=args.output_dir)
    seeds = [args.seed] if args.seed is not None else None
    out = run_pipeline(cfg, seeds, args.stage)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate

    policy, meta = load_net(args.checkpoint)
    if meta.get("kind") != "policy":
        raise UsageError(f"{args.checkpoint} is not a policy checkpoint")
    env = make_env(meta["env"], **meta["env_params"])
    fz = Featurizer(env, meta["history_k"])
    rec = evaluate(env, policy, fz, env.tasks(_parse_ids(args.tasks)), _parse_ids(args.seeds))
    print(rec.to_json())
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import compare_runs

    report = compare_runs(args.runs, args.out, args.baseline, plots=not args.no_plots)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["method", "success_median", "success_min", "success_max", "grounding_median"])
    for m in report["methods"]:
        w.writerow([m["method"], m["success_median"], m["success_min"], m["success_max"], m["grounding_median"]])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from ..theory import gradient_suite

    results = gradient_suite(args.configs, args.seed)
    ok = True
    for r in results:
        passed = r.passed(args.tol)
        ok &= passed
        print(f"{r.network:22s} configs={r.configs} max_rel_error={r.max_rel_error:.3e} {'ok' if passed else 'FAIL'}")
    if not ok:
        raise InvariantViolation("gradient check failed")
    return EXIT_OK


def cmd_theory(args) -> int:
    from ..rltrain import vanishing_advantage_report
    from ..theory import TreeMDP, policy_gradient_invariance, random_potential

    rows = vanishing_advantage_report(args.n, args.gamma, args.lam, args.expected, args.realized)
    converged = vanishing_advantage_report(args.n, args.gamma, args.lam, args.expected, args.expected)
    rng = np.random.default_rng(args.seed)
    gaps = []
    for _ in range(args.policies):
        mdp = TreeMDP.random(rng)
        logits = rng.normal(size=(len(mdp.nodes), mdp.num_actions))
        dense, sparse = policy_gradient_invariance(mdp, logits, random_potential(mdp, rng))
        gaps.append(float(np.abs(dense - sparse).max()))
    report = {
        "vanishing_advantage": {
            "n": args.n, "gamma": args.gamma, "lam": args.lam,
            "expected_reward": args.expected, "realized_reward": args.realized, "rows": rows,
            "max_abs_advantage_when_realized_equals_expected": max(abs(r["advantage"]) for r in converged),
        },
        "policy_gradient_invariance": {"policies": args.policies, "max_abs_gap": max(gaps)},
    }
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    if max(gaps) > 1e-10:
        raise InvariantViolation(f"potential rewards changed the exact policy gradient by {max(gaps):.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stepcredit", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run or resume the pipeline for a config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="run a single seed instead of every configured one")
    r.add_argument("--stage", choices=["bc", "explore", "estimator", "rl", "eval"], help="recompute this stage only")
    r.add_argument("--output-dir", help="override output_dir")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="greedy evaluation of a policy checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--tasks", required=True, help="task ids as start:stop or a comma list")
    e.add_argument("--seeds", default="0", help="environment seeds as start:stop or a comma list")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="compare run directories")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--baseline")
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    g.add_argument("--configs", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("theory", help="vanishing-advantage table and policy-gradient invariance check")
    t.add_argument("--n", type=int, default=20)
    t.add_argument("--gamma", type=float, default=0.99)
    t.add_argument("--lam", type=float, default=0.95)
    t.add_argument("--expected", type=float, default=0.5)
    t.add_argument("--realized", type=float, default=1.0)
    t.add_argument("--policies", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_theory)
    return p


def main(argv: list[str] | None = None) -> int:
    from .pipeline import StageFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
