"""Command-line entry point: ``run``, ``oracle``, ``gen`` and ``validate``."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .core import ProblemInstance
from .harness import ExperimentConfig, optimal_ratio_oracle, run_experiment, validate_file
from .policies import POLICIES
from .problems import CASES, PROBLEMS, make_problem

# Flag name -> ExperimentConfig field.
_FIELDS = {
    "problem": "problem", "case": "case", "policy": "policy", "macro_reps": "macro_reps",
    "seed": "seed", "workers": "workers", "n0": "n0", "kmax": "K_max", "lmax": "L_max",
    "delta": "delta", "h": "h", "gamma": "gamma", "em_budget": "em_budget",
    "approx_budget": "approx_budget", "cluster_floor": "cluster_floor", "out": "out",
    "redraw_instance": "redraw_instance",
    "chain_config": "config_path",
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers: {text}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxrs", description="Contextual ranking and selection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def problem_flags(p):
        p.add_argument("--problem", choices=PROBLEMS, default=None)
        p.add_argument("--case", choices=CASES, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--chain-config", default=None, help="Markov chain JSON for the cancer problem")
        p.add_argument("--instance", default=None, help="problem instance JSON (overrides --problem)")

    run = sub.add_parser("run", help="run a macro-replication experiment")
    problem_flags(run)
    run.add_argument("--policy", choices=POLICIES, default=None)
    run.add_argument("--budget", type=int, default=None, help="final budget (single checkpoint)")
    run.add_argument("--checkpoints", type=_int_list, default=None)
    run.add_argument("--macro-reps", type=int, default=None)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--n0", type=int, default=None)
    run.add_argument("--kmax", type=int, default=None)
    run.add_argument("--lmax", type=int, default=None)
    run.add_argument("--delta", type=float, default=None)
    run.add_argument("--h", type=float, default=None)
    run.add_argument("--gamma", type=float, default=None)
    run.add_argument("--em-budget", type=int, default=None)
    run.add_argument("--approx-budget", type=int, default=None)
    run.add_argument("--cluster-floor", type=float, default=None,
                     help="cluster-variance floor as a fraction of the pooled sample variance")
    run.add_argument("--redraw-instance", action="store_true", default=None)
    run.add_argument("--out", default=None, help="CSV path; a JSON mirror is written next to it")
    run.add_argument("--config", default=None, help="JSON file with the same keys as the flags")

    oracle = sub.add_parser("oracle", help="print optimal sampling ratios")
    problem_flags(oracle)
    oracle.add_argument("--out", default=None)

    gen = sub.add_parser("gen", help="emit a problem instance as JSON")
    problem_flags(gen)
    gen.add_argument("--out", default=None)

    validate = sub.add_parser("validate", help="check a results file for internal consistency")
    validate.add_argument("path")
    return parser


def _problem_from(args):
    if args.instance:
        with open(args.instance) as fh:
            return ProblemInstance.from_json(fh.read())
    return make_problem(args.problem or "example1", args.case or "multi",
                        0 if args.seed is None else args.seed, args.chain_config)


def _instance_of(problem) -> ProblemInstance:
    return getattr(problem, "instance", problem)


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def config_from_args(args) -> ExperimentConfig:
    data: dict = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        for key, value in raw.items():
            key = key.replace("-", "_")
            if key == "budget":
                data.setdefault("checkpoints", [int(value)])
            elif key == "instance" and isinstance(value, str):
                with open(value) as fh:
                    data["instance"] = json.load(fh)
            else:
                data[_FIELDS.get(key, key)] = value
    for flag, name in _FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[name] = value
    if args.checkpoints is not None:
        data["checkpoints"] = args.checkpoints
    elif args.budget is not None:
        data["checkpoints"] = [args.budget]
    if args.instance:
        with open(args.instance) as fh:
            data["instance"] = json.load(fh)
    return ExperimentConfig.from_dict(data)


def _cmd_run(args) -> int:
    config = config_from_args(args)
    record = run_experiment(config)
    for budget, worst in zip(record.budgets, record.pcs_w):
        print(f"{record.policy} budget={budget} pcs_w={worst:.4f}")
    return 0


def _cmd_oracle(args) -> int:
    result = optimal_ratio_oracle(_instance_of(_problem_from(args)))
    payload = {
        "ratios": result.ratios.tolist(),
        "sum": float(result.ratios.sum()),
        "max_residual": result.max_residual,
        "converged": result.converged,
    }
    _emit(json.dumps(payload, indent=1) + "\n", args.out)
    return 0


def _cmd_gen(args) -> int:
    _emit(_instance_of(_problem_from(args)).to_json(), args.out)
    return 0


def _cmd_validate(args) -> int:
    problems = validate_file(args.path)
    for p in problems:
        print(f"invalid: {p}")
    if not problems:
        print("ok")
    return 1 if problems else 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = {"run": _cmd_run, "oracle": _cmd_oracle, "gen": _cmd_gen, "validate": _cmd_validate}
    try:
        return handler[args.command](args)
    except (ValueError, OSError, KeyError, IndexError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
