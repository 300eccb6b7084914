"""Command-line entry points: fit, means, simulate, validate.

Exit codes are a stable contract: 0 success, 1 validation error (dataset
invariants or bad invocation), 2 fit non-convergence, 3 I/O error.  All
failures write a machine-readable error JSON to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .conditional import conditional_estimates
from .families import Family
from .fitter import FitConfig, FittedModel, fit
from .io import ColumnMapping, InputError, read_dataset, write_json, write_rows_csv
from .marginal import marginal_estimates, mean_at_mean_covariate, mu_hat_variance
from .model import Dataset, ModelSpec, validate
from .simulate import logistic_design, negbin_design, run_study

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NONCONVERGENCE = 2
EXIT_IO = 3

_FAMILIES = {"logistic": Family.LOGISTIC, "negbin": Family.NEGBIN}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); 2 means non-convergence here
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="glmm-means", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io_opts(p, with_dataset=True):
        p.add_argument("--config", help="JSON file with default option values; flags override")
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--format", choices=["csv", "json"], default="csv")
        if with_dataset:
            p.add_argument("--input", required=True, help="CSV dataset path")
            p.add_argument("--family", choices=sorted(_FAMILIES), required=True)
            p.add_argument("--covariates", default="", help="comma-separated covariate columns")
            p.add_argument("--group-by", default="", help="comma-separated group columns")
            p.add_argument("--subject-col", default="subject_id")
            p.add_argument("--response-col", default="y")

    p_fit = sub.add_parser("fit", help="fit the model and report parameter estimates")
    add_io_opts(p_fit)

    p_means = sub.add_parser("means", help="fit and report per-group mean estimates")
    add_io_opts(p_means)
    p_means.add_argument("--alpha", type=float, default=0.05)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo coverage study")
    add_io_opts(p_sim, with_dataset=False)
    p_sim.add_argument("--family", choices=sorted(_FAMILIES), required=True)
    p_sim.add_argument("--design", choices=["time", "gender"], default="gender")
    p_sim.add_argument("--baseline", choices=["bernoulli", "uniform"], default="bernoulli")
    p_sim.add_argument("--reps", type=int, default=500)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--alpha", type=float, default=0.05)

    p_val = sub.add_parser("validate", help="check dataset invariants")
    add_io_opts(p_val)
    return parser


def _apply_config(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                defaults = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot open config {args.config}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config {args.config}: invalid JSON ({exc})") from None
        if not isinstance(defaults, dict):
            raise UsageError("config file must hold a JSON object")
        # config supplies defaults only; explicit flags win
        stated = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
        for key, value in defaults.items():
            attr = key.replace("-", "_")
            if hasattr(args, attr) and attr not in stated:
                setattr(args, attr, value)
    return args


def _split_cols(text: str) -> tuple[str, ...]:
    return tuple(c.strip() for c in text.split(",") if c.strip())


def _load(args) -> tuple[Dataset, ModelSpec]:
    mapping = ColumnMapping(
        subject=args.subject_col,
        response=args.response_col,
        covariates=_split_cols(args.covariates),
        group_by=_split_cols(args.group_by),
    )
    dataset = read_dataset(args.input, mapping)
    spec = ModelSpec(family=_FAMILIES[args.family], p=dataset.p)
    return dataset, spec


def _check(dataset: Dataset, spec: ModelSpec) -> None:
    violations = validate(dataset, spec)
    if violations:
        raise ValidationFailure(violations)


class ValidationFailure(Exception):
    def __init__(self, violations):
        super().__init__("dataset validation failed")
        self.violations = violations


class NonConvergence(Exception):
    pass


def _fit_checked(dataset: Dataset, spec: ModelSpec) -> FittedModel:
    fitted = fit(dataset, spec, FitConfig())
    if not fitted.converged:
        raise NonConvergence(f"fit did not converge (score norm {fitted.score_norm:.3g})")
    return fitted


def _param_names(args, spec: ModelSpec) -> list[str]:
    names = ["beta_intercept"] + [f"beta_{c}" for c in _split_cols(args.covariates)]
    names.append("sigma2")
    if spec.family is Family.NEGBIN:
        names.append("kappa")
    return names


def _cmd_fit(args) -> int:
    dataset, spec = _load(args)
    _check(dataset, spec)
    fitted = _fit_checked(dataset, spec)
    names = _param_names(args, spec)
    values = list(fitted.params.beta) + [fitted.params.sigma2]
    if spec.family is Family.NEGBIN:
        values.append(fitted.params.kappa)
    ses = fitted.standard_errors()
    rows = [
        {"name": n, "estimate": float(v), "se": float(s)}
        for n, v, s in zip(names, values, ses)
    ]
    if args.format == "json":
        write_json(
            {
                "params": rows,
                "loglik": fitted.loglik,
                "converged": fitted.converged,
                "iterations": fitted.iterations,
                "optimizer": fitted.optimizer_used,
            },
            args.out,
        )
    else:
        tail = [
            {"name": "loglik", "estimate": fitted.loglik, "se": None},
            {"name": "iterations", "estimate": fitted.iterations, "se": None},
        ]
        write_rows_csv(rows + tail, ["name", "estimate", "se"], args.out)
    return EXIT_OK


def _cmd_means(args) -> int:
    dataset, spec = _load(args)
    _check(dataset, spec)
    fitted = _fit_checked(dataset, spec)
    marg = marginal_estimates(fitted, args.alpha)
    cond = conditional_estimates(fitted, args.alpha)

    rows = []
    for gid in dataset.group_index.group_ids:
        m, c = marg[gid], cond[gid]
        xbar = dataset.X[dataset.group_index.indices[gid]].mean(axis=0)
        row = {
            "group": gid,
            "n": m.n_obs,
            "Ybar": dataset.ybar(gid),
            "mu_star": mean_at_mean_covariate(fitted, gid),
            "mu_star_se": float(np.sqrt(mu_hat_variance(fitted, xbar))),
            "lambda_hat": c.point,
            "lambda_se": float(np.sqrt(c.variance)),
            "mu_hat": m.point,
            "mu_se": float(np.sqrt(m.variance)),
        }
        for label, iv in m.intervals.items():
            row[f"mu_{label}_lo"] = iv.lower
            row[f"mu_{label}_hi"] = iv.upper
        for label, iv in c.intervals.items():
            row[f"lambda_{label}_lo"] = iv.lower
            row[f"lambda_{label}_hi"] = iv.upper
        rows.append(row)

    fieldnames = list(rows[0].keys())
    if args.format == "json":
        write_json({"groups": rows}, args.out)
    else:
        write_rows_csv(rows, fieldnames, args.out)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    maker = logistic_design if args.family == "logistic" else negbin_design
    design = maker(
        baseline=args.baseline,
        control=args.design,
        replications=args.reps,
        seed=args.seed,
        alpha=args.alpha,
    )
    report = run_study(design)
    rows = report.to_rows()
    meta = {
        "family": report.family,
        "T1": report.t1,
        "T2": report.t2,
        "replications": report.replications,
        "seed": report.seed,
        "alpha": report.alpha,
        "failures": report.failures,
        "flagged": report.flagged,
    }
    if args.format == "json":
        write_json({"meta": meta, "rows": rows}, args.out)
    else:
        fieldnames = list(rows[0].keys())
        write_rows_csv(rows, fieldnames, args.out)
    return EXIT_OK


def _cmd_validate(args) -> int:
    dataset, spec = _load(args)
    violations = validate(dataset, spec)
    payload = {
        "valid": not violations,
        "violations": [{"code": v.code, "message": v.message} for v in violations],
    }
    write_json(payload, args.out)
    return EXIT_OK if not violations else EXIT_VALIDATION


def _error_json(code: str, message: str, detail=None) -> None:
    payload = {"error": {"code": code, "message": message}}
    if detail is not None:
        payload["error"]["detail"] = detail
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = _apply_config(parser, argv)
        handler = {
            "fit": _cmd_fit,
            "means": _cmd_means,
            "simulate": _cmd_simulate,
            "validate": _cmd_validate,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        _error_json("usage", str(exc))
        return EXIT_VALIDATION
    except ValidationFailure as exc:
        _error_json(
            "validation",
            "dataset validation failed",
            [{"code": v.code, "message": v.message} for v in exc.violations],
        )
        return EXIT_VALIDATION
    except NonConvergence as exc:
        _error_json("non_convergence", str(exc))
        return EXIT_NONCONVERGENCE
    except InputError as exc:
        _error_json("io", str(exc))
        return EXIT_IO
    except ValueError as exc:
        _error_json("validation", str(exc))
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
