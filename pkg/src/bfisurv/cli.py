"""Command-line interface: ``bfisurv <command> [options]``.

Exit status: 0 success, 2 usage error, 3 invalid input, 4 numerical
failure, 5 federation protocol error, 1 any other package error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .aggregate import select_poly_order
from .data import load_dataset, load_schema
from .errors import BfiError, NumericalError, ProtocolError, ValidationError
from .federation import exchange, payload
from .fit import fit_map
from .hazard import BaselineFamily
from .posterior import GaussianPrior
from .simulate import SimConfig, generate

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_PROTOCOL = 0, 1, 2, 3, 4, 5


def _float_list(text: str):
    return [float(x) for x in text.replace(",", " ").split()]


def family_from_args(args) -> BaselineFamily:
    if args.family == "pwexp":
        if not args.knots:
            raise ValidationError("--family pwexp requires --knots")
        return BaselineFamily.piecewise(_float_list(args.knots))
    if args.family == "exppoly":
        if args.order is None:
            raise ValidationError("--family exppoly requires --order")
        return BaselineFamily.exppoly(args.order)
    if args.knots or args.order is not None:
        raise ValidationError(f"--knots/--order do not apply to --family {args.family}")
    return BaselineFamily(args.family)


def prior_from_args(args, dim=None):
    """A GaussianPrior when the dimension is known, else a ``dim -> prior`` callable."""
    if args.prior_matrix:
        G = np.atleast_2d(np.loadtxt(args.prior_matrix, dtype=float))
        prior = GaussianPrior(G)
        if dim is not None and prior.dim != dim:
            raise ValidationError(f"prior matrix is {prior.dim}x{prior.dim}, model needs {dim}")
        return prior
    if args.gamma is None:
        raise ValidationError("give --gamma or --prior-matrix")
    if dim is None:
        return lambda d: GaussianPrior.isotropic(args.gamma, d)
    return GaussianPrior.isotropic(args.gamma, dim)


def _add_prior(p):
    p.add_argument("--gamma", type=float, help="prior precision: Gamma = gamma * I")
    p.add_argument("--prior-matrix", help="text file with a full inverse-covariance matrix")


def _add_data(p):
    p.add_argument("--data", required=True, help="CSV with columns time,status,<covariates>")
    p.add_argument("--schema", required=True, help="YAML covariate schema")
    p.add_argument("--center", action="store_true", help="center continuous covariates locally")


def _print_intervals(ci):
    level = 100 * (1 - 2 * ci.alpha)
    print(f"{'parameter':<16}{'estimate':>14}{f'{level:g}% lower':>14}{f'{level:g}% upper':>14}")
    for name, e, lo, hi in ci.rows():
        print(f"{name:<16}{e:>14.6f}{lo:>14.6f}{hi:>14.6f}")


def cmd_fit(args):
    ds = load_dataset(args.data, load_schema(args.schema), center=args.center)
    family = family_from_args(args)
    prior = prior_from_args(args, ds.p + family.q_params)
    fit = fit_map(ds, family, prior, tol=args.tol, max_iter=args.max_iter)
    print(f"{family}: n={fit.n} events={fit.events} converged={fit.converged} "
          f"iterations={fit.iterations} grad={fit.grad_norm:.3g}")
    _print_intervals(fit.intervals(args.alpha))
    if args.out:
        Path(args.out).write_bytes(payload.encode(fit, allow_unconverged=args.allow_unconverged))
        print(f"payload written to {args.out}")
    return EXIT_OK if fit.converged else EXIT_NUMERICAL


def cmd_select_order(args):
    ds = load_dataset(args.data, load_schema(args.schema), center=args.center)
    sel = select_poly_order(ds, prior_from_args(args), args.q_max, args.threshold)
    for q in sorted(sel.deviances):
        print(f"order {q} vs {q + 1}: deviance={sel.deviances[q]:.4f} p={sel.p_values[q]:.4g}")
    print(f"selected order q*={sel.q_star} (shipping orders {sel.q_star}..{sel.q_max})")
    if args.out:
        Path(args.out).write_bytes(payload.encode_order_bundle(sel))
        print(f"order bundle written to {args.out}")
    return EXIT_OK


def cmd_combine(args):
    if args.server:
        reply = exchange.request_aggregation(args.server, args.expected)
        report, summary = reply["estimate"], reply["summary"]
    else:
        if not args.payloads:
            raise ValidationError("give payload files or --server")
        blobs = exchange.read_payload_files(args.payloads)
        first = payload.decode(blobs[0])
        if isinstance(first, payload.OrderSelection) or args.prior_matrix is None:
            prior = prior_from_args(args)
        else:
            prior = prior_from_args(args, first.theta.shape[0])
        est, summary = exchange.aggregate_round(
            blobs, prior, expected=args.expected, allow_unconverged=args.allow_unconverged, alpha=args.alpha
        )
        report = est.to_dict()
    print(summary)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_simulate(args):
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            conf = yaml.safe_load(fh) or {}
    else:
        conf = {}
    beta = _float_list(args.beta) if args.beta else conf.get("beta", [-0.6, -0.4, 0.4, 0.6])
    omega = _float_list(args.omega_fit) if args.omega_fit else conf.get("omega_fit", [-0.9, 1.8])
    cfg = SimConfig.from_fit_parameters(
        beta,
        omega,
        pi=args.pi if args.pi is not None else conf.get("pi", 0.3),
        n=args.n if args.n is not None else conf.get("n", 100),
        sigma=args.sigma if args.sigma is not None else conf.get("sigma", 1.0),
        u1=args.u1 if args.u1 is not None else conf.get("u1", 0.0),
        seed=args.seed if args.seed is not None else conf.get("seed", 0),
    )
    out = generate(cfg)
    out.dataset.to_csv(args.out)
    if args.schema_out:
        schema = {"covariates": [{"name": c, "kind": "continuous"} for c in out.dataset.column_names]}
        Path(args.schema_out).write_text(yaml.safe_dump(schema, sort_keys=False))
    print(f"wrote {out.dataset.n} records to {args.out}: u2={out.u2:.6g} "
          f"censoring={out.empirical_censoring:.4f} (target {cfg.pi})")
    return EXIT_OK


def cmd_benchmark(args):
    plan = bench.load_plan(args.plan)
    report = bench.run_benchmark(plan, workers=args.workers)
    report.to_csv(args.out)
    for (setting, fam), (failed, total) in report.failures.items():
        print(f"{setting} {fam}: {total - failed}/{total} replicates used")
    print(f"{len(report.rows)} rows written to {args.out}")
    return EXIT_OK


def cmd_serve(args):
    dim_prior = prior_from_args(args)
    agg = exchange.Aggregator(dim_prior, expected=args.expected, allow_unconverged=args.allow_unconverged)
    server = exchange.AggregatorServer(agg, args.serve_addr)
    print(f"aggregator listening on {server.url} (expecting {args.expected} centers)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_submit(args):
    reply = exchange.submit_payload(args.server, args.center_id, Path(args.payload).read_bytes())
    print(json.dumps(reply))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bfisurv", description="Bayesian federated inference for parametric proportional-hazards models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the local MAP model and write its payload")
    _add_data(p)
    p.add_argument("--family", required=True, choices=["exp", "weibull", "gompertz", "pwexp", "exppoly"])
    p.add_argument("--knots", help="pwexp knots, e.g. '0,1,2,inf'")
    p.add_argument("--order", type=int, help="exppoly number of coefficients")
    _add_prior(p)
    p.add_argument("--alpha", type=float, default=0.025, help="intervals at level 1 - 2*alpha (default 0.025)")
    p.add_argument("--tol", type=float, default=1e-8, help="gradient max-norm for convergence")
    p.add_argument("--max-iter", type=int, default=100, help="Newton iteration limit")
    p.add_argument("--allow-unconverged", action="store_true", help="accept fits that did not converge")
    p.add_argument("--out", help="payload file to write")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select-order", help="choose the exppoly order by likelihood-ratio tests")
    _add_data(p)
    p.add_argument("--q-max", type=int, required=True, help="largest order to consider")
    p.add_argument("--threshold", type=float, default=0.10, help="stop at the first p-value >= threshold")
    _add_prior(p)
    p.add_argument("--out", help="order-bundle payload file to write")
    p.set_defaults(func=cmd_select_order)

    p = sub.add_parser("combine", help="aggregate payload files or trigger a server aggregation")
    p.add_argument("payloads", nargs="*", help="payload files, one per center")
    p.add_argument("--server", help="aggregator URL, e.g. http://127.0.0.1:8765")
    _add_prior(p)
    p.add_argument("--expected", type=int, help="number of centers that must be present")
    p.add_argument("--alpha", type=float, default=0.025, help="intervals at level 1 - 2*alpha (default 0.025)")
    p.add_argument("--allow-unconverged", action="store_true", help="accept fits that did not converge")
    p.add_argument("--out", help="JSON report to write")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("simulate", help="simulate censored Weibull data")
    p.add_argument("--config", help="YAML with beta, omega_fit, pi, n, sigma, u1, seed")
    p.add_argument("--beta", help="regression coefficients, e.g. '-0.6,-0.4,0.4,0.6'")
    p.add_argument("--omega-fit", help="Weibull (omega1, omega2) in the fitting parameterisation")
    p.add_argument("--pi", type=float, help="target censoring rate")
    p.add_argument("--n", type=int, help="number of records")
    p.add_argument("--sigma", type=float, help="covariate standard deviation")
    p.add_argument("--u1", type=float, help="lower bound of the uniform censoring time")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--schema-out", help="also write a matching YAML schema")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="run a simulation benchmark plan")
    p.add_argument("--plan", required=True, help="YAML benchmark plan")
    p.add_argument("--out", required=True, help="tidy CSV report to write")
    p.add_argument("--workers", type=int, default=1, help="worker processes for replicates")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("serve", help="run the HTTP aggregator")
    p.add_argument("--serve-addr", help=f"host:port (default ${exchange.ADDR_ENV} or {exchange.DEFAULT_ADDR})")
    _add_prior(p)
    p.add_argument("--expected", type=int, required=True, help="number of centers to wait for")
    p.add_argument("--allow-unconverged", action="store_true", help="accept fits that did not converge")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("submit", help="send a payload file to a running aggregator")
    p.add_argument("payload", help="payload file")
    p.add_argument("--server", required=True, help="aggregator URL")
    p.add_argument("--center-id", required=True, help="identifier of the submitting center")
    p.set_defaults(func=cmd_submit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except BfiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
