"""Command-line entry point: ``bilevelnas {toy,search,oracle-check,gradcheck}``.

Exit codes: 0 success, 1 numerical or assertion failure, 2 usage or config
error. Outputs go to ``--out``, else ``$BILEVELNAS_OUT``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checks import GradcheckCase, default_cases, extended_supernet_cases, run_suite
from .estimators import ExactImplicit, amended_g2, estimate_parts, parse_estimator
from .oracle import (
    MAX_DIM_OMEGA,
    DimensionCapExceeded,
    brute_force_hypergradient,
    exact_g2,
    extract_curvature,
    inner_product_check,
    random_quadratic_instance,
    solve_inner,
)
from .problem import TOY_TRAIN_BATCH, TOY_VAL_BATCH, BilevelState, Diverged, SingularHessian, toy_state
from .runconfig import ConfigError, apply_overrides, config_to_ini, load_config
from .search import bilevel_search, retrain, toy_run
from .serialization import atomic_write, canonical_json

logger = logging.getLogger("bilevelnas")

OUT_ENV = "BILEVELNAS_OUT"
DEFAULT_OUT = "runs"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    return diff / denom if denom > 0 else diff


# -- toy ------------------------------------------------------------------------


def cmd_toy(args) -> int:
    try:
        kind = parse_estimator(args.estimator, eta=args.eta, xi=args.xi)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    diverged_at = None
    try:
        traj = toy_run(kind, steps=args.steps, alpha_lr=args.lr, init=args.init, tol=args.tol)
    except Diverged as exc:
        traj = exc.trajectory
        diverged_at = exc.step
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "toy_trajectory.csv", traj.to_csv())
    summary = {
        "converged": bool(traj.converged),
        "diverged_at_step": diverged_at,
        "estimator": kind.name,
        "final_alpha": traj.alpha[-1],
        "steps": len(traj.alpha) - 1,
    }
    atomic_write(out / "toy_summary.json", canonical_json(summary))
    status = "converged" if traj.converged else ("diverged" if diverged_at is not None else "not converged")
    print(f"toy {kind.name}: {status}, final alpha {traj.alpha[-1]:.6g} after {len(traj.alpha) - 1} steps")
    if args.expect_converge and not traj.converged:
        return EXIT_FAIL
    return EXIT_OK


# -- search ---------------------------------------------------------------------


def _search_overrides(args) -> dict[str, str]:
    overrides = apply_overrides(args.set)
    for flag, key in (("estimator", "estimator"), ("eta", "eta"), ("xi", "xi"), ("epochs", "epochs"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            overrides[f"search.{key}"] = str(value)
    return overrides


def cmd_search(args) -> int:
    # everything that can fail on bad input happens before the output directory is touched
    config = load_config(args.config, _search_overrides(args))
    started = time.perf_counter()
    try:
        result = bilevel_search(config)
        retrained = retrain(result.genotype, config.retrain_training, config.seed, config) if args.retrain else None
    except Diverged as exc:
        print(f"search diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL

    files = {
        "trajectory.csv": result.trajectory.to_csv(),
        "genotype.json": result.genotype.to_json(),
        "config.ini": config_to_ini(config),
    }
    if result.edge_selection is not None:
        sel = result.edge_selection
        files["edge_selection.json"] = canonical_json({
            "active_edges": [[list(e) for e in group] for group in sel["active_edges"]],
            "combinations": {str(g): {str(j): list(c) for j, c in m.items()} for g, m in sel["combinations"].items()},
        })
        files["edge_trajectory.csv"] = sel["trajectory"].to_csv()
    if retrained is not None:
        files["retrain.json"] = canonical_json({
            "cell_parameters": retrained.cell_parameters,
            "final_train_loss": retrained.loss_curve[-1] if retrained.loss_curve else None,
            "val_accuracy": retrained.val_accuracy,
        })

    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        atomic_write(out / name, text)
    manifest = {
        "command": "search",
        "config": config.to_dict(),
        "config_file": "config.ini",
        "outputs": sorted(files),
        "seed": config.seed,
        "version": __version__,
        "wall_time": time.perf_counter() - started,
    }
    if retrained is not None:
        manifest["retrain_accuracy"] = retrained.val_accuracy
    atomic_write(out / "manifest.json", canonical_json(manifest))

    last = result.trajectory[-1] if len(result.trajectory) else None
    if last is not None:
        print(f"search done: epoch {last.epoch} none_weight {last.none_weight:.4f} skip_ratio {last.skip_ratio:.4f} "
              f"val_acc {last.val_acc:.4f}")
    print(f"genotype: {result.genotype.to_json().strip()}")
    if retrained is not None:
        print(f"retrain accuracy: {retrained.val_accuracy:.4f}")
    print(f"outputs written to {out}")
    return EXIT_OK


# -- oracle-check -----------------------------------------------------------------


def _toy_line(eta: float) -> str:
    state = toy_state(1.0)
    _, g2 = estimate_parts(ExactImplicit(), state, TOY_TRAIN_BATCH, TOY_VAL_BATCH)
    g2p = amended_g2(state, eta, TOY_TRAIN_BATCH, TOY_VAL_BATCH)
    return (f"toy alpha=1: g2 = {g2[0]:.6g} (expected 4*alpha = 4), "
            f"g2' = {g2p[0]:.6g} (expected 16*eta*alpha = {16 * eta:.6g})")


def cmd_oracle_check(args) -> int:
    if args.dim_omega > MAX_DIM_OMEGA:
        raise UsageError(f"dim-omega {args.dim_omega} exceeds the cap of {MAX_DIM_OMEGA}")
    if args.dim_omega < 1 or args.dim_alpha < 1 or args.seeds < 1:
        raise UsageError("dims and seeds must be positive")
    if not args.eta > 0:
        raise UsageError("eta must be positive")
    tol, amended_tol, ip_floor = args.tolerance, 1e-9, -1e-12
    failures = skipped = 0
    report = {"identity": [], "amended": [], "commuting": [], "general_ip": []}

    print(_toy_line(args.eta))
    for seed in range(args.seeds):
        inst = random_quadratic_instance(seed, args.dim_omega, args.dim_alpha, "general")
        problem = inst.problem()
        alpha = np.random.default_rng(10_000 + seed).standard_normal(args.dim_alpha)
        try:
            w = solve_inner(problem, alpha)
            bundle = extract_curvature(problem, w, alpha)
            implicit = problem.val(w, alpha, {"alpha"}).grad_alpha + exact_g2(bundle)
        except SingularHessian as exc:
            warnings.warn(f"seed {seed}: skipped, {exc}")
            skipped += 1
            continue
        brute = brute_force_hypergradient(problem, alpha)
        err = _rel_error(implicit, brute)
        exact = inst.analytic_bundle(alpha)  # closed-form matrices, no finite differences
        dense = -args.eta * exact.J @ (exact.H @ exact.v)
        fd = amended_g2(BilevelState(w, alpha, problem.train_loss, problem.val_loss), args.eta, None, None)
        amended_err = _rel_error(fd, dense)
        ip = inner_product_check(bundle, args.eta)["ip"]
        ok = err < tol and amended_err < amended_tol
        failures += not ok
        report["identity"].append(err)
        report["amended"].append(amended_err)
        report["general_ip"].append(ip)
        print(f"general seed {seed}: implicit-vs-brute rel err {err:.3e}, amended fd-vs-dense rel err "
              f"{amended_err:.3e}, <g2', g2> {ip:.6g}{'' if ok else '  FAIL'}")

    for kind in ("identity", "commuting"):
        for seed in range(args.seeds):
            inst = random_quadratic_instance(seed, args.dim_omega, args.dim_alpha, kind)
            problem = inst.problem()
            alpha = np.random.default_rng(20_000 + seed).standard_normal(args.dim_alpha)
            w = solve_inner(problem, alpha)
            ip = inner_product_check(extract_curvature(problem, w, alpha), args.eta)["ip"]
            ok = ip >= ip_floor
            failures += not ok
            report["commuting"].append(ip)
            if not ok or args.verbose:
                print(f"{kind} seed {seed}: <g2', g2> {ip:.6g}{'' if ok else '  FAIL'}")

    ips = report["general_ip"]
    frac = float(np.mean(np.asarray(ips) >= 0)) if ips else float("nan")
    cons = report["commuting"]
    print(f"max implicit-vs-brute rel err {max(report['identity'], default=0):.3e} (tolerance {tol:g})")
    print(f"max amended fd-vs-dense rel err {max(report['amended'], default=0):.3e} (tolerance {amended_tol:g})")
    print(f"identity/commuting instances: {len(cons)}, min <g2', g2> {min(cons):.6g} (floor {ip_floor:g})")
    print(f"general instances: nonnegative <g2', g2> fraction {frac:.3f} ({len(ips)} instances, not asserted)")
    print(f"skipped (singular Hessian): {skipped}; failures: {failures}")

    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "oracle_check.json", canonical_json({
            "dim_alpha": args.dim_alpha,
            "dim_omega": args.dim_omega,
            "eta": args.eta,
            "failures": failures,
            "general_nonnegative_fraction": frac,
            "max_amended_rel_error": max(report["amended"], default=0.0),
            "max_identity_rel_error": max(report["identity"], default=0.0),
            "min_commuting_inner_product": min(cons),
            "seeds": args.seeds,
            "skipped": skipped,
        }))
    return EXIT_OK if failures == 0 else EXIT_FAIL


# -- gradcheck ----------------------------------------------------------------------


def cmd_gradcheck(args, cases: Optional[Sequence[GradcheckCase]] = None) -> int:
    if args.tolerance is not None and not args.tolerance > 0:
        raise UsageError("tolerance must be positive")
    if args.seeds < 1:
        raise UsageError("seeds must be positive")
    if cases is None:
        cases = default_cases() + (extended_supernet_cases() if args.extended else [])
    results = run_suite(cases, seeds=args.seeds, tolerance=args.tolerance, step=args.step)
    for r in results:
        print(f"{r.name:<28} max error {r.max_error:.3e}  tolerance {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed over {args.seeds} seeds")
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "gradcheck.json", canonical_json(
            {r.name: {"max_error": r.max_error, "passed": r.passed, "tolerance": r.tolerance} for r in results}))
    return EXIT_OK if not failed else EXIT_FAIL


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevelnas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def positive_int(text):
        value = int(text)
        if value < 1:
            raise argparse.ArgumentTypeError("must be >= 1")
        return value

    toy = sub.add_parser("toy", help="scalar bi-level toy problem")
    toy.add_argument("--estimator", default="amended")
    toy.add_argument("--eta", type=float, default=0.5)
    toy.add_argument("--xi", type=float, default=1.0)
    toy.add_argument("--steps", type=positive_int, default=400)
    toy.add_argument("--lr", type=float, default=0.05)
    toy.add_argument("--init", type=float, default=0.5)
    toy.add_argument("--tol", type=float, default=1e-3, help="|alpha| below this counts as converged")
    toy.add_argument("--expect-converge", action="store_true", help="exit 1 unless the run converges")
    toy.add_argument("--out")
    toy.set_defaults(func=cmd_toy)

    search = sub.add_parser("search", help="architecture search from an INI config")
    search.add_argument("--config", required=True)
    search.add_argument("--estimator")
    search.add_argument("--eta", type=float)
    search.add_argument("--xi", type=float)
    search.add_argument("--epochs", type=int)
    search.add_argument("--seed", type=int)
    search.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    search.add_argument("--retrain", action="store_true", help="re-train the selected genotype afterwards")
    search.add_argument("--out")
    search.set_defaults(func=cmd_search)

    oc = sub.add_parser("oracle-check", help="cross-check hypergradient oracles on quadratic instances")
    oc.add_argument("--seeds", type=int, default=50)
    oc.add_argument("--dim-omega", type=int, default=8)
    oc.add_argument("--dim-alpha", type=int, default=4)
    oc.add_argument("--eta", type=float, default=0.1)
    oc.add_argument("--tolerance", type=float, default=1e-3)
    oc.add_argument("--out")
    oc.set_defaults(func=cmd_oracle_check)

    gc = sub.add_parser("gradcheck", help="reverse mode vs central differences for every op and the super-network")
    gc.add_argument("--tolerance", type=float, help="override the per-case tolerance")
    gc.add_argument("--seeds", type=int, default=100)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--extended", action="store_true", help="also check stacked-cell super-networks")
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None, gradcheck_cases: Optional[Sequence[GradcheckCase]] = None) -> int:
    """Run the CLI; ``gradcheck_cases`` replaces the gradcheck suite (used to test the harness)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.func is cmd_gradcheck:
            return cmd_gradcheck(args, gradcheck_cases)
        return args.func(args)
    except (UsageError, ConfigError, DimensionCapExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
