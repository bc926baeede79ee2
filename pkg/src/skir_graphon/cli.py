"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or failed verification,
2 solver did not converge (outputs are still written), 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .experiments import (
    STATE_NAMES,
    ComparisonReport,
    ScenarioError,
    emit_report,
    load_scenario,
    run_experiment1,
    run_experiment2,
)
from .model import existence_bound
from .solver import Coefficients, residual_norm, solve_equilibrium
from .verify import (
    SimConfig,
    analytic_decoupled,
    best_response,
    exploitability,
    perturb_controls,
    simulate_finite_player,
)

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3

ANALYTIC_TOL = 1e-7
EXPLOIT_TOL = 1e-4
PERTURBATION = 0.1
SMOKE_AGENTS = 500


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def num(x):
    """Fixed nine-significant-digit rendering used for all console numbers."""
    x = float(x)
    if not math.isfinite(x):
        return str(x)
    return f"{x:#.9g}"


def _ids(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    parser = _Parser(prog="skir-graphon",
                     description="Equilibria of the controlled SKIR rumor game on block graphons.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    def add(name, help_, config=True, out=False, sim=False):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", required=True,
                           help="scenario file or preset name, e.g. experiment1-policy0")
        if out:
            p.add_argument("--out", default="results", help="output directory (default: results)")
            p.add_argument("--plots", action="store_true", help="also write SVG line charts")
        if sim:
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--n-agents", type=int, default=None)
        p.add_argument("--quiet", action="store_true", help="print only results and file names")
        return p

    add("solve", "solve one scenario and write its flow CSV", out=True)
    add("check-existence", "evaluate the smallness condition for existence")
    add("verify", "run analytic, exploitability and Monte-Carlo checks", sim=True)
    add("simulate", "simulate the finite-player game under the equilibrium controls",
        out=True, sim=True)
    p1 = add("experiment1", "compare the age-group policies", config=False, out=True)
    p1.add_argument("--policies", type=_ids, default=[0, 1, 2], help="comma-separated ids in 0..2")
    p2 = add("experiment2", "compare the platform seeding schemes", config=False, out=True)
    p2.add_argument("--schemes", type=_ids, default=[0, 1, 2, 3, 4], help="comma-separated ids in 0..4")
    return parser


def _say(args, *lines):
    if not args.quiet:
        for line in lines:
            print(line)


def _print_manifest(files):
    for f in files:
        print(f"wrote {f}")


def _report_status(args, report: ComparisonReport):
    for name in report.names:
        res = report.results[name]
        flag = "converged" if res.converged else "NOT CONVERGED"
        _say(args, f"{name}: {flag} after {res.iterations} iterations, "
                   f"residual {num(res.final_residual)}")
        if not args.quiet:
            s = report.summary(name)
            for b, bname in enumerate(report.scenarios[name].block_names):
                print(f"  {bname}: sup p_I {num(s['sup_p_i'][b])}  int p_I {num(s['int_p_i'][b])}"
                      f"  int p_K {num(s['int_p_k'][b])}  mean phi_K {num(s['mean_phi_k'][b])}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_solve(args):
    sc = load_scenario(args.config)
    report = ComparisonReport({sc.name: sc}, {sc.name: sc.solve()}, sc.name)
    files = emit_report(report, args.out, args.plots)
    code = _report_status(args, report)
    _print_manifest(files)
    return code


def cmd_check_existence(args):
    sc = load_scenario(args.config)
    chk = existence_bound(sc.grid.T, sc.params, sc.policy, sc.bound)
    _say(args, f"T = {num(chk.horizon)}  beta_bar = {num(chk.beta_bar)}  a_max = {num(chk.a_max)}",
         f"lambda_I_bar = {num(chk.lambda_i_bar)}  lambda_K_bar = {num(chk.lambda_k_bar)}")
    print(f"existence value {num(chk.value)}")
    print("SATISFIED" if chk.satisfied else "NOT SATISFIED")
    return EXIT_OK


def _line(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def cmd_verify(args):
    sc = load_scenario(args.config)
    res = sc.solve()
    _say(args, f"{sc.name}: {'converged' if res.converged else 'NOT CONVERGED'} after "
               f"{res.iterations} iterations, residual {num(res.final_residual)}")
    ok = True

    if any(p.gamma > 0 for p in sc.params):
        print("SKIP  analytic: no closed form with relapse (gamma > 0)")
    else:
        g0 = sc.graphon.scaled(0.0)
        r0 = solve_equilibrium(sc.grid, g0, sc.params, sc.policy, sc.bound, sc.solver)
        err = residual_norm(r0.flows, analytic_decoupled(sc.grid, sc.params, sc.policy, sc.bound))
        ok &= _line("analytic", err <= ANALYTIC_TOL,
                    f"zero-graphon max error {num(err)} (limit {num(ANALYTIC_TOL)})")

    ex = exploitability(res, sc.grid, sc.params, sc.policy, sc.bound)
    ok &= _line("exploitability", ex <= EXPLOIT_TOL, f"{num(ex)} (limit {num(EXPLOIT_TOL)})")
    bad = perturb_controls(res, PERTURBATION, sc.bound)
    ex_bad = exploitability(bad, sc.grid, sc.params, sc.policy, sc.bound)
    ok &= _line("perturbed", ex_bad > 0 and ex_bad >= 10 * max(ex, 0.0),
                f"{num(ex_bad)} after shifting controls by {num(PERTURBATION)}")

    n_agents = args.n_agents or SMOKE_AGENTS
    sim = simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy,
                                 SimConfig(n_agents, args.seed))
    sizes = sim.block_sizes
    dev = float(np.max(np.abs(sim.empirical_p - res.flows.p)[:, sizes > 0]))
    limit = 3.0 / math.sqrt(max(int(sizes.min()), 1))
    ok &= _line("monte-carlo", dev <= limit,
                f"N={n_agents} max occupancy deviation {num(dev)} (limit {num(limit)})")
    if not ok:
        return EXIT_INVALID
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args):
    sc = load_scenario(args.config)
    n_agents = args.n_agents or 1000
    if n_agents < 1:
        raise ValueError(f"--n-agents must be positive, got {n_agents}")
    res = sc.solve()
    sim = simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy,
                                 SimConfig(n_agents, args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    occ = out / f"{sc.name}_simulation.csv"
    emp = sim.empirical_p
    with open(occ, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "block", "state", "count", "p_empirical", "p_mean_field"))
        for n, t in enumerate(sc.grid.nodes):
            for b, bname in enumerate(sc.block_names):
                for e, sname in enumerate(STATE_NAMES):
                    w.writerow((repr(float(t)), bname, sname, int(sim.counts[n, b, e]),
                                repr(float(emp[n, b, e])), repr(float(res.flows.p[n, b, e]))))
    value = (Coefficients.from_params(sc.params).p0
             * best_response(res, sc.grid, sc.params, sc.policy, sc.bound).u_eq[0]).sum(axis=1)
    costs = out / f"{sc.name}_costs.csv"
    with open(costs, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("block", "n_agents", "mean_cost", "cost_se", "mean_field_value"))
        for b, bname in enumerate(sc.block_names):
            w.writerow((bname, int(sim.block_sizes[b]), repr(float(sim.mean_cost_per_block[b])),
                        repr(float(sim.cost_se_per_block[b])), repr(float(value[b]))))
    _say(args, f"{sc.name}: N={n_agents} seed={args.seed}, max occupancy deviation "
               f"{num(np.max(np.abs(emp - res.flows.p)))}")
    for b, bname in enumerate(sc.block_names):
        _say(args, f"  {bname}: mean cost {num(sim.mean_cost_per_block[b])} "
                   f"+/- {num(sim.cost_se_per_block[b])}  mean-field {num(value[b])}")
    _print_manifest([occ, costs])
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_experiment1(args):
    report = run_experiment1(args.policies)
    files = emit_report(report, args.out, args.plots)
    code = _report_status(args, report)
    _print_manifest(files)
    return code


def cmd_experiment2(args):
    report = run_experiment2(args.schemes)
    files = emit_report(report, args.out, args.plots)
    code = _report_status(args, report)
    _print_manifest(files)
    return code


COMMANDS = {
    "solve": cmd_solve,
    "check-existence": cmd_check_existence,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "experiment1": cmd_experiment1,
    "experiment2": cmd_experiment2,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"skir-graphon: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, ValueError) as exc:
        print(f"skir-graphon: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"skir-graphon: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
