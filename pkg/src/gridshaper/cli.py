"""Command-line interface: validate inputs, run simulations, run diagnostic
checks, and export plot-ready artifacts."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .assets import EnvelopeViolation, Fleet
from .conic import (
    SolverFailure,
    assemble_feasible_set,
    ConicProgram,
    declare_variables,
    extract_flow,
    solve,
)
from .controller import ConfigurationError, ProtocolViolation
from .network import (
    DistFlowDivergence,
    NetworkModel,
    load_network,
    random_radial_network,
    solve_exact_distflow,
    validate_topology,
)
from .scenario import generate_scenario, load_config, load_scenario, save_scenario
from .simulate import export_trace, run, uncontrolled_baseline

__all__ = ["main", "relaxed_power_flow"]

DOMAIN_ERRORS = (
    ConfigurationError,
    DistFlowDivergence,
    EnvelopeViolation,
    ProtocolViolation,
    SolverFailure,
    ValueError,
    KeyError,
    OSError,
    json.JSONDecodeError,
)


def relaxed_power_flow(model: NetworkModel, steps: int = 1):
    """Solve the relaxed power-flow with fixed injections only.

    A small linear cost on the squared-current columns drives the cone to
    tightness, so the result is comparable to the exact sweep.
    """
    control_steps = list(range(steps))
    fleet = Fleet()
    prog = ConicProgram()
    declare_variables(prog, model, fleet, control_steps)
    assemble_feasible_set(prog, model, fleet, control_steps, dt_hours=1.0)
    for t in control_steps:
        # pin controls so the comparison is against pure fixed injections
        for bus in model.capacitor_buses():
            prog.set_bounds(prog.var(("qg", bus, t)), 0.0, 0.0)
        for bank in model.batteries:
            prog.set_bounds(prog.var(("pbat", bank.bus, t)), 0.0, 0.0)
        for li in range(len(model.lines)):
            prog.add_linear_cost(prog.var(("l", li, t)), 1.0)
    report = solve(prog)
    if not report.is_optimal:
        raise SolverFailure(f"relaxed power flow did not solve: {report.status}")
    return extract_flow(prog, report.x, model, control_steps), report


def _cmd_validate(args) -> int:
    model = load_network(args.network)
    violations = validate_topology(model)
    if args.config:
        load_config(args.config)
    if args.scenario:
        load_scenario(args.scenario, network_path=args.network, config_path=args.config)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return 1
    print(f"ok: {model.n + 1} buses, {len(model.lines)} lines, "
          f"{len(model.capacitor_buses())} capacitors, {len(model.batteries)} batteries")
    return 0


def _cmd_run(args) -> int:
    scenario = load_scenario(
        args.scenario, network_path=args.network, config_path=args.config
    )
    violations = validate_topology(scenario.network)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return 1
    if args.steps:
        scenario.total_steps = args.steps
        scenario.requests = [r for r in scenario.requests if r.step < args.steps]
    trace, metrics = run(scenario, check_candidates=args.check_candidates)
    baseline = uncontrolled_baseline(scenario)
    metrics.peak_uncontrolled = baseline.peak_controlled
    if baseline.peak_controlled > 0:
        metrics.peak_reduction_ratio = 1.0 - metrics.peak_controlled / baseline.peak_controlled
    written = export_trace(trace, metrics, args.out, include_timing=args.timing)
    print(f"simulated {len(trace.records)} steps, "
          f"{metrics.requests_accepted}/{metrics.requests_total} requests accepted")
    print(f"voltage range [{metrics.v_min:.5f}, {metrics.v_max:.5f}] p.u.; "
          f"peak {metrics.peak_controlled:.4f} vs baseline {metrics.peak_uncontrolled:.4f}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_baseline(args) -> int:
    scenario = load_scenario(
        args.scenario, network_path=args.network, config_path=args.config
    )
    if args.steps:
        scenario.total_steps = args.steps
        scenario.requests = [r for r in scenario.requests if r.step < args.steps]
    metrics = uncontrolled_baseline(scenario)
    print(f"uncontrolled peak: {metrics.peak_controlled:.6f} p.u. "
          f"over {scenario.total_steps} steps, {len(scenario.requests)} requests")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as fh:
            json.dump(metrics.to_dict(), fh, indent=1, sort_keys=True)
        print(f"wrote {out / 'metrics.json'}")
    return 0


def _cmd_check_relaxation(args) -> int:
    tol = 1e-6
    worst_dev = 0.0
    worst_gap = 0.0
    if args.network:
        models = [load_network(args.network)]
    else:
        rng_seeds = [args.seed + i for i in range(args.feeders)]
        models = [
            random_radial_network(s, n_buses=int(3 + (s % 8)), steps=max(1, args.steps or 1))
            for s in rng_seeds
        ]
    for i, model in enumerate(models):
        steps = max(1, args.steps or 1)
        sol, report = relaxed_power_flow(model, steps)
        exact_nu = np.vstack(
            [solve_exact_distflow(model, *model.forecast.at(t)).nu[0] for t in range(steps)]
        )
        dev = float(np.max(np.abs(sol.nu - exact_nu)))
        worst_dev = max(worst_dev, dev)
        worst_gap = max(worst_gap, report.relaxation_gap)
        print(f"feeder {i}: n={model.n} max |nu - oracle| = {dev:.3e}, "
              f"cone gap = {report.relaxation_gap:.3e}")
    print(f"worst deviation {worst_dev:.3e} (tolerance {tol:.0e}), "
          f"worst cone gap {worst_gap:.3e}")
    return 0 if worst_dev <= tol else 1


def _cmd_check_recursive_feasibility(args) -> int:
    if not args.network or not args.config:
        print("check-recursive-feasibility requires --network and --config",
              file=sys.stderr)
        return 2
    model = load_network(args.network)
    config = load_config(args.config)
    steps = args.steps or 24
    count = args.scenarios
    infeasible = 0
    rejected = 0
    from .scenario import Scenario, _request_from_doc

    for i in range(count):
        doc = generate_scenario(model, config.horizon, steps, seed=args.seed + i)
        scenario = Scenario(
            network=model,
            config=config,
            requests=[_request_from_doc(rd) for rd in doc["requests"]],
            total_steps=steps,
            seed=doc["seed"],
        )
        try:
            trace, metrics = run(scenario)
        except ProtocolViolation as exc:
            infeasible += 1
            print(f"scenario seed {args.seed + i}: INFEASIBLE ({exc})")
            continue
        rejected += metrics.requests_total - metrics.requests_accepted
    print(f"{infeasible} infeasible steps across {count} scenarios "
          f"({rejected} requests turned away at admission)")
    return 0 if infeasible == 0 else 1


def _cmd_gen_scenario(args) -> int:
    if not args.network or not args.config:
        print("gen-scenario requires --network and --config", file=sys.stderr)
        return 2
    model = load_network(args.network)
    config = load_config(args.config)
    steps = args.steps or 24
    doc = generate_scenario(
        model,
        config.horizon,
        steps,
        seed=args.seed,
        shapeable_rate=args.shapeable_rate,
        deferrable_rate=args.deferrable_rate,
        network_ref=args.network,
        config_ref=args.config,
    )
    if not doc["requests"] and (args.shapeable_rate > 0 or args.deferrable_rate > 0):
        print("warning: no requests generated at these rates", file=sys.stderr)
    save_scenario(doc, args.out)
    print(f"wrote {args.out}: {len(doc['requests'])} requests over {steps} steps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridshaper",
        description="Predictive load shaping and voltage control on radial feeders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, network=False, scenario=False, out=False):
        p.add_argument("--network", required=network, help="feeder description (JSON)")
        p.add_argument("--scenario", required=scenario, help="request schedule (JSON)")
        p.add_argument("--config", help="controller configuration (JSON)")
        p.add_argument("--out", required=out, help="output directory or file")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--steps", type=int, help="number of simulated steps")

    p = sub.add_parser("validate", help="check network/scenario/config files")
    common(p, network=True)
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("run", help="closed-loop simulation with admission control")
    common(p, scenario=True, out=True)
    p.add_argument("--check-candidates", action="store_true",
                   help="verify the shifted feasibility candidate every step")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock solve times in decisions.csv "
                        "(breaks byte-identical reruns)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("baseline", help="greedy uncontrolled demand curve")
    common(p, scenario=True)
    p.set_defaults(fn=_cmd_baseline)

    p = sub.add_parser("check-relaxation",
                       help="compare relaxed voltages against the exact sweep")
    common(p)
    p.add_argument("--feeders", type=int, default=20,
                   help="number of random feeders when no --network is given")
    p.set_defaults(fn=_cmd_check_relaxation)

    p = sub.add_parser("check-recursive-feasibility",
                       help="random closed-loop scenarios must never go infeasible")
    common(p)
    p.add_argument("--scenarios", type=int, default=100,
                   help="number of random scenarios")
    p.set_defaults(fn=_cmd_check_recursive_feasibility)

    p = sub.add_parser("gen-scenario", help="emit a random request schedule")
    common(p, out=True)
    p.add_argument("--shapeable-rate", type=float, default=0.3,
                   help="mean shapeable arrivals per step")
    p.add_argument("--deferrable-rate", type=float, default=0.3,
                   help="mean deferrable arrivals per step")
    p.set_defaults(fn=_cmd_gen_scenario)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
