"""Two-stage receding-horizon controller.

Stage 1 computes a periodic reference trajectory for the network with no
flexible loads: batteries and capacitors alone keep voltage in bounds over
one full period, and the terminal state wraps onto the initial state. Stage 2
is the per-step MPC over a shorter horizon N: it prices shapeable charging,
keeps every step inside the relaxed branch-flow feasible set, and ends in a
terminal set anchored to the stage-1 reference so the problem stays feasible
at the next step. The terminal set obliges each battery to hold, on top of
its reference charge, exactly the energy still owed to flexible loads at its
bus; buses without storage get the degenerate zero-capacity version of the
same constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conic
from .assets import Fleet, ShapeableLoad, shp_soc_min
from .conic import ConicProgram, SolverReport
from .network import FlowSolution, NetworkModel

__all__ = [
    "HorizonConfig",
    "ControllerWeights",
    "PriceSignal",
    "ReferenceTrajectory",
    "TerminalSet",
    "MpcSolution",
    "SystemState",
    "ConfigurationError",
    "DegenerateTailError",
    "ProtocolViolation",
    "solve_stage1",
    "build_terminal_set",
    "check_headroom_conditions",
    "solve_stage2",
    "construct_shifted_candidate",
    "verify_candidate",
]


class ConfigurationError(RuntimeError):
    pass


class DegenerateTailError(RuntimeError):
    """A load's plug-out coincides with the horizon end but its target is unmet."""


class ProtocolViolation(RuntimeError):
    """Stage-2 became infeasible although every admission was gated."""


@dataclass(frozen=True)
class HorizonConfig:
    dt_hours: float
    N: int
    N_r: int

    def __post_init__(self):
        if self.dt_hours <= 0:
            raise ConfigurationError("step length must be positive")
        if not (0 < self.N < self.N_r):
            raise ConfigurationError("need 0 < N < N_r")


@dataclass(frozen=True)
class ControllerWeights:
    """Diagonal weights: t1 on stage-1 controls (> 0), t2/t3 on voltage deviation.

    ``loss`` is a small linear cost on squared line currents that breaks ties
    among flow solutions; it keeps the cone relaxation tight without
    materially changing the schedule.
    """

    t1: float = 1.0
    t2: float = 0.1
    t3: float = 0.1
    loss: float = 1e-3

    def __post_init__(self):
        if self.t1 <= 0:
            raise ConfigurationError("t1 must be positive definite")
        if self.t2 < 0 or self.t3 < 0 or self.loss < 0:
            raise ConfigurationError("t2, t3, loss must be nonnegative")


@dataclass(frozen=True)
class PriceSignal:
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if not np.isfinite(vals).all():
            raise ValueError("price entries must be finite")

    def at(self, step: int) -> float:
        return float(self.values[step % len(self.values)])


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Stage-1 optimum over one period; all arrays are (N_r, n), wrapping by step."""

    q_hat: np.ndarray
    p_bat_hat: np.ndarray
    e_bat_hat: np.ndarray
    nu_hat: np.ndarray
    objective: float

    @property
    def period(self) -> int:
        return self.q_hat.shape[0]

    def q_at(self, step: int) -> np.ndarray:
        return self.q_hat[step % self.period]

    def p_bat_at(self, step: int) -> np.ndarray:
        return self.p_bat_hat[step % self.period]

    def e_bat_at(self, step: int) -> np.ndarray:
        return self.e_bat_hat[step % self.period]


@dataclass
class TerminalSet:
    """Horizon-end constraints: shapeable SOC bands and per-bus battery equalities.

    Each battery row reads e_bat_i(s) + sum_j coeff_j * e_shp_j(s) = rhs_i at
    the horizon end s; coeff_j = 1/eta_j for shapeable loads at bus i still
    connected at s. Buses without a battery carry the same row with a zero
    left-hand battery term.
    """

    step: int  # horizon end, N + k
    k_out_max: int
    shapeable_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    battery_rows: dict[int, tuple[dict[str, float], float]] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.shapeable_bounds and not self.battery_rows


@dataclass
class SystemState:
    """Closed-loop state: battery SOC per bus (length n) and shapeable SOC by id."""

    e_bat: np.ndarray
    e_shp: dict[str, float] = field(default_factory=dict)

    def copy(self) -> "SystemState":
        return SystemState(e_bat=self.e_bat.copy(), e_shp=dict(self.e_shp))


@dataclass
class MpcSolution:
    """Stage-2 optimum: control/state trajectory plus the flow solution."""

    step: int
    control_steps: list[int]
    q_g: np.ndarray       # (N, n)
    p_bat: np.ndarray     # (N, n)
    e_bat: np.ndarray     # (N + 1, n)
    u_shp: dict[str, dict[int, float]]
    e_shp: dict[str, dict[int, float]]
    flow: FlowSolution
    objective: float
    report: SolverReport
    terminal: TerminalSet


def _stage1_fleet() -> Fleet:
    return Fleet()


def solve_stage1(
    model: NetworkModel,
    horizon: HorizonConfig,
    weights: ControllerWeights,
    nu_nom: Optional[float] = None,
) -> ReferenceTrajectory:
    """Compute the periodic no-flexible-load reference.

    The initial SOC is a free decision variable tied down by the wrap-around
    equality x(0) = x(N_r - 1) + dT * u(N_r - 1).
    """
    nu_nom = model.v0_sq if nu_nom is None else nu_nom
    steps = list(range(horizon.N_r))
    fleet = _stage1_fleet()
    prog = ConicProgram()
    conic.declare_variables(prog, model, fleet, steps)
    conic.assemble_feasible_set(prog, model, fleet, steps, horizon.dt_hours)
    conic.assemble_dynamics(prog, model, fleet, steps, horizon.dt_hours)
    for bank in model.batteries:
        prog.add_eq(
            {
                prog.var(("ebat", bank.bus, horizon.N_r)): 1.0,
                prog.var(("ebat", bank.bus, 0)): -1.0,
            },
            0.0,
        )
    for t in steps:
        for bus in model.capacitor_buses():
            prog.add_quadratic_cost(prog.var(("qg", bus, t)), weights.t1)
        for bank in model.batteries:
            prog.add_quadratic_cost(prog.var(("pbat", bank.bus, t)), weights.t1)
        if weights.t2 > 0:
            for b in model.buses:
                prog.add_quadratic_cost(prog.var(("nu", b.id, t)), weights.t2, center=nu_nom)
        for li in range(len(model.lines)):
            prog.add_linear_cost(prog.var(("l", li, t)), weights.loss)

    report = conic.solve(prog)
    if not report.is_optimal:
        raise ConfigurationError("base network violates the standing feasibility assumption")

    n = model.n
    Nr = horizon.N_r
    q_hat = np.zeros((Nr, n))
    p_hat = np.zeros((Nr, n))
    e_hat = np.zeros((Nr, n))
    x = report.x
    for t in steps:
        for bus in model.capacitor_buses():
            q_hat[t, bus - 1] = x[prog.var(("qg", bus, t))]
        for bank in model.batteries:
            p_hat[t, bank.bus - 1] = x[prog.var(("pbat", bank.bus, t))]
            e_hat[t, bank.bus - 1] = x[prog.var(("ebat", bank.bus, t))]
    flow = conic.extract_flow(prog, x, model, steps)
    return ReferenceTrajectory(
        q_hat=q_hat,
        p_bat_hat=p_hat,
        e_bat_hat=e_hat,
        nu_hat=flow.nu,
        objective=report.objective,
    )


def _remaining_deferrable(fleet: Fleet, n: int, start: int, stop: int) -> np.ndarray:
    """Per-bus deferrable power summed over absolute steps [start, stop)."""
    total = np.zeros(n)
    for t in range(start, stop):
        total += fleet.deferrable_power(n, t)
    return total


def _k_out_max(fleet: Fleet, floor: int) -> int:
    k = floor
    for load in fleet.shapeable:
        k = max(k, load.k_out)
    for load in fleet.deferrable:
        if load.plug_in_step is not None:
            k = max(k, load.end_step)
    return k


def build_terminal_set(
    reference: ReferenceTrajectory,
    fleet: Fleet,
    model: NetworkModel,
    k: int,
    horizon: HorizonConfig,
) -> TerminalSet:
    """Terminal constraints at step N + k for the currently connected fleet."""
    s = k + horizon.N
    kmax = _k_out_max(fleet, s)
    term = TerminalSet(step=s, k_out_max=kmax)

    for load in fleet.shapeable:
        if load.k_out < s:
            continue
        lo = max(
            load.e_des - max(0.0, (load.k_out - s) * load.eta * horizon.dt_hours * load.c_max),
            load.e_low,
        )
        term.shapeable_bounds[load.id] = (lo, load.e_des)

    e_hat_s = reference.e_bat_at(s)
    for b in model.buses:
        i = b.id
        coeffs: dict[str, float] = {}
        rhs = float(e_hat_s[i - 1])
        for load in fleet.shapeable:
            if load.bus == i and load.k_out >= s:
                coeffs[load.id] = 1.0 / load.eta
                rhs += load.e_des / load.eta
        rhs += horizon.dt_hours * float(
            _remaining_deferrable(fleet, model.n, s, kmax + 1)[i - 1]
        )
        has_battery = model.battery_at(i) is not None
        if coeffs or has_battery or rhs != float(e_hat_s[i - 1]):
            term.battery_rows[i] = (coeffs, rhs)
    return term


def _tail_rate_coeffs(
    load: ShapeableLoad, s: int, dt_hours: float
) -> tuple[float, float]:
    """Constant-rate tail power as an affine function of e_shp(s).

    Returns (a, b) with rate = a - b * e_shp(s), valid while the load is
    still connected (k_out > s).
    """
    denom = (load.k_out - s) * load.eta * dt_hours
    b = 1.0 / denom
    return b * load.e_des, b


@dataclass
class HeadroomReport:
    """Numeric margins for the two recursive-feasibility condition families."""

    power_margins: dict[tuple[int, int], float] = field(default_factory=dict)
    energy_margins: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        vals = list(self.power_margins.values()) + list(self.energy_margins.values())
        return min(vals) if vals else np.inf

    @property
    def all_ok(self) -> bool:
        return self.worst >= -1e-9

    def violations(self) -> list[tuple[str, int, int, float]]:
        out = [
            ("power", bus, l, m) for (bus, l), m in self.power_margins.items() if m < -1e-9
        ]
        out += [
            ("energy", bus, l, m) for (bus, l), m in self.energy_margins.items() if m < -1e-9
        ]
        return out


def check_headroom_conditions(
    reference: ReferenceTrajectory,
    fleet: Fleet,
    model: NetworkModel,
    terminal_e_shp: dict[str, float],
    k: int,
    horizon: HorizonConfig,
) -> HeadroomReport:
    """Evaluate the battery headroom conditions given terminal shapeable SOCs.

    Both families must be nonnegative for the shifted candidate to remain
    feasible after the horizon: (i) the reference battery power minus the
    deferrable and constant-tail shapeable draw stays above p_min; (ii) the
    reference battery SOC plus all energy still owed stays below e_max.
    """
    s = k + horizon.N
    kmax = _k_out_max(fleet, s)
    report = HeadroomReport()
    n = model.n

    rates: dict[str, float] = {}
    for load in fleet.shapeable:
        if load.k_out > s:
            a, bcoef = _tail_rate_coeffs(load, s, horizon.dt_hours)
            rates[load.id] = a - bcoef * terminal_e_shp[load.id]

    for l in range(s, kmax + 1):
        p_def = fleet.deferrable_power(n, l)
        p_hat = reference.p_bat_at(l)
        e_hat = reference.e_bat_at(l)
        e_def_rem = horizon.dt_hours * _remaining_deferrable(fleet, n, l, kmax + 1)
        for b in model.buses:
            i = b.id
            bank = model.battery_at(i)
            p_min = bank.p_min if bank else 0.0
            e_max = bank.e_max if bank else 0.0
            tail_p = sum(
                rates[ld.id]
                for ld in fleet.shapeable
                if ld.bus == i and ld.k_out > s and l < ld.k_out
            )
            report.power_margins[(i, l)] = float(
                p_hat[i - 1] - p_def[i - 1] - tail_p - p_min
            )
            tail_e = sum(
                (ld.e_des - terminal_e_shp[ld.id])
                * max(0, ld.k_out - l)
                / (ld.eta * (ld.k_out - s))
                for ld in fleet.shapeable
                if ld.bus == i and ld.k_out > s
            )
            report.energy_margins[(i, l)] = float(
                e_max - e_hat[i - 1] - e_def_rem[i - 1] - tail_e
            )
    return report


def _add_terminal_rows(
    prog: ConicProgram,
    term: TerminalSet,
    fleet: Fleet,
    model: NetworkModel,
) -> None:
    s = term.step
    for load_id, (lo, hi) in term.shapeable_bounds.items():
        col = prog.var(("eshp", load_id, s))
        prog.set_bounds(col, lo, hi)
    for bus, (coeffs, rhs) in term.battery_rows.items():
        row: dict[int, float] = {}
        if ("ebat", bus, s) in prog.index:
            row[prog.var(("ebat", bus, s))] = 1.0
        for load_id, coef in coeffs.items():
            row[prog.var(("eshp", load_id, s))] = coef
        prog.add_eq(row, rhs)


def _add_headroom_rows(
    prog: ConicProgram,
    reference: ReferenceTrajectory,
    fleet: Fleet,
    model: NetworkModel,
    term: TerminalSet,
    horizon: HorizonConfig,
) -> None:
    """Embed the headroom conditions as linear rows in the terminal SOCs."""
    s = term.step
    kmax = term.k_out_max
    n = model.n
    affine: dict[str, tuple[float, float]] = {}
    for load in fleet.shapeable:
        if load.k_out > s:
            affine[load.id] = _tail_rate_coeffs(load, s, horizon.dt_hours)

    for l in range(s, kmax + 1):
        p_def = fleet.deferrable_power(n, l)
        p_hat = reference.p_bat_at(l)
        e_hat = reference.e_bat_at(l)
        e_def_rem = horizon.dt_hours * _remaining_deferrable(fleet, n, l, kmax + 1)
        for b in model.buses:
            i = b.id
            bank = model.battery_at(i)
            p_min = bank.p_min if bank else 0.0
            e_max = bank.e_max if bank else 0.0

            # power headroom: sum of tail rates <= p_hat - p_def - p_min
            row: dict[int, float] = {}
            const = 0.0
            active = False
            for ld in fleet.shapeable:
                if ld.bus == i and ld.id in affine and l < ld.k_out:
                    a, bcoef = affine[ld.id]
                    col = prog.var(("eshp", ld.id, s))
                    row[col] = row.get(col, 0.0) - bcoef
                    const += a
                    active = True
            rhs = float(p_hat[i - 1] - p_def[i - 1] - p_min) - const
            if active or rhs < 0:
                prog.add_leq(row, rhs)

            # energy headroom: owed energy on top of the reference fits e_max
            row = {}
            const = 0.0
            active = False
            for ld in fleet.shapeable:
                if ld.bus == i and ld.id in affine:
                    f = max(0, ld.k_out - l) / (ld.eta * (ld.k_out - s))
                    if f:
                        col = prog.var(("eshp", ld.id, s))
                        row[col] = row.get(col, 0.0) - f
                        const += f * ld.e_des
                        active = True
            rhs = float(e_max - e_hat[i - 1] - e_def_rem[i - 1]) - const
            if active or rhs < 0:
                prog.add_leq(row, rhs)


def solve_stage2(
    model: NetworkModel,
    fleet: Fleet,
    reference: ReferenceTrajectory,
    price: PriceSignal,
    state: SystemState,
    k: int,
    horizon: HorizonConfig,
    weights: ControllerWeights,
    nu_nom: Optional[float] = None,
) -> MpcSolution:
    """Solve the receding-horizon problem at step k. Raises ProtocolViolation
    if infeasible (impossible when every admission passed the gate)."""
    report, sol = try_stage2(
        model, fleet, reference, price, state, k, horizon, weights, nu_nom
    )
    if sol is None:
        raise ProtocolViolation(f"stage-2 infeasible at step {k}")
    return sol


def try_stage2(
    model: NetworkModel,
    fleet: Fleet,
    reference: ReferenceTrajectory,
    price: PriceSignal,
    state: SystemState,
    k: int,
    horizon: HorizonConfig,
    weights: ControllerWeights,
    nu_nom: Optional[float] = None,
) -> tuple[SolverReport, Optional[MpcSolution]]:
    """Like solve_stage2 but returns (report, None) on infeasibility."""
    nu_nom = model.v0_sq if nu_nom is None else nu_nom
    steps = list(range(k, k + horizon.N))
    s = k + horizon.N
    prog = ConicProgram()
    conic.declare_variables(prog, model, fleet, steps)
    conic.assemble_feasible_set(prog, model, fleet, steps, horizon.dt_hours)
    conic.assemble_dynamics(prog, model, fleet, steps, horizon.dt_hours)

    # initial state is data, not a decision
    for bank in model.batteries:
        prog.set_bounds(
            prog.var(("ebat", bank.bus, k)),
            float(state.e_bat[bank.bus - 1]),
            float(state.e_bat[bank.bus - 1]),
        )
    for load in fleet.shapeable:
        e0 = float(state.e_shp[load.id])
        prog.set_bounds(prog.var(("eshp", load.id, k)), e0, e0)

    term = build_terminal_set(reference, fleet, model, k, horizon)
    _add_terminal_rows(prog, term, fleet, model)
    _add_headroom_rows(prog, reference, fleet, model, term, horizon)

    for t in steps:
        lam = price.at(t)
        for load in fleet.shapeable:
            if ("cshp", load.id, t) in prog.index:
                prog.add_linear_cost(prog.var(("cshp", load.id, t)), lam)
        if weights.t3 > 0:
            for b in model.buses:
                prog.add_quadratic_cost(prog.var(("nu", b.id, t)), weights.t3, center=nu_nom)
        for li in range(len(model.lines)):
            prog.add_linear_cost(prog.var(("l", li, t)), weights.loss)

    report = conic.solve(prog)
    if not report.is_optimal:
        return report, None

    n = model.n
    N = horizon.N
    x = report.x
    q_g = np.zeros((N, n))
    p_bat = np.zeros((N, n))
    e_bat = np.zeros((N + 1, n))
    u_shp: dict[str, dict[int, float]] = {ld.id: {} for ld in fleet.shapeable}
    e_shp: dict[str, dict[int, float]] = {ld.id: {} for ld in fleet.shapeable}
    for ti, t in enumerate(steps):
        for bus in model.capacitor_buses():
            q_g[ti, bus - 1] = x[prog.var(("qg", bus, t))]
        for bank in model.batteries:
            p_bat[ti, bank.bus - 1] = x[prog.var(("pbat", bank.bus, t))]
            e_bat[ti, bank.bus - 1] = x[prog.var(("ebat", bank.bus, t))]
    for bank in model.batteries:
        e_bat[N, bank.bus - 1] = x[prog.var(("ebat", bank.bus, s))]
    for load in fleet.shapeable:
        for t in steps:
            if ("cshp", load.id, t) in prog.index:
                u_shp[load.id][t] = float(x[prog.var(("cshp", load.id, t))])
        for t in steps + [s]:
            if ("eshp", load.id, t) in prog.index:
                e_shp[load.id][t] = float(x[prog.var(("eshp", load.id, t))])

    sol = MpcSolution(
        step=k,
        control_steps=steps,
        q_g=q_g,
        p_bat=p_bat,
        e_bat=e_bat,
        u_shp=u_shp,
        e_shp=e_shp,
        flow=conic.extract_flow(prog, x, model, steps),
        objective=report.objective,
        report=report,
        terminal=term,
    )
    return report, sol


@dataclass
class Candidate:
    """Shifted control sequence for step k+1 built from the optimum at step k."""

    step: int  # k + 1
    control_steps: list[int]
    q_g: np.ndarray       # (N, n)
    p_bat: np.ndarray     # (N, n)
    u_shp: dict[str, dict[int, float]]
    e_bat: np.ndarray     # (N + 1, n)
    e_shp: dict[str, dict[int, float]]


def construct_shifted_candidate(
    prev: MpcSolution,
    reference: ReferenceTrajectory,
    fleet: Fleet,
    model: NetworkModel,
    horizon: HorizonConfig,
) -> Candidate:
    """Append the constant-rate tail control at the old horizon end to the
    shifted previous optimum; the constant-rate tail construction keeps this feasible.

    The appended step reuses the stage-1 reference for capacitors, charges
    each still-connected shapeable load at the constant rate that exactly
    meets its target, and lets batteries absorb the difference from the
    reference injection.
    """
    k = prev.step
    s = k + horizon.N
    n = model.n
    N = horizon.N
    dt = horizon.dt_hours

    c_new: dict[str, float] = {}
    p_shp_bus = np.zeros(n)
    for load in fleet.shapeable:
        if load.k_out > s:
            e_s = prev.e_shp[load.id][s]
            rate = (load.e_des - e_s) / ((load.k_out - s) * load.eta * dt)
            c_new[load.id] = rate
            p_shp_bus[load.bus - 1] += rate
        elif load.k_out == s:
            e_s = prev.e_shp[load.id][s]
            if abs(e_s - load.e_des) > 1e-6 and e_s < load.e_des:
                raise DegenerateTailError(
                    f"load {load.id} plugs out at the horizon end below target"
                )
    p_def_s = fleet.deferrable_power(n, s)
    q_new = reference.q_at(s).copy()
    p_bat_new = reference.p_bat_at(s) - p_def_s - p_shp_bus

    q_g = np.vstack([prev.q_g[1:], q_new])
    p_bat = np.vstack([prev.p_bat[1:], p_bat_new])

    steps = list(range(k + 1, k + 1 + N))
    u_shp: dict[str, dict[int, float]] = {}
    e_shp: dict[str, dict[int, float]] = {}
    for load in fleet.shapeable:
        u = {t: v for t, v in prev.u_shp[load.id].items() if t >= k + 1}
        e = {t: v for t, v in prev.e_shp[load.id].items() if t >= k + 1}
        if load.id in c_new:
            u[s] = c_new[load.id]
            e[s + 1] = e[s] + load.eta * dt * c_new[load.id]
        u_shp[load.id] = u
        e_shp[load.id] = e

    e_bat = np.vstack([prev.e_bat[1:], prev.e_bat[N] + dt * p_bat_new])
    return Candidate(
        step=k + 1,
        control_steps=steps,
        q_g=q_g,
        p_bat=p_bat,
        u_shp=u_shp,
        e_bat=e_bat,
        e_shp=e_shp,
    )


def verify_candidate(
    cand: Candidate,
    model: NetworkModel,
    fleet: Fleet,
    reference: ReferenceTrajectory,
    horizon: HorizonConfig,
    tol: float = 1e-6,
) -> float:
    """Max constraint violation of the candidate against the feasible set at
    its appended step and the terminal set at step k+1. Returns the residual.

    The appended step's power flow is resolved with the exact sweep, so a
    finite residual certifies the non-relaxed equations as well.
    """
    from .network import solve_exact_distflow

    k1 = cand.step
    s_old = cand.control_steps[-1]     # appended step = old horizon end
    s_new = s_old + 1                  # new horizon end
    n = model.n
    dt = horizon.dt_hours
    worst = 0.0

    # appended-step controls within box bounds
    for b in model.buses:
        i = b.id
        qv = cand.q_g[-1, i - 1]
        worst = max(worst, b.q_min - qv, qv - b.q_max)
        bank = model.battery_at(i)
        pv = cand.p_bat[-1, i - 1]
        if bank:
            worst = max(worst, bank.p_min - pv, pv - bank.p_max)
        else:
            worst = max(worst, abs(pv))
    for load in fleet.shapeable:
        if s_old in cand.u_shp.get(load.id, {}):
            c = cand.u_shp[load.id][s_old]
            worst = max(worst, -c, c - load.c_max)

    # appended-step network feasibility via the exact oracle
    p_l, q_l = model.forecast.at(s_old)
    p_shp = np.zeros(n)
    for load in fleet.shapeable:
        if s_old in cand.u_shp.get(load.id, {}):
            p_shp[load.bus - 1] += cand.u_shp[load.id][s_old]
    p_net = p_l + fleet.deferrable_power(n, s_old) + cand.p_bat[-1] + p_shp
    q_net = q_l - cand.q_g[-1]
    flow = solve_exact_distflow(model, p_net, q_net)
    worst = max(
        worst,
        float(np.max(model.v_min_sq - flow.nu[0])),
        float(np.max(flow.nu[0] - model.v_max_sq)),
    )

    # state envelopes along the candidate
    for ti, t in enumerate(list(cand.control_steps) + [s_new]):
        for bank in model.batteries:
            e = cand.e_bat[ti, bank.bus - 1]
            worst = max(worst, bank.e_low - e, e - bank.e_max)
        for load in fleet.shapeable:
            if t in cand.e_shp.get(load.id, {}):
                e = cand.e_shp[load.id][t]
                worst = max(worst, shp_soc_min(load, t, dt) - e, e - load.e_max)

    # terminal set at step k+1 (anchored at s_new)
    term = build_terminal_set(reference, fleet, model, k1, horizon)
    for load_id, (lo, hi) in term.shapeable_bounds.items():
        if s_new in cand.e_shp.get(load_id, {}):
            e = cand.e_shp[load_id][s_new]
            worst = max(worst, lo - e, e - hi)
    for bus, (coeffs, rhs) in term.battery_rows.items():
        lhs = cand.e_bat[-1, bus - 1] if model.battery_at(bus) else 0.0
        for load_id, coef in coeffs.items():
            if s_new in cand.e_shp.get(load_id, {}):
                lhs += coef * cand.e_shp[load_id][s_new]
        worst = max(worst, abs(lhs - rhs))
    return float(worst)
