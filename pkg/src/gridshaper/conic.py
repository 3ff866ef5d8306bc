"""Multi-period second-order-cone program assembly and a direct Clarabel adapter.

Programs are held in an explicit, deterministic structure (ordered variable
index, coefficient rows, cone blocks, box bounds) so that identical inputs
always produce identical programs, then lowered to Clarabel's standard form
at solve time. The nonconvex branch-flow equality l * nu = P^2 + Q^2 is
relaxed to the rotated cone l * nu >= P^2 + Q^2, encoded as the standard
second-order cone ||(2P, 2Q, l - nu)|| <= l + nu. Quadratic objective terms
are lowered to epigraph variables (w >= x^2) so the solver sees a pure SOCP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Optional

import os

import numpy as np
from scipy import sparse

import clarabel

from .assets import Fleet, shp_soc_min
from .network import FlowSolution, NetworkModel

__all__ = [
    "VariableIndex",
    "ConicProgram",
    "SolverReport",
    "assemble_feasible_set",
    "assemble_dynamics",
    "declare_variables",
    "solve",
    "extract_flow",
    "check_relaxation_exactness",
    "SolverFailure",
]

DEFAULT_TOL = 1e-8


class SolverFailure(RuntimeError):
    """The conic solver reported a numerical failure (not plain infeasibility)."""


class VariableIndex:
    """Bijective map from (quantity, element, step) keys to column indices.

    Columns are assigned in insertion order, which the assembly routines keep
    deterministic (step-major, then quantity, then element id).
    """

    def __init__(self) -> None:
        self._cols: dict[Hashable, int] = {}
        self._keys: list[Hashable] = []

    def add(self, key: Hashable) -> int:
        if key in self._cols:
            raise KeyError(f"variable {key} already declared")
        col = len(self._keys)
        self._cols[key] = col
        self._keys.append(key)
        return col

    def __getitem__(self, key: Hashable) -> int:
        return self._cols[key]

    def __contains__(self, key: Hashable) -> bool:
        return key in self._cols

    def key(self, col: int) -> Hashable:
        return self._keys[col]

    @property
    def num_vars(self) -> int:
        return len(self._keys)


@dataclass
class ConicProgram:
    """An assembled SOCP: linear objective, linear rows, cone blocks, box bounds."""

    index: VariableIndex = field(default_factory=VariableIndex)
    objective: dict[int, float] = field(default_factory=dict)
    objective_offset: float = 0.0
    eq_rows: list[tuple[dict[int, float], float]] = field(default_factory=list)
    ineq_rows: list[tuple[dict[int, float], float]] = field(default_factory=list)
    lb: dict[int, float] = field(default_factory=dict)
    ub: dict[int, float] = field(default_factory=dict)
    # (l, nu, P, Q) columns with l * nu >= P^2 + Q^2
    flow_cones: list[tuple[int, int, int, int]] = field(default_factory=list)
    # (w, x) columns with w >= x^2
    epi_cones: list[tuple[int, int]] = field(default_factory=list)

    @property
    def num_vars(self) -> int:
        return self.index.num_vars

    def var(self, key: Hashable) -> int:
        return self.index[key]

    def new_var(self, key: Hashable) -> int:
        return self.index.add(key)

    def add_eq(self, coeffs: dict[int, float], rhs: float) -> None:
        self.eq_rows.append((coeffs, rhs))

    def add_leq(self, coeffs: dict[int, float], rhs: float) -> None:
        """Row sum(coeffs * x) <= rhs."""
        self.ineq_rows.append((coeffs, rhs))

    def set_bounds(self, col: int, lo: float = -np.inf, hi: float = np.inf) -> None:
        if np.isfinite(lo):
            self.lb[col] = max(lo, self.lb.get(col, -np.inf))
        if np.isfinite(hi):
            self.ub[col] = min(hi, self.ub.get(col, np.inf))

    def add_flow_cone(self, l: int, nu: int, P: int, Q: int) -> None:
        self.flow_cones.append((l, nu, P, Q))

    def add_linear_cost(self, col: int, weight: float) -> None:
        if weight:
            self.objective[col] = self.objective.get(col, 0.0) + weight

    def add_quadratic_cost(self, col: int, weight: float, center: float = 0.0) -> None:
        """Add weight * (x - center)^2 via an epigraph variable.

        The shifted square is expanded so the epigraph stays in w >= x^2 form:
        (x - c)^2 = x^2 - 2cx + c^2.
        """
        if weight <= 0.0:
            if weight < 0.0:
                raise ValueError("quadratic weights must be nonnegative")
            return
        w = self.new_var(("epi", self.index.key(col)))
        self.epi_cones.append((w, col))
        self.add_linear_cost(w, weight)
        if center:
            self.add_linear_cost(col, -2.0 * weight * center)
            self.objective_offset += weight * center * center

    def dump(self) -> str:
        """Plain-text listing of the program (rows, cones, bounds) for inspection."""
        out = [f"vars {self.num_vars}"]
        for coeffs, rhs in self.eq_rows:
            terms = " + ".join(
                f"{c:g}*{self.index.key(j)}" for j, c in sorted(coeffs.items())
            )
            out.append(f"eq: {terms} = {rhs:g}")
        for coeffs, rhs in self.ineq_rows:
            terms = " + ".join(
                f"{c:g}*{self.index.key(j)}" for j, c in sorted(coeffs.items())
            )
            out.append(f"le: {terms} <= {rhs:g}")
        for l, nu, P, Q in self.flow_cones:
            out.append(
                f"cone: {self.index.key(l)} * {self.index.key(nu)} >= "
                f"{self.index.key(P)}^2 + {self.index.key(Q)}^2"
            )
        for w, x in self.epi_cones:
            out.append(f"epi: {self.index.key(w)} >= {self.index.key(x)}^2")
        for col in sorted(set(self.lb) | set(self.ub)):
            out.append(
                f"bound: {self.lb.get(col, -np.inf):g} <= {self.index.key(col)}"
                f" <= {self.ub.get(col, np.inf):g}"
            )
        obj = " + ".join(f"{c:g}*{self.index.key(j)}" for j, c in sorted(self.objective.items()))
        out.append(f"min: {obj}")
        return "\n".join(out)


@dataclass
class SolverReport:
    """Outcome of a conic solve."""

    status: str  # "optimal" | "infeasible" | "numerical-failure"
    objective: Optional[float]
    x: Optional[np.ndarray]
    max_residual: float
    relaxation_gap: float
    solve_time: float = 0.0

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"


def _shapeable_window(load, control_steps: list[int]) -> list[int]:
    """Control steps during which the load is connected and may draw power."""
    return [t for t in control_steps if load.k_in <= t < load.k_out]


def declare_variables(
    prog: ConicProgram,
    model: NetworkModel,
    fleet: Fleet,
    control_steps: list[int],
) -> None:
    """Declare all flow, control and state columns in deterministic order.

    State columns exist for control steps plus one trailing step (the horizon
    end); shapeable loads stop at their plug-out step.
    """
    last = control_steps[-1] + 1
    state_steps = control_steps + [last]
    cap_buses = model.capacitor_buses()
    bat_buses = [bk.bus for bk in model.batteries]
    for t in control_steps:
        for li in range(len(model.lines)):
            prog.new_var(("P", li, t))
        for li in range(len(model.lines)):
            prog.new_var(("Q", li, t))
        for li in range(len(model.lines)):
            prog.new_var(("l", li, t))
        for b in model.buses:
            prog.new_var(("nu", b.id, t))
        for bus in cap_buses:
            prog.new_var(("qg", bus, t))
        for bus in bat_buses:
            prog.new_var(("pbat", bus, t))
        for load in fleet.shapeable:
            if load.k_in <= t < load.k_out:
                prog.new_var(("cshp", load.id, t))
    for t in state_steps:
        for bus in bat_buses:
            prog.new_var(("ebat", bus, t))
        for load in fleet.shapeable:
            if load.k_in <= t <= min(load.k_out, last):
                prog.new_var(("eshp", load.id, t))


def assemble_feasible_set(
    prog: ConicProgram,
    model: NetworkModel,
    fleet: Fleet,
    control_steps: list[int],
    dt_hours: float,
    extra_def: Optional[dict[int, np.ndarray]] = None,
) -> None:
    """Add the per-step network feasible set: balance rows, voltage rows, cone
    blocks and box bounds.

    ``extra_def`` maps an absolute step to an extra per-bus deferrable
    injection (used by the admission problem for a candidate delayed profile).
    Forecast indices wrap modulo the forecast period.
    """
    n = model.n
    children = {b.id: [] for b in model.buses}
    children[0] = []
    for li, ln in enumerate(model.lines):
        children[ln.from_bus].append(li)

    for t in control_steps:
        p_l, q_l = model.forecast.at(t)
        p_def = fleet.deferrable_power(n, t)
        if extra_def and t in extra_def:
            p_def = p_def + extra_def[t]
        for li, ln in enumerate(model.lines):
            j = ln.to_bus
            P = prog.var(("P", li, t))
            Q = prog.var(("Q", li, t))
            l = prog.var(("l", li, t))
            nu_j = prog.var(("nu", j, t))

            # real power balance at the receiving bus j
            row = {P: 1.0, l: -ln.r}
            for ci in children[j]:
                row[prog.var(("P", ci, t))] = -1.0
            if ("pbat", j, t) in prog.index:
                row[prog.var(("pbat", j, t))] = -1.0
            for load in fleet.shapeable:
                if load.bus == j and ("cshp", load.id, t) in prog.index:
                    row[prog.var(("cshp", load.id, t))] = -1.0
            prog.add_eq(row, p_l[j - 1] + p_def[j - 1])

            # reactive balance; capacitor generation enters with opposite sign
            row = {Q: 1.0, l: -ln.x}
            for ci in children[j]:
                row[prog.var(("Q", ci, t))] = -1.0
            if ("qg", j, t) in prog.index:
                row[prog.var(("qg", j, t))] = 1.0
            prog.add_eq(row, q_l[j - 1])

            # voltage drop along the line; substation voltage is a constant
            row = {
                nu_j: 1.0,
                l: -(ln.r**2 + ln.x**2),
                P: 2.0 * ln.r,
                Q: 2.0 * ln.x,
            }
            if ln.from_bus == 0:
                prog.add_eq(row, model.v0_sq)
                nu_i = None
            else:
                nu_i = prog.var(("nu", ln.from_bus, t))
                row[nu_i] = row.get(nu_i, 0.0) - 1.0
                prog.add_eq(row, 0.0)

            # relaxed current equation: l * nu_from >= P^2 + Q^2.
            # At a root line nu_from is constant, so a dedicated column pinned
            # by bounds keeps the cone block uniform.
            if ln.from_bus == 0:
                key = ("nu0", li, t)
                if key not in prog.index:
                    col = prog.new_var(key)
                    prog.set_bounds(col, model.v0_sq, model.v0_sq)
                nu_i = prog.var(key)
            prog.add_flow_cone(l, nu_i, P, Q)

        for b in model.buses:
            prog.set_bounds(prog.var(("nu", b.id, t)), model.v_min_sq, model.v_max_sq)
            if ("qg", b.id, t) in prog.index:
                prog.set_bounds(prog.var(("qg", b.id, t)), b.q_min, b.q_max)
        for bank in model.batteries:
            prog.set_bounds(prog.var(("pbat", bank.bus, t)), bank.p_min, bank.p_max)
        for load in fleet.shapeable:
            if ("cshp", load.id, t) in prog.index:
                prog.set_bounds(prog.var(("cshp", load.id, t)), 0.0, load.c_max)

    # SOC envelopes over all declared state columns
    last = control_steps[-1] + 1
    for t in control_steps + [last]:
        for bank in model.batteries:
            if ("ebat", bank.bus, t) in prog.index:
                prog.set_bounds(prog.var(("ebat", bank.bus, t)), bank.e_low, bank.e_max)
        for load in fleet.shapeable:
            if ("eshp", load.id, t) in prog.index:
                prog.set_bounds(
                    prog.var(("eshp", load.id, t)),
                    shp_soc_min(load, t, dt_hours),
                    load.e_max,
                )


def assemble_dynamics(
    prog: ConicProgram,
    model: NetworkModel,
    fleet: Fleet,
    control_steps: list[int],
    dt_hours: float,
) -> None:
    """Add SOC propagation equalities for batteries and shapeable loads."""
    for t in control_steps:
        for bank in model.batteries:
            e0 = prog.var(("ebat", bank.bus, t))
            e1 = prog.var(("ebat", bank.bus, t + 1))
            p = prog.var(("pbat", bank.bus, t))
            prog.add_eq({e1: 1.0, e0: -1.0, p: -dt_hours}, 0.0)
        for load in fleet.shapeable:
            if ("cshp", load.id, t) in prog.index and ("eshp", load.id, t + 1) in prog.index:
                e0 = prog.var(("eshp", load.id, t))
                e1 = prog.var(("eshp", load.id, t + 1))
                c = prog.var(("cshp", load.id, t))
                prog.add_eq({e1: 1.0, e0: -1.0, c: -load.eta * dt_hours}, 0.0)


def _lower(prog: ConicProgram):
    """Lower the program to Clarabel standard form (A x + s = b, s in K)."""
    nv = prog.num_vars
    rows: list[tuple[int, int, float]] = []
    b: list[float] = []
    cones = []
    r = 0

    def put(coeffs: dict[int, float], rhs: float):
        nonlocal r
        for col, coef in coeffs.items():
            rows.append((r, col, coef))
        b.append(rhs)
        r += 1

    for coeffs, rhs in prog.eq_rows:
        put(coeffs, rhs)
    if prog.eq_rows:
        cones.append(clarabel.ZeroConeT(len(prog.eq_rows)))

    n_ineq = 0
    for coeffs, rhs in prog.ineq_rows:
        put(coeffs, rhs)
        n_ineq += 1
    for col, hi in prog.ub.items():
        put({col: 1.0}, hi)
        n_ineq += 1
    for col, lo in prog.lb.items():
        put({col: -1.0}, -lo)
        n_ineq += 1
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))

    # s in SOC means b - Ax in SOC; encode t >= ||v|| as rows (t, v...)
    for l, nu, P, Q in prog.flow_cones:
        put({l: -1.0, nu: -1.0}, 0.0)      # s0 = l + nu
        put({P: -2.0}, 0.0)                # s1 = 2P
        put({Q: -2.0}, 0.0)                # s2 = 2Q
        put({l: -1.0, nu: 1.0}, 0.0)       # s3 = l - nu
        cones.append(clarabel.SecondOrderConeT(4))
    for w, x in prog.epi_cones:
        put({w: -1.0}, 1.0)                # s0 = w + 1
        put({x: -2.0}, 0.0)                # s1 = 2x
        put({w: -1.0}, -1.0)               # s2 = w - 1
        cones.append(clarabel.SecondOrderConeT(3))

    i_idx = np.array([t[0] for t in rows], dtype=np.int64)
    j_idx = np.array([t[1] for t in rows], dtype=np.int64)
    vals = np.array([t[2] for t in rows], dtype=float)
    A = sparse.csc_matrix((vals, (i_idx, j_idx)), shape=(r, nv))
    qvec = np.zeros(nv)
    for col, coef in prog.objective.items():
        qvec[col] = coef
    return A, np.array(b), qvec, cones


def _residuals(prog: ConicProgram, x: np.ndarray) -> float:
    res = 0.0
    for coeffs, rhs in prog.eq_rows:
        res = max(res, abs(sum(c * x[j] for j, c in coeffs.items()) - rhs))
    for coeffs, rhs in prog.ineq_rows:
        res = max(res, sum(c * x[j] for j, c in coeffs.items()) - rhs)
    for col, hi in prog.ub.items():
        res = max(res, x[col] - hi)
    for col, lo in prog.lb.items():
        res = max(res, lo - x[col])
    for l, nu, P, Q in prog.flow_cones:
        res = max(res, x[P] ** 2 + x[Q] ** 2 - x[l] * x[nu])
    return res


def _gap(prog: ConicProgram, x: np.ndarray) -> float:
    gap = 0.0
    for l, nu, P, Q in prog.flow_cones:
        sq = x[P] ** 2 + x[Q] ** 2
        gap = max(gap, abs(x[l] * x[nu] - sq) / max(1.0, sq))
    return gap


def solver_tolerance() -> float:
    return float(os.environ.get("GRIDSHAPER_SOLVER_TOL", DEFAULT_TOL))


def solve(prog: ConicProgram, tol: Optional[float] = None) -> SolverReport:
    """Solve the program with Clarabel and report status, residuals and cone gap."""
    tol = solver_tolerance() if tol is None else tol
    A, b, qvec, cones = _lower(prog)
    P = sparse.csc_matrix((prog.num_vars, prog.num_vars))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tol
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.max_iter = 200
    settings.max_threads = 1  # bit-reproducible solves
    solver = clarabel.DefaultSolver(P, qvec, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status in ("Solved", "AlmostSolved"):
        x = np.asarray(sol.x)
        return SolverReport(
            status="optimal",
            objective=float(sol.obj_val) + prog.objective_offset,
            x=x,
            max_residual=_residuals(prog, x),
            relaxation_gap=_gap(prog, x),
            solve_time=float(sol.solve_time),
        )
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return SolverReport(
            status="infeasible",
            objective=None,
            x=None,
            max_residual=np.inf,
            relaxation_gap=np.inf,
            solve_time=float(sol.solve_time),
        )
    raise SolverFailure(
        f"solver returned {status} on program with {prog.num_vars} vars, "
        f"{len(prog.eq_rows)} eq rows, {len(prog.flow_cones)} cone blocks"
    )


def extract_flow(
    prog: ConicProgram, x: np.ndarray, model: NetworkModel, control_steps: list[int]
) -> FlowSolution:
    """Read the (P, Q, l, nu) trajectory out of a primal solution."""
    L = len(model.lines)
    n = model.n
    H = len(control_steps)
    P = np.zeros((H, L))
    Q = np.zeros((H, L))
    l = np.zeros((H, L))
    nu = np.zeros((H, n))
    for ti, t in enumerate(control_steps):
        for li in range(L):
            P[ti, li] = x[prog.var(("P", li, t))]
            Q[ti, li] = x[prog.var(("Q", li, t))]
            l[ti, li] = x[prog.var(("l", li, t))]
        for b in model.buses:
            nu[ti, b.id - 1] = x[prog.var(("nu", b.id, t))]
    return FlowSolution(P=P, Q=Q, l=l, nu=nu)


def check_relaxation_exactness(
    model: NetworkModel, sol: FlowSolution, tol: float = 1e-5
) -> list[tuple[int, int, float]]:
    """Flag every (step, line) whose relative cone gap exceeds tol."""
    flagged = []
    for ti in range(sol.P.shape[0]):
        nu_full = np.concatenate([[model.v0_sq], sol.nu[ti]])
        for li, ln in enumerate(model.lines):
            sq = sol.P[ti, li] ** 2 + sol.Q[ti, li] ** 2
            gap = abs(sol.l[ti, li] * nu_full[ln.from_bus] - sq) / max(1.0, sq)
            if gap > tol:
                flagged.append((ti, li, gap))
    return flagged
