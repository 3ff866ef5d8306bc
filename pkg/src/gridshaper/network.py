"""Radial distribution network model in per-unit, plus an exact power-flow oracle.

Bus 0 is always the substation: it carries no load, no capacitor and no
battery, and its (squared) voltage is fixed. All other buses are indexed
1..n and are connected to the root by exactly n lines forming a tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import json
import numpy as np

from .assets import BatteryBank

__all__ = [
    "Bus",
    "Line",
    "FixedLoadForecast",
    "NetworkModel",
    "FlowSolution",
    "DistFlowDivergence",
    "validate_topology",
    "downstream_lines",
    "solve_exact_distflow",
    "distflow_residuals",
    "load_network",
    "save_network",
]


class DistFlowDivergence(RuntimeError):
    """Backward-forward sweep failed to converge within the iteration cap."""


@dataclass(frozen=True)
class Bus:
    """A non-substation bus. Reactive bounds are zero unless a capacitor sits here."""

    id: int
    has_capacitor: bool = False
    q_min: float = 0.0
    q_max: float = 0.0
    battery_id: Optional[str] = None

    def __post_init__(self):
        if self.q_min > self.q_max:
            raise ValueError(f"bus {self.id}: q_min > q_max")


@dataclass(frozen=True)
class Line:
    """Directed line (from_bus -> to_bus) with per-unit impedance."""

    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True)
class FixedLoadForecast:
    """Per-step fixed real/reactive load, shape (period, n). Column j-1 is bus j."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if p.shape != q.shape or p.ndim != 2:
            raise ValueError("p and q forecasts must share a (steps, n) shape")
        if not (np.isfinite(p).all() and np.isfinite(q).all()):
            raise ValueError("forecast entries must be finite")

    @property
    def period(self) -> int:
        return self.p.shape[0]

    def at(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Fixed load at an absolute step, wrapping modulo the forecast period."""
        t = step % self.period
        return self.p[t], self.q[t]


@dataclass(frozen=True)
class NetworkModel:
    """Immutable radial network: topology, bounds and fixed-load forecast."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    v0_sq: float
    v_min_sq: float
    v_max_sq: float
    forecast: FixedLoadForecast
    batteries: tuple[BatteryBank, ...] = ()
    s_base_kva: float = 1000.0
    v_base_kv: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "batteries", tuple(self.batteries))

    def battery_at(self, bus_id: int) -> Optional[BatteryBank]:
        for bank in self.batteries:
            if bank.bus == bus_id:
                return bank
        return None

    @property
    def n(self) -> int:
        """Number of non-substation buses."""
        return len(self.buses)

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(f"unknown bus id {bus_id}")

    def parent_line(self, bus_id: int) -> Line:
        for ln in self.lines:
            if ln.to_bus == bus_id:
                return ln
        raise KeyError(f"bus {bus_id} has no parent line")

    def capacitor_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.has_capacitor]

    def battery_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.battery_id is not None]


@dataclass(frozen=True)
class FlowSolution:
    """Branch-flow solution per step: line P, Q, l and bus squared voltage.

    Arrays are (steps, n_lines) for P/Q/l and (steps, n) for nu, matching the
    model's line and bus ordering (nu excludes the substation).
    """

    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    nu: np.ndarray


def validate_topology(model: NetworkModel) -> list[str]:
    """Diagnose the network; an empty list means valid.

    Checks: tree rooted at bus 0, one parent per bus, nonnegative impedances,
    ordered voltage bounds, forecast width.
    """
    issues: list[str] = []
    n = model.n
    ids = [b.id for b in model.buses]
    if sorted(ids) != list(range(1, n + 1)):
        issues.append(f"bus ids must be exactly 1..{n}, got {sorted(ids)}")
        return issues

    if len(model.lines) != n:
        issues.append(f"a radial network with {n} buses needs {n} lines, got {len(model.lines)}")

    parents: dict[int, int] = {}
    for ln in model.lines:
        if ln.r < 0 or ln.x < 0:
            issues.append(f"line ({ln.from_bus},{ln.to_bus}): negative impedance")
        if ln.to_bus in parents:
            issues.append(f"bus {ln.to_bus} has multiple parent lines (cycle)")
        parents[ln.to_bus] = ln.from_bus
        if ln.to_bus == 0:
            issues.append("no line may terminate at the substation")

    # reachability from the root
    children: dict[int, list[int]] = {}
    for ln in model.lines:
        children.setdefault(ln.from_bus, []).append(ln.to_bus)
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in children.get(i, ()):
            if j not in seen:
                seen.add(j)
                stack.append(j)
    unreachable = set(ids) - seen
    if unreachable:
        issues.append(f"buses unreachable from the substation: {sorted(unreachable)}")

    if not (model.v_min_sq <= model.v0_sq <= model.v_max_sq):
        issues.append("substation voltage outside [v_min, v_max]")
    if model.v_min_sq > model.v_max_sq:
        issues.append("v_min > v_max")
    if model.forecast.p.shape[1] != n:
        issues.append(
            f"forecast width {model.forecast.p.shape[1]} does not match bus count {n}"
        )
    return issues


def downstream_lines(model: NetworkModel, bus_id: int) -> list[Line]:
    """Child lines of a bus in the tree rooted at the substation."""
    if bus_id != 0:
        model.bus(bus_id)  # raises KeyError for unknown ids
    return [ln for ln in model.lines if ln.from_bus == bus_id]


def _topo_order(model: NetworkModel) -> list[Line]:
    """Lines ordered root-to-leaves (parent before child)."""
    order: list[Line] = []
    stack = downstream_lines(model, 0)[::-1]
    while stack:
        ln = stack.pop()
        order.append(ln)
        stack.extend(downstream_lines(model, ln.to_bus)[::-1])
    return order


def solve_exact_distflow(
    model: NetworkModel,
    p: np.ndarray,
    q: np.ndarray,
    max_iter: int = 1000,
    tol: float = 1e-12,
) -> FlowSolution:
    """Solve the exact (non-relaxed) branch-flow equations by backward-forward sweep.

    ``p`` and ``q`` are net per-bus consumption vectors of length n (bus 1..n);
    positive means power drawn from the feeder. Used as the test oracle for
    the conic relaxation. Raises DistFlowDivergence past the iteration cap.
    """
    n = model.n
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (n,) or q.shape != (n,):
        raise ValueError(f"injection vectors must have length {n}")

    lines = _topo_order(model)
    m = {(ln.from_bus, ln.to_bus): idx for idx, ln in enumerate(model.lines)}
    nu = np.full(n + 1, model.v0_sq)
    l = np.zeros(len(model.lines))
    P = np.zeros(len(model.lines))
    Q = np.zeros(len(model.lines))

    for _ in range(max_iter):
        # backward: accumulate flows leaf-to-root with current losses
        for ln in reversed(lines):
            k = m[(ln.from_bus, ln.to_bus)]
            j = ln.to_bus
            P[k] = p[j - 1] + ln.r * l[k]
            Q[k] = q[j - 1] + ln.x * l[k]
            for child in downstream_lines(model, j):
                kc = m[(child.from_bus, child.to_bus)]
                P[k] += P[kc]
                Q[k] += Q[kc]
        # forward: update voltages and currents root-to-leaf
        delta = 0.0
        for ln in lines:
            k = m[(ln.from_bus, ln.to_bus)]
            nu_new = (
                nu[ln.from_bus]
                + (ln.r**2 + ln.x**2) * l[k]
                - 2.0 * (ln.r * P[k] + ln.x * Q[k])
            )
            if nu_new <= 0:
                raise DistFlowDivergence(
                    f"voltage collapse on line ({ln.from_bus},{ln.to_bus})"
                )
            l_new = (P[k] ** 2 + Q[k] ** 2) / nu[ln.from_bus]
            delta = max(delta, abs(nu_new - nu[ln.to_bus]), abs(l_new - l[k]))
            nu[ln.to_bus] = nu_new
            l[k] = l_new
        if delta < tol:
            return FlowSolution(
                P=P[np.newaxis, :].copy(),
                Q=Q[np.newaxis, :].copy(),
                l=l[np.newaxis, :].copy(),
                nu=nu[np.newaxis, 1:].copy(),
            )
    raise DistFlowDivergence(f"no convergence after {max_iter} sweeps (delta={delta:.3e})")


def distflow_residuals(model: NetworkModel, sol: FlowSolution, p: np.ndarray, q: np.ndarray) -> float:
    """Max absolute residual of the exact branch-flow equations for a one-step solution."""
    m = {(ln.from_bus, ln.to_bus): idx for idx, ln in enumerate(model.lines)}
    nu = np.concatenate([[model.v0_sq], sol.nu[0]])
    res = 0.0
    for ln in model.lines:
        k = m[(ln.from_bus, ln.to_bus)]
        j = ln.to_bus
        acc_p = p[j - 1] + ln.r * sol.l[0, k]
        acc_q = q[j - 1] + ln.x * sol.l[0, k]
        for child in downstream_lines(model, j):
            kc = m[(child.from_bus, child.to_bus)]
            acc_p += sol.P[0, kc]
            acc_q += sol.Q[0, kc]
        res = max(res, abs(sol.P[0, k] - acc_p), abs(sol.Q[0, k] - acc_q))
        res = max(
            res,
            abs(
                nu[j]
                - nu[ln.from_bus]
                - (ln.r**2 + ln.x**2) * sol.l[0, k]
                + 2.0 * (ln.r * sol.P[0, k] + ln.x * sol.Q[0, k])
            ),
        )
        res = max(res, abs(sol.l[0, k] * nu[ln.from_bus] - sol.P[0, k] ** 2 - sol.Q[0, k] ** 2))
    return res


def random_radial_network(
    seed: int,
    n_buses: int = 8,
    steps: int = 1,
    load_scale: float = 0.05,
) -> NetworkModel:
    """Random tree feeder with modest loads, for diagnostics and property tests."""
    rng = np.random.default_rng(seed)
    lines = []
    for j in range(1, n_buses + 1):
        parent = 0 if j == 1 else int(rng.integers(0, j))
        lines.append(
            Line(parent, j, float(rng.uniform(0.002, 0.015)), float(rng.uniform(0.002, 0.015)))
        )
    p = rng.uniform(0.2, 1.0, size=(steps, n_buses)) * load_scale
    q = 0.3 * p
    return NetworkModel(
        buses=tuple(Bus(id=j) for j in range(1, n_buses + 1)),
        lines=tuple(lines),
        v0_sq=1.0,
        v_min_sq=0.9**2,
        v_max_sq=1.0**2,
        forecast=FixedLoadForecast(p=p, q=q),
    )


def load_network(path: str) -> NetworkModel:
    """Read a network JSON file (see README for the schema)."""
    with open(path) as fh:
        doc = json.load(fh)
    buses = []
    for b in doc["buses"]:
        cap = b.get("capacitor")
        buses.append(
            Bus(
                id=int(b["id"]),
                has_capacitor=cap is not None,
                q_min=float(cap["q_min"]) if cap else 0.0,
                q_max=float(cap["q_max"]) if cap else 0.0,
                battery_id=b.get("battery"),
            )
        )
    lines = [
        Line(int(ln["from"]), int(ln["to"]), float(ln["r_pu"]), float(ln["x_pu"]))
        for ln in doc["lines"]
    ]
    bounds = doc.get("v_bounds_pu", [0.95, 1.0])
    base = doc.get("base", {})
    fl = doc["fixed_load"]
    banks = tuple(
        BatteryBank(
            id=str(bk["id"]),
            bus=int(bk["bus"]),
            e=float(bk["e0"]),
            e_low=float(bk["e_low"]),
            e_max=float(bk["e_max"]),
            p_min=float(bk["p_min"]),
            p_max=float(bk["p_max"]),
        )
        for bk in doc.get("batteries", [])
    )
    return NetworkModel(
        buses=tuple(buses),
        lines=tuple(lines),
        v0_sq=float(doc.get("v0_pu", 1.0)) ** 2,
        v_min_sq=float(bounds[0]) ** 2,
        v_max_sq=float(bounds[1]) ** 2,
        forecast=FixedLoadForecast(p=np.array(fl["p"]), q=np.array(fl["q"])),
        batteries=banks,
        s_base_kva=float(base.get("S_base_kVA", 1000.0)),
        v_base_kv=float(base.get("V_base_kV", 12.0)),
    )


def save_network(model: NetworkModel, path: str) -> None:
    doc = {
        "v0_pu": float(np.sqrt(model.v0_sq)),
        "v_bounds_pu": [float(np.sqrt(model.v_min_sq)), float(np.sqrt(model.v_max_sq))],
        "base": {"S_base_kVA": model.s_base_kva, "V_base_kV": model.v_base_kv},
        "buses": [
            {
                "id": b.id,
                **({"capacitor": {"q_min": b.q_min, "q_max": b.q_max}} if b.has_capacitor else {}),
                **({"battery": b.battery_id} if b.battery_id else {}),
            }
            for b in model.buses
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r_pu": ln.r, "x_pu": ln.x}
            for ln in model.lines
        ],
        "batteries": [
            {
                "id": bk.id,
                "bus": bk.bus,
                "e0": bk.e,
                "e_low": bk.e_low,
                "e_max": bk.e_max,
                "p_min": bk.p_min,
                "p_max": bk.p_max,
            }
            for bk in model.batteries
        ],
        "fixed_load": {"p": model.forecast.p.tolist(), "q": model.forecast.q.tolist()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
