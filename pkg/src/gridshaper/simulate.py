"""Closed receding-horizon simulation loop with CSV/JSON trace export.

Each step: expire plugged-out loads, process the step's plug-in requests
through the admission gate, solve the MPC, apply only the first control, and
advance the stored state. The battery state starts on the stage-1 reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import json
import math

import numpy as np

from . import conic
from .assets import Fleet, step_soc
from .controller import (
    MpcSolution,
    SystemState,
    construct_shifted_candidate,
    solve_stage1,
    solve_stage2,
    verify_candidate,
)
from .network import NetworkModel
from .pnp import AdmissionDecision, admit, apply_decision
from .scenario import Scenario

__all__ = [
    "StepRecord",
    "SimulationTrace",
    "Metrics",
    "run",
    "uncontrolled_baseline",
    "export_trace",
]


@dataclass
class StepRecord:
    step: int
    e_bat: np.ndarray            # state at the start of the step, length n
    e_shp: dict[str, float]
    q_g: np.ndarray              # applied first-step control, length n
    p_bat: np.ndarray
    u_shp: dict[str, float]
    p_fixed: float               # network totals at this step
    p_shapeable: float
    p_deferrable: float
    p_battery: float
    losses: float
    substation: float
    nu: np.ndarray               # first-step squared voltages, length n
    objective: float
    relaxation_gap: float
    candidate_residual: Optional[float]
    decisions: list[AdmissionDecision] = field(default_factory=list)


@dataclass
class SimulationTrace:
    records: list[StepRecord]
    battery_ids: list[str]
    battery_buses: list[int]
    completed_shapeable: dict[str, tuple[float, float]]  # id -> (final SOC, target)
    deferrable_delivered: dict[str, tuple[float, float]]  # id -> (delivered, requested)
    reference_periodicity_error: float


@dataclass
class Metrics:
    peak_controlled: float
    peak_uncontrolled: Optional[float]
    peak_reduction_ratio: Optional[float]
    v_min: float
    v_max: float
    total_energy_cost: float
    requests_total: int
    requests_accepted: int
    deferred_requests: int
    mean_delay_steps: float
    min_battery_soc: float

    def to_dict(self) -> dict:
        return {
            "peak_controlled": self.peak_controlled,
            "peak_uncontrolled": self.peak_uncontrolled,
            "peak_reduction_ratio": self.peak_reduction_ratio,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "total_energy_cost": self.total_energy_cost,
            "requests_total": self.requests_total,
            "requests_accepted": self.requests_accepted,
            "deferred_requests": self.deferred_requests,
            "mean_delay_steps": self.mean_delay_steps,
            "min_battery_soc": self.min_battery_soc,
        }


def run(
    scenario: Scenario,
    check_candidates: bool = False,
) -> tuple[SimulationTrace, Metrics]:
    """Simulate the closed loop over the scenario's request schedule.

    ``check_candidates`` additionally builds and verifies the shifted
    candidate at every step (used by the acceptance suite).
    """
    model = scenario.network
    cfg = scenario.config
    horizon, weights, price = cfg.horizon, cfg.weights, cfg.price
    n = model.n

    reference = solve_stage1(model, horizon, weights, cfg.nu_nom)
    period_err = float(
        np.max(
            np.abs(
                reference.e_bat_hat[0]
                - (reference.e_bat_hat[-1] + horizon.dt_hours * reference.p_bat_hat[-1])
            )
        )
        if model.batteries
        else 0.0
    )

    state = SystemState(e_bat=np.zeros(n), e_shp={})
    for bank in model.batteries:
        state.e_bat[bank.bus - 1] = reference.e_bat_hat[0, bank.bus - 1]
    fleet = Fleet()

    pending = list(scenario.requests)
    records: list[StepRecord] = []
    completed: dict[str, tuple[float, float]] = {}
    delivered: dict[str, tuple[float, float]] = {}
    targets = {s.id: s for req in scenario.requests if req.kind == "shapeable" for s in [req.shapeable]}

    for k in range(scenario.total_steps):
        for load in list(fleet.shapeable):
            if k >= load.k_out:
                completed[load.id] = (state.e_shp[load.id], load.e_des)
        for gone in fleet.drop_expired(k):
            state.e_shp.pop(gone, None)

        decisions = []
        while pending and pending[0].step == k:
            req = pending.pop(0)
            dec = admit(req, model, fleet, reference, price, state, k, horizon, weights)
            apply_decision(fleet, state, dec)
            decisions.append(dec)

        sol = solve_stage2(model, fleet, reference, price, state, k, horizon, weights, cfg.nu_nom)

        cand_res = None
        if check_candidates:
            cand = construct_shifted_candidate(sol, reference, fleet, model, horizon)
            cand_res = verify_candidate(cand, model, fleet, reference, horizon)

        records.append(_record(model, fleet, state, sol, k, cand_res, decisions))

        # apply only the first control
        for bank in model.batteries:
            i = bank.bus - 1
            state.e_bat[i] = step_soc(
                state.e_bat[i], sol.p_bat[0, i], 1.0, horizon.dt_hours,
                bank.e_low, bank.e_max,
            )
        for load in fleet.shapeable:
            c = sol.u_shp[load.id].get(k, 0.0)
            state.e_shp[load.id] = step_soc(
                state.e_shp[load.id], c, load.eta, horizon.dt_hours,
                -math.inf, load.e_max,
            )

    # final bookkeeping for loads still connected at the end
    for load in fleet.shapeable:
        if load.k_out <= scenario.total_steps:
            completed[load.id] = (state.e_shp[load.id], load.e_des)
    for req in scenario.requests:
        if req.kind != "deferrable":
            continue
        admitted = next(
            (
                dec
                for rec in records
                for dec in rec.decisions
                if dec.request.asset_id == req.asset_id and dec.accepted
            ),
            None,
        )
        requested = float(np.sum(req.deferrable.profile)) * horizon.dt_hours
        if admitted is None:
            delivered[req.asset_id] = (0.0, requested)
        else:
            start = admitted.plug_in_step
            got = sum(
                float(req.deferrable.profile[t - start])
                for t in range(start, min(start + len(req.deferrable.profile), scenario.total_steps))
            ) * horizon.dt_hours
            delivered[req.asset_id] = (got, requested)

    trace = SimulationTrace(
        records=records,
        battery_ids=[bk.id for bk in model.batteries],
        battery_buses=[bk.bus for bk in model.batteries],
        completed_shapeable=completed,
        deferrable_delivered=delivered,
        reference_periodicity_error=period_err,
    )
    return trace, _metrics(trace, scenario)


def _record(
    model: NetworkModel,
    fleet: Fleet,
    state: SystemState,
    sol: MpcSolution,
    k: int,
    cand_res: Optional[float],
    decisions: list[AdmissionDecision],
) -> StepRecord:
    n = model.n
    p_l, _ = model.forecast.at(k)
    u_first = {ld.id: sol.u_shp[ld.id].get(k, 0.0) for ld in fleet.shapeable}
    p_shp = sum(u_first.values())
    p_def = float(np.sum(fleet.deferrable_power(n, k)))
    p_bat = float(np.sum(sol.p_bat[0]))
    losses = float(
        sum(ln.r * sol.flow.l[0, li] for li, ln in enumerate(model.lines))
    )
    substation = float(
        sum(sol.flow.P[0, li] for li, ln in enumerate(model.lines) if ln.from_bus == 0)
    )
    return StepRecord(
        step=k,
        e_bat=state.e_bat.copy(),
        e_shp=dict(state.e_shp),
        q_g=sol.q_g[0].copy(),
        p_bat=sol.p_bat[0].copy(),
        u_shp=u_first,
        p_fixed=float(np.sum(p_l)),
        p_shapeable=p_shp,
        p_deferrable=p_def,
        p_battery=p_bat,
        losses=losses,
        substation=substation,
        nu=sol.flow.nu[0].copy(),
        objective=sol.objective,
        relaxation_gap=sol.report.relaxation_gap,
        candidate_residual=cand_res,
        decisions=decisions,
    )


def _metrics(trace: SimulationTrace, scenario: Scenario) -> Metrics:
    price = scenario.config.price
    dt = scenario.config.horizon.dt_hours
    agg = [
        r.p_fixed + r.p_shapeable + r.p_deferrable + r.p_battery for r in trace.records
    ]
    peak = max(agg) if agg else 0.0
    v_all = np.sqrt(np.concatenate([r.nu for r in trace.records])) if trace.records else np.array([1.0])
    cost = sum(
        price.at(r.step) * r.p_shapeable for r in trace.records
    )
    all_dec = [d for r in trace.records for d in r.decisions]
    accepted = [d for d in all_dec if d.accepted]
    deferred = [d for d in accepted if (d.delay or 0) > 0]
    bat_cols = [b - 1 for b in trace.battery_buses]
    min_soc = (
        min(float(np.min(r.e_bat[bat_cols])) for r in trace.records)
        if bat_cols and trace.records
        else 0.0
    )
    return Metrics(
        peak_controlled=float(peak),
        peak_uncontrolled=None,
        peak_reduction_ratio=None,
        v_min=float(v_all.min()),
        v_max=float(v_all.max()),
        total_energy_cost=float(cost),
        requests_total=len(all_dec),
        requests_accepted=len(accepted),
        deferred_requests=len(deferred),
        mean_delay_steps=float(np.mean([d.delay for d in accepted])) if accepted else 0.0,
        min_battery_soc=min_soc,
    )


def uncontrolled_baseline(scenario: Scenario) -> Metrics:
    """Peak metrics when every load charges greedily from its request step.

    Shapeable loads draw c_max until the target is met, deferrable loads run
    their base profile immediately, batteries and capacitors stay idle.
    Voltage feasibility is deliberately not enforced; this measures demand
    shape only.
    """
    dt = scenario.config.horizon.dt_hours
    steps = scenario.total_steps
    agg = np.zeros(steps)
    for k in range(steps):
        p_l, _ = scenario.network.forecast.at(k)
        agg[k] += float(np.sum(p_l))
    for req in scenario.requests:
        if req.kind == "shapeable":
            s = req.shapeable
            need = s.e_des - s.e
            k = req.step
            while need > 1e-12 and k < steps and k < s.k_out:
                c = min(s.c_max, need / (s.eta * dt))
                agg[k] += c
                need -= s.eta * dt * c
                k += 1
        else:
            for i, val in enumerate(req.deferrable.profile):
                if req.step + i < steps:
                    agg[req.step + i] += float(val)
    peak = float(agg.max()) if steps else 0.0
    return Metrics(
        peak_controlled=peak,
        peak_uncontrolled=peak,
        peak_reduction_ratio=0.0,
        v_min=float("nan"),
        v_max=float("nan"),
        total_energy_cost=0.0,
        requests_total=len(scenario.requests),
        requests_accepted=len(scenario.requests),
        deferred_requests=0,
        mean_delay_steps=0.0,
        min_battery_soc=0.0,
    )


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def export_trace(
    trace: SimulationTrace,
    metrics: Metrics,
    out_dir: str,
    include_timing: bool = False,
) -> list[str]:
    """Write voltages, SOC series, aggregate power, decisions and metrics.

    Returns the list of written paths. All floats carry 12 significant digits.
    Wall-clock solve times are left blank unless ``include_timing`` is set, so
    that identical runs produce byte-identical artifacts.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    n = len(trace.records[0].nu) if trace.records else 0
    path = out / "voltages.csv"
    with open(path, "w") as fh:
        fh.write("step," + ",".join(f"v_bus{i}" for i in range(1, n + 1)) + "\n")
        for r in trace.records:
            fh.write(f"{r.step}," + ",".join(_fmt(v) for v in np.sqrt(r.nu)) + "\n")
    written.append(str(path))

    path = out / "soc_shapeable.csv"
    with open(path, "w") as fh:
        fh.write("step,load_id,soc\n")
        for r in trace.records:
            for lid in sorted(r.e_shp):
                fh.write(f"{r.step},{lid},{_fmt(r.e_shp[lid])}\n")
    written.append(str(path))

    path = out / "soc_battery.csv"
    with open(path, "w") as fh:
        fh.write("step," + ",".join(trace.battery_ids) + "\n")
        for r in trace.records:
            vals = [r.e_bat[b - 1] for b in trace.battery_buses]
            fh.write(f"{r.step}," + ",".join(_fmt(v) for v in vals) + "\n")
    written.append(str(path))

    path = out / "aggregate_power.csv"
    with open(path, "w") as fh:
        fh.write("step,fixed,shapeable,deferrable,battery,losses,substation\n")
        for r in trace.records:
            fh.write(
                f"{r.step},{_fmt(r.p_fixed)},{_fmt(r.p_shapeable)},"
                f"{_fmt(r.p_deferrable)},{_fmt(r.p_battery)},"
                f"{_fmt(r.losses)},{_fmt(r.substation)}\n"
            )
    written.append(str(path))

    path = out / "decisions.csv"
    with open(path, "w") as fh:
        fh.write("step,request_id,kind,accepted,delay,reason,solve_ms\n")
        for r in trace.records:
            for d in r.decisions:
                reason = d.reason.replace(",", ";")
                delay = "" if d.delay is None else d.delay
                ms = _fmt(d.solve_time * 1000) if include_timing else ""
                fh.write(
                    f"{r.step},{d.request.asset_id},{d.request.kind},"
                    f"{int(d.accepted)},{delay},{reason},{ms}\n"
                )
    written.append(str(path))

    path = out / "metrics.json"
    with open(path, "w") as fh:
        json.dump(
            {k: (None if v is None or (isinstance(v, float) and math.isnan(v)) else round(float(v), 12) if isinstance(v, float) else v)
             for k, v in metrics.to_dict().items()},
            fh,
            indent=1,
        )
    written.append(str(path))
    return written
