"""Plug-and-play admission: immediate shapeable admission with a feasibility
check, and minimal-delay admission of deferrable loads.

The deferrable delay choice is a one-hot integer program whose objective is
the delay index itself, so scanning d = 0, 1, ... and returning the first
feasible delay is exactly the integer optimum; no MIP solver is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .assets import DeferrableLoad, Fleet, ShapeableLoad, shp_soc_min
from .controller import (
    ControllerWeights,
    HorizonConfig,
    MpcSolution,
    PriceSignal,
    ReferenceTrajectory,
    SystemState,
    try_stage2,
)
from .conic import SolverFailure
from .network import NetworkModel

__all__ = [
    "PlugRequest",
    "AdmissionDecision",
    "admit_shapeable",
    "admit_deferrable",
    "apply_decision",
    "admit",
]


@dataclass(frozen=True)
class PlugRequest:
    """A plug-in request arriving at ``step``; exactly one asset is set."""

    step: int
    shapeable: Optional[ShapeableLoad] = None
    deferrable: Optional[DeferrableLoad] = None

    def __post_init__(self):
        if (self.shapeable is None) == (self.deferrable is None):
            raise ValueError("request must carry exactly one asset")

    @property
    def kind(self) -> str:
        return "shapeable" if self.shapeable is not None else "deferrable"

    @property
    def asset_id(self) -> str:
        return self.shapeable.id if self.shapeable else self.deferrable.id


@dataclass
class AdmissionDecision:
    request: PlugRequest
    accepted: bool
    plug_in_step: Optional[int] = None
    delay: Optional[int] = None
    reason: str = ""
    witness: Optional[MpcSolution] = None
    solve_time: float = 0.0


def _envelope_reachable(load: ShapeableLoad, k: int, dt_hours: float) -> bool:
    """Max-rate charging from k must be able to reach the target by k_out."""
    return load.e >= shp_soc_min(load, k, dt_hours) - 1e-12


def admit_shapeable(
    request: PlugRequest,
    model: NetworkModel,
    fleet: Fleet,
    reference: ReferenceTrajectory,
    price: PriceSignal,
    state: SystemState,
    k: int,
    horizon: HorizonConfig,
    weights: ControllerWeights,
) -> AdmissionDecision:
    """Shapeable loads plug in immediately if the extended system stays feasible.

    Zero power is always admissible for a shapeable load, so admission never
    delays; an infeasible request is rejected with advice to relax the
    deadline or target.
    """
    load = request.shapeable
    if fleet.has_id(load.id):
        return AdmissionDecision(request, False, reason="duplicate asset id")
    if not _envelope_reachable(load, k, horizon.dt_hours):
        return AdmissionDecision(
            request,
            False,
            reason="target unreachable even at max rate; lower requirements "
            "(later plug-out or lower desired SOC)",
        )
    trial = fleet.copy()
    trial.shapeable.append(replace(load, k_in=k))
    trial_state = state.copy()
    trial_state.e_shp[load.id] = load.e
    try:
        report, sol = try_stage2(
            model, trial, reference, price, trial_state, k, horizon, weights
        )
    except SolverFailure as exc:
        return AdmissionDecision(
            request, False, reason=f"solver failure, admission deferred one step: {exc}"
        )
    if sol is None:
        return AdmissionDecision(
            request,
            False,
            reason="system infeasible with this load; lower requirements "
            "(later plug-out or lower desired SOC)",
            solve_time=report.solve_time,
        )
    return AdmissionDecision(
        request,
        True,
        plug_in_step=k,
        delay=0,
        witness=sol,
        solve_time=report.solve_time,
    )


def admit_deferrable(
    request: PlugRequest,
    model: NetworkModel,
    fleet: Fleet,
    reference: ReferenceTrajectory,
    price: PriceSignal,
    state: SystemState,
    k: int,
    horizon: HorizonConfig,
    weights: ControllerWeights,
) -> AdmissionDecision:
    """Find the minimal delay d* in [0, d_max] at which the system with the
    shifted profile stays feasible; reject if none exists."""
    load = request.deferrable
    if fleet.has_id(load.id):
        return AdmissionDecision(request, False, reason="duplicate asset id")
    if load.d_max >= horizon.N:
        return AdmissionDecision(
            request, False, reason=f"d_max {load.d_max} must be < horizon {horizon.N}"
        )
    total_time = 0.0
    skipped: list[int] = []
    for d in range(load.d_max + 1):
        trial = fleet.copy()
        trial.deferrable.append(replace(load, plug_in_step=k + d))
        try:
            report, sol = try_stage2(
                model, trial, reference, price, state, k, horizon, weights
            )
        except SolverFailure:
            skipped.append(d)
            continue
        total_time += report.solve_time
        if sol is not None:
            reason = ""
            if skipped:
                reason = f"solver failures at delays {skipped}, skipped"
            return AdmissionDecision(
                request,
                True,
                plug_in_step=k + d,
                delay=d,
                reason=reason,
                witness=sol,
                solve_time=total_time,
            )
    return AdmissionDecision(
        request,
        False,
        reason=f"infeasible for every delay in [0, {load.d_max}]",
        solve_time=total_time,
    )


def admit(
    request: PlugRequest,
    model: NetworkModel,
    fleet: Fleet,
    reference: ReferenceTrajectory,
    price: PriceSignal,
    state: SystemState,
    k: int,
    horizon: HorizonConfig,
    weights: ControllerWeights,
) -> AdmissionDecision:
    fn = admit_shapeable if request.kind == "shapeable" else admit_deferrable
    return fn(request, model, fleet, reference, price, state, k, horizon, weights)


def apply_decision(fleet: Fleet, state: SystemState, decision: AdmissionDecision) -> None:
    """Extend the fleet (and closed-loop state) with an accepted request."""
    if not decision.accepted:
        return
    req = decision.request
    if fleet.has_id(req.asset_id):
        raise ValueError(f"duplicate asset id {req.asset_id}")
    if req.kind == "shapeable":
        load = replace(req.shapeable, k_in=decision.plug_in_step)
        fleet.shapeable.append(load)
        state.e_shp[load.id] = load.e
    else:
        fleet.deferrable.append(
            replace(req.deferrable, plug_in_step=decision.plug_in_step)
        )
