"""Scenario and controller-config files, plus a deterministic scenario generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import json

import numpy as np

from .assets import DeferrableLoad, ShapeableLoad
from .controller import ControllerWeights, HorizonConfig, PriceSignal
from .network import NetworkModel, load_network
from .pnp import PlugRequest

__all__ = [
    "ControllerConfig",
    "Scenario",
    "load_config",
    "load_scenario",
    "save_scenario",
    "generate_scenario",
]


@dataclass(frozen=True)
class ControllerConfig:
    horizon: HorizonConfig
    weights: ControllerWeights
    price: PriceSignal
    nu_nom: Optional[float] = None


@dataclass
class Scenario:
    network: NetworkModel
    config: ControllerConfig
    requests: list[PlugRequest]
    total_steps: int
    seed: Optional[int] = None
    network_path: str = ""
    config_path: str = ""

    def __post_init__(self):
        for req in self.requests:
            if not (0 <= req.step < self.total_steps):
                raise ValueError(
                    f"request {req.asset_id} at step {req.step} outside [0, {self.total_steps})"
                )
        self.requests = sorted(self.requests, key=lambda r: r.step)


def load_config(path: str) -> ControllerConfig:
    with open(path) as fh:
        doc = json.load(fh)
    wdoc = doc.get("weights", {})
    return ControllerConfig(
        horizon=HorizonConfig(
            dt_hours=float(doc["dt_hours"]),
            N=int(doc["N"]),
            N_r=int(doc["N_r"]),
        ),
        weights=ControllerWeights(
            t1=float(wdoc.get("t1", 1.0)),
            t2=float(wdoc.get("t2", 0.1)),
            t3=float(wdoc.get("t3", 0.1)),
            loss=float(wdoc.get("loss", 1e-3)),
        ),
        price=PriceSignal(np.array(doc["price"], dtype=float)),
        nu_nom=float(doc["nu_nom"]) if "nu_nom" in doc else None,
    )


def _request_from_doc(rd: dict) -> PlugRequest:
    step = int(rd["step"])
    if rd["kind"] == "shapeable":
        return PlugRequest(
            step=step,
            shapeable=ShapeableLoad(
                id=str(rd["id"]),
                bus=int(rd["bus"]),
                e=float(rd["e0"]),
                e_low=float(rd.get("e_low", 0.0)),
                e_max=float(rd["e_max"]),
                e_des=float(rd["e_des"]),
                c_max=float(rd["c_max"]),
                eta=float(rd.get("eta", 0.9)),
                k_in=step,
                k_out=int(rd["k_out"]),
            ),
        )
    if rd["kind"] == "deferrable":
        return PlugRequest(
            step=step,
            deferrable=DeferrableLoad(
                id=str(rd["id"]),
                bus=int(rd["bus"]),
                profile=np.array(rd["profile"], dtype=float),
                request_step=step,
                d_max=int(rd["d_max"]),
                eta=float(rd.get("eta", 1.0)),
            ),
        )
    raise ValueError(f"unknown request kind {rd['kind']!r}")


def _request_to_doc(req: PlugRequest) -> dict:
    if req.kind == "shapeable":
        s = req.shapeable
        return {
            "kind": "shapeable",
            "id": s.id,
            "step": req.step,
            "bus": s.bus,
            "e0": s.e,
            "e_low": s.e_low,
            "e_max": s.e_max,
            "e_des": s.e_des,
            "c_max": s.c_max,
            "eta": s.eta,
            "k_out": s.k_out,
        }
    d = req.deferrable
    return {
        "kind": "deferrable",
        "id": d.id,
        "step": req.step,
        "bus": d.bus,
        "profile": d.profile.tolist(),
        "d_max": d.d_max,
        "eta": d.eta,
    }


def load_scenario(
    path: str,
    network_path: Optional[str] = None,
    config_path: Optional[str] = None,
) -> Scenario:
    """Read a scenario file; network/config references resolve relative to it
    unless overridden."""
    p = Path(path)
    with open(p) as fh:
        doc = json.load(fh)
    npath = network_path or str((p.parent / doc["network"]).resolve())
    cpath = config_path or str((p.parent / doc["config"]).resolve())
    return Scenario(
        network=load_network(npath),
        config=load_config(cpath),
        requests=[_request_from_doc(rd) for rd in doc["requests"]],
        total_steps=int(doc["total_steps"]),
        seed=doc.get("seed"),
        network_path=npath,
        config_path=cpath,
    )


def save_scenario(scenario_doc: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_doc, fh, indent=1)


def generate_scenario(
    model: NetworkModel,
    horizon: HorizonConfig,
    total_steps: int,
    seed: int,
    shapeable_rate: float = 0.3,
    deferrable_rate: float = 0.3,
    network_ref: str = "network.json",
    config_ref: str = "config.json",
) -> dict:
    """Deterministic random request schedule (document form, ready to save).

    Arrivals are Poisson per step; buses are drawn uniformly among
    battery-equipped buses so that requests are plausibly admissible; the
    envelope parameters are sampled so that each request is individually
    satisfiable at max rate.
    """
    rng = np.random.default_rng(seed)
    buses = [bk.bus for bk in model.batteries] or [b.id for b in model.buses]
    requests = []
    serial = 0
    for k in range(total_steps):
        for _ in range(rng.poisson(shapeable_rate)):
            serial += 1
            c_max = float(rng.uniform(0.05, 0.15))
            eta = 0.9
            span = int(rng.integers(horizon.N, 3 * horizon.N))
            k_out = min(k + span, total_steps + 2 * horizon.N)
            # target reachable at max rate within the window
            e_cap = (k_out - k) * c_max * eta * horizon.dt_hours
            e_des = float(rng.uniform(0.3, 0.8) * e_cap)
            requests.append(
                {
                    "kind": "shapeable",
                    "id": f"shp-{serial:03d}",
                    "step": k,
                    "bus": int(rng.choice(buses)),
                    "e0": 0.0,
                    "e_low": 0.0,
                    "e_max": e_des * 1.25,
                    "e_des": e_des,
                    "c_max": c_max,
                    "eta": eta,
                    "k_out": int(k_out),
                }
            )
        for _ in range(rng.poisson(deferrable_rate)):
            serial += 1
            length = int(rng.integers(1, max(2, horizon.N // 2)))
            level = float(rng.uniform(0.03, 0.1))
            requests.append(
                {
                    "kind": "deferrable",
                    "id": f"def-{serial:03d}",
                    "step": k,
                    "bus": int(rng.choice(buses)),
                    "profile": [level] * length,
                    "d_max": int(rng.integers(0, horizon.N - 1)),
                    "eta": 1.0,
                }
            )
    return {
        "network": network_ref,
        "config": config_ref,
        "seed": seed,
        "total_steps": total_steps,
        "requests": requests,
    }
