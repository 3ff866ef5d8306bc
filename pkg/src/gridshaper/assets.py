"""Controllable asset models: shapeable loads, deferrable loads, battery banks.

Energy is tracked in p.u.-hours so that a step length in hours keeps the
charge updates dimensionally clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = [
    "ShapeableLoad",
    "DeferrableLoad",
    "BatteryBank",
    "Fleet",
    "EnvelopeViolation",
    "shp_soc_min",
    "step_soc",
    "shifted_profile",
    "aggregate_bus_power",
]


class EnvelopeViolation(ValueError):
    """A state update left the asset's admissible SOC band."""


@dataclass
class ShapeableLoad:
    """Continuously modulated load (e.g. a PEV) with an energy target by deadline.

    Power may be anything in [0, c_max]; the SOC must reach e_des by step
    k_out and never leave [e_low, e_max].
    """

    id: str
    bus: int
    e: float
    e_low: float
    e_max: float
    e_des: float
    c_max: float
    eta: float
    k_in: int
    k_out: int

    def __post_init__(self):
        if not (self.e_low <= self.e <= self.e_max):
            raise EnvelopeViolation(f"shapeable {self.id}: e outside [e_low, e_max]")
        if self.e_des > self.e_max:
            raise ValueError(f"shapeable {self.id}: e_des > e_max")
        if not (0.0 < self.eta <= 1.0):
            raise ValueError(f"shapeable {self.id}: eta must be in (0, 1]")
        if self.k_in > self.k_out:
            raise ValueError(f"shapeable {self.id}: k_in > k_out")


@dataclass
class DeferrableLoad:
    """Fixed-profile load that may only be delayed, by at most d_max steps."""

    id: str
    bus: int
    profile: np.ndarray
    request_step: int
    d_max: int
    eta: float = 1.0
    plug_in_step: Optional[int] = None  # set once admitted

    def __post_init__(self):
        prof = np.asarray(self.profile, dtype=float)
        object.__setattr__(self, "profile", prof)
        if prof.ndim != 1 or len(prof) == 0:
            raise ValueError(f"deferrable {self.id}: profile must be a nonempty vector")
        if not np.isfinite(prof).all() or (prof < 0).any():
            raise ValueError(f"deferrable {self.id}: profile entries must be finite and >= 0")
        if self.d_max < 0:
            raise ValueError(f"deferrable {self.id}: d_max < 0")

    @property
    def end_step(self) -> int:
        """First step after the profile finishes (requires admission)."""
        if self.plug_in_step is None:
            raise ValueError(f"deferrable {self.id} not admitted yet")
        return self.plug_in_step + len(self.profile)

    def power_at(self, step: int) -> float:
        """Injected power at an absolute step; zero outside the active window."""
        if self.plug_in_step is None:
            return 0.0
        t = step - self.plug_in_step
        if 0 <= t < len(self.profile):
            return float(self.profile[t])
        return 0.0


@dataclass
class BatteryBank:
    """Grid-side storage with symmetric perfect-efficiency dynamics."""

    id: str
    bus: int
    e: float
    e_low: float
    e_max: float
    p_min: float  # negative = discharge into the grid
    p_max: float

    def __post_init__(self):
        if not (self.e_low <= self.e <= self.e_max):
            raise EnvelopeViolation(f"battery {self.id}: e outside [e_low, e_max]")
        if self.p_min > self.p_max:
            raise ValueError(f"battery {self.id}: p_min > p_max")


def shp_soc_min(load: ShapeableLoad, k: int, dt_hours: float) -> float:
    """Time-varying lower SOC bound that keeps the deadline reachable.

    The remaining max-rate charge from step k to k_out is slack against the
    target; the bound clamps at the physical floor and hits e_des at k_out.
    """
    slack = max(0.0, (load.k_out - k) * load.c_max * load.eta * dt_hours)
    return max(load.e_des - slack, load.e_low)


def step_soc(
    e: float,
    power: float,
    eta: float,
    dt_hours: float,
    e_low: float = -np.inf,
    e_max: float = np.inf,
    tol: float = 1e-9,
) -> float:
    """One-step SOC update e' = e + eta * dt * power, checked against the band."""
    e_next = e + eta * dt_hours * power
    if e_next < e_low - tol or e_next > e_max + tol:
        raise EnvelopeViolation(
            f"SOC {e_next:.6g} outside [{e_low:.6g}, {e_max:.6g}]"
        )
    return float(np.clip(e_next, e_low, e_max))


def shifted_profile(load: DeferrableLoad, d: int) -> np.ndarray:
    """Zero-prefixed copy of the base profile; total energy is preserved."""
    if not (0 <= d <= load.d_max):
        raise ValueError(f"delay {d} outside [0, {load.d_max}]")
    return np.concatenate([np.zeros(d), load.profile])


@dataclass
class Fleet:
    """Registry of currently connected flexible loads.

    Mutated only between MPC steps (admission / plug-out); everything else
    treats a Fleet snapshot as read-only.
    """

    shapeable: list[ShapeableLoad] = field(default_factory=list)
    deferrable: list[DeferrableLoad] = field(default_factory=list)

    @property
    def m_shp(self) -> int:
        return len(self.shapeable)

    def incidence(self, n_buses: int) -> np.ndarray:
        """n x M_shp 0/1 map from shapeable load index to bus."""
        K = np.zeros((n_buses, self.m_shp))
        for j, load in enumerate(self.shapeable):
            K[load.bus - 1, j] = 1.0
        return K

    def deferrable_power(self, n_buses: int, step: int) -> np.ndarray:
        """Per-bus total deferrable injection at an absolute step."""
        p = np.zeros(n_buses)
        for load in self.deferrable:
            if load.plug_in_step is not None:
                p[load.bus - 1] += load.power_at(step)
        return p

    def has_id(self, asset_id: str) -> bool:
        return any(s.id == asset_id for s in self.shapeable) or any(
            d.id == asset_id for d in self.deferrable
        )

    def copy(self) -> "Fleet":
        return Fleet(
            shapeable=[replace(s) for s in self.shapeable],
            deferrable=[replace(d) for d in self.deferrable],
        )

    def drop_expired(self, step: int) -> list[str]:
        """Remove loads whose plug-out / profile end has passed. Returns removed ids."""
        gone = []
        keep_s = []
        for s in self.shapeable:
            if step >= s.k_out:
                gone.append(s.id)
            else:
                keep_s.append(s)
        self.shapeable = keep_s
        keep_d = []
        for d in self.deferrable:
            if d.plug_in_step is not None and step >= d.end_step:
                gone.append(d.id)
            else:
                keep_d.append(d)
        self.deferrable = keep_d
        return gone


def aggregate_bus_power(
    fleet: Fleet, u_shp: np.ndarray, step: int, n_buses: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus shapeable and deferrable totals (p_shp = K_shp @ u_shp)."""
    u_shp = np.asarray(u_shp, dtype=float)
    if u_shp.shape != (fleet.m_shp,):
        raise ValueError(f"expected {fleet.m_shp} shapeable powers, got {u_shp.shape}")
    p_shp = fleet.incidence(n_buses) @ u_shp if fleet.m_shp else np.zeros(n_buses)
    p_def = fleet.deferrable_power(n_buses, step)
    return p_shp, p_def
