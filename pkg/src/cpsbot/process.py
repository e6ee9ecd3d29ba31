"""Discrete-time tank model for each substation of the water-distribution
plant, and its mapping onto the RTU's Modbus tables.

Each substation is a single tank filled by a pump and drained through a
valve towards consumers. The level integrates net flow and is clamped to
``[0, capacity]``. Default tank sizes follow the WaDi testbed stages.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .modbus import DataStore

log = logging.getLogger(__name__)

# (stage, capacity in liters): raw water, elevated reservoir, consumer, return
WADI_TANKS = [("supply", 2500.0), ("distribution", 1250.0), ("distribution", 500.0), ("return", 2000.0)]
STAGES = ("supply", "distribution", "return")

REGISTER_MAX = 0xFFFF
LEVEL_SCALE = 10
FLOW_SCALE = 100


class ConfigError(ValueError):
    pass


@dataclass
class SubstationSpec:
    tank_capacity: float = 2500.0
    initial_level: float = 1250.0
    max_inflow: float = 4.0
    max_outflow: float = 4.0
    stage: str = "supply"
    demand_mean: float = 2.0
    demand_amplitude: float = 1.0
    demand_period: float = 120.0
    demand_noise: float = 0.05
    pump_on: bool = False
    valve_open: bool = True

    def errors(self, name: str = "substation") -> List[str]:
        out = []
        if self.tank_capacity <= 0:
            out.append(f"{name}: tank_capacity must be positive")
        if not 0 <= self.initial_level <= self.tank_capacity:
            out.append(f"{name}: initial_level must lie in [0, tank_capacity]")
        if self.max_inflow < 0 or self.max_outflow < 0:
            out.append(f"{name}: flow limits must be non-negative")
        if self.stage not in STAGES:
            out.append(f"{name}: stage must be one of {', '.join(STAGES)}")
        if self.demand_period <= 0:
            out.append(f"{name}: demand_period must be positive")
        if self.demand_noise < 0:
            out.append(f"{name}: demand_noise must be non-negative")
        return out


@dataclass
class PlantTopology:
    substations: List[SubstationSpec] = field(default_factory=list)

    @property
    def n_substations(self) -> int:
        return len(self.substations)

    @classmethod
    def default(cls, n_substations: int = 2) -> "PlantTopology":
        subs = []
        for i in range(n_substations):
            stage, capacity = WADI_TANKS[i % len(WADI_TANKS)]
            flow = capacity / 625.0  # 2500 L tank <-> 4 L/s
            subs.append(SubstationSpec(tank_capacity=capacity, initial_level=capacity / 2,
                                       max_inflow=flow, max_outflow=flow, stage=stage,
                                       demand_mean=flow / 2, demand_amplitude=flow / 4))
        return cls(subs)

    def errors(self) -> List[str]:
        out = [] if self.substations else ["topology: at least one substation is required"]
        for i, spec in enumerate(self.substations, 1):
            out.extend(spec.errors(f"sub{i}"))
        return out


@dataclass
class SubstationState:
    level: float
    inflow: float = 0.0
    outflow: float = 0.0
    pump_on: bool = False
    valve_open: bool = True
    demand: float = 0.0

    @classmethod
    def initial(cls, spec: SubstationSpec) -> "SubstationState":
        state = cls(spec.initial_level, pump_on=spec.pump_on, valve_open=spec.valve_open,
                    demand=spec.demand_mean)
        return recompute_flows(state, spec)


def recompute_flows(state: SubstationState, spec: SubstationSpec) -> SubstationState:
    inflow = spec.max_inflow if state.pump_on else 0.0
    outflow = min(max(state.demand, 0.0), spec.max_outflow) if state.valve_open else 0.0
    return replace(state, inflow=inflow, outflow=outflow)


def step(state: SubstationState, dt: float, spec: SubstationSpec,
         demand: Optional[float] = None) -> SubstationState:
    """Integrate the current flows over ``dt`` seconds, then recompute the
    flows from actuator states and (optionally updated) demand."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    level = state.level + (state.inflow - state.outflow) * dt
    level = min(max(level, 0.0), spec.tank_capacity)
    new = replace(state, level=level, demand=state.demand if demand is None else demand)
    return recompute_flows(new, spec)


class DemandModel:
    """Sinusoidal consumer demand with Gaussian noise, in L/s."""

    def __init__(self, spec: SubstationSpec, rng: np.random.Generator, phase: float = 0.0):
        self.spec = spec
        self.rng = rng
        self.phase = phase

    def __call__(self, t: float) -> float:
        s = self.spec
        value = s.demand_mean + s.demand_amplitude * math.sin(2 * math.pi * t / s.demand_period + self.phase)
        if s.demand_noise:
            value += s.demand_noise * float(self.rng.standard_normal())
        return max(value, 0.0)


@dataclass(frozen=True)
class RegisterMap:
    level: int = 100
    inflow: int = 101
    outflow: int = 102
    demand: int = 103
    pump: int = 0
    valve: int = 1

    @property
    def registers(self):
        return {"level": self.level, "inflow": self.inflow, "outflow": self.outflow, "demand": self.demand}

    @property
    def coils(self):
        return {"pump": self.pump, "valve": self.valve}

    def check(self, store: DataStore) -> None:
        regs, coils = list(self.registers.values()), list(self.coils.values())
        if len(set(regs)) != len(regs) or len(set(coils)) != len(coils):
            raise ConfigError("register map is not injective")
        for name, idx in self.registers.items():
            if not 0 <= idx < len(store.holding_registers):
                raise ConfigError(f"{name} register {idx} outside store of {len(store.holding_registers)}")
        for name, idx in self.coils.items():
            if not 0 <= idx < len(store.coils):
                raise ConfigError(f"{name} coil {idx} outside store of {len(store.coils)}")


def to_register(value: float, scale: int) -> int:
    return int(min(max(round(value * scale), 0), REGISTER_MAX))


def level_from_register(raw: int) -> float:
    return raw / LEVEL_SCALE


def flow_from_register(raw: int) -> float:
    return raw / FLOW_SCALE


def write_sensors(state: SubstationState, rmap: RegisterMap, store: DataStore) -> None:
    hr = store.holding_registers
    hr[rmap.level] = to_register(state.level, LEVEL_SCALE)
    hr[rmap.inflow] = to_register(state.inflow, FLOW_SCALE)
    hr[rmap.outflow] = to_register(state.outflow, FLOW_SCALE)
    hr[rmap.demand] = to_register(state.demand, FLOW_SCALE)


def write_actuators(state: SubstationState, rmap: RegisterMap, store: DataStore) -> None:
    store.coils[rmap.pump] = state.pump_on
    store.coils[rmap.valve] = state.valve_open


def sync_datastore(state: SubstationState, rmap: RegisterMap, store: DataStore) -> SubstationState:
    """Publish sensor values into the holding registers and read actuator
    commands back from the coils. Switching an actuator off zeroes its flow
    immediately; switching it on takes effect at the next step."""
    write_sensors(state, rmap, store)
    pump_on = bool(store.coils[rmap.pump])
    valve_open = bool(store.coils[rmap.valve])
    return replace(state, pump_on=pump_on, valve_open=valve_open,
                   inflow=state.inflow if pump_on else 0.0,
                   outflow=state.outflow if valve_open else 0.0)


class Substation:
    """One tank bound to its RTU data store, advanced on the fabric clock."""

    def __init__(self, index: int, spec: SubstationSpec, rng: np.random.Generator,
                 rmap: Optional[RegisterMap] = None, store: Optional[DataStore] = None):
        self.index = index
        self.spec = spec
        self.rmap = rmap or RegisterMap()
        self.store = store or DataStore()
        self.rmap.check(self.store)
        self.demand = DemandModel(spec, rng, phase=0.7 * (index - 1))
        self.state = SubstationState.initial(spec)
        self.clamp_events = 0
        write_actuators(self.state, self.rmap, self.store)
        write_sensors(self.state, self.rmap, self.store)

    def tick(self, t: float, dt: float) -> SubstationState:
        self.state = sync_datastore(self.state, self.rmap, self.store)
        raw = self.state.level + (self.state.inflow - self.state.outflow) * dt
        self.state = step(self.state, dt, self.spec, demand=self.demand(t))
        if raw != self.state.level:
            self.clamp_events += 1
            log.debug("sub%d: level clamped from %.3f to %.3f", self.index, raw, self.state.level)
        write_sensors(self.state, self.rmap, self.store)
        return self.state
