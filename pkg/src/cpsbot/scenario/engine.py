"""Build the plant, network and botnet from a config and run the attack
phases on the virtual clock."""

from __future__ import annotations

import logging
import os
import resource
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..botnet import (
    Address, Bot, BotConfig, CommandAndControl, Constant, CrossReplay, HoldLastValue,
    ProcessModelEstimate, Strategy,
)
from ..metrics import MetricsReport, compute_report
from ..netfabric import Fabric, NodeAddr, Trace
from ..process import RegisterMap, Substation
from .config import ScenarioConfig
from .nodes import MODBUS_PORT, SCADA_PORT, RtuNode, ScadaNode

log = logging.getLogger(__name__)

ENGINE = "engine"
PHASES = ("reconnaissance", "initialization", "develop_strategy", "delivery")


class ScenarioError(RuntimeError):
    pass


@dataclass
class PhaseLog:
    entries: List[Tuple[str, float]] = field(default_factory=list)

    def add(self, name: str, t: float) -> None:
        self.entries.append((name, t))

    @property
    def names(self) -> List[str]:
        return [n for n, _ in self.entries]

    def time_of(self, name: str) -> Optional[float]:
        return next((t for n, t in self.entries if n == name), None)


@dataclass
class RunResult:
    config: ScenarioConfig
    fabric: Fabric
    scada: ScadaNode
    rtus: Dict[int, RtuNode]
    bots: Dict[int, Bot]
    cnc: Optional[CommandAndControl]
    phases: PhaseLog
    report: MetricsReport
    wall_s: float

    @property
    def trace(self) -> Trace:
        return self.fabric.trace


def build_strategy(cfg: ScenarioConfig, rmap: RegisterMap) -> Strategy:
    a = cfg.attack
    if a.strategy == "hold_last":
        return HoldLastValue()
    if a.strategy == "constant":
        return Constant({Address.parse(k): int(v) for k, v in a.constant.items()})
    if a.strategy == "cross_replay":
        return CrossReplay({Address.parse(t): Address.parse(s) for s, t in a.replay_pairs})
    specs = dict(enumerate(cfg.plant().substations, 1))
    return ProcessModelEstimate(specs, rmap, period_s=cfg.T_C)


def _host_usage(cpu0: float, wall0: float) -> Tuple[float, Optional[float]]:
    """(CPU %, peak RSS as % of physical memory) of this process."""
    wall = max(time.perf_counter() - wall0, 1e-9)
    cpu = 100.0 * (time.process_time() - cpu0) / wall
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    rss_bytes = rss if sys.platform == "darwin" else rss * 1024
    try:
        total = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        total = 0
    ram = 100.0 * rss_bytes / total if total > 0 else None
    return round(cpu, 1), None if ram is None else round(ram, 2)


class Scenario:
    """Wires every node onto one fabric. ``run`` drives the phases."""

    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        plant_seq, net_seq = np.random.SeedSequence(self.seed).spawn(2)
        self.fabric = Fabric(int(net_seq.generate_state(1)[0]))
        self.plant_rng = np.random.default_rng(plant_seq)
        self.rmap = RegisterMap()
        self.phases = PhaseLog()
        self.rtus: Dict[int, RtuNode] = {}
        self.bots: Dict[int, Bot] = {}
        self.cnc: Optional[CommandAndControl] = None
        self._build()

    # topology

    def _build(self) -> None:
        cfg, fab, net = self.cfg, self.fabric, self.cfg.network
        core = fab.add_host("inet", "core")
        fab.add_host("scada", "scada")
        fab.add_host("scada", "router")
        fab.add_link("scada/scada", "scada/router", net.intra_ms)
        fab.add_link("scada/router", core, net.internet_ms)
        plant = cfg.plant()
        rtu_addrs = {}
        links = {}
        for i, spec in enumerate(plant.substations, 1):
            net_id = f"sub{i}"
            router, gw, rtu = (fab.add_host(net_id, h) for h in ("router", f"gw{i}", f"rtu{i}"))
            fab.add_link(router, core, net.internet_ms)
            fab.add_link(router, gw, net.intra_ms)
            links[i] = fab.add_link(gw, rtu, net.intra_ms)
            addr = NodeAddr(net_id, f"rtu{i}", MODBUS_PORT)
            rtu_addrs[i] = addr
            sub = Substation(i, spec, self.plant_rng, self.rmap)
            self.rtus[i] = RtuNode(fab, addr, sub, cfg.plant_dt)
        self.scada = ScadaNode(fab, NodeAddr("scada", "scada", SCADA_PORT), rtu_addrs, cfg.T_S,
                               {i: s.tank_capacity for i, s in enumerate(plant.substations, 1)},
                               self.rmap, net.stream_mode,
                               cfg.T_S if cfg.scada.first_poll is None else cfg.scada.first_poll, cfg.scada.low, cfg.scada.high)
        if not cfg.botnet.enabled:
            return
        fab.add_host("attacker", "cnc")
        fab.add_host("attacker", "router")
        fab.add_link("attacker/cnc", "attacker/router", net.intra_ms)
        fab.add_link("attacker/router", core, net.internet_ms, loss_rate=net.pubsub_loss)
        b = cfg.botnet
        self.cnc = CommandAndControl(fab, "attacker/cnc", build_strategy(cfg, self.rmap), cfg.T_C,
                                     cfg.n_substations, b.qos, b.retry_s, b.keep_alive)
        for i in rtu_addrs:
            force = {self.rmap.pump: True} if cfg.attack.force_pumps and i in cfg.targets else {}
            bc = BotConfig(T_M=cfg.T_M, serve_delay_s=cfg.attack.serve_delay_ms / 1000.0,
                           spoof_start_delay_s=cfg.attack.spoof_start_delay,
                           mirror_timing=cfg.attack.mirror_timing, force_coils=force,
                           keep_alive=b.keep_alive, retry_s=b.retry_s, qos=dict(b.qos))
            self.bots[i] = Bot(fab, i, f"sub{i}/gw{i}", rtu_addrs[i], links[i], self.cnc.broker.addr,
                               bc, self.rmap)

    def _config_meta(self) -> dict:
        cfg = self.cfg
        return {"name": cfg.name, "seed": self.seed, "T_S": cfg.T_S, "T_C": cfg.T_C, "T_M": cfg.T_M,
                "n_B": cfg.n_B, "attack": cfg.attack.kind, "t_attack_start": cfg.t_attack_start,
                "duration": cfg.duration, "scada": str(self.scada.addr),
                "rtus": {str(i): str(r.addr) for i, r in self.rtus.items()},
                "targets": sorted(set(cfg.targets) | set(cfg.replay_targets))}

    # phases

    def _phase(self, name: str) -> None:
        self.phases.add(name, self.fabric.now)
        self.fabric.log("phase", ENGINE, {"phase": name})

    def _reconnaissance(self) -> None:
        self._phase("reconnaissance")
        self.fabric.log("topology", ENGINE, {"hosts": sorted(self.fabric.graph.nodes)})

    def _initialization(self) -> None:
        self._phase("initialization")
        if self.cnc is None:
            return
        self.cnc.start()
        for bot in self.bots.values():
            bot.infiltrator_bridge()
            bot.start()

    def _develop(self) -> None:
        offline = [b.name for b in self.bots.values() if not b.client.connected]
        if self.cnc is None or not self.cnc.client.connected or offline:
            msg = f"botnet not ready at t={self.fabric.now:.3f}s; offline bots: {', '.join(offline) or 'cnc'}"
            self.fabric.log("abort", ENGINE, {"reason": msg})
            raise ScenarioError(msg)
        self._phase("develop_strategy")
        self.cnc.develop_strategy(self.cfg.t_attack_start, self.cfg.targets, self.cfg.attack.replay_pairs)

    def _deliver(self) -> None:
        self._phase("delivery")
        self.cnc.deliver()

    def run(self, sample_host: Optional[bool] = None) -> RunResult:
        cfg, fab = self.cfg, self.fabric
        wall0, cpu0 = time.perf_counter(), time.process_time()
        fab.log("config", ENGINE, self._config_meta())
        self._reconnaissance()
        self._initialization()
        if cfg.attack.kind != "none":
            fab.call_at(cfg.develop_at, ENGINE, self._develop, "develop_strategy")
            fab.call_at(cfg.t_attack_start, ENGINE, self._deliver, "delivery")
        fab.run_until(cfg.duration)
        wall = time.perf_counter() - wall0
        sample = cfg.sample_host if sample_host is None else sample_host
        host = _host_usage(cpu0, wall0) if sample else None
        report = compute_report(fab.trace, host)
        return RunResult(cfg, fab, self.scada, self.rtus, self.bots, self.cnc, self.phases, report, wall)


def run_scenario(cfg: ScenarioConfig, seed: Optional[int] = None, sample_host: Optional[bool] = None) -> RunResult:
    cfg.validate()
    return Scenario(cfg, seed).run(sample_host)
