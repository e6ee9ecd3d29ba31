"""Scenario configuration: TOML loading, defaults and validation.

Validation collects every problem before failing so a broken config can be
fixed in one pass. Timing parameters are in seconds, latencies in ms.
"""

from __future__ import annotations

import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w

from ..botnet import DEFAULT_QOS, Address, BotnetError, TraitSet, trait_errors
from ..process import PlantTopology, SubstationSpec

ATTACK_KINDS = ("none", "distributed_impersonation", "distributed_replay")
STRATEGIES = ("hold_last", "constant", "process_model", "cross_replay")
STREAM_MODES = ("shared", "per_substation")


class ConfigValidationError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


class TimingWarning(UserWarning):
    pass


@dataclass
class AttackConfig:
    kind: str = "none"
    impersonate: Optional[List[int]] = None  # None: every substation
    strategy: str = "process_model"
    constant: Dict[str, int] = field(default_factory=dict)
    replay: List[Dict[str, str]] = field(default_factory=list)
    force_pumps: bool = True
    serve_delay_ms: float = 0.0
    spoof_start_delay: float = 0.0
    mirror_timing: bool = True

    @property
    def replay_pairs(self) -> List[Tuple[str, str]]:
        return [(m["source"], m["target"]) for m in self.replay]


@dataclass
class NetworkConfig:
    intra_ms: float = 1.0
    internet_ms: float = 5.0
    pubsub_loss: float = 0.0
    stream_mode: str = "shared"


@dataclass
class BotnetConfig:
    enabled: bool = True
    keep_alive: int = 60
    retry_s: float = 0.2
    qos: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_QOS))
    bot_traits: List[str] = field(default_factory=lambda: ["infiltrator", "forger", "pub", "sub"])
    cnc_traits: List[str] = field(default_factory=lambda: ["controller", "broker", "pub", "sub"])


@dataclass
class ScadaConfig:
    first_poll: Optional[float] = None  # default T_S
    low: float = 0.4
    high: float = 0.8


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    duration: float = 60.0
    T_S: float = 1.5
    T_C: float = 0.8
    T_M: float = 0.6
    t_attack_start: float = 30.0
    warmup: Optional[float] = None  # default 2 * T_S
    plant_dt: float = 0.1
    n_substations: int = 2
    substations: List[SubstationSpec] = field(default_factory=list)
    attack: AttackConfig = field(default_factory=AttackConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    botnet: BotnetConfig = field(default_factory=BotnetConfig)
    scada: ScadaConfig = field(default_factory=ScadaConfig)
    sample_host: bool = False

    @property
    def develop_at(self) -> float:
        return self.t_attack_start - (2 * self.T_S if self.warmup is None else self.warmup)

    @property
    def targets(self) -> List[int]:
        """Impersonated substations. By default every substation that takes
        no part in a replay mapping."""
        if self.attack.kind != "distributed_impersonation":
            return []
        if self.attack.impersonate is None:
            busy = set(self.replay_targets) | set(self.replay_sources)
            return [i for i in range(1, self.n_substations + 1) if i not in busy]
        return list(self.attack.impersonate)

    def _replay_subs(self, which: int) -> List[int]:
        if self.attack.kind == "none":
            return []
        try:
            return sorted({Address.parse(pair[which]).substation for pair in self.attack.replay_pairs})
        except (BotnetError, KeyError):
            return []

    @property
    def replay_targets(self) -> List[int]:
        return self._replay_subs(1)

    @property
    def replay_sources(self) -> List[int]:
        return self._replay_subs(0)

    @property
    def n_B(self) -> int:
        """Bots taking part in the delivery."""
        return len(set(self.targets) | set(self.replay_targets) | set(self.replay_sources))

    def plant(self) -> PlantTopology:
        if self.substations:
            return PlantTopology(list(self.substations))
        return PlantTopology.default(self.n_substations)

    # validation

    def errors(self) -> List[str]:
        out = []
        for name in ("duration", "T_S", "T_C", "T_M", "plant_dt"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if self.n_substations < 1:
            out.append("n_substations must be at least 1")
        if self.substations and len(self.substations) != self.n_substations:
            out.append(f"{len(self.substations)} substation specs given for n_substations={self.n_substations}")
        out.extend(self.plant().errors() if self.n_substations >= 1 else [])
        for name in ("intra_ms", "internet_ms"):
            if getattr(self.network, name) < 0:
                out.append(f"network.{name} must not be negative")
        if not 0 <= self.network.pubsub_loss < 1:
            out.append("network.pubsub_loss must lie in [0, 1)")
        if self.network.stream_mode not in STREAM_MODES:
            out.append(f"network.stream_mode must be one of {', '.join(STREAM_MODES)}")
        for key, q in self.botnet.qos.items():
            if key not in DEFAULT_QOS:
                out.append(f"botnet.qos: unknown message class {key!r}")
            elif q not in (0, 1, 2):
                out.append(f"botnet.qos.{key} must be 0, 1 or 2")
        if self.botnet.keep_alive < 0:
            out.append("botnet.keep_alive must not be negative")
        if not 0 <= self.scada.low < self.scada.high <= 1:
            out.append("scada thresholds must satisfy 0 <= low < high <= 1")
        out.extend(self._attack_errors())
        return out

    def _attack_errors(self) -> List[str]:
        a, out = self.attack, []
        if a.kind not in ATTACK_KINDS:
            return [f"attack.kind must be one of {', '.join(ATTACK_KINDS)}"]
        if a.strategy not in STRATEGIES:
            out.append(f"attack.strategy must be one of {', '.join(STRATEGIES)}")
        if a.serve_delay_ms < 0 or a.spoof_start_delay < 0:
            out.append("attack delays must not be negative")
        try:
            bot, cnc = TraitSet.of(self.botnet.bot_traits), TraitSet.of(self.botnet.cnc_traits)
            out.extend(trait_errors(bot, cnc, a.kind == "distributed_impersonation"))
        except BotnetError as exc:
            out.append(str(exc))
        if a.kind == "none":
            return out
        if not self.botnet.enabled:
            out.append("attacks need botnet.enabled = true")
        if not 0 < self.t_attack_start < self.duration:
            out.append("t_attack_start must lie inside (0, duration)")
        if self.develop_at < 0:
            out.append("warmup must not exceed t_attack_start")
        for sub in a.impersonate or []:
            if not 1 <= sub <= self.n_substations:
                out.append(f"attack.impersonate: substation {sub} does not exist")
        for key in a.constant:
            out.extend(self._address_errors("attack.constant", key))
        for i, m in enumerate(a.replay):
            if set(m) != {"source", "target"}:
                out.append(f"attack.replay[{i}] needs exactly source and target")
                continue
            out.extend(self._address_errors(f"attack.replay[{i}].source", m["source"]))
            out.extend(self._address_errors(f"attack.replay[{i}].target", m["target"]))
        if not out and a.impersonate is not None:
            shared = set(a.impersonate) & (set(self.replay_targets) | set(self.replay_sources))
            if shared:
                out.append(f"substations {sorted(shared)} cannot be impersonated and replayed at once")
        return out

    def _address_errors(self, where: str, text: str) -> List[str]:
        try:
            addr = Address.parse(text)
        except BotnetError as exc:
            return [f"{where}: {exc}"]
        if not 1 <= addr.substation <= self.n_substations:
            return [f"{where}: substation {addr.substation} does not exist"]
        return []

    def validate(self) -> "ScenarioConfig":
        errs = self.errors()
        if errs:
            raise ConfigValidationError(errs)
        for name in ("T_C", "T_M"):
            if getattr(self, name) > self.T_S:
                warnings.warn(f"{name}={getattr(self, name)} exceeds T_S={self.T_S}; "
                              "the defender may see stale values", TimingWarning, stacklevel=2)
        return self

    # (de)serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["substations"] = [asdict(s) for s in self.substations]
        return _drop_none(d)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        errors: List[str] = []
        kw = _take(cls, data, errors, "", skip={"attack", "network", "botnet", "scada", "substations"})
        cfg = cls(**kw)
        for name, sub in (("attack", AttackConfig), ("network", NetworkConfig),
                          ("botnet", BotnetConfig), ("scada", ScadaConfig)):
            section = data.get(name, {})
            if not isinstance(section, dict):
                errors.append(f"[{name}] must be a table")
                continue
            setattr(cfg, name, sub(**_take(sub, section, errors, f"{name}.")))
        if "qos" in data.get("botnet", {}):
            cfg.botnet.qos = dict(DEFAULT_QOS, **data["botnet"]["qos"])
        specs = data.get("substations", [])
        for i, spec in enumerate(specs if isinstance(specs, list) else []):
            cfg.substations.append(SubstationSpec(**_take(SubstationSpec, spec, errors, f"substations[{i}].")))
        if errors:
            try:
                errors.extend(cfg.errors())
            except (TypeError, ValueError, AttributeError):
                pass
            raise ConfigValidationError(errors)
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigValidationError([f"{path}: {exc}"]) from None
        return cls.from_dict(data)

    def dump(self, path=None) -> str:
        text = tomli_w.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def _take(cls, data: dict, errors: List[str], prefix: str, skip=frozenset()) -> dict:
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if key in skip:
            continue
        if key not in known:
            errors.append(f"unknown key {prefix}{key}")
            continue
        default = getattr(cls(), key) if key not in ("substations",) else None
        if isinstance(default, bool) and not isinstance(value, bool):
            errors.append(f"{prefix}{key} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool) and (
                isinstance(value, bool) or not isinstance(value, (int, float))):
            errors.append(f"{prefix}{key} must be a number")
        elif isinstance(default, str) and not isinstance(value, str):
            errors.append(f"{prefix}{key} must be a string")
        else:
            out[key] = value
    return out
