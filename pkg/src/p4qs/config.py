"""Run configuration: the documented key set, validation, and file loading.

Configs come from JSON files or flag overrides; every run validates fully
before anything executes, and a bad key is reported by name.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

PROTOCOL_P4QS = "p4qs"
PROTOCOL_PSEUDONYM = "pseudonym_baseline"

LATENCY_PROFILES = {
    "local": (2.0, 1.0),
    "internet": (50.0, 30.0),
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"config field '{field_name}': {message}")


@dataclass
class TicketConfig:
    batch_size: int = 20
    period_ms: int = 60_000
    validity_ms: int = 60_000
    exchange_count: int = 0
    exchange_rounds: int = 0
    exchange_interval_ms: int = 500
    trust_threshold: int = 3
    topology: str = "uniform"


@dataclass
class LatencyConfig:
    profile: str = "local"
    base_ms: float | None = None
    jitter_ms: float | None = None

    def resolved(self) -> tuple:
        if self.base_ms is not None and self.jitter_ms is not None:
            return float(self.base_ms), float(self.jitter_ms)
        return LATENCY_PROFILES[self.profile]


@dataclass
class RunConfig:
    peers: int = 20
    k: int = 4
    t_wait_ms: int = 5000
    min_cloak_side_deg: float = 0.01
    queries: int = 0
    clients: int | None = None
    horizon_ms: int = 600_000
    seed: int = 0
    protocol: str = PROTOCOL_P4QS
    ticket: TicketConfig = field(default_factory=TicketConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    churn: list = field(default_factory=list)
    overload_threshold: int | None = None
    fault_inject: str | None = None
    broker_timeout_factor: int = 3
    retry_limit: int = 2
    poi_path: str | None = None

    @property
    def broker_timeout_ms(self) -> int:
        return self.broker_timeout_factor * self.t_wait_ms

    def validate(self) -> None:
        if self.peers < 1:
            raise ConfigError("peers", "must be >= 1")
        if self.k < 1:
            raise ConfigError("k", "must be >= 1")
        if self.t_wait_ms <= 0:
            raise ConfigError("t_wait_ms", "must be positive")
        if self.min_cloak_side_deg < 0:
            raise ConfigError("min_cloak_side_deg", "must be nonnegative")
        if self.queries < 0:
            raise ConfigError("queries", "must be nonnegative")
        if self.clients is not None and not (1 <= self.clients <= self.peers):
            raise ConfigError("clients", "must be in [1, peers]")
        if self.horizon_ms <= 0:
            raise ConfigError("horizon_ms", "must be positive")
        if self.protocol not in (PROTOCOL_P4QS, PROTOCOL_PSEUDONYM):
            raise ConfigError("protocol", f"unknown protocol {self.protocol!r}")
        t = self.ticket
        if t.batch_size < 0:
            raise ConfigError("ticket.batch_size", "must be nonnegative")
        if t.period_ms <= 0:
            raise ConfigError("ticket.period_ms", "must be positive")
        if t.validity_ms <= 0:
            raise ConfigError("ticket.validity_ms", "must be positive")
        if t.exchange_count < 0 or (t.batch_size and t.exchange_count > t.batch_size):
            raise ConfigError("ticket.exchange_count",
                              "must be in [0, ticket.batch_size]")
        if t.exchange_rounds < 0:
            raise ConfigError("ticket.exchange_rounds", "must be nonnegative")
        if t.exchange_interval_ms <= 0:
            raise ConfigError("ticket.exchange_interval_ms", "must be positive")
        if t.topology not in ("uniform", "ring"):
            raise ConfigError("ticket.topology", "must be 'uniform' or 'ring'")
        lat = self.latency
        if lat.profile not in LATENCY_PROFILES:
            raise ConfigError("latency.profile",
                              f"must be one of {sorted(LATENCY_PROFILES)}")
        base, jitter = lat.resolved()
        if base < 0 or jitter < 0:
            raise ConfigError("latency.base_ms", "latency must be nonnegative")
        if self.overload_threshold is not None and self.overload_threshold < 1:
            raise ConfigError("overload_threshold", "must be >= 1 or null")
        if self.fault_inject not in (None, "undersized_batch"):
            raise ConfigError("fault_inject", f"unknown fault {self.fault_inject!r}")
        if self.broker_timeout_factor < 1:
            raise ConfigError("broker_timeout_factor", "must be >= 1")
        if self.retry_limit < 0:
            raise ConfigError("retry_limit", "must be nonnegative")
        for i, entry in enumerate(self.churn):
            if not isinstance(entry, dict):
                raise ConfigError(f"churn[{i}]", "must be an object")
            if "t" not in entry or "action" not in entry:
                raise ConfigError(f"churn[{i}]", "needs 't' and 'action'")
            if entry["action"] not in ("leave", "join", "rejoin",
                                       "set_uncooperative", "set_malicious_tickets"):
                raise ConfigError(f"churn[{i}].action",
                                  f"unknown action {entry['action']!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown config key")
        kwargs = dict(data)
        if "ticket" in kwargs:
            sub = kwargs["ticket"]
            if not isinstance(sub, dict):
                raise ConfigError("ticket", "must be an object")
            extra = set(sub) - set(TicketConfig.__dataclass_fields__)
            if extra:
                raise ConfigError(f"ticket.{sorted(extra)[0]}", "unknown config key")
            kwargs["ticket"] = TicketConfig(**sub)
        if "latency" in kwargs:
            sub = kwargs["latency"]
            if not isinstance(sub, dict):
                raise ConfigError("latency", "must be an object")
            extra = set(sub) - set(LatencyConfig.__dataclass_fields__)
            if extra:
                raise ConfigError(f"latency.{sorted(extra)[0]}", "unknown config key")
            kwargs["latency"] = LatencyConfig(**sub)
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("<file>", f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)
