"""Flat ``section.key = value`` run configuration.

One setting per line, ``#`` starts a comment. Every key has a fixed type and
unknown keys are rejected, so a resolved file fully describes a run.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .algorithms import AUTO, Framework, ProtocolConfig
from .environments import DEFAULT_FLOOR, DEFAULT_NOISE, PRESETS
from .errors import ConfigurationError
from .solver import BregmanKind, DualState

FORMAT_VERSION = 1

# key -> (type, default). Types are bool, int, float, str or "alpha" (float or "auto").
SCHEMA = {
    "env.preset": (str, "max-entropy-small"),
    "env.map": (str, ""),
    "env.objective": (str, ""),
    "env.horizon": (int, 0),
    "env.noise": (float, DEFAULT_NOISE),
    "env.floor": (float, DEFAULT_FLOOR),
    "protocol.framework": (str, "k"),
    "protocol.num_episodes": (int, 1000),
    "protocol.num_agents": (int, 2),
    "protocol.eta": (float, 0.01),
    "protocol.alpha_bar": ("alpha", 0.1),
    "protocol.delta": (float, 0.1),
    "protocol.gamma": (float, 1000.0),
    "protocol.seed": (int, 0),
    "protocol.mix_rate": (float, 1e-6),
    "protocol.bonus_scale": (float, 1.0),
    "protocol.bregman": (str, BregmanKind.POLICY_GAMMA.value),
    "protocol.finite_agents": (bool, False),
    "protocol.lambda_warm_start": (bool, True),
    "protocol.alpha_reference": (str, "previous"),
    "protocol.gap_offset": (int, 0),
    "protocol.dual_units": (str, "loss"),
    "protocol.on_infeasible": (str, "abort"),
    "protocol.dual_method": (str, "ascent"),
    "protocol.pool_steps": (bool, False),
    "dual.lam": (float, 0.0),
    "dual.eta_lambda": (float, 0.01),
    "dual.epsilon": (float, 1e-3),
    "dual.max_iters": (int, 5000),
    "comparator.tol": (float, 1e-3),
    "comparator.eta": (float, 0.5),
    "comparator.max_iters": (int, 3000),
    "output.dir": (str, "runs/latest"),
    "output.plots": (bool, True),
    "output.checkpoint_every": (int, 100),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse_value(key, text):
    kind = SCHEMA[key][0]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == "alpha":
            return AUTO if text == AUTO else float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"bad value {text!r} for {key}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """All settings of a run, keyed by dotted names (see ``SCHEMA``)."""

    values: dict = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})

    def __post_init__(self):
        merged = {k: v for k, (_, v) in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key!r}")
            merged[key] = _parse_value(key, value) if isinstance(value, str) else value
        self.values = merged
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def with_values(self, mapping) -> "RunConfig":
        values = dict(self.values)
        for key, value in mapping.items():
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key!r}")
            values[key] = value
        return RunConfig(values)

    def validate(self):
        if not self["env.map"] and self["env.preset"] not in PRESETS:
            raise ConfigurationError(f"unknown preset {self['env.preset']!r}; choose from {sorted(PRESETS)}")
        if self["env.map"] and self["env.objective"] not in ("max-entropy", "obstacles"):
            raise ConfigurationError("a map file needs env.objective = max-entropy or obstacles")
        if self["output.checkpoint_every"] < 0:
            raise ConfigurationError("output.checkpoint_every must be non-negative")
        self.protocol()  # runs the protocol-level checks

    def dual(self) -> DualState:
        return DualState(lam=self["dual.lam"], eta_lambda=self["dual.eta_lambda"],
                         epsilon=self["dual.epsilon"], max_iters=self["dual.max_iters"])

    def protocol(self) -> ProtocolConfig:
        kwargs = {f.name: self.values[f"protocol.{f.name}"] for f in dataclasses.fields(ProtocolConfig)
                  if f"protocol.{f.name}" in self.values}
        kwargs["framework"] = Framework(kwargs["framework"])
        kwargs["bregman"] = BregmanKind(kwargs["bregman"])
        return ProtocolConfig(dual=self.dual(), **kwargs)

    def dumps(self) -> str:
        lines = [f"# periodic-mdp run configuration, format {FORMAT_VERSION}"]
        section = None
        for key in SCHEMA:
            head = key.split(".", 1)[0]
            if head != section:
                lines.append("")
                section = head
            lines.append(f"{key} = {_format_value(self.values[key])}")
        return "\n".join(lines) + "\n"


def loads(text: str) -> RunConfig:
    values = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigurationError(f"line {number}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {number}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return RunConfig(values)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def desk_scale(preset: str, framework: str = "k", overrides=None) -> RunConfig:
    """Settings used for the reduced-scale experiments shipped with the package."""
    values = {
        "env.preset": preset,
        "protocol.framework": framework,
        "protocol.bonus_scale": 1e-4,
        "protocol.pool_steps": True,
        "protocol.dual_method": "bisection",
        "protocol.on_infeasible": "best_effort",
    }
    values.update(overrides or {})
    return RunConfig(values)
