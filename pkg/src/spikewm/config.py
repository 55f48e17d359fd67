"""Flat, namespaced run configuration.

A config file holds ``namespace.key = value`` lines (``#`` starts a comment).
Every key has a typed default; unknown keys are rejected. The resolved
config (all keys, sorted) is written next to every run's outputs.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from spikewm.agent import AgentConfig
from spikewm.container import config_digest
from spikewm.errors import ConfigError, ParameterError
from spikewm.neuron import NeuronParams
from spikewm.tasks import TaskConfig
from spikewm.training import LoopConfig
from spikewm.world_model import WMConfig

_SECTIONS = {"neuron": NeuronParams, "wm": WMConfig, "agent": AgentConfig}

_EXTRA = {
    "run.seed": 0,
    "run.threads": 1,
    "run.out": "runs/latest",
    "task.kind": "delayed-recall",
    "task.T": 100,
    "task.delay": 30,
    "task.n_classes": 4,
    "task.channels": 20,
    "task.jitter": 0.01,
    "task.pulse_rate": 0.1,
    "task.n_samples": 1000,
    "seq.neuron": "mcn",
    "seq.hidden": 64,
    "seq.epochs": 12,
    "seq.batch_size": 32,
    "seq.lr": 3e-3,
    "seq.clip_norm": 100.0,
    "seq.tau_ro": 8.0,
    "seq.input_scale": 3.0,
    "seq.recurrent_scale": 1.0,
    "seq.self_gain_b": 6.0,
    "seq.self_gain_a": 4.0,
    "seq.learnable_decay": False,
    "grid.gb_over_gl": "0.5,1.0,1.5",
    "grid.beta": "0.5,1.0,1.5",
    "grid.epochs": 12,
    "trace.source": "env",
    "trace.steps": 20,
    "trace.checkpoint": "",
    "data.n": 1000,
    "data.out": "data.spk",
}

# Short flags used on the command line.
ALIASES = {
    "seed": "run.seed", "threads": "run.threads", "out": "run.out",
    "neuron": "seq.neuron", "task": "task.kind", "delay": "task.delay", "epochs": "seq.epochs",
    "env": "loop.env", "steps": "loop.steps", "agent": "loop.agent",
    "checkpoint": "trace.checkpoint", "n": "data.n", "output": "data.out",
}


def _defaults() -> dict[str, object]:
    out: dict[str, object] = {}
    for ns, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f"{ns}.{f.name}"] = f.default
    for f in dataclasses.fields(LoopConfig):
        if f.name != "seed":
            out[f"loop.{f.name}"] = f.default
    out.update(_EXTRA)
    return out


DEFAULTS = _defaults()


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        raw_s = str(raw)
    else:
        raw_s = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw_s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw_s)
        if isinstance(default, int):
            return int(raw_s)
        if isinstance(default, float):
            return float(raw_s)
    except ValueError:
        raise ConfigError(f"bad value {raw_s!r} for key {key!r} (expected {type(default).__name__})") from None
    return raw_s


class RunConfig:
    """Mapping of every tunable key to its resolved value."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw):
        key = ALIASES.get(key, key)
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw, DEFAULTS[key])

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, ns: str) -> dict[str, object]:
        pre = ns + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            cfg.set(k.strip(), v.strip())
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            lines.append(f"{k} = {repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        """Hash of every key except the output location, so relocated reruns match."""
        text = "".join(line + "\n" for line in self.to_text().splitlines() if not line.startswith("run.out "))
        return config_digest(text)

    # ---------------------------------------------------------- builders

    def _build(self, cls, ns: str):
        try:
            return cls(**self.section(ns))
        except (ConfigError, ParameterError) as e:
            raise ConfigError(f"{ns}: {e}") from None

    def neuron(self) -> NeuronParams:
        return self._build(NeuronParams, "neuron")

    def wm(self) -> WMConfig:
        return self._build(WMConfig, "wm")

    def agent(self) -> AgentConfig:
        return self._build(AgentConfig, "agent")

    def loop(self) -> LoopConfig:
        try:
            return LoopConfig(seed=self["run.seed"], **self.section("loop"))
        except ConfigError as e:
            raise ConfigError(f"loop: {e}") from None

    def task(self) -> TaskConfig:
        t = self.section("task")
        t.pop("n_samples")
        try:
            return TaskConfig(seed=self["run.seed"], **t)
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"task: {e}") from None

    def float_list(self, key: str) -> list[float]:
        try:
            vals = [float(x) for x in str(self[key]).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key!r} must be a comma-separated list of numbers") from None
        if not vals:
            raise ConfigError(f"{key!r} must not be empty")
        return vals
