"""INI experiment configuration: schema, defaults, overrides and validation."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from ..agent import Selection, StartBarrier
from ..backends.base import BackendFamily
from ..backends.hierarchical import QueuePolicy
from ..backends.workerpool import DispatchRule
from ..core import Modality
from ..workloads import DEFAULT_STAGES, WorkloadKind


class ConfigError(ValueError):
    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda s: None if s.strip().lower() in ("", "none", "auto") else conv(s)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "experiment": {
        "id": (str, "exp"),
        "mode": (str, "sim"),
        "seed": (int, 0),
        "time_scale": (float, 1.0),
        "output_dir": (str, "runs"),
        "repetitions": (int, 1),
        "timeout_s": (_opt(float), None),
        "bucket_s": (float, 1.0),
        "throughput_window": (str, "launch"),
        "figures": (str, "3,4,5,6,7,8"),
    },
    "allocation": {
        "nodes": (int, 4),
        "cores_per_node": (_opt(int), None),
        "gpus_per_node": (int, 8),
        "smt": (int, 1),
    },
    "partitions": {f.value: (int, 0) for f in BackendFamily},
    "agent": {
        "selection": (str, Selection.ROUND_ROBIN.value),
        "dispatch_latency_s": (float, 0.0057),
        "start_barrier": (str, StartBarrier.ALL_READY.value),
        "max_retries": (int, 1),
        "exec_families": (str, "hierarchical,capped"),
        "func_families": (str, "workerpool"),
        "pump_interval_s": (float, 0.01),
    },
    "backend": {
        "family": (str, ""),
        "bootstrap_s": (_opt(float), None),
        "launch_latency_s": (_opt(float), None),
        "startup_timeout_s": (float, 60.0),
        "bootstrap_jitter": (float, 0.0),
    },
    "capped": {
        "cap": (int, 112),
        "launch_latency_s": (float, 0.05),
        "latency_per_node_s": (float, 0.0),
        "bootstrap_s": (float, 0.0),
    },
    "hier": {
        "policy": (str, QueuePolicy.FCFS_BACKFILL.value),
        "launch_latency_s": (float, 0.01),
        "bootstrap_s": (float, 20.0),
    },
    "pool": {
        "workers_per_node": (_opt(int), None),
        "channel_latency_s": (float, 0.002),
        "spawn_latency_s": (float, 0.03),
        "bootstrap_s": (float, 9.0),
        "dispatch_rule": (str, DispatchRule.ROUND_ROBIN.value),
    },
    "workload": {
        "kind": (str, WorkloadKind.DUMMY.value),
        "duration_s": (float, 180.0),
        "count": (_opt(int), None),
        "mix_func": (float, 0.0),
        "seed": (_opt(int), None),
    },
    "campaign": {
        "completion_fraction": (float, 1.0),
        "adaptive": (_bool, True),
        "ceiling": (float, 1.2),
        "scaled": (_opt(_bool), None),
        "total": (_opt(int), None),
    },
}

STAGE_KEYS: dict[str, tuple[Callable[[str], Any], str]] = {
    "share": (float, "share"),
    "cores_min": (int, "cores_min"),
    "cores_max": (int, "cores_max"),
    "gpus_min": (int, "gpus_min"),
    "gpus_max": (int, "gpus_max"),
    "max_nodes": (int, "max_nodes"),
    "adaptive": (_bool, "adaptive"),
}

FAMILY_SECTION = {
    BackendFamily.CAPPED: "capped",
    BackendFamily.HIERARCHICAL: "hier",
    BackendFamily.WORKERPOOL: "pool",
}


class Mode(str, Enum):
    SIM = "sim"
    REAL = "real"


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    explicit: set[tuple[str, str]] = field(default_factory=set)
    stages: dict[str, dict[str, Any]] = field(default_factory=dict)
    source_text: str = ""
    overrides: list[str] = field(default_factory=list)
    source: str = "<memory>"

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def is_set(self, section: str, key: str) -> bool:
        return (section, key) in self.explicit

    # Convenience views ------------------------------------------------------

    @property
    def exp_id(self) -> str:
        return self.get("experiment", "id")

    @property
    def mode(self) -> Mode:
        return Mode(self.get("experiment", "mode"))

    @property
    def seed(self) -> int:
        return self.get("experiment", "seed")

    @property
    def time_scale(self) -> float:
        return self.get("experiment", "time_scale")

    @property
    def output_dir(self) -> str:
        return os.environ.get("PILOTRT_OUT") or self.get("experiment", "output_dir")

    @property
    def nodes(self) -> int:
        return self.get("allocation", "nodes")

    @property
    def cores_per_node(self) -> int:
        cpn = self.get("allocation", "cores_per_node")
        if cpn is not None:
            return cpn
        return (os.cpu_count() or 1) if self.mode == Mode.REAL else 56

    @property
    def workload_seed(self) -> int:
        s = self.get("workload", "seed")
        return self.seed if s is None else s

    def instance_counts(self) -> dict[BackendFamily, int]:
        counts = {f: self.get("partitions", f.value) for f in BackendFamily}
        fam = self.get("backend", "family")
        if fam and not any(counts.values()):
            counts[BackendFamily(fam)] = 1
        return counts

    def families_for(self, modality: Modality) -> tuple[BackendFamily, ...]:
        key = "exec_families" if modality is Modality.EXECUTABLE else "func_families"
        return tuple(BackendFamily(x.strip()) for x in self.get("agent", key).split(",") if x.strip())

    def family_value(self, family: BackendFamily, key: str) -> Any:
        """Family section wins when set explicitly, then [backend], then the family default."""
        sec = FAMILY_SECTION[family]
        if key == "launch_latency_s" and family is BackendFamily.WORKERPOOL:
            fkey = "channel_latency_s"
        else:
            fkey = key
        if self.is_set(sec, fkey):
            return self.get(sec, fkey)
        general = self.values["backend"].get(key)
        if general is not None:
            return general
        return self.get(sec, fkey)

    def figures(self) -> list[int]:
        text = self.get("experiment", "figures").strip()
        return [int(x) for x in text.split(",") if x.strip()] if text else []

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec, kv in self.values.items():
            cp[sec] = {k: "" if v is None else str(v) for k, v in kv.items()}
        for name, kv in self.stages.items():
            cp[f"campaign.stage.{name}"] = {k: str(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _parse_value(section: str, key: str, raw: str):
    if section.startswith("campaign.stage."):
        if key not in STAGE_KEYS:
            raise ConfigError("UnknownKey", f"[{section}] {key}")
        conv = STAGE_KEYS[key][0]
    else:
        if section not in SCHEMA:
            raise ConfigError("UnknownKey", f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError("UnknownKey", f"[{section}] {key}")
        conv = SCHEMA[section][key][0]
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError("ParseError", f"[{section}] {key} = {raw!r}: {exc}") from exc


def parse_config(text: str, overrides: list[str] | None = None, source: str = "<memory>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("ParseError", str(exc)) from exc

    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    explicit: set[tuple[str, str]] = set()
    stages: dict[str, dict[str, Any]] = {}

    def assign(section: str, key: str, raw: str):
        val = _parse_value(section, key, raw)
        if section.startswith("campaign.stage."):
            stages.setdefault(section[len("campaign.stage."):], {})[key] = val
        else:
            values[section][key] = val
        explicit.add((section, key))

    for section in cp.sections():
        if section not in SCHEMA and not section.startswith("campaign.stage."):
            raise ConfigError("UnknownKey", f"unknown section [{section}]")
        for key, raw in cp[section].items():
            assign(section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError("ParseError", f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().rsplit(".", 1)
        assign(section, key, raw.strip())

    cfg = ExperimentConfig(values, explicit, stages, text, list(overrides or []), source)
    validate(cfg)
    return cfg


def _enum(section, key, value, enum_cls):
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise ConfigError("InvariantViolation", f"[{section}] {key} = {value!r}; expected one of {allowed}")


def validate(cfg: ExperimentConfig) -> None:
    bad = lambda msg: ConfigError("InvariantViolation", msg)  # noqa: E731
    mode = _enum("experiment", "mode", cfg.get("experiment", "mode"), Mode)
    if cfg.time_scale <= 0:
        raise bad("time_scale must be > 0")
    if mode == Mode.REAL and cfg.time_scale != 1.0:
        raise bad("time_scale applies to sim mode only")
    if cfg.nodes < 1:
        raise bad("nodes must be >= 1")
    if mode == Mode.REAL and cfg.nodes > 1 and not cfg.is_set("allocation", "cores_per_node"):
        raise bad("real mode runs on the local host: nodes > 1 needs an explicit cores_per_node "
                  "to carve the host into virtual nodes")
    if cfg.get("allocation", "cores_per_node") is not None and cfg.get("allocation", "cores_per_node") < 1:
        raise bad("cores_per_node must be >= 1")
    if cfg.get("allocation", "gpus_per_node") < 0 or cfg.get("allocation", "smt") < 1:
        raise bad("gpus_per_node must be >= 0 and smt >= 1")
    counts = cfg.instance_counts()
    if cfg.get("backend", "family"):
        _enum("backend", "family", cfg.get("backend", "family"), BackendFamily)
    if any(v < 0 for v in counts.values()):
        raise bad("partition counts must be >= 0")
    total = sum(counts.values())
    if total < 1:
        raise bad("need at least one backend instance ([partitions] or backend.family)")
    if total > cfg.nodes:
        raise bad(f"TooManyPartitions: {total} instances for {cfg.nodes} nodes")
    if cfg.get("experiment", "repetitions") < 1:
        raise bad("repetitions must be >= 1")
    if cfg.get("experiment", "bucket_s") <= 0:
        raise bad("bucket_s must be > 0")
    if cfg.get("experiment", "throughput_window") not in ("launch", "makespan"):
        raise bad("throughput_window must be launch or makespan")
    _enum("agent", "selection", cfg.get("agent", "selection"), Selection)
    _enum("agent", "start_barrier", cfg.get("agent", "start_barrier"), StartBarrier)
    _enum("hier", "policy", cfg.get("hier", "policy"), QueuePolicy)
    _enum("pool", "dispatch_rule", cfg.get("pool", "dispatch_rule"), DispatchRule)
    kind = _enum("workload", "kind", cfg.get("workload", "kind"), WorkloadKind)
    for key in ("dispatch_latency_s", "pump_interval_s"):
        if cfg.get("agent", key) < 0:
            raise bad(f"agent.{key} must be >= 0")
    if cfg.get("agent", "max_retries") < 0:
        raise bad("agent.max_retries must be >= 0")
    for sec in ("capped", "hier", "pool"):
        for key, val in cfg.values[sec].items():
            if isinstance(val, float) and val < 0:
                raise bad(f"{sec}.{key} must be >= 0")
    if cfg.get("capped", "cap") < 1:
        raise bad("capped.cap must be >= 1")
    wpn = cfg.get("pool", "workers_per_node")
    if wpn is not None and wpn < 1:
        raise bad("pool.workers_per_node must be >= 1")
    for key in ("startup_timeout_s", "bootstrap_jitter"):
        if cfg.get("backend", key) < 0:
            raise bad(f"backend.{key} must be >= 0")
    for key in ("bootstrap_s", "launch_latency_s"):
        v = cfg.get("backend", key)
        if v is not None and v < 0:
            raise bad(f"backend.{key} must be >= 0")
    mix = cfg.get("workload", "mix_func")
    if not 0.0 <= mix <= 1.0:
        raise bad("workload.mix_func must be in [0, 1]")
    count = cfg.get("workload", "count")
    if count is not None and count < 1:
        raise bad("workload.count must be >= 1")
    if kind is WorkloadKind.DUMMY and cfg.get("workload", "duration_s") < 0:
        raise bad("workload.duration_s must be >= 0")
    if not 0.0 < cfg.get("campaign", "completion_fraction") <= 1.0:
        raise bad("campaign.completion_fraction must be in (0, 1]")
    if cfg.get("campaign", "ceiling") < 1.0:
        raise bad("campaign.ceiling must be >= 1")
    known = {s.name for s in DEFAULT_STAGES}
    for name in cfg.stages:
        if name not in known:
            raise bad(f"unknown campaign stage {name!r}")
    present = {f for f, n in counts.items() if n > 0}
    for modality in Modality:
        fams = cfg.families_for(modality)
        needed = (kind is WorkloadKind.CAMPAIGN or mix < 1.0) if modality is Modality.EXECUTABLE else mix > 0.0
        if needed and not present.intersection(fams):
            raise bad(f"{modality.value} tasks have no backend among {', '.join(f.value for f in fams)}")


def preset_names() -> list[str]:
    root = resources.files("pilotrt") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    root = resources.files("pilotrt") / "presets"
    path = root / f"{name}.ini"
    if not path.is_file():
        raise ConfigError("ParseError", f"no preset named {name!r}")
    return path.read_text(encoding="utf-8")


def load_config(path_or_preset: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    p = Path(path_or_preset)
    if p.is_file():
        return parse_config(p.read_text(encoding="utf-8"), overrides, str(p))
    name = str(path_or_preset)
    if name in preset_names():
        return parse_config(preset_text(name), overrides, f"preset:{name}")
    raise ConfigError("ParseError", f"{path_or_preset}: no such file or preset")
