"""Sensing and world-state identification.

Raw descriptors are captured from the agent's visibility scope (its own host
plus flows touching it, plus one internal self-health descriptor), normalized
into a fixed per-category schema, and matched against the pattern knowledge
base. Matching is pure: identical inputs yield identical matches in identical
order.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, Optional

from .world import Host, TrafficFlow

EXTERNAL_SOURCE = "external"
INTERNAL_SOURCE = "internal"

DEFAULT_ANOMALY_SIGMA = 3.0
DEFAULT_HISTORY_CAPACITY = 256
DEFAULT_ANOMALY_RISK = 0.5

ANOMALY_PATTERN_ID = "anomaly"

# Required / optional attributes per subject category. A raw descriptor
# missing a required attribute is marked invalid and excluded from matching.
CATEGORY_SCHEMA: dict[str, tuple[tuple[str, ...], dict[str, float]]] = {
    "file": (("exists", "known"), {"quarantined": 0.0, "snapshotted": 0.0}),
    "process": (("known",), {"beaconing": 0.0}),
    "flow": (("enemy_c2",), {"period": 0.0}),
    "agent-self": (("compromised",), {"alert_elevated": 0.0}),
}


@dataclass(frozen=True)
class Subject:
    """Typed reference to the thing a descriptor is about."""

    category: str  # "file" | "process" | "flow" | "agent-self"
    host: str
    ident: str

    def key(self) -> str:
        return f"{self.category}:{self.host}:{self.ident}"

    def to_json(self) -> dict[str, str]:
        return {"category": self.category, "host": self.host, "ident": self.ident}

    @classmethod
    def from_json(cls, data: dict[str, str]) -> "Subject":
        return cls(category=data["category"], host=data["host"], ident=data["ident"])


@dataclass(frozen=True)
class WorldStateDescriptor:
    source: str  # external | internal
    sensor_id: str
    tick: int
    subject: Subject
    attrs: dict[str, Any]


@dataclass(frozen=True)
class ProcessedDescriptor:
    source: str
    sensor_id: str
    tick: int
    subject: Subject
    attrs: dict[str, Any]
    normalized: dict[str, Any]
    zscores: dict[str, float]
    validity: bool

    def digest(self) -> str:
        blob = json.dumps(
            {"subject": self.subject.key(), "normalized": self.normalized, "tick": self.tick},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Predicate:
    attr: str
    op: str  # = | != | < | > | contains
    value: Any

    def holds(self, attrs: dict[str, Any]) -> bool:
        if self.attr not in attrs:
            return False
        actual = attrs[self.attr]
        if self.op == "contains":
            return isinstance(actual, str) and str(self.value) in actual
        if self.op in ("<", ">"):
            try:
                lhs, rhs = float(actual), float(self.value)
            except (TypeError, ValueError):
                return False
            return lhs < rhs if self.op == "<" else lhs > rhs
        both_numeric = _is_number(actual) and _is_number(self.value)
        if both_numeric:
            equal = float(actual) == float(self.value)
        else:
            equal = actual == self.value
        return equal if self.op == "=" else not equal

    def to_json(self) -> dict[str, Any]:
        return {"attr": self.attr, "op": self.op, "value": self.value}


@dataclass
class WorldStatePattern:
    pattern_id: str
    predicates: tuple[Predicate, ...]
    label: str  # benign | problematic
    risk: float
    evidence_count: int = 0

    def matches(self, attrs: dict[str, Any]) -> bool:
        return all(p.holds(attrs) for p in self.predicates)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.pattern_id,
            "predicates": [p.to_json() for p in self.predicates],
            "label": self.label,
            "risk": self.risk,
            "evidence": self.evidence_count,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "WorldStatePattern":
        return cls(
            pattern_id=data["id"],
            predicates=tuple(Predicate(p["attr"], p["op"], p["value"]) for p in data.get("predicates", [])),
            label=data["label"],
            risk=float(data["risk"]),
            evidence_count=int(data.get("evidence", 0)),
        )


@dataclass(frozen=True)
class ProblematicMatch:
    pattern: WorldStatePattern
    subject: Subject
    risk: float
    attrs: dict[str, Any]

    @property
    def pattern_id(self) -> str:
        return self.pattern.pattern_id

    def to_json(self) -> dict[str, Any]:
        return {
            "pattern": self.pattern_id,
            "subject": self.subject.to_json(),
            "risk": self.risk,
        }


class StateHistory:
    """Ring buffer of numeric samples keyed by (subject, attribute)."""

    def __init__(self, capacity: int = DEFAULT_HISTORY_CAPACITY) -> None:
        self.capacity = capacity
        self._buffers: dict[tuple[str, str], deque[float]] = {}

    def add(self, subject_key: str, attr: str, value: float) -> None:
        buf = self._buffers.setdefault((subject_key, attr), deque(maxlen=self.capacity))
        buf.append(value)

    def stats(self, subject_key: str, attr: str) -> tuple[int, float, float]:
        """(count, mean, stddev) recomputed from the buffer contents."""
        buf = self._buffers.get((subject_key, attr))
        if not buf:
            return (0, 0.0, 0.0)
        n = len(buf)
        mean = sum(buf) / n
        if n < 2:
            return (n, mean, 0.0)
        var = sum((x - mean) ** 2 for x in buf) / (n - 1)
        return (n, mean, math.sqrt(var))


@dataclass
class AgentSenseState:
    agent_id: str
    compromised: bool = False
    alert_elevated: bool = False


@dataclass
class WorldView:
    """The slice of the world one agent is allowed to observe."""

    tick: int
    host: Optional[Host]
    flows: tuple[TrafficFlow, ...] = ()
    host_linked: bool = True


def sense(view: WorldView, agent_state: AgentSenseState) -> list[WorldStateDescriptor]:
    """Capture one descriptor per (subject, sensor) pair, plus self-health.

    Output order is deterministic: sorted by subject key then sensor id.
    """
    descriptors: list[WorldStateDescriptor] = []
    if view.host is not None:
        host = view.host
        for path in sorted(host.files):
            rec = host.files[path]
            descriptors.append(
                WorldStateDescriptor(
                    source=EXTERNAL_SOURCE,
                    sensor_id="file-sensor",
                    tick=view.tick,
                    subject=Subject("file", host.host_id, path),
                    attrs={
                        "exists": 1.0,
                        "known": 1.0 if rec.known else 0.0,
                        "quarantined": 1.0 if rec.quarantined else 0.0,
                        "snapshotted": 1.0 if rec.snapshotted else 0.0,
                    },
                )
            )
        for pid in sorted(host.processes):
            proc = host.processes[pid]
            descriptors.append(
                WorldStateDescriptor(
                    source=EXTERNAL_SOURCE,
                    sensor_id="process-sensor",
                    tick=view.tick,
                    subject=Subject("process", host.host_id, str(pid)),
                    attrs={
                        "known": 1.0 if proc.known else 0.0,
                        "beaconing": 1.0 if proc.beaconing else 0.0,
                        "pid": float(pid),
                    },
                )
            )
        for flow in sorted(view.flows, key=lambda f: f.flow_id):
            if not flow.active:
                continue
            attrs: dict[str, Any] = {
                "enemy_c2": 1.0 if flow.kind == "enemy-c2" else 0.0,
                "period": float(flow.period),
            }
            if flow.src_pid is not None:
                attrs["src_pid"] = float(flow.src_pid)
            descriptors.append(
                WorldStateDescriptor(
                    source=EXTERNAL_SOURCE,
                    sensor_id="flow-sensor",
                    tick=view.tick,
                    subject=Subject("flow", host.host_id, flow.flow_id),
                    attrs=attrs,
                )
            )
    descriptors.append(
        WorldStateDescriptor(
            source=INTERNAL_SOURCE,
            sensor_id="self-monitor",
            tick=view.tick,
            subject=Subject("agent-self", view.host.host_id if view.host else "", agent_state.agent_id),
            attrs={
                "compromised": 1.0 if agent_state.compromised else 0.0,
                "alert_elevated": 1.0 if agent_state.alert_elevated else 0.0,
            },
        )
    )
    descriptors.sort(key=lambda d: (d.subject.key(), d.sensor_id))
    return descriptors


def normalize(raw: Iterable[WorldStateDescriptor], history: StateHistory) -> list[ProcessedDescriptor]:
    """Validate and normalize raw descriptors, updating the history.

    Invalid descriptors (unknown category or missing required attributes) are
    kept with validity=False so the caller can count them, but they never
    reach matching and never touch the history. Z-scores are computed against
    the history as it stood before this batch's sample was added.
    """
    processed: list[ProcessedDescriptor] = []
    for desc in raw:
        schema = CATEGORY_SCHEMA.get(desc.subject.category)
        valid = schema is not None
        normalized: dict[str, Any] = {}
        zscores: dict[str, float] = {}
        if schema is not None:
            required, defaults = schema
            for attr in required:
                if attr not in desc.attrs or not _is_scalar(desc.attrs[attr]):
                    valid = False
            if valid:
                normalized = dict(defaults)
                normalized.update(desc.attrs)
                normalized["category"] = desc.subject.category
                key = desc.subject.key()
                for attr in sorted(normalized):
                    value = normalized[attr]
                    if not _is_number(value) or attr == "category":
                        continue
                    n, mean, sd = history.stats(key, attr)
                    if n >= 2 and sd > 0:
                        zscores[attr] = (float(value) - mean) / sd
                for attr in sorted(normalized):
                    value = normalized[attr]
                    if _is_number(value):
                        history.add(key, attr, float(value))
        processed.append(
            ProcessedDescriptor(
                source=desc.source,
                sensor_id=desc.sensor_id,
                tick=desc.tick,
                subject=desc.subject,
                attrs=dict(desc.attrs),
                normalized=normalized,
                zscores=zscores,
                validity=valid,
            )
        )
    return processed


def identify_world_state(
    processed: Iterable[ProcessedDescriptor],
    kb_patterns: Iterable[WorldStatePattern],
    history: StateHistory,
    *,
    anomaly_sigma: float = DEFAULT_ANOMALY_SIGMA,
    anomaly_risk: float = DEFAULT_ANOMALY_RISK,
) -> list[ProblematicMatch]:
    """Return every (problematic pattern, descriptor) match, plus anomalies.

    An anomaly is synthesized for a descriptor that matches no benign pattern
    while some numeric attribute sits more than `anomaly_sigma` standard
    deviations from its history. A nonempty result is what triggers planning.
    """
    patterns = list(kb_patterns)
    matches: list[ProblematicMatch] = []
    for desc in processed:
        if not desc.validity:
            continue
        benign_hit = False
        for pattern in patterns:
            if not pattern.matches(desc.normalized):
                continue
            if pattern.label == "benign":
                benign_hit = True
            else:
                matches.append(
                    ProblematicMatch(
                        pattern=pattern,
                        subject=desc.subject,
                        risk=pattern.risk,
                        attrs=dict(desc.normalized),
                    )
                )
        if not benign_hit and desc.zscores:
            worst = max(abs(z) for z in desc.zscores.values())
            if worst > anomaly_sigma:
                anomaly = WorldStatePattern(
                    pattern_id=ANOMALY_PATTERN_ID,
                    predicates=(),
                    label="problematic",
                    risk=anomaly_risk,
                )
                matches.append(
                    ProblematicMatch(
                        pattern=anomaly,
                        subject=desc.subject,
                        risk=anomaly_risk,
                        attrs=dict(desc.normalized),
                    )
                )
    return matches


def state_class_label(matches: Iterable[ProblematicMatch]) -> str:
    """Finite state abstraction: sorted matched problematic pattern ids."""
    ids = sorted({m.pattern_id for m in matches})
    return "+".join(ids) if ids else "nominal"


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_scalar(value: Any) -> bool:
    return isinstance(value, (int, float, str, bool))
