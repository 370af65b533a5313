"""Scenario configuration: schema, validation, typed loading.

Validation closes every cross reference (hosts, templates, patterns, agents)
before the first tick and reports the complete list of violations at once;
an invalid config never produces a partial run.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .percept import WorldStatePattern
from .planning import (
    ActionTemplate,
    Goal,
    GoalSet,
    ParamSpec,
    validate_repertoire,
)
from .world import ACTUATOR_TEMPLATES, PLAYBOOK_ACTIONS, AdversaryPlaybook, PlaybookStep

OPERATOR_MODES = ("scripted", "listen", "none")
SCRIPTED_POLICIES = ("approve-first", "deny-all", "modify-reverse")
AGENT_ROLES = ("defender", "c2")

DEFAULT_OPERATOR_TIMEOUT = 30

VALID_OPS = ("=", "!=", "<", ">", "contains")
VALID_BINDS = ("subject.host", "subject.path", "subject.pid", "subject.flow_id")


class ConfigError(ValueError):
    """Carries every violation found during validation."""

    def __init__(self, violations: list[str]) -> None:
        self.violations = violations
        super().__init__("invalid scenario config:\n" + "\n".join(f"- {v}" for v in violations))


@dataclass
class OperatorConfig:
    mode: str = "none"
    policy: str = "approve-first"
    port: int = 0
    timeout_ticks: int = DEFAULT_OPERATOR_TIMEOUT
    wall_poll_timeout: float = 0.05
    # Listen mode only: wall seconds to wait for a console to attach before
    # the first tick. Zero keeps unattended runs (and their tests) instant.
    wait_for_client: float = 0.0


@dataclass
class HostConfig:
    host_id: str
    files: list[dict[str, Any]] = field(default_factory=list)
    processes: list[dict[str, Any]] = field(default_factory=list)
    actuators: list[str] = field(default_factory=list)


@dataclass
class AgentConfig:
    agent_id: str
    host_id: str
    role: str = "defender"
    settings: dict[str, Any] = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    raw: dict[str, Any]
    seed: int
    tick_limit: int
    operator: OperatorConfig
    hosts: list[HostConfig]
    links: list[tuple[str, str]]
    playbooks: list[AdversaryPlaybook]
    agents: list[AgentConfig]
    patterns: dict[str, WorldStatePattern]
    repertoire: dict[str, ActionTemplate]
    goals: GoalSet
    fault_rates: dict[str, float]

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config_file(path: str) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return load_config(json.load(fh))


def load_config(raw: dict[str, Any]) -> ScenarioConfig:
    """Parse and fully validate a scenario document."""
    violations: list[str] = []

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        violations.append("seed must be an integer")
        seed = 0
    tick_limit = raw.get("tick_limit", 100)
    if not isinstance(tick_limit, int) or tick_limit < 0:
        violations.append("tick_limit must be a non-negative integer")
        tick_limit = 0

    operator = _parse_operator(raw.get("operator", {}), violations)

    hosts: list[HostConfig] = []
    host_ids: set[str] = set()
    for entry in raw.get("world", {}).get("hosts", []):
        host_id = entry.get("id", "")
        if not host_id:
            violations.append("host with empty id")
            continue
        if host_id in host_ids:
            violations.append(f"duplicate host id {host_id}")
            continue
        host_ids.add(host_id)
        pids = [p.get("pid") for p in entry.get("processes", [])]
        if len(pids) != len(set(pids)):
            violations.append(f"host {host_id}: duplicate pids")
        paths = [f.get("path") for f in entry.get("files", [])]
        if len(paths) != len(set(paths)):
            violations.append(f"host {host_id}: duplicate file paths")
        hosts.append(
            HostConfig(
                host_id=host_id,
                files=entry.get("files", []),
                processes=entry.get("processes", []),
                actuators=entry.get("actuators", []),
            )
        )
    if not hosts:
        violations.append("world.hosts must not be empty")

    links: list[tuple[str, str]] = []
    for pair in raw.get("world", {}).get("links", []):
        if len(pair) != 2 or pair[0] == pair[1]:
            violations.append(f"malformed link {pair}")
            continue
        for end in pair:
            if end not in host_ids:
                violations.append(f"link endpoint {end} is not a host")
        links.append((pair[0], pair[1]))

    agents: list[AgentConfig] = []
    agent_ids: set[str] = set()
    for entry in raw.get("agents", []):
        agent_id = entry.get("id", "")
        if not agent_id or agent_id in agent_ids:
            violations.append(f"missing or duplicate agent id {agent_id!r}")
            continue
        agent_ids.add(agent_id)
        host_id = entry.get("host", "")
        if host_id not in host_ids:
            violations.append(f"agent {agent_id}: host {host_id!r} does not exist")
        role = entry.get("role", "defender")
        if role not in AGENT_ROLES:
            violations.append(f"agent {agent_id}: unknown role {role!r}")
        agents.append(
            AgentConfig(agent_id=agent_id, host_id=host_id, role=role, settings=entry.get("settings", {}))
        )

    playbooks = _parse_playbooks(raw.get("adversary", []), host_ids, agent_ids, violations)
    patterns = _parse_patterns(raw.get("patterns", []), violations)
    repertoire = _parse_repertoire(raw.get("repertoire", []), set(patterns), violations)
    goals = _parse_goals(raw.get("goals", {}), violations)

    fault_rates: dict[str, float] = {}
    for name, rate in raw.get("fault_rates", {}).items():
        if name not in ACTUATOR_TEMPLATES:
            violations.append(f"fault rate for unknown actuator {name!r}")
            continue
        if not isinstance(rate, (int, float)) or not 0.0 <= rate <= 1.0:
            violations.append(f"fault rate for {name} outside [0,1]")
            continue
        fault_rates[name] = float(rate)

    for host in hosts:
        for actuator in host.actuators:
            if actuator not in ACTUATOR_TEMPLATES:
                violations.append(f"host {host.host_id}: unknown actuator {actuator!r}")

    if violations:
        raise ConfigError(violations)

    # The failsafe must always be executable, so every host carries it.
    for host in hosts:
        if "isolate-host" not in host.actuators:
            host.actuators.append("isolate-host")

    return ScenarioConfig(
        raw=raw,
        seed=seed,
        tick_limit=tick_limit,
        operator=operator,
        hosts=hosts,
        links=links,
        playbooks=playbooks,
        agents=agents,
        patterns=patterns,
        repertoire=repertoire,
        goals=goals,
        fault_rates=fault_rates,
    )


def _parse_operator(entry: dict[str, Any], violations: list[str]) -> OperatorConfig:
    mode = entry.get("mode", "none")
    if mode not in OPERATOR_MODES:
        violations.append(f"operator mode {mode!r} not one of {OPERATOR_MODES}")
        mode = "none"
    policy = entry.get("policy", "approve-first")
    if mode == "scripted" and policy not in SCRIPTED_POLICIES:
        violations.append(f"unknown scripted operator policy {policy!r}")
    port = entry.get("port", 0)
    if mode == "listen" and (not isinstance(port, int) or port < 0 or port > 65535):
        violations.append(f"listen port {port!r} invalid")
        port = 0
    timeout = entry.get("timeout_ticks", DEFAULT_OPERATOR_TIMEOUT)
    if not isinstance(timeout, int) or timeout <= 0:
        violations.append("operator timeout_ticks must be a positive integer")
        timeout = DEFAULT_OPERATOR_TIMEOUT
    return OperatorConfig(
        mode=mode,
        policy=policy,
        port=port,
        timeout_ticks=timeout,
        wall_poll_timeout=float(entry.get("wall_poll_timeout", 0.05)),
        wait_for_client=float(entry.get("wait_for_client", 0.0)),
    )


def _parse_playbooks(
    entries: list[dict[str, Any]],
    host_ids: set[str],
    agent_ids: set[str],
    violations: list[str],
) -> list[AdversaryPlaybook]:
    required_params = {
        "implant-file": ("path",),
        "start-process": ("pid",),
        "beacon": ("period",),
        "lateral-move": ("to",),
        "kill-agent-process": ("agent_id",),
    }
    playbooks = []
    for index, entry in enumerate(entries):
        target = entry.get("target_host", "")
        if target not in host_ids:
            violations.append(f"playbook {index}: target host {target!r} does not exist")
        steps = []
        last_tick = None
        for step in entry.get("steps", []):
            action = step.get("action", "")
            at_tick = step.get("at_tick")
            params = step.get("params", {})
            if action not in PLAYBOOK_ACTIONS:
                violations.append(f"playbook {index}: unknown action {action!r}")
                continue
            if not isinstance(at_tick, int) or at_tick < 0:
                violations.append(f"playbook {index}: step {action} needs a non-negative at_tick")
                continue
            if last_tick is not None and at_tick < last_tick:
                violations.append(f"playbook {index}: steps not sorted by at_tick")
            last_tick = at_tick
            for param in required_params[action]:
                if param not in params:
                    violations.append(f"playbook {index}: {action} missing param {param!r}")
            if action == "kill-agent-process" and params.get("agent_id") not in agent_ids:
                violations.append(
                    f"playbook {index}: kill-agent-process names unknown agent {params.get('agent_id')!r}"
                )
            steps.append(PlaybookStep(at_tick=at_tick, action=action, params=params))
        playbooks.append(AdversaryPlaybook(target_host=target, steps=steps))
    return playbooks


def _parse_patterns(entries: list[dict[str, Any]], violations: list[str]) -> dict[str, WorldStatePattern]:
    patterns: dict[str, WorldStatePattern] = {}
    for entry in entries:
        pattern_id = entry.get("id", "")
        if not pattern_id or pattern_id in patterns:
            violations.append(f"missing or duplicate pattern id {pattern_id!r}")
            continue
        label = entry.get("label", "")
        risk = entry.get("risk", None)
        if label not in ("benign", "problematic"):
            violations.append(f"pattern {pattern_id}: label must be benign or problematic")
            continue
        if not isinstance(risk, (int, float)) or not 0.0 <= risk <= 1.0:
            violations.append(f"pattern {pattern_id}: risk must be in [0,1]")
            continue
        if label == "problematic" and risk <= 0:
            violations.append(f"pattern {pattern_id}: problematic pattern needs risk > 0")
        if label == "benign" and risk != 0:
            violations.append(f"pattern {pattern_id}: benign pattern must have risk 0")
        ok = True
        for pred in entry.get("predicates", []):
            if pred.get("op") not in VALID_OPS:
                violations.append(f"pattern {pattern_id}: invalid operator {pred.get('op')!r}")
                ok = False
        if ok:
            patterns[pattern_id] = WorldStatePattern.from_json(entry)
    return patterns


def _parse_repertoire(
    entries: list[dict[str, Any]], pattern_ids: set[str], violations: list[str]
) -> dict[str, ActionTemplate]:
    repertoire: dict[str, ActionTemplate] = {}
    for entry in entries:
        name = entry.get("name", "")
        if not name or name in repertoire:
            violations.append(f"missing or duplicate template name {name!r}")
            continue
        if name not in ACTUATOR_TEMPLATES:
            violations.append(f"template {name}: no such world actuator")
        params = []
        for spec in entry.get("params", []):
            bind = spec.get("bind", "")
            if bind not in VALID_BINDS:
                violations.append(f"template {name}: invalid bind {bind!r}")
            params.append(ParamSpec(name=spec.get("name", ""), type=spec.get("type", "string"), bind=bind))
        for pid in entry.get("applicability", []):
            if pid not in pattern_ids and pid != "anomaly":
                violations.append(f"template {name}: applicability references unknown pattern {pid!r}")
        cost = entry.get("cost", 0.0)
        if not isinstance(cost, (int, float)) or cost < 0:
            violations.append(f"template {name}: cost must be >= 0")
            cost = 0.0
        repertoire[name] = ActionTemplate(
            name=name,
            applicability=frozenset(entry.get("applicability", [])),
            params=tuple(params),
            expected_effects=tuple((e["attr"], float(e["delta"])) for e in entry.get("expected_effects", [])),
            cost=float(cost),
            prerequisites=tuple(entry.get("prerequisites", [])),
            post_actions=tuple(entry.get("post_actions", [])),
            alternates=tuple(entry.get("alternates", [])),
        )
    violations.extend(validate_repertoire(repertoire))
    return repertoire


def _parse_goals(entry: dict[str, Any], violations: list[str]) -> GoalSet:
    goals = []
    for g in entry.get("goals", []):
        goals.append(
            Goal(
                goal_id=g.get("id", ""),
                kind=g.get("kind", ""),
                weight=float(g.get("weight", 0.0)),
                priority=int(g.get("priority", 0)),
                params=g.get("params", {}),
            )
        )
    goal_set = GoalSet(goals=tuple(goals), cost_weight=float(entry.get("cost_weight", 0.1)))
    violations.extend(goal_set.validate())
    return goal_set
