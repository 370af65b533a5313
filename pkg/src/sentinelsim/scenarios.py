"""Canned scenario builders: the default pattern KB, response repertoire and
goal set, plus the config documents the acceptance suite runs against."""
from __future__ import annotations

from typing import Any


def default_patterns() -> list[dict[str, Any]]:
    return [
        {
            "id": "unexpected-file",
            "label": "problematic",
            "risk": 0.6,
            "predicates": [
                {"attr": "category", "op": "=", "value": "file"},
                {"attr": "known", "op": "=", "value": 0},
                {"attr": "exists", "op": "=", "value": 1},
            ],
        },
        {
            "id": "enemy-c2-flow",
            "label": "problematic",
            "risk": 0.8,
            "predicates": [
                {"attr": "category", "op": "=", "value": "flow"},
                {"attr": "enemy_c2", "op": "=", "value": 1},
            ],
        },
        {
            "id": "unknown-process",
            "label": "problematic",
            "risk": 0.5,
            "predicates": [
                {"attr": "category", "op": "=", "value": "process"},
                {"attr": "known", "op": "=", "value": 0},
            ],
        },
        {
            "id": "agent-compromised",
            "label": "problematic",
            "risk": 0.9,
            "predicates": [
                {"attr": "category", "op": "=", "value": "agent-self"},
                {"attr": "compromised", "op": "=", "value": 1},
            ],
        },
        {
            "id": "known-file",
            "label": "benign",
            "risk": 0.0,
            "predicates": [
                {"attr": "category", "op": "=", "value": "file"},
                {"attr": "known", "op": "=", "value": 1},
            ],
        },
        {
            "id": "known-process",
            "label": "benign",
            "risk": 0.0,
            "predicates": [
                {"attr": "category", "op": "=", "value": "process"},
                {"attr": "known", "op": "=", "value": 1},
            ],
        },
        {
            "id": "normal-flow",
            "label": "benign",
            "risk": 0.0,
            "predicates": [
                {"attr": "category", "op": "=", "value": "flow"},
                {"attr": "enemy_c2", "op": "=", "value": 0},
            ],
        },
        {
            "id": "self-nominal",
            "label": "benign",
            "risk": 0.0,
            "predicates": [
                {"attr": "category", "op": "=", "value": "agent-self"},
                {"attr": "compromised", "op": "=", "value": 0},
            ],
        },
    ]


def default_repertoire() -> list[dict[str, Any]]:
    return [
        {
            "name": "snapshot-file",
            "applicability": [],
            "params": [{"name": "path", "type": "string", "bind": "subject.path"}],
            "expected_effects": [],
            "cost": 0.05,
        },
        {
            "name": "delete-file",
            "applicability": ["unexpected-file"],
            "params": [{"name": "path", "type": "string", "bind": "subject.path"}],
            "expected_effects": [{"attr": "exists", "delta": -1}],
            "cost": 0.2,
            "prerequisites": ["snapshot-file"],
            "alternates": ["quarantine-file"],
        },
        {
            "name": "quarantine-file",
            "applicability": ["unexpected-file"],
            "params": [{"name": "path", "type": "string", "bind": "subject.path"}],
            "expected_effects": [{"attr": "quarantined", "delta": 1}],
            "cost": 0.1,
        },
        {
            "name": "kill-process",
            "applicability": ["unknown-process"],
            "params": [{"name": "pid", "type": "int", "bind": "subject.pid"}],
            "expected_effects": [{"attr": "exists", "delta": -1}],
            "cost": 0.3,
        },
        {
            "name": "block-flow",
            "applicability": ["enemy-c2-flow"],
            "params": [{"name": "flow_id", "type": "string", "bind": "subject.flow_id"}],
            "expected_effects": [{"attr": "enemy_c2", "delta": -1}],
            "cost": 0.2,
            "alternates": ["isolate-host"],
        },
        {
            "name": "isolate-host",
            "applicability": ["agent-compromised", "anomaly"],
            "params": [],
            "expected_effects": [{"attr": "enemy_c2", "delta": -1}],
            "cost": 0.8,
        },
    ]


def default_goals() -> dict[str, Any]:
    return {
        "cost_weight": 0.1,
        "goals": [
            {"id": "clean-files", "kind": "no-unknown-files", "weight": 0.35, "priority": 1},
            {"id": "no-c2", "kind": "no-enemy-c2", "weight": 0.35, "priority": 2},
            {"id": "clean-processes", "kind": "no-unknown-processes", "weight": 0.2, "priority": 3},
            {"id": "stay-connected", "kind": "host-connected", "weight": 0.1, "priority": 4},
        ],
    }


def implant_beacon_config(
    seed: int = 42,
    *,
    tick_limit: int = 120,
    fault_rates: dict[str, float] | None = None,
    operator: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """One adversary playbook (implant + beacon) against one defended host."""
    return {
        "seed": seed,
        "tick_limit": tick_limit,
        "operator": operator or {"mode": "scripted", "policy": "approve-first"},
        "world": {
            "hosts": [
                {
                    "id": "h1",
                    "files": [{"path": "/bin/sshd", "known": True}],
                    "processes": [{"pid": 100, "name": "sshd", "known": True}],
                    "actuators": [
                        "delete-file",
                        "quarantine-file",
                        "snapshot-file",
                        "kill-process",
                        "block-flow",
                        "isolate-host",
                    ],
                },
                {"id": "h2", "files": [], "processes": [], "actuators": ["isolate-host"]},
            ],
            "links": [["h1", "h2"]],
        },
        "adversary": [
            {
                "target_host": "h1",
                "steps": [
                    {"at_tick": 5, "action": "implant-file", "params": {"path": "/tmp/implant.bin"}},
                    {
                        "at_tick": 8,
                        "action": "beacon",
                        "params": {"flow_id": "c2-1", "period": 4, "dst": "external"},
                    },
                ],
            }
        ],
        "agents": [{"id": "agent-1", "host": "h1", "role": "defender"}],
        "patterns": default_patterns(),
        "repertoire": default_repertoire(),
        "goals": default_goals(),
        "fault_rates": fault_rates or {},
    }


def escalation_config(
    seed: int = 7,
    *,
    operator: dict[str, Any],
    tick_limit: int = 80,
) -> dict[str, Any]:
    """Implant scenario whose acceptance threshold forces an escalation."""
    config = implant_beacon_config(seed, tick_limit=tick_limit, operator=operator)
    config["adversary"] = [
        {
            "target_host": "h1",
            "steps": [
                {"at_tick": 5, "action": "implant-file", "params": {"path": "/tmp/implant.bin"}}
            ],
        }
    ]
    # No plan can clear this bar, so every incident reaches the operator.
    config["agents"][0]["settings"] = {"accept_threshold": 5.0}
    return config


def fault_injection_config(seed: int = 0, *, fault_rate: float = 0.3) -> dict[str, Any]:
    """Implant-only scenario with faulty actuators to exercise the ladder."""
    config = implant_beacon_config(seed, tick_limit=100)
    config["adversary"] = [
        {
            "target_host": "h1",
            "steps": [
                {"at_tick": 3, "action": "implant-file", "params": {"path": "/tmp/implant.bin"}}
            ],
        }
    ]
    config["fault_rates"] = {
        "delete-file": fault_rate,
        "quarantine-file": fault_rate,
        "snapshot-file": fault_rate,
    }
    return config


def two_agent_config(seed: int = 11, *, with_c2: bool = False) -> dict[str, Any]:
    """Two defended hosts with adversary activity on both; optional command node."""
    config = implant_beacon_config(seed, tick_limit=150)
    config["world"]["hosts"].append(
        {
            "id": "h3",
            "files": [],
            "processes": [],
            "actuators": ["delete-file", "snapshot-file", "quarantine-file", "isolate-host"],
        }
    )
    config["world"]["links"].append(["h2", "h3"])
    config["world"]["links"].append(["h1", "h3"])
    config["adversary"].append(
        {
            "target_host": "h3",
            "steps": [
                {"at_tick": 12, "action": "implant-file", "params": {"path": "/tmp/drop.bin"}}
            ],
        }
    )
    config["agents"].append({"id": "agent-2", "host": "h3", "role": "defender"})
    if with_c2:
        config["agents"].append({"id": "c2-node", "host": "h2", "role": "c2"})
    return config


def kill_agent_config(seed: int = 23) -> dict[str, Any]:
    """The adversary kills one defender mid-run; peers must raise alerts."""
    config = two_agent_config(seed)
    config["adversary"].append(
        {
            "target_host": "h3",
            "steps": [
                {"at_tick": 20, "action": "kill-agent-process", "params": {"agent_id": "agent-2"}}
            ],
        }
    )
    return config
