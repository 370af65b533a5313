"""Scenario lifecycle: seeded runs, metrics, trace replay and verification.

A run is one logical thread of control: the world queue drives adversary
steps, traffic, message deliveries and agent turns; the run loop advances one
tick at a time and only touches the operator decision queue at tick
boundaries. Outstanding escalations resolve at the decision's boundary tick
or fail safe (host isolation) exactly at their deadline tick.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from .agent import AgentSettings, C2Agent, DefenderAgent, TurnServices
from .collab import BROADCAST
from .config import ScenarioConfig, load_config_file
from .execution import _LADDER_ORDER
from .learning import (
    ExperienceRecord,
    KnowledgeBase,
    derive_proposals,
    improve_knowledge,
    segment_episodes,
)
from .operator_bridge import OperatorBridge, OperatorDecision, make_bridge
from .percept import WorldView
from .trace import TraceWriter, read_trace
from .world import (
    PRIORITY_AGENT,
    PRIORITY_DELIVERY,
    FileRecord,
    Host,
    ProcessRecord,
    World,
)

logger = logging.getLogger(__name__)


@dataclass
class Metrics:
    implant_tick: Optional[int] = None
    detection_tick: Optional[int] = None
    detection_latency: Optional[int] = None
    remediated: bool = False
    files_removed: bool = False
    beacons_stopped: bool = False
    actions_executed: int = 0
    escalations: int = 0
    rewards: dict[str, list[float]] = field(default_factory=dict)
    final_tick: int = 0
    event_count: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "implant_tick": self.implant_tick,
            "detection_tick": self.detection_tick,
            "detection_latency": self.detection_latency,
            "remediated": self.remediated,
            "files_removed": self.files_removed,
            "beacons_stopped": self.beacons_stopped,
            "actions_executed": self.actions_executed,
            "escalations": self.escalations,
            "rewards": {k: list(v) for k, v in sorted(self.rewards.items())},
            "final_tick": self.final_tick,
            "event_count": self.event_count,
        }


def compute_metrics(events: list[dict[str, Any]]) -> Metrics:
    """Metrics are a pure function of the trace body."""
    m = Metrics()
    implanted: dict[tuple[str, str], bool] = {}
    enemy_flows: dict[str, bool] = {}
    for ev in events:
        kind = ev["kind"]
        payload = ev.get("payload", {})
        tick = ev.get("tick", 0)
        m.final_tick = max(m.final_tick, tick)
        if kind == "file-created" and not payload.get("known", True):
            implanted[(payload["host"], payload["path"])] = False
            if m.implant_tick is None:
                m.implant_tick = tick
        elif kind == "problematic-match" and m.detection_tick is None:
            m.detection_tick = tick
        elif kind == "actuation":
            m.actions_executed += 1
            action = payload.get("action", {})
            if payload.get("status") == "done" and action.get("template") == "delete-file":
                key = (action.get("target"), action.get("params", {}).get("path"))
                if key in implanted:
                    implanted[key] = True
        elif kind == "flow-created" and payload.get("kind") == "enemy-c2":
            enemy_flows[payload["flow_id"]] = False
        elif kind == "flow-stopped" and payload.get("flow_id") in enemy_flows:
            enemy_flows[payload["flow_id"]] = True
        elif kind == "escalation-request":
            m.escalations += 1
        elif kind == "reward":
            m.rewards.setdefault(payload["agent"], []).append(payload["value"])
    m.event_count = len(events)
    if m.implant_tick is not None and m.detection_tick is not None:
        m.detection_latency = m.detection_tick - m.implant_tick
    m.files_removed = all(implanted.values()) if implanted else True
    m.beacons_stopped = all(enemy_flows.values()) if enemy_flows else True
    m.remediated = m.files_removed and m.beacons_stopped
    return m


@dataclass
class RunResult:
    trace_path: Optional[str]
    events: list[dict[str, Any]]
    lines: list[str]
    metrics: Metrics
    trace_digest: str
    kb_digests: dict[str, str]


@dataclass
class _Escalation:
    request_id: str
    agent_id: str
    tick: int
    deadline_tick: int


class ScenarioEngine:
    """Builds the world from a validated config and drives it to completion."""

    def __init__(
        self,
        config: ScenarioConfig,
        *,
        trace_path: Optional[str] = None,
        bridge: Optional[OperatorBridge] = None,
    ) -> None:
        self.config = config
        self.writer = TraceWriter(trace_path)
        self.bridge = bridge or make_bridge(
            config.operator.mode, policy=config.operator.policy, port=config.operator.port
        )
        self.world = World(seed=config.seed)
        self.world.fault_rates = dict(config.fault_rates)
        self.world.add_sink(self.writer.on_event)
        self.world.add_sink(self.bridge.on_event)
        self.placements: dict[str, str] = {}
        self.agents: dict[str, Any] = {}
        self.outstanding: dict[str, _Escalation] = {}
        self._escalation_counter = 0
        self._max_playbook_tick = 0
        self._build()

    # -- construction ------------------------------------------------------

    def _build(self) -> None:
        config = self.config
        for host_cfg in config.hosts:
            host = Host(
                host_id=host_cfg.host_id,
                actuators_available=frozenset(host_cfg.actuators),
            )
            for entry in host_cfg.files:
                host.files[entry["path"]] = FileRecord(
                    path=entry["path"],
                    content_hash=entry.get("content_hash", ""),
                    known=bool(entry.get("known", True)),
                )
            for entry in host_cfg.processes:
                pid = int(entry["pid"])
                host.processes[pid] = ProcessRecord(
                    pid=pid,
                    name=entry.get("name", f"proc-{pid}"),
                    known=bool(entry.get("known", True)),
                    beaconing=bool(entry.get("beaconing", False)),
                )
            self.world.add_host(host)
        for a, b in config.links:
            self.world.add_link(a, b)
        for playbook in config.playbooks:
            self.world.load_playbook(playbook)
            for step in playbook.steps:
                self._max_playbook_tick = max(self._max_playbook_tick, step.at_tick)

        self.actuators_by_host = {
            h.host_id: frozenset(h.actuators) for h in config.hosts
        }
        c2_ids = [a.agent_id for a in config.agents if a.role == "c2"]
        self.c2_id = c2_ids[0] if c2_ids else None
        for agent_cfg in sorted(config.agents, key=lambda a: a.agent_id):
            if agent_cfg.role == "c2":
                self.agents[agent_cfg.agent_id] = C2Agent(agent_cfg.agent_id, agent_cfg.host_id)
            else:
                settings = AgentSettings(**agent_cfg.settings)
                kb = KnowledgeBase(patterns=copy.deepcopy(config.patterns))
                self.agents[agent_cfg.agent_id] = DefenderAgent(
                    agent_cfg.agent_id,
                    agent_cfg.host_id,
                    kb,
                    config.repertoire,
                    config.goals,
                    settings,
                )
            self.placements[agent_cfg.agent_id] = agent_cfg.host_id

        self.world.register_handler("agent-turn", self._agent_turn)
        for agent_id in sorted(self.agents):
            self.world.schedule(1, PRIORITY_AGENT, "agent-turn", {"agent": agent_id})

    # -- agent plumbing ------------------------------------------------------

    def _services_for(self, agent: Any) -> TurnServices:
        host = self.world.hosts.get(agent.host_id)
        flows = tuple(
            f
            for f in sorted(self.world.flows.values(), key=lambda f: f.flow_id)
            if host is not None and f.touches(host.host_id)
        )
        agent_id = agent.agent_id
        return TurnServices(
            tick=self.world.tick,
            view=WorldView(
                tick=self.world.tick,
                host=host,
                flows=flows,
                host_linked=self.world.has_links(agent.host_id),
            ),
            compromised=agent_id in self.world.agents_compromised,
            actuate=self.world.actuate,
            send=lambda kind, recipients, payload, _a=agent_id: self._send_message(
                _a, kind, recipients, payload
            ),
            emit=self.world.emit,
            escalate=(
                None
                if self.config.operator.mode == "none"
                else lambda incident, pattern, plans, _a=agent_id: self._escalate(
                    _a, incident, pattern, plans
                )
            ),
            inbox=lambda _a=agent_id: self._drain_inbox(_a),
            actuators_by_host=self.actuators_by_host,
            reachable=self.world.connected,
            agent_ids=tuple(sorted(self.agents)),
            c2_id=self.c2_id,
        )

    def _agent_turn(self, world: World, params: dict[str, Any]) -> None:
        agent = self.agents[params["agent"]]
        agent.take_turn(self._services_for(agent))
        world.schedule(world.tick + 1, PRIORITY_AGENT, "agent-turn", {"agent": agent.agent_id})

    def _drain_inbox(self, agent_id: str) -> list[dict[str, Any]]:
        box = self.world.inboxes.get(agent_id, [])
        self.world.inboxes[agent_id] = []
        return box

    def _send_message(
        self, sender: str, kind: str, recipients: Any, payload: dict[str, Any]
    ) -> dict[str, Any]:
        payload = dict(payload)
        msg_id = payload.pop("msg_id", f"{sender}/m?")
        if recipients == BROADCAST:
            targets = [a for a in sorted(self.agents) if a != sender]
        else:
            targets = [a for a in recipients if a in self.agents and a != sender]
        message = {
            "kind": kind,
            "sender": sender,
            "recipients": targets if recipients != BROADCAST else BROADCAST,
            "payload": payload,
            "msg_id": msg_id,
            "tick": self.world.tick,
        }
        self.world.emit(
            "message-sent",
            {
                "msg_id": msg_id,
                "kind": kind,
                "sender": sender,
                "recipients": message["recipients"],
            },
        )
        src_host = self.placements[sender]
        for target in targets:
            dst_host = self.placements[target]
            hops = self.world.hop_distance(src_host, dst_host)
            if hops is None:
                self.world.emit(
                    "message-dropped", {"msg_id": msg_id, "to": target, "reason": "partitioned"}
                )
                continue
            self.world.schedule(
                self.world.tick + max(1, hops),
                PRIORITY_DELIVERY,
                "message-delivery",
                {
                    "message": message,
                    "to_agent": target,
                    "src_host": src_host,
                    "dst_host": dst_host,
                },
            )
        return message

    def _escalate(
        self, agent_id: str, incident_id: str, pattern: str, plans: list[dict[str, Any]]
    ) -> str:
        self._escalation_counter += 1
        request_id = f"esc-{self._escalation_counter}"
        deadline = self.world.tick + self.config.operator.timeout_ticks
        request = {
            "id": request_id,
            "agent_id": agent_id,
            "tick": self.world.tick,
            "incident": incident_id,
            "pattern": pattern,
            "plans": plans,
            "deadline_tick": deadline,
        }
        self.outstanding[request_id] = _Escalation(
            request_id=request_id, agent_id=agent_id, tick=self.world.tick, deadline_tick=deadline
        )
        self.world.emit("escalation-request", request)
        self.bridge.on_escalation(request)
        return request_id

    # -- escalation resolution ------------------------------------------------

    def _apply_decision(self, decision: OperatorDecision) -> None:
        pending = self.outstanding.pop(decision.request_id, None)
        if pending is None:
            logger.warning("decision for unknown escalation %s ignored", decision.request_id)
            return
        failsafe = decision.verdict == "deny" or decision.failsafe
        payload: dict[str, Any] = {
            "request_id": decision.request_id,
            "verdict": decision.verdict,
            "plan_index": decision.plan_index,
            "source": decision.source,
            "failsafe": failsafe,
        }
        if decision.modified_plan is not None:
            payload["modified_plan"] = decision.modified_plan
        self.world.emit("operator-decision", payload)
        agent = self.agents.get(pending.agent_id)
        if not isinstance(agent, DefenderAgent):
            return
        services = self._services_for(agent)
        agent.resolve_escalation(
            services,
            decision.request_id,
            decision.verdict,
            decision.plan_index,
            decision.modified_plan,
        )
        # Denials fail safe at the decision tick, not at the agent's next turn.
        agent.apply_failsafe(services, decision.request_id)

    def _tick_boundary(self, tick: int) -> None:
        wall_timeout = (
            self.config.operator.wall_poll_timeout
            if self.outstanding and self.bridge.has_client()
            else 0.0
        )
        while True:
            decision = self.bridge.poll_decision(wall_timeout)
            if decision is None:
                break
            wall_timeout = 0.0
            self._apply_decision(decision)
        for request_id in sorted(self.outstanding):
            pending = self.outstanding[request_id]
            if tick >= pending.deadline_tick:
                self._apply_decision(
                    OperatorDecision(
                        request_id=request_id, verdict="deny", source="timeout", failsafe=True
                    )
                )

    # -- main loop ------------------------------------------------------------

    def _quiescent(self) -> bool:
        if self.outstanding:
            return False
        if self.world.tick <= self._max_playbook_tick:
            return False
        for agent in self.agents.values():
            if isinstance(agent, DefenderAgent) and agent.has_open_incidents():
                return False
        return not self.world.has_pending_activity(ignore_kinds=frozenset(["agent-turn"]))

    def run(self) -> RunResult:
        config = self.config
        if config.operator.mode == "listen" and config.operator.wait_for_client > 0:
            deadline = time.monotonic() + config.operator.wait_for_client
            while not self.bridge.has_client() and time.monotonic() < deadline:
                time.sleep(0.01)
        self.world.emit(
            "run-start",
            {
                "config_digest": config.digest(),
                "seed": config.seed,
                "tick_limit": config.tick_limit,
                "operator_mode": config.operator.mode,
                "hosts": sorted(h.host_id for h in config.hosts),
                "agents": sorted(self.agents),
            },
        )
        reason = "tick-limit"
        tick = 0
        while tick < config.tick_limit:
            tick += 1
            self.bridge.on_tick(tick)
            self.world.step(tick)
            self._tick_boundary(tick)
            if self._quiescent():
                reason = "quiescent"
                break
        for agent_id in sorted(self.agents):
            agent = self.agents[agent_id]
            if isinstance(agent, DefenderAgent):
                self.world.emit("kb-digest", {"agent": agent_id, "digest": agent.kb.digest()})
        self.world.emit("run-end", {"tick": self.world.tick, "reason": reason})
        body_events = [e.to_json() for e in self.writer.events]
        digest = self.writer.finalize(self.world.tick, len(self.writer.events))
        self.bridge.close()
        metrics = compute_metrics(body_events)
        kb_digests = {
            agent_id: agent.kb.digest()
            for agent_id, agent in self.agents.items()
            if isinstance(agent, DefenderAgent)
        }
        return RunResult(
            trace_path=self.writer.path,
            events=body_events,
            lines=list(self.writer.lines),
            metrics=metrics,
            trace_digest=digest,
            kb_digests=kb_digests,
        )


def run_scenario(
    config: ScenarioConfig,
    *,
    trace_path: Optional[str] = None,
    bridge: Optional[OperatorBridge] = None,
) -> RunResult:
    engine = ScenarioEngine(config, trace_path=trace_path, bridge=bridge)
    return engine.run()


class PlaybackBridge(OperatorBridge):
    """Replays recorded operator decisions at their recorded ticks."""

    def __init__(self, decisions: list[tuple[int, OperatorDecision]]) -> None:
        self.pending = sorted(decisions, key=lambda d: d[0])
        self.current_tick = 0

    def on_tick(self, tick: int) -> None:
        self.current_tick = tick

    def on_escalation(self, request: dict[str, Any]) -> None:
        pass

    def poll_decision(self, wall_timeout: float = 0.0) -> Optional[OperatorDecision]:
        if self.pending and self.pending[0][0] <= self.current_tick:
            return self.pending.pop(0)[1]
        return None


@dataclass
class ReplayReport:
    ok: bool
    checks: dict[str, str] = field(default_factory=dict)
    first_divergence: Optional[dict[str, Any]] = None
    metrics: Optional[Metrics] = None

    def to_json(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "checks": dict(self.checks),
            "first_divergence": self.first_divergence,
            "metrics": self.metrics.to_json() if self.metrics else None,
        }


def _recompute_kb_digests(
    events: list[dict[str, Any]], config: ScenarioConfig
) -> dict[str, str]:
    """Re-run the learning pipeline from the trace's experience records."""
    logs: dict[str, list[ExperienceRecord]] = {}
    for ev in events:
        if ev["kind"] == "experience":
            payload = ev["payload"]
            logs.setdefault(payload["agent"], []).append(
                ExperienceRecord.from_json(payload["record"])
            )
    digests: dict[str, str] = {}
    for agent_cfg in config.agents:
        if agent_cfg.role != "defender":
            continue
        kb = KnowledgeBase(patterns=copy.deepcopy(config.patterns))
        episodes, _tail = segment_episodes(logs.get(agent_cfg.agent_id, []))
        improve_knowledge(kb, derive_proposals(episodes))
        digests[agent_cfg.agent_id] = kb.digest()
    return digests


def _scan_invariants(events: list[dict[str, Any]], config: ScenarioConfig) -> list[str]:
    """Trace-level checks: partition respect, ladder monotonicity, budgets."""
    problems: list[str] = []
    links = {tuple(sorted(pair)) for pair in config.links}
    placements = {a.agent_id: a.host_id for a in config.agents}
    sent: dict[str, str] = {}
    plan_steps: dict[str, int] = {}
    actuations: dict[str, int] = {}
    retry_limit = 1
    replan_limit = 2
    for agent_cfg in config.agents:
        retry_limit = max(retry_limit, agent_cfg.settings.get("retry_limit", 1))
        replan_limit = max(replan_limit, agent_cfg.settings.get("replan_limit", 2))

    def connected(a: str, b: str) -> bool:
        if a == b:
            return True
        seen = {a}
        frontier = [a]
        while frontier:
            nxt = []
            for h in frontier:
                for x, y in links:
                    other = y if x == h else (x if y == h else None)
                    if other == b:
                        return True
                    if other and other not in seen:
                        seen.add(other)
                        nxt.append(other)
            frontier = nxt
        return False

    for ev in events:
        kind = ev["kind"]
        payload = ev.get("payload", {})
        if kind == "link-removed":
            links.discard(tuple(sorted((payload["a"], payload["b"]))))
        elif kind == "message-sent":
            sent[payload["msg_id"]] = payload["sender"]
        elif kind == "message-delivered":
            sender = sent.get(payload["msg_id"])
            receiver = payload["to"]
            if sender is not None:
                src, dst = placements.get(sender), placements.get(receiver)
                if src and dst and not connected(src, dst):
                    problems.append(
                        f"partition violation: {payload['msg_id']} delivered {src}->{dst}"
                    )
        elif kind == "plan-selected":
            incident = payload["incident"]
            plan_steps.setdefault(incident, len(payload.get("steps", [])))
        elif kind == "actuation":
            actuations[payload["incident"]] = actuations.get(payload["incident"], 0) + 1
        elif kind == "execution-report":
            report = payload.get("report", {})
            step_floors: dict[Any, int] = {}
            for adj in report.get("adjustments", []):
                rank = _LADDER_ORDER.get(adj["kind"])
                if rank is None:
                    continue
                trigger = adj["trigger"]
                prev = step_floors.get(trigger, -1)
                if rank < prev:
                    problems.append(
                        f"ladder regression in incident {payload.get('incident')}: "
                        f"{adj['kind']} after rank {prev}"
                    )
                step_floors[trigger] = rank
            statuses = [s["status"] for s in report.get("steps", [])]
            flagged = [s for s in statuses if s != "done"]
            if flagged and not report.get("adjustments"):
                problems.append(
                    f"silent failure in incident {payload.get('incident')}: "
                    f"{len(flagged)} non-done steps without adjustments"
                )
    for incident, count in sorted(actuations.items()):
        steps = plan_steps.get(incident, 1)
        bound = max(steps, 1) * (retry_limit + 1) * (replan_limit + 1)
        if count > bound:
            problems.append(
                f"budget violation in incident {incident}: {count} actuations > bound {bound}"
            )
    return problems


def replay(trace_path: str, config: ScenarioConfig) -> ReplayReport:
    """Verify a persisted trace: integrity digest, re-simulation equality,
    knowledge-base reconstruction, and trace-level invariants."""
    checks: dict[str, str] = {}
    doc = read_trace(trace_path)
    ok, detail = doc.verify_digest()
    checks["integrity"] = "ok" if ok else detail
    if not ok:
        return ReplayReport(ok=False, checks=checks, first_divergence={"reason": detail})

    body = doc.body_events()

    decisions: list[tuple[int, OperatorDecision]] = []
    for ev in body:
        if ev["kind"] == "operator-decision" and ev["payload"].get("source") in ("scripted", "wire"):
            payload = ev["payload"]
            decisions.append(
                (
                    ev["tick"],
                    OperatorDecision(
                        request_id=payload["request_id"],
                        verdict=payload["verdict"],
                        plan_index=payload.get("plan_index"),
                        modified_plan=payload.get("modified_plan"),
                        source=payload["source"],
                    ),
                )
            )

    rerun = run_scenario(config, bridge=PlaybackBridge(decisions))
    divergence: Optional[dict[str, Any]] = None
    original_body_lines = doc.lines[:-1]
    rerun_body_lines = rerun.lines[:-1]
    for index, (a, b) in enumerate(zip(original_body_lines, rerun_body_lines)):
        if a != b:
            divergence = {"line": index, "trace": a.strip(), "rerun": b.strip()}
            break
    if divergence is None and len(original_body_lines) != len(rerun_body_lines):
        divergence = {
            "line": min(len(original_body_lines), len(rerun_body_lines)),
            "reason": "length mismatch",
        }
    checks["resimulation"] = "ok" if divergence is None else "diverged"

    recorded_digests = {
        ev["payload"]["agent"]: ev["payload"]["digest"] for ev in body if ev["kind"] == "kb-digest"
    }
    recomputed = _recompute_kb_digests(body, config)
    kb_ok = recorded_digests == recomputed
    checks["kb-digest"] = "ok" if kb_ok else f"recorded {recorded_digests} != recomputed {recomputed}"

    problems = _scan_invariants(body, config)
    checks["invariants"] = "ok" if not problems else "; ".join(problems)

    metrics = compute_metrics(body)
    report_ok = divergence is None and kb_ok and not problems
    return ReplayReport(ok=report_ok, checks=checks, first_divergence=divergence, metrics=metrics)


def replay_files(trace_path: str, config_path: str) -> ReplayReport:
    return replay(trace_path, load_config_file(config_path))
