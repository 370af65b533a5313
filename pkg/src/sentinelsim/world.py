"""Deterministic discrete-event world model.

Hosts, files, processes and traffic flows live here, together with the
scripted adversary playbooks that mutate them and the actuator registry
through which defender agents mutate them back. All activity is driven by
a single event queue with a total order of (tick, priority, insertion
sequence), so a fixed (config, seed) pair always produces the same event
stream.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

logger = logging.getLogger(__name__)

# Queue priorities. Lower values run first within a tick: adversary activity,
# then beacon traffic, then message deliveries, then agent turns.
PRIORITY_ADVERSARY = 10
PRIORITY_BEACON = 15
PRIORITY_DELIVERY = 20
PRIORITY_AGENT = 30

# Actuation statuses.
DONE = "done"
NOT_DONE = "not-done"
WRONGLY_DONE = "wrongly-done"

PLAYBOOK_ACTIONS = (
    "implant-file",
    "start-process",
    "beacon",
    "lateral-move",
    "kill-agent-process",
)

EXTERNAL = "external"


@dataclass
class FileRecord:
    path: str
    content_hash: str = ""
    known: bool = True
    quarantined: bool = False
    snapshotted: bool = False


@dataclass
class ProcessRecord:
    pid: int
    name: str
    known: bool = True
    beaconing: bool = False


@dataclass
class TrafficFlow:
    flow_id: str
    src_host: str
    dst: str
    kind: str = "normal"  # "normal" | "enemy-c2"
    period: int = 0
    src_pid: Optional[int] = None
    active: bool = True

    def touches(self, host_id: str) -> bool:
        return host_id in (self.src_host, self.dst)


@dataclass
class Host:
    host_id: str
    files: dict[str, FileRecord] = field(default_factory=dict)
    processes: dict[int, ProcessRecord] = field(default_factory=dict)
    # Fixed at scenario load; actuation against templates outside this set
    # yields not-done.
    actuators_available: frozenset[str] = frozenset()


@dataclass(frozen=True)
class SimEvent:
    """One emitted trace event: the unit of the JSON Lines output."""

    tick: int
    seq: int
    kind: str
    payload: dict[str, Any]

    def to_json(self) -> dict[str, Any]:
        return {"tick": self.tick, "seq": self.seq, "kind": self.kind, "payload": self.payload}


@dataclass(frozen=True)
class ActionInstance:
    """A bound action: template name, target host, concrete parameters."""

    template: str
    target: str
    params: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"template": self.template, "target": self.target, "params": dict(self.params)}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ActionInstance":
        return cls(template=data["template"], target=data["target"], params=dict(data.get("params", {})))


@dataclass(frozen=True)
class ActuationResult:
    status: str
    reason: str = ""
    deltas: dict[str, Any] = field(default_factory=dict)


@dataclass
class PlaybookStep:
    at_tick: int
    action: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class AdversaryPlaybook:
    target_host: str
    steps: list[PlaybookStep] = field(default_factory=list)


class World:
    """The simulated network plus its deterministic event queue.

    The queue holds scheduled *occurrences* (adversary steps, beacon firings,
    message deliveries, agent turns); executing them emits `SimEvent` records
    through `emit`, which is the only path into the trace.
    """

    def __init__(self, seed: int) -> None:
        self.tick = 0
        self.seed = seed
        self.hosts: dict[str, Host] = {}
        self.links: set[tuple[str, str]] = set()
        # Hosts with internet egress; isolate-host revokes it.
        self.uplinks: set[str] = set()
        self.flows: dict[str, TrafficFlow] = {}
        self.agents_compromised: set[str] = set()
        self.inboxes: dict[str, list[dict[str, Any]]] = {}
        self.fault_rates: dict[str, float] = {}
        self.fault_rng = random.Random(f"{seed}/faults")
        self._queue: list[tuple[int, int, int, str, dict[str, Any]]] = []
        self._insert_seq = itertools.count()
        self._emit_seq = itertools.count()
        self._handlers: dict[str, Callable[["World", dict[str, Any]], None]] = {
            "playbook-step": _handle_playbook_step,
            "beacon-fire": _handle_beacon_fire,
            "message-delivery": _handle_message_delivery,
        }
        self._sinks: list[Callable[[SimEvent], None]] = []
        self._step_buffer: list[SimEvent] = []

    # -- wiring ----------------------------------------------------------

    def add_sink(self, sink: Callable[[SimEvent], None]) -> None:
        self._sinks.append(sink)

    def register_handler(self, kind: str, fn: Callable[["World", dict[str, Any]], None]) -> None:
        self._handlers[kind] = fn

    def add_host(self, host: Host) -> None:
        if host.host_id in self.hosts:
            raise ValueError(f"duplicate host {host.host_id}")
        self.hosts[host.host_id] = host
        self.uplinks.add(host.host_id)

    def add_link(self, a: str, b: str) -> None:
        self.links.add(_link_key(a, b))

    # -- topology queries --------------------------------------------------

    def neighbors(self, host_id: str) -> list[str]:
        out = set()
        for a, b in self.links:
            if a == host_id:
                out.add(b)
            elif b == host_id:
                out.add(a)
        return sorted(out)

    def has_links(self, host_id: str) -> bool:
        return any(host_id in pair for pair in self.links)

    def connected(self, a: str, b: str) -> bool:
        """True when a path of links joins the two hosts."""
        if a == b:
            return True
        return self.hop_distance(a, b) is not None

    def hop_distance(self, a: str, b: str) -> Optional[int]:
        if a == b:
            return 0
        seen = {a}
        frontier = [a]
        dist = 0
        while frontier:
            dist += 1
            nxt = []
            for h in frontier:
                for n in self.neighbors(h):
                    if n == b:
                        return dist
                    if n not in seen:
                        seen.add(n)
                        nxt.append(n)
            frontier = nxt
        return None

    def external_reachable(self, host_id: str) -> bool:
        return host_id in self.uplinks

    # -- event machinery ---------------------------------------------------

    def schedule(self, tick: int, priority: int, kind: str, params: dict[str, Any]) -> None:
        if tick < self.tick:
            raise ValueError(f"cannot schedule into the past ({tick} < {self.tick})")
        heapq.heappush(self._queue, (tick, priority, next(self._insert_seq), kind, params))

    def emit(self, kind: str, payload: dict[str, Any]) -> SimEvent:
        event = SimEvent(tick=self.tick, seq=next(self._emit_seq), kind=kind, payload=payload)
        self._step_buffer.append(event)
        for sink in self._sinks:
            sink(event)
        return event

    def pending_events(self, *, before: Optional[int] = None) -> int:
        if before is None:
            return len(self._queue)
        return sum(1 for entry in self._queue if entry[0] < before)

    def has_pending_activity(self, *, ignore_kinds: frozenset[str] = frozenset()) -> bool:
        """True while the queue holds anything outside ignore_kinds."""
        return any(entry[3] not in ignore_kinds for entry in self._queue)

    def step(self, until_tick: int) -> list[SimEvent]:
        """Run all queued events with tick <= until_tick, in queue order.

        Returns the SimEvents emitted while stepping; world.tick ends at
        until_tick even when the queue is empty.
        """
        if until_tick < self.tick:
            raise ValueError(f"until_tick {until_tick} precedes current tick {self.tick}")
        self._step_buffer = []
        while self._queue and self._queue[0][0] <= until_tick:
            tick, _prio, _seq, kind, params = heapq.heappop(self._queue)
            self.tick = tick
            handler = self._handlers.get(kind)
            if handler is None:
                raise RuntimeError(f"no handler registered for queued event kind {kind!r}")
            handler(self, params)
        self.tick = until_tick
        return list(self._step_buffer)

    # -- adversary ---------------------------------------------------------

    def load_playbook(self, playbook: AdversaryPlaybook) -> None:
        # Steps are kept in at_tick order so the queue preserves author order
        # between equal ticks via insertion sequence.
        for step in sorted(playbook.steps, key=lambda s: s.at_tick):
            self.schedule(
                step.at_tick,
                PRIORITY_ADVERSARY,
                "playbook-step",
                {"target": playbook.target_host, "action": step.action, "params": step.params},
            )

    # -- actuation ---------------------------------------------------------

    def actuate(self, action: ActionInstance) -> ActuationResult:
        """Apply a defender action to the world.

        done      -> exactly the template's declared mutation happened
        not-done  -> zero mutation (missing actuator, target or interface)
        wrongly-done -> the template's fault mutation happened (fault injection)
        """
        template = ACTUATOR_TEMPLATES.get(action.template)
        host = self.hosts.get(action.target)
        if template is None or host is None:
            return ActuationResult(NOT_DONE, reason="actuator-missing")
        if action.template not in host.actuators_available:
            return ActuationResult(NOT_DONE, reason="actuator-missing")
        precheck = template.precheck(self, action)
        if precheck is not None:
            return ActuationResult(NOT_DONE, reason=precheck)
        rate = self.fault_rates.get(action.template, 0.0)
        if rate > 0 and self.fault_rng.random() < rate:
            deltas = template.fault(self, action)
            return ActuationResult(WRONGLY_DONE, reason="fault-injected", deltas=deltas)
        deltas = template.apply(self, action)
        return ActuationResult(DONE, deltas=deltas)


def _link_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


# ---------------------------------------------------------------------------
# Queued event handlers
# ---------------------------------------------------------------------------


def _handle_playbook_step(world: World, params: dict[str, Any]) -> None:
    step = PlaybookStep(at_tick=world.tick, action=params["action"], params=params["params"])
    apply_playbook_step(world, step, params["target"])


def _handle_beacon_fire(world: World, params: dict[str, Any]) -> None:
    flow = world.flows.get(params["flow_id"])
    if flow is None or not flow.active:
        return
    if not world.external_reachable(flow.src_host) and flow.dst == EXTERNAL:
        flow.active = False
        world.emit("flow-stopped", {"flow_id": flow.flow_id, "reason": "host-isolated"})
        return
    world.emit("beacon-fired", {"flow_id": flow.flow_id, "src": flow.src_host, "dst": flow.dst})
    world.schedule(world.tick + flow.period, PRIORITY_BEACON, "beacon-fire", {"flow_id": flow.flow_id})


def _handle_message_delivery(world: World, params: dict[str, Any]) -> None:
    message = params["message"]
    to_agent = params["to_agent"]
    src_host = params["src_host"]
    dst_host = params["dst_host"]
    # Partition respect: re-check connectivity at delivery time so a link cut
    # mid-flight drops the message.
    if src_host != dst_host and not world.connected(src_host, dst_host):
        world.emit("message-dropped", {"msg_id": message["msg_id"], "to": to_agent, "reason": "partitioned"})
        return
    world.inboxes.setdefault(to_agent, []).append(message)
    world.emit("message-delivered", {"msg_id": message["msg_id"], "to": to_agent})


# ---------------------------------------------------------------------------
# Adversary playbook application
# ---------------------------------------------------------------------------


def apply_playbook_step(world: World, step: PlaybookStep, target_host: str) -> list[SimEvent]:
    """Mutate the world for one adversary step; bad targets skip with a warning."""
    before = len(world._step_buffer)
    host = world.hosts.get(target_host)
    if host is None:
        world.emit("adversary-skip", {"action": step.action, "target": target_host, "reason": "target-missing"})
        return world._step_buffer[before:]

    if step.action == "implant-file":
        path = step.params["path"]
        host.files[path] = FileRecord(
            path=path, content_hash=step.params.get("content_hash", "deadbeef"), known=False
        )
        world.emit("file-created", {"host": target_host, "path": path, "known": False})
        world.emit("adversary-step", {"action": step.action, "target": target_host, "params": step.params})

    elif step.action == "start-process":
        pid = int(step.params["pid"])
        host.processes[pid] = ProcessRecord(
            pid=pid,
            name=step.params.get("name", "unknown.bin"),
            known=False,
            beaconing=bool(step.params.get("beaconing", False)),
        )
        world.emit(
            "process-started",
            {"host": target_host, "pid": pid, "name": host.processes[pid].name, "known": False},
        )
        world.emit("adversary-step", {"action": step.action, "target": target_host, "params": step.params})

    elif step.action == "beacon":
        flow_id = step.params.get("flow_id", f"flow-{target_host}-{len(world.flows)}")
        flow = TrafficFlow(
            flow_id=flow_id,
            src_host=target_host,
            dst=step.params.get("dst", EXTERNAL),
            kind="enemy-c2",
            period=int(step.params.get("period", 4)),
            src_pid=step.params.get("src_pid"),
        )
        world.flows[flow_id] = flow
        world.emit(
            "flow-created",
            {
                "flow_id": flow_id,
                "src": flow.src_host,
                "dst": flow.dst,
                "kind": flow.kind,
                "period": flow.period,
                "src_pid": flow.src_pid,
            },
        )
        world.emit("adversary-step", {"action": step.action, "target": target_host, "params": step.params})
        world.schedule(world.tick, PRIORITY_BEACON, "beacon-fire", {"flow_id": flow_id})

    elif step.action == "lateral-move":
        dst = step.params["to"]
        if dst not in world.hosts:
            world.emit("adversary-skip", {"action": step.action, "target": dst, "reason": "target-missing"})
        elif not world.connected(target_host, dst):
            world.emit("adversary-skip", {"action": step.action, "target": dst, "reason": "unreachable"})
        else:
            pid = int(step.params.get("pid", 6600 + len(world.hosts[dst].processes)))
            world.hosts[dst].processes[pid] = ProcessRecord(
                pid=pid, name=step.params.get("name", "foothold.bin"), known=False
            )
            world.emit("lateral-move", {"from": target_host, "to": dst, "pid": pid})
            world.emit("adversary-step", {"action": step.action, "target": dst, "params": step.params})

    elif step.action == "kill-agent-process":
        agent_id = step.params["agent_id"]
        world.agents_compromised.add(agent_id)
        world.emit("agent-killed", {"agent": agent_id, "host": target_host})
        world.emit("adversary-step", {"action": step.action, "target": target_host, "params": step.params})

    else:
        world.emit("adversary-skip", {"action": step.action, "target": target_host, "reason": "unknown-action"})

    return world._step_buffer[before:]


# ---------------------------------------------------------------------------
# Actuator templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActuatorTemplate:
    """World-side definition of one defender capability.

    `apply` performs the declared mutation atomically, `fault` the wrong or
    partial mutation used when fault injection fires, `precheck` returns a
    not-done reason when the declared mutation cannot occur at all.
    """

    name: str
    apply: Callable[[World, ActionInstance], dict[str, Any]]
    fault: Callable[[World, ActionInstance], dict[str, Any]]
    precheck: Callable[[World, ActionInstance], Optional[str]]


def _need_file(world: World, action: ActionInstance) -> Optional[str]:
    host = world.hosts[action.target]
    if action.params.get("path") not in host.files:
        return "target-missing"
    return None


def _need_process(world: World, action: ActionInstance) -> Optional[str]:
    host = world.hosts[action.target]
    pid = action.params.get("pid")
    if pid is None or int(pid) not in host.processes:
        return "target-missing"
    return None


def _need_flow(world: World, action: ActionInstance) -> Optional[str]:
    flow = world.flows.get(action.params.get("flow_id", ""))
    if flow is None or not flow.active:
        return "target-missing"
    return None


def _no_precheck(world: World, action: ActionInstance) -> Optional[str]:
    return None


def _apply_delete_file(world: World, action: ActionInstance) -> dict[str, Any]:
    host = world.hosts[action.target]
    path = action.params["path"]
    del host.files[path]
    return {"exists": -1}


def _fault_delete_file(world: World, action: ActionInstance) -> dict[str, Any]:
    # Wrongly done: the file survives.
    return {}


def _apply_quarantine(world: World, action: ActionInstance) -> dict[str, Any]:
    host = world.hosts[action.target]
    host.files[action.params["path"]].quarantined = True
    return {"quarantined": 1}


def _fault_quarantine(world: World, action: ActionInstance) -> dict[str, Any]:
    return {}


def _apply_snapshot(world: World, action: ActionInstance) -> dict[str, Any]:
    host = world.hosts[action.target]
    host.files[action.params["path"]].snapshotted = True
    return {"snapshotted": 1}


def _fault_snapshot(world: World, action: ActionInstance) -> dict[str, Any]:
    return {}


def _stop_flows_for_pid(world: World, host_id: str, pid: int) -> None:
    for flow in sorted(world.flows.values(), key=lambda f: f.flow_id):
        if flow.active and flow.src_host == host_id and flow.src_pid == pid:
            flow.active = False
            world.emit("flow-stopped", {"flow_id": flow.flow_id, "reason": "process-killed"})


def _apply_kill_process(world: World, action: ActionInstance) -> dict[str, Any]:
    host = world.hosts[action.target]
    pid = int(action.params["pid"])
    del host.processes[pid]
    _stop_flows_for_pid(world, action.target, pid)
    return {"process_exists": -1}


def _fault_kill_process(world: World, action: ActionInstance) -> dict[str, Any]:
    # Wrongly done: process survives and keeps beaconing.
    return {}


def _apply_block_flow(world: World, action: ActionInstance) -> dict[str, Any]:
    flow = world.flows[action.params["flow_id"]]
    flow.active = False
    world.emit("flow-stopped", {"flow_id": flow.flow_id, "reason": "blocked"})
    return {"enemy_c2": -1}


def _fault_block_flow(world: World, action: ActionInstance) -> dict[str, Any]:
    return {}


def _apply_isolate_host(world: World, action: ActionInstance) -> dict[str, Any]:
    removed = sorted(pair for pair in world.links if action.target in pair)
    for pair in removed:
        world.links.discard(pair)
        world.emit("link-removed", {"a": pair[0], "b": pair[1], "reason": "isolate-host"})
    had_uplink = action.target in world.uplinks
    world.uplinks.discard(action.target)
    return {"links": -len(removed), "enemy_c2": -1 if had_uplink else 0}


def _fault_isolate_host(world: World, action: ActionInstance) -> dict[str, Any]:
    # Partial isolation: one link drops but egress survives, so any beacon
    # keeps firing; effects monitoring is what catches this.
    removed = sorted(pair for pair in world.links if action.target in pair)
    if removed:
        world.links.discard(removed[0])
        world.emit("link-removed", {"a": removed[0][0], "b": removed[0][1], "reason": "isolate-host-partial"})
        return {"links": -1}
    return {}


ACTUATOR_TEMPLATES: dict[str, ActuatorTemplate] = {
    t.name: t
    for t in (
        ActuatorTemplate("delete-file", _apply_delete_file, _fault_delete_file, _need_file),
        ActuatorTemplate("quarantine-file", _apply_quarantine, _fault_quarantine, _need_file),
        ActuatorTemplate("snapshot-file", _apply_snapshot, _fault_snapshot, _need_file),
        ActuatorTemplate("kill-process", _apply_kill_process, _fault_kill_process, _need_process),
        ActuatorTemplate("block-flow", _apply_block_flow, _fault_block_flow, _need_flow),
        ActuatorTemplate("isolate-host", _apply_isolate_host, _fault_isolate_host, _no_precheck),
    )
}
