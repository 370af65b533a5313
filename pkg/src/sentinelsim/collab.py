"""Collaboration and negotiation between defender agents.

Messages are plain dicts that ride the simulated network (one tick per hop,
partition respecting). Plan assignment runs a three-round synchronous
protocol: exchange proposals, counter with the globally best plan plus
per-step capability scores, then agree on a deterministic assignment. When
views diverge (message loss, partition) the incident is delegated to a cyber
command node when one exists, otherwise the initiator executes its own plan.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .planning import ProposedResponsePlan, plan_hash

logger = logging.getLogger(__name__)

HELLO = "HELLO"
STATE_SHARE = "STATE-SHARE"
PLAN_PROPOSAL = "PLAN-PROPOSAL"
PLAN_COUNTER = "PLAN-COUNTER"
PLAN_AGREE = "PLAN-AGREE"
WARNING = "WARNING"
C2_DELEGATE = "C2-DELEGATE"
C2_ASSIGN = "C2-ASSIGN"

BROADCAST = "*"

MAX_ROUNDS = 3
DISCOVERY_WINDOW = 2  # ticks within which a HELLO reply counts


def make_message(
    kind: str,
    sender: str,
    recipients: Any,
    payload: dict[str, Any],
    msg_id: str,
    tick: int,
) -> dict[str, Any]:
    return {
        "kind": kind,
        "sender": sender,
        "recipients": recipients,
        "payload": payload,
        "msg_id": msg_id,
        "tick": tick,
    }


@dataclass
class DiscoveryState:
    """Peer table refreshed by HELLO round trips."""

    window: int = DISCOVERY_WINDOW
    interval: int = 10
    peers: dict[str, int] = field(default_factory=dict)  # agent id -> last seen tick
    last_hello_tick: int = -1

    def due(self, tick: int) -> bool:
        return self.last_hello_tick < 0 or tick - self.last_hello_tick >= self.interval

    def note_reply(self, sender: str, tick: int) -> bool:
        """Record a HELLO reply; True when it lands within the window."""
        if self.last_hello_tick >= 0 and tick - self.last_hello_tick <= self.window:
            self.peers[sender] = tick
            return True
        return False

    def peer_set(self) -> list[str]:
        return sorted(self.peers)


@dataclass(frozen=True)
class Capability:
    """Per-step fitness of one agent for one plan's steps."""

    scores: tuple[float, ...]


def capability_scores(
    steps: Iterable[dict[str, Any]],
    *,
    agent_host: str,
    actuators_by_host: dict[str, frozenset[str]],
    reachable: Any,
    success_rate: Any = None,
) -> tuple[float, ...]:
    """1.0 when the step's target actuator exists and is reachable from the
    agent's host, else 0.0, plus a 0.1-weighted learned success rate."""
    scores = []
    for step in steps:
        target = step["target"]
        template = step["template"]
        base = 0.0
        if template in actuators_by_host.get(target, frozenset()):
            if target == agent_host or reachable(agent_host, target):
                base = 1.0
        bonus = 0.1 * (success_rate(template) if success_rate else 0.0)
        scores.append(base + bonus if base > 0 else 0.0)
    return tuple(scores)


@dataclass(frozen=True)
class Agreement:
    plan_hash: str
    steps: tuple[dict[str, Any], ...]
    assignment: dict[int, str]  # step index -> agent id

    def to_json(self) -> dict[str, Any]:
        return {
            "plan_hash": self.plan_hash,
            "assignment": {str(k): v for k, v in sorted(self.assignment.items())},
        }


@dataclass(frozen=True)
class Delegation:
    c2_id: str
    reason: str


@dataclass(frozen=True)
class SelfExecute:
    reason: str


NegotiationOutcome = Any  # Agreement | Delegation | SelfExecute


def _winning_proposal(proposals: dict[str, dict[str, Any]]) -> dict[str, Any]:
    """Globally highest-scored plan; ties resolve to the lowest plan hash."""
    ranked = sorted(
        proposals.values(), key=lambda p: (-float(p["score"]), p["plan_hash"])
    )
    return ranked[0]


def assign_steps(
    steps: list[dict[str, Any]],
    capabilities: dict[str, tuple[float, ...]],
    *,
    exclude: frozenset[str] = frozenset(),
    indices: Optional[list[int]] = None,
) -> dict[int, str]:
    """Deterministic assignment: each step to the highest-capability agent,
    ties to the lowest agent id; zero-capability steps fall back to the
    lowest agent id overall."""
    agents = sorted(a for a in capabilities if a not in exclude)
    assignment: dict[int, str] = {}
    for i in indices if indices is not None else range(len(steps)):
        best_agent = None
        best_score = 0.0
        for agent in agents:
            scores = capabilities[agent]
            score = scores[i] if i < len(scores) else 0.0
            if score > best_score:
                best_score = score
                best_agent = agent
        assignment[i] = best_agent if best_agent is not None else agents[0]
    return assignment


class NegotiationState:
    """One agent's view of one incident negotiation.

    Rounds are synchronous: callers feed received messages, then close each
    round with `end_round`, which returns the messages for the next round or
    the final outcome. Peers that stayed silent in a round are dropped from
    the rest of the negotiation.
    """

    def __init__(
        self,
        incident_id: str,
        agent_id: str,
        peers: Iterable[str],
        proposal: ProposedResponsePlan,
        capability_fn: Any,
        *,
        c2_id: Optional[str] = None,
        max_rounds: int = MAX_ROUNDS,
    ) -> None:
        self.incident_id = incident_id
        self.agent_id = agent_id
        self.participants = sorted(set(peers) | {agent_id})
        self.capability_fn = capability_fn
        self.c2_id = c2_id
        self.max_rounds = max_rounds
        self.round = 1
        steps = [s.to_json() for s in proposal.steps]
        self.my_proposal = {
            "agent": agent_id,
            "plan_hash": plan_hash(proposal.steps),
            "steps": steps,
            "score": proposal.score,
            "addresses": proposal.addresses,
        }
        self.proposals: dict[str, dict[str, Any]] = {agent_id: self.my_proposal}
        self.counters: dict[str, dict[str, Any]] = {}
        self.agrees: dict[str, dict[str, Any]] = {}
        self.outcome: Optional[NegotiationOutcome] = None

    # -- message handling ----------------------------------------------------

    def opening_messages(self) -> list[dict[str, Any]]:
        """Round-1 send; a lone agent self-assigns immediately."""
        if len(self.participants) == 1:
            steps = self.my_proposal["steps"]
            self.outcome = Agreement(
                plan_hash=self.my_proposal["plan_hash"],
                steps=tuple(steps),
                assignment={i: self.agent_id for i in range(len(steps))},
            )
            return []
        return [
            {
                "kind": PLAN_PROPOSAL,
                "incident": self.incident_id,
                "proposal": self.my_proposal,
            }
        ]

    def receive(self, kind: str, sender: str, payload: dict[str, Any]) -> None:
        if payload.get("incident") != self.incident_id or self.outcome is not None:
            return
        if kind == PLAN_PROPOSAL:
            self.proposals[sender] = payload["proposal"]
        elif kind == PLAN_COUNTER:
            self.counters[sender] = payload
        elif kind == PLAN_AGREE:
            self.agrees[sender] = payload
        elif kind == C2_ASSIGN:
            steps = tuple(payload["steps"])
            self.outcome = Agreement(
                plan_hash=payload["plan_hash"],
                steps=steps,
                assignment={int(k): v for k, v in payload["assignment"].items()},
            )

    def end_round(self) -> list[dict[str, Any]]:
        """Close the current round; returns the next round's messages."""
        if self.outcome is not None:
            return []
        if self.round == 1:
            # Silent peers drop out of the negotiation entirely.
            self.participants = sorted(set(self.proposals) & set(self.participants) | {self.agent_id})
            winner = _winning_proposal({a: p for a, p in self.proposals.items() if a in self.participants})
            caps = self.capability_fn(winner["steps"])
            self.round = 2
            counter = {
                "incident": self.incident_id,
                "winner_hash": winner["plan_hash"],
                "winner_agent": winner["agent"],
                "capabilities": list(caps),
            }
            self.counters[self.agent_id] = counter
            return [dict(counter, kind=PLAN_COUNTER)]
        if self.round == 2:
            responsive = sorted(set(self.counters) & set(self.participants))
            self.participants = sorted(set(responsive) | {self.agent_id})
            winner = _winning_proposal({a: p for a, p in self.proposals.items() if a in self.participants})
            capabilities = {
                agent: tuple(self.counters[agent]["capabilities"])
                for agent in self.participants
                if agent in self.counters and self.counters[agent]["winner_hash"] == winner["plan_hash"]
            }
            if self.agent_id not in capabilities:
                capabilities[self.agent_id] = self.capability_fn(winner["steps"])
            assignment = assign_steps(list(winner["steps"]), capabilities)
            self.round = 3
            agree = {
                "incident": self.incident_id,
                "plan_hash": winner["plan_hash"],
                "steps": winner["steps"],
                "assignment": {str(k): v for k, v in assignment.items()},
                "capabilities": {a: list(c) for a, c in sorted(capabilities.items())},
            }
            self.agrees[self.agent_id] = agree
            return [dict(agree, kind=PLAN_AGREE)]
        # Round 3 close: agreement requires every responsive participant to
        # hold the identical plan hash and assignment.
        mine = self.agrees[self.agent_id]
        responsive = sorted(set(self.agrees) & set(self.participants))
        coherent = all(
            self.agrees[a]["plan_hash"] == mine["plan_hash"]
            and self.agrees[a]["assignment"] == mine["assignment"]
            for a in responsive
        )
        if coherent and responsive:
            self.outcome = Agreement(
                plan_hash=mine["plan_hash"],
                steps=tuple(mine["steps"]),
                assignment={int(k): v for k, v in mine["assignment"].items()},
            )
        elif self.c2_id is not None:
            self.outcome = Delegation(c2_id=self.c2_id, reason="no-agreement")
        else:
            self.outcome = SelfExecute(reason="no-agreement")
        return []

    # -- self-organization -----------------------------------------------------

    def reassign_after_loss(self, dead_agent: str, executed: frozenset[int]) -> Optional[Agreement]:
        """Re-run assignment among survivors for the dead agent's unexecuted
        steps. Deterministic, so every survivor computes the same result."""
        if not isinstance(self.outcome, Agreement):
            return None
        agreement = self.outcome
        if dead_agent not in agreement.assignment.values():
            return agreement
        capabilities = {
            a: tuple(c)
            for a, c in self.agrees.get(self.agent_id, {}).get("capabilities", {}).items()
            if a != dead_agent
        }
        if not capabilities:
            return None
        remaining = [
            i
            for i, owner in sorted(agreement.assignment.items())
            if owner == dead_agent and i not in executed
        ]
        new_assignment = dict(agreement.assignment)
        patch = assign_steps(list(agreement.steps), capabilities, indices=remaining)
        new_assignment.update(patch)
        self.outcome = Agreement(
            plan_hash=agreement.plan_hash, steps=agreement.steps, assignment=new_assignment
        )
        return self.outcome


def negotiate(
    incident_id: str,
    proposals: dict[str, ProposedResponsePlan],
    capability_fns: dict[str, Any],
    *,
    c2_id: Optional[str] = None,
    lossy_pairs: frozenset[tuple[str, str]] = frozenset(),
) -> tuple[dict[str, NegotiationOutcome], int]:
    """Drive a full negotiation over an instant in-memory transport.

    Returns each participant's outcome and the number of rounds used. The
    optional lossy_pairs set drops messages between specific (sender,
    receiver) pairs to model partitions mid-negotiation.
    """
    agents = sorted(proposals)
    sessions = {
        a: NegotiationState(
            incident_id,
            a,
            peers=[b for b in agents if b != a],
            proposal=proposals[a],
            capability_fn=capability_fns[a],
            c2_id=c2_id,
        )
        for a in agents
    }
    outbox = {a: sessions[a].opening_messages() for a in agents}
    rounds = 0
    while any(s.outcome is None for s in sessions.values()) and rounds < MAX_ROUNDS:
        rounds += 1
        for sender in agents:
            for msg in outbox[sender]:
                for receiver in agents:
                    if receiver == sender or (sender, receiver) in lossy_pairs:
                        continue
                    sessions[receiver].receive(msg["kind"], sender, msg)
        outbox = {a: sessions[a].end_round() if sessions[a].outcome is None else [] for a in agents}
    return {a: sessions[a].outcome for a in agents}, rounds


def apply_warning(seen_msg_ids: set[str], msg: dict[str, Any]) -> bool:
    """Deduplicated warning intake; True when the receiver should raise its
    alert level (first delivery of this msg_id only)."""
    msg_id = msg["msg_id"]
    if msg_id in seen_msg_ids:
        return False
    seen_msg_ids.add(msg_id)
    return True
