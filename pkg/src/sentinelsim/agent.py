"""The defender agent: sense, identify, plan, select, execute, learn, collaborate.

One `take_turn` call per tick, scheduled on the world event queue. A turn
processes the inbox, senses and matches, advances at most one actuation, and
closes incidents by computing rewards and folding the experience into the
knowledge base. The sequencing is strictly deterministic so runs replay
byte-identically.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import collab
from .collab import (
    Agreement,
    Delegation,
    DiscoveryState,
    NegotiationState,
    SelfExecute,
    apply_warning,
    capability_scores,
)
from .execution import (
    DEFAULT_EFFECT_WINDOW,
    DEFAULT_REPLAN_LIMIT,
    DEFAULT_RETRY_LIMIT,
    ESCALATE,
    REPLAN,
    SATISFACTORY,
    UNSATISFACTORY,
    IncidentBudget,
    PlanExecution,
    monitor_effects,
)
from .learning import (
    ExperienceLog,
    ExperienceRecord,
    KnowledgeBase,
    compute_reward,
    derive_proposals,
    improve_knowledge,
    segment_episodes,
)
from .percept import (
    CATEGORY_SCHEMA,
    DEFAULT_ANOMALY_RISK,
    DEFAULT_ANOMALY_SIGMA,
    AgentSenseState,
    ProblematicMatch,
    ProcessedDescriptor,
    StateHistory,
    WorldView,
    identify_world_state,
    normalize,
    sense,
    state_class_label,
)
from .planning import (
    DEFAULT_ACCEPT_THRESHOLD,
    DEFAULT_DEPTH_LIMIT,
    DEFAULT_TOP_K,
    ActionTemplate,
    EscalationRequired,
    ExecutableResponsePlan,
    FailsafeOrder,
    GoalSet,
    ProposedResponsePlan,
    SelectionConstraints,
    evaluate_goals,
    plan as plan_search,
    select_action,
)
from .world import DONE, ActionInstance, ActuationResult

logger = logging.getLogger(__name__)

FAILSAFE_TEMPLATE = "isolate-host"


@dataclass
class AgentSettings:
    """Per-agent tunables; every default is a scenario-level knob."""

    anomaly_sigma: float = DEFAULT_ANOMALY_SIGMA
    anomaly_risk: float = DEFAULT_ANOMALY_RISK
    accept_threshold: float = DEFAULT_ACCEPT_THRESHOLD
    depth_limit: int = DEFAULT_DEPTH_LIMIT
    top_k: int = DEFAULT_TOP_K
    retry_limit: int = DEFAULT_RETRY_LIMIT
    replan_limit: int = DEFAULT_REPLAN_LIMIT
    effect_window: int = DEFAULT_EFFECT_WINDOW
    dynamics_evidence_min: int = 20
    alert_sigma_delta: float = 0.5
    sense_interval: int = 1
    discovery_interval: int = 10
    discovery_window: int = 2
    negotiation_round_ticks: int = 3
    negotiate: bool = True
    history_capacity: int = 256


@dataclass
class TurnServices:
    """Engine-supplied capabilities for one agent turn."""

    tick: int
    view: WorldView
    compromised: bool
    actuate: Callable[[ActionInstance], ActuationResult]
    send: Callable[[str, Any, dict[str, Any]], dict[str, Any]]
    emit: Callable[[str, dict[str, Any]], None]
    # None when the operator channel is configured off; selection then fails
    # safe instead of escalating.
    escalate: Optional[Callable[[str, str, list[dict[str, Any]]], str]]
    inbox: Callable[[], list[dict[str, Any]]]
    actuators_by_host: dict[str, frozenset[str]]
    reachable: Callable[[str, str], bool]
    agent_ids: tuple[str, ...]
    c2_id: Optional[str] = None


@dataclass
class Incident:
    incident_id: str
    match: ProblematicMatch
    state_class: str
    opened_tick: int
    baseline: dict[str, float]
    phase: str = "planning"
    proposals: list[ProposedResponsePlan] = field(default_factory=list)
    budget: Optional[IncidentBudget] = None
    execution: Optional[PlanExecution] = None
    selected_plan: Optional[ExecutableResponsePlan] = None
    plan_start_attrs: dict[str, float] = field(default_factory=dict)
    effects_deadline: Optional[int] = None
    cost_spent: float = 0.0
    escalation_id: Optional[str] = None
    negotiation: Optional[NegotiationState] = None
    round_deadline: Optional[int] = None
    agreement: Optional[Agreement] = None
    my_step_indices: list[int] = field(default_factory=list)
    blocked_templates: set[str] = field(default_factory=set)
    escalations_used: int = 0
    monitor_deadline: Optional[int] = None

    def key(self) -> tuple[str, str]:
        return (self.match.pattern_id, self.match.subject.key())


class DefenderAgent:
    """An autonomous cyber defense agent bound to one host."""

    def __init__(
        self,
        agent_id: str,
        host_id: str,
        kb: KnowledgeBase,
        repertoire: dict[str, ActionTemplate],
        goals: GoalSet,
        settings: Optional[AgentSettings] = None,
    ) -> None:
        self.agent_id = agent_id
        self.host_id = host_id
        self.kb = kb
        self.repertoire = repertoire
        self.goals = goals
        self.settings = settings or AgentSettings()
        self.history = StateHistory(capacity=self.settings.history_capacity)
        self.log = ExperienceLog()
        self.incidents: dict[tuple[str, str], Incident] = {}
        self.abandoned: set[tuple[str, str]] = set()
        self.discovery = DiscoveryState(
            window=self.settings.discovery_window, interval=self.settings.discovery_interval
        )
        self.alert_elevated = False
        self.anomaly_sigma = self.settings.anomaly_sigma
        self.seen_warning_ids: set[str] = set()
        self.sent_compromise_warning = False
        self.silenced = False
        self.last_sense_tick = -10**9
        self.last_state_class = "nominal"
        self._incident_counter = 0
        self._msg_counter = 0
        self._episodes_consumed = 0
        self._last_processed: list[ProcessedDescriptor] = []

    # ------------------------------------------------------------------
    # Turn entry point
    # ------------------------------------------------------------------

    def take_turn(self, services: TurnServices) -> None:
        if self.silenced:
            return
        if services.compromised:
            # Last gasp: warn the cohort, then go dark.
            if not self.sent_compromise_warning:
                self.sent_compromise_warning = True
                self._send(
                    services,
                    collab.WARNING,
                    collab.BROADCAST,
                    {"threat": "agent-compromised", "agent": self.agent_id},
                )
            self.silenced = True
            return

        self._process_inbox(services)
        self._discovery_tick(services)

        matches: list[ProblematicMatch] = []
        if services.tick - self.last_sense_tick >= self._sense_interval():
            matches = self._sense_and_identify(services)
            self.last_sense_tick = services.tick

        for match in matches:
            self._maybe_open_incident(services, match)

        acted = False
        for key in sorted(self.incidents, key=lambda k: self.incidents[k].opened_tick):
            incident = self.incidents[key]
            if incident.phase == "closed":
                continue
            acted = self._advance_incident(services, incident, allow_actuation=not acted) or acted

    # ------------------------------------------------------------------
    # Sensing
    # ------------------------------------------------------------------

    def _sense_interval(self) -> int:
        if self.alert_elevated:
            return max(1, self.settings.sense_interval // 2)
        return self.settings.sense_interval

    def _sense_and_identify(self, services: TurnServices) -> list[ProblematicMatch]:
        state = AgentSenseState(
            agent_id=self.agent_id, compromised=False, alert_elevated=self.alert_elevated
        )
        raw = sense(services.view, state)
        processed = normalize(raw, self.history)
        self._last_processed = processed
        matches = identify_world_state(
            processed,
            list(self.kb.patterns.values()),
            self.history,
            anomaly_sigma=self.anomaly_sigma,
            anomaly_risk=self.settings.anomaly_risk,
        )
        for match in matches:
            services.emit("problematic-match", dict(match.to_json(), agent=self.agent_id))
        state_class = state_class_label(matches)
        if matches or self.has_open_incidents() or state_class != self.last_state_class:
            digest = processed[0].digest() if processed else ""
            self._record_experience(
                services,
                ExperienceRecord(
                    t=services.tick,
                    e={
                        "digest": digest,
                        "state_class": state_class,
                        "matches": [m.to_json() for m in matches],
                    },
                ),
            )
        self.last_state_class = state_class
        return matches

    def has_open_incidents(self) -> bool:
        return any(i.phase != "closed" for i in self.incidents.values())

    def current_subject_attrs(self, subject_key: str) -> dict[str, float]:
        """Latest normalized attributes for a subject, or category defaults
        when the subject vanished from view (deleted file, killed process)."""
        for desc in self._last_processed:
            if desc.validity and desc.subject.key() == subject_key:
                return {k: v for k, v in desc.normalized.items() if isinstance(v, (int, float))}
        category = subject_key.split(":", 1)[0]
        schema = CATEGORY_SCHEMA.get(category)
        defaults: dict[str, float] = {}
        if schema:
            required, optional = schema
            for attr in required:
                defaults[attr] = 0.0
            defaults.update(optional)
        return defaults

    # ------------------------------------------------------------------
    # Incidents
    # ------------------------------------------------------------------

    def _maybe_open_incident(self, services: TurnServices, match: ProblematicMatch) -> None:
        key = (match.pattern_id, match.subject.key())
        if key in self.abandoned:
            return
        existing = self.incidents.get(key)
        if existing is not None and existing.phase != "closed":
            return
        self._incident_counter += 1
        incident = Incident(
            incident_id=f"{self.agent_id}/i{self._incident_counter}",
            match=match,
            state_class=self.last_state_class,
            opened_tick=services.tick,
            baseline=evaluate_goals(self.goals, services.view),
        )
        incident.state_class = state_class_label([match])
        self.incidents[key] = incident
        services.emit(
            "incident-opened",
            {
                "agent": self.agent_id,
                "incident": incident.incident_id,
                "pattern": match.pattern_id,
                "subject": match.subject.to_json(),
            },
        )

    def _match_still_holds(self, incident: Incident) -> Optional[bool]:
        """Re-evaluate the matched pattern against the subject's current
        attributes; None when the subject is outside this agent's sensors."""
        subject = incident.match.subject
        if subject.host != self.host_id:
            return None
        attrs: dict[str, Any] = dict(self.current_subject_attrs(subject.key()))
        attrs["category"] = subject.category
        return incident.match.pattern.matches(attrs)

    def _advance_incident(
        self, services: TurnServices, incident: Incident, allow_actuation: bool
    ) -> bool:
        """Advance one incident; returns True when it consumed this turn's
        actuation slot."""
        if incident.phase == "planning":
            if self._match_still_holds(incident) is False:
                self._close_incident(services, incident, outcome="resolved")
                return False
            self._plan_incident(services, incident)
        if incident.phase == "negotiating":
            self._advance_negotiation(services, incident)
        if incident.phase == "monitoring":
            self._monitor_delegated(services, incident)
        if incident.phase == "executing" and allow_actuation:
            return self._advance_execution(services, incident)
        if incident.phase == "effects-wait":
            self._check_effects(services, incident)
        if incident.phase == "failsafe" and allow_actuation:
            self._run_failsafe(services, incident)
            return True
        return False

    def _monitor_delegated(self, services: TurnServices, incident: Incident) -> None:
        """Watch a subject whose remediation was assigned to peers; retake the
        incident when the deadline passes with the pattern still matching."""
        holds = self._match_still_holds(incident)
        if holds is False:
            self._close_incident(services, incident, outcome="remediated-by-peer")
            return
        if incident.monitor_deadline is not None and services.tick >= incident.monitor_deadline:
            incident.agreement = None
            incident.negotiation = None
            incident.my_step_indices = []
            incident.monitor_deadline = None
            incident.phase = "planning"

    def _plan_incident(self, services: TurnServices, incident: Incident) -> None:
        proposals = plan_search(
            incident.match,
            self.repertoire,
            self.kb.dynamics,
            self.settings.depth_limit,
            top_k=self.settings.top_k,
            cost_weight=self.goals.cost_weight,
            state_class=incident.state_class,
            evidence_min=self.settings.dynamics_evidence_min,
            blocked=frozenset(incident.blocked_templates),
        )
        incident.proposals = proposals
        services.emit(
            "plans-proposed",
            {
                "agent": self.agent_id,
                "incident": incident.incident_id,
                "plans": [p.to_json() for p in proposals],
            },
        )
        outcome = select_action(
            proposals,
            self.goals,
            self._selection_constraints(services, incident),
            self.repertoire,
            assigned_agent=self.agent_id,
        )
        peers = self.discovery.peer_set()
        if (
            isinstance(outcome, ExecutableResponsePlan)
            and peers
            and self.settings.negotiate
            and incident.agreement is None
        ):
            self._open_negotiation(services, incident, peers, outcome)
            return
        self._dispatch_outcome(services, incident, outcome)

    def _selection_constraints(
        self, services: TurnServices, incident: Optional[Incident] = None
    ) -> SelectionConstraints:
        return SelectionConstraints(
            actuators_by_host=services.actuators_by_host,
            accept_threshold=self.settings.accept_threshold,
            escalation_enabled=services.escalate is not None,
            failsafe_target=self.host_id,
            excluded=frozenset(incident.blocked_templates) if incident else frozenset(),
        )

    def _select_and_dispatch(
        self,
        services: TurnServices,
        incident: Incident,
        proposals: list[ProposedResponsePlan],
        *,
        force: bool = False,
    ) -> None:
        outcome = select_action(
            proposals,
            self.goals,
            self._selection_constraints(services, incident),
            self.repertoire,
            assigned_agent=self.agent_id,
            force=force,
        )
        self._dispatch_outcome(services, incident, outcome)

    def _dispatch_outcome(
        self, services: TurnServices, incident: Incident, outcome: Any
    ) -> None:
        if isinstance(outcome, ExecutableResponsePlan):
            self._start_execution(services, incident, outcome)
        elif isinstance(outcome, EscalationRequired):
            if outcome.proposals:
                incident.proposals = list(outcome.proposals)
            self._escalate_or_failsafe(services, incident)
        elif isinstance(outcome, FailsafeOrder):
            incident.phase = "failsafe"

    def _start_execution(
        self, services: TurnServices, incident: Incident, plan: ExecutableResponsePlan
    ) -> None:
        if incident.budget is None:
            incident.budget = IncidentBudget.for_plan(
                len(plan.steps), self.settings.retry_limit, self.settings.replan_limit
            )
        incident.selected_plan = plan
        incident.execution = PlanExecution(
            plan, self.repertoire, incident.budget, self.settings.retry_limit
        )
        incident.plan_start_attrs = self.current_subject_attrs(incident.match.subject.key())
        incident.phase = "executing"
        services.emit(
            "plan-selected",
            {
                "agent": self.agent_id,
                "incident": incident.incident_id,
                "plan_hash": plan.plan_hash,
                "steps": [s.to_json() for s in plan.steps],
            },
        )

    def _advance_execution(self, services: TurnServices, incident: Incident) -> bool:
        execution = incident.execution
        if execution is None:
            return False
        action = execution.next_action()
        acted = False
        if action is not None:
            # Assigned-step filter: in a negotiated plan only my indices run;
            # skipped steps belong to peers and are not monitored here.
            if incident.my_step_indices and execution.current_index not in incident.my_step_indices:
                execution._advance()
                return self._advance_execution(services, incident)
            result = services.actuate(action)
            acted = True
            incident.cost_spent += self.repertoire.get(
                action.template, ActionTemplate(name=action.template)
            ).cost
            services.emit(
                "actuation",
                {
                    "agent": self.agent_id,
                    "incident": incident.incident_id,
                    "action": action.to_json(),
                    "status": result.status,
                    "reason": result.reason,
                    "attempt": execution.attempts_current + 1,
                },
            )
            self._record_experience(
                services,
                ExperienceRecord(
                    t=services.tick,
                    a={
                        "name": action.template,
                        "target": action.target,
                        "status": result.status,
                        "state_class": self.last_state_class,
                    },
                ),
            )
            execution.record_result(result)
        if execution.finished:
            if execution.pending_request == REPLAN:
                self._finish_report(services, incident)
                for record in execution.report.steps:
                    if record.status != DONE:
                        incident.blocked_templates.add(record.action.template)
                incident.execution = None
                incident.phase = "planning"
            elif execution.pending_request == ESCALATE:
                self._finish_report(services, incident)
                self._escalate_or_failsafe(services, incident)
            else:
                incident.effects_deadline = services.tick + self.settings.effect_window
                incident.phase = "effects-wait"
        return acted

    def _escalate_or_failsafe(self, services: TurnServices, incident: Incident) -> None:
        # One escalation per incident: once the operator has spoken and the
        # incident still cannot resolve, the unconditional fallback applies.
        if services.escalate is None or incident.escalations_used >= 1:
            incident.phase = "failsafe"
            return
        incident.escalations_used += 1
        incident.escalation_id = services.escalate(
            incident.incident_id,
            incident.match.pattern_id,
            [p.to_json() for p in incident.proposals],
        )
        incident.phase = "waiting-operator"

    def _check_effects(self, services: TurnServices, incident: Incident) -> None:
        execution = incident.execution
        plan = incident.selected_plan
        if execution is None or plan is None:
            incident.phase = "closed"
            return
        if incident.match.subject.host == self.host_id:
            # Local subject: compare sensed attributes against the plan-start
            # snapshot (a vanished subject reads as category defaults).
            current = self.current_subject_attrs(incident.match.subject.key())
            observed = {
                attr: current.get(attr, 0.0) - incident.plan_start_attrs.get(attr, 0.0)
                for attr in set(current) | set(incident.plan_start_attrs)
            }
            feedback = {i: observed for i in execution.done_indices}
        else:
            # Remote subject, outside this agent's sensor scope: fall back to
            # the deltas observed at actuation time.
            feedback = {i: execution.observed_deltas.get(i, {}) for i in execution.done_indices}
        status = monitor_effects(plan, feedback, self.repertoire, execution.done_indices)
        if status == SATISFACTORY:
            execution.close_with_effects(SATISFACTORY)
            self._finish_report(services, incident)
            self._close_incident(services, incident, outcome="remediated")
        elif incident.effects_deadline is not None and services.tick >= incident.effects_deadline:
            decision = execution.close_with_effects(UNSATISFACTORY)
            services.emit(
                "effects-status",
                {"agent": self.agent_id, "incident": incident.incident_id, "status": UNSATISFACTORY},
            )
            self._finish_report(services, incident)
            if decision is not None and decision.kind == REPLAN:
                for record in execution.report.steps:
                    if record.status != DONE:
                        incident.blocked_templates.add(record.action.template)
                incident.execution = None
                incident.phase = "planning"
            else:
                self._escalate_or_failsafe(services, incident)

    def _finish_report(self, services: TurnServices, incident: Incident) -> None:
        execution = incident.execution
        if execution is None:
            return
        services.emit(
            "execution-report",
            {
                "agent": self.agent_id,
                "incident": incident.incident_id,
                "report": execution.report.to_json(),
            },
        )

    def _run_failsafe(self, services: TurnServices, incident: Incident) -> None:
        action = ActionInstance(template=FAILSAFE_TEMPLATE, target=self.host_id, params={})
        result = services.actuate(action)
        incident.cost_spent += self.repertoire.get(
            FAILSAFE_TEMPLATE, ActionTemplate(name=FAILSAFE_TEMPLATE)
        ).cost
        services.emit(
            "failsafe",
            {
                "agent": self.agent_id,
                "incident": incident.incident_id,
                "target": self.host_id,
                "status": result.status,
            },
        )
        self._record_experience(
            services,
            ExperienceRecord(
                t=services.tick,
                a={
                    "name": FAILSAFE_TEMPLATE,
                    "target": self.host_id,
                    "status": result.status,
                    "state_class": self.last_state_class,
                },
            ),
        )
        self._close_incident(services, incident, outcome="failsafe", abandon=True)

    def _close_incident(
        self, services: TurnServices, incident: Incident, *, outcome: str, abandon: bool = False
    ) -> None:
        achieved = evaluate_goals(self.goals, services.view)
        reward = compute_reward(self.goals, achieved, incident.baseline, incident.cost_spent)
        self._record_experience(services, ExperienceRecord(t=services.tick, r=reward))
        services.emit(
            "reward",
            {
                "agent": self.agent_id,
                "incident": incident.incident_id,
                "value": reward,
                "cost": incident.cost_spent,
            },
        )
        self._learn(services)
        incident.phase = "closed"
        if abandon:
            self.abandoned.add(incident.key())
        services.emit(
            "incident-closed",
            {"agent": self.agent_id, "incident": incident.incident_id, "outcome": outcome},
        )

    # ------------------------------------------------------------------
    # Escalation resolution (called by the engine)
    # ------------------------------------------------------------------

    def apply_failsafe(self, services: TurnServices, request_id: str) -> None:
        """Run the failsafe for a denied or expired escalation right now."""
        incident = next(
            (i for i in self.incidents.values() if i.escalation_id == request_id), None
        )
        if incident is not None and incident.phase == "failsafe":
            self._run_failsafe(services, incident)

    def resolve_escalation(
        self, services: TurnServices, request_id: str, verdict: str,
        plan_index: Optional[int], modified_plan: Optional[list[dict[str, Any]]],
    ) -> None:
        incident = next(
            (i for i in self.incidents.values() if i.escalation_id == request_id), None
        )
        if incident is None or incident.phase != "waiting-operator":
            return
        if verdict == "approve" and plan_index is not None and 0 <= plan_index < len(incident.proposals):
            chosen = incident.proposals[plan_index]
            self._select_and_dispatch(services, incident, [chosen], force=True)
            return
        if verdict == "modify" and modified_plan is not None:
            steps = tuple(ActionInstance.from_json(s) for s in modified_plan)
            proposal = ProposedResponsePlan(
                steps=steps, score=0.0, addresses=incident.match.pattern_id
            )
            self._select_and_dispatch(services, incident, [proposal], force=True)
            return
        # deny (or timeout): fail safe.
        incident.phase = "failsafe"

    # ------------------------------------------------------------------
    # Collaboration
    # ------------------------------------------------------------------

    def _send(
        self, services: TurnServices, kind: str, recipients: Any, payload: dict[str, Any]
    ) -> dict[str, Any]:
        self._msg_counter += 1
        return services.send(kind, recipients, dict(payload, msg_id=f"{self.agent_id}/m{self._msg_counter}"))

    def _discovery_tick(self, services: TurnServices) -> None:
        others = [a for a in services.agent_ids if a != self.agent_id]
        if not others:
            return
        if self.discovery.due(services.tick):
            self.discovery.last_hello_tick = services.tick
            self._send(services, collab.HELLO, collab.BROADCAST, {"reply_to": None})

    def _capability_fn(self, services: TurnServices) -> Callable[[Any], tuple[float, ...]]:
        def fn(steps: Any) -> tuple[float, ...]:
            return capability_scores(
                steps,
                agent_host=self.host_id,
                actuators_by_host=services.actuators_by_host,
                reachable=services.reachable,
                success_rate=self.kb.success_rate,
            )

        return fn

    def _open_negotiation(
        self,
        services: TurnServices,
        incident: Incident,
        peers: list[str],
        executable: ExecutableResponsePlan,
    ) -> None:
        # Negotiation runs over the trimmed and augmented plan so every
        # assigned step has already passed the constraint checks.
        session = NegotiationState(
            incident.incident_id,
            self.agent_id,
            peers,
            ProposedResponsePlan(
                steps=executable.steps,
                score=executable.origin_score,
                addresses=executable.addresses,
            ),
            self._capability_fn(services),
            c2_id=services.c2_id,
        )
        incident.negotiation = session
        incident.phase = "negotiating"
        incident.round_deadline = services.tick + self.settings.negotiation_round_ticks
        self._send(
            services,
            collab.STATE_SHARE,
            collab.BROADCAST,
            {
                "incident": incident.incident_id,
                "pattern": incident.match.pattern_id,
                "subject": incident.match.subject.to_json(),
                "attrs": {
                    k: v
                    for k, v in incident.match.attrs.items()
                    if isinstance(v, (int, float, str))
                },
                "risk": incident.match.risk,
            },
        )
        for msg in session.opening_messages():
            self._send(services, msg["kind"], collab.BROADCAST, msg)
        if session.outcome is not None:
            self._adopt_negotiation_outcome(services, incident)

    def _advance_negotiation(self, services: TurnServices, incident: Incident) -> None:
        session = incident.negotiation
        if session is None:
            incident.phase = "planning"
            return
        if session.outcome is not None:
            self._adopt_negotiation_outcome(services, incident)
            return
        if incident.round_deadline is not None and services.tick >= incident.round_deadline:
            for msg in session.end_round():
                self._send(services, msg["kind"], collab.BROADCAST, msg)
            incident.round_deadline = services.tick + self.settings.negotiation_round_ticks
            if session.outcome is not None:
                self._adopt_negotiation_outcome(services, incident)

    def _adopt_negotiation_outcome(self, services: TurnServices, incident: Incident) -> None:
        session = incident.negotiation
        outcome = session.outcome if session else None
        if isinstance(outcome, Agreement):
            services.emit(
                "negotiation-outcome",
                dict(outcome.to_json(), agent=self.agent_id, incident=incident.incident_id, result="agreed"),
            )
            steps = tuple(ActionInstance.from_json(s) for s in outcome.steps)
            mine = sorted(i for i, owner in outcome.assignment.items() if owner == self.agent_id)
            incident.agreement = outcome
            if not mine:
                if incident.match.subject.host == self.host_id:
                    # Peers own every step of a problem on my host: watch the
                    # subject until the pattern clears, retake on deadline.
                    incident.phase = "monitoring"
                    incident.monitor_deadline = services.tick + 3 * self.settings.effect_window
                else:
                    # Remote subject: its local observer monitors; I am done.
                    self._close_incident(services, incident, outcome="delegated-away")
                return
            plan = ExecutableResponsePlan(
                steps=steps,
                origin_score=incident.proposals[0].score if incident.proposals else 0.0,
                addresses=incident.match.pattern_id,
                assigned_agent=self.agent_id,
                plan_hash=outcome.plan_hash,
            )
            incident.my_step_indices = mine
            self._start_execution(services, incident, plan)
        elif isinstance(outcome, Delegation):
            services.emit(
                "negotiation-outcome",
                {
                    "agent": self.agent_id,
                    "incident": incident.incident_id,
                    "result": "delegated",
                    "c2": outcome.c2_id,
                },
            )
            self._send(
                services,
                collab.C2_DELEGATE,
                (outcome.c2_id,),
                {
                    "incident": incident.incident_id,
                    "proposals": {a: p for a, p in session.proposals.items()},
                    "capabilities": {
                        a: list(c["capabilities"]) for a, c in session.counters.items()
                    },
                },
            )
            incident.round_deadline = services.tick + 4 * self.settings.negotiation_round_ticks
            incident.phase = "awaiting-c2"
        elif isinstance(outcome, SelfExecute):
            services.emit(
                "negotiation-outcome",
                {"agent": self.agent_id, "incident": incident.incident_id, "result": "self-execute"},
            )
            self._select_and_dispatch(services, incident, incident.proposals)

    def _process_inbox(self, services: TurnServices) -> None:
        for msg in services.inbox():
            kind = msg["kind"]
            payload = msg.get("payload", {})
            sender = msg["sender"]
            if kind == collab.HELLO:
                if payload.get("reply_to") is None:
                    self._send(
                        services, collab.HELLO, (sender,), {"reply_to": payload.get("msg_id", msg["msg_id"])}
                    )
                    self.discovery.peers[sender] = services.tick
                else:
                    self.discovery.note_reply(sender, services.tick)
            elif kind == collab.WARNING:
                if apply_warning(self.seen_warning_ids, msg) and not self.alert_elevated:
                    self.alert_elevated = True
                    self.anomaly_sigma = max(
                        0.5, self.anomaly_sigma - self.settings.alert_sigma_delta
                    )
                    services.emit(
                        "alert-raised",
                        {"agent": self.agent_id, "level": "elevated", "cause": msg["msg_id"]},
                    )
                self._handle_peer_loss(services, payload.get("agent", sender))
            elif kind == collab.STATE_SHARE:
                self._join_negotiation(services, sender, payload)
            elif kind in (collab.PLAN_PROPOSAL, collab.PLAN_COUNTER, collab.PLAN_AGREE, collab.C2_ASSIGN):
                for incident in self.incidents.values():
                    if incident.negotiation is not None:
                        incident.negotiation.receive(kind, sender, payload)
                    if kind == collab.C2_ASSIGN and incident.phase == "awaiting-c2":
                        if incident.negotiation and incident.negotiation.outcome is not None:
                            self._adopt_negotiation_outcome(services, incident)

    def _join_negotiation(
        self, services: TurnServices, sender: str, payload: dict[str, Any]
    ) -> None:
        """A peer shared a problematic state: plan locally and join its
        negotiation under the initiator's incident id."""
        incident_id = payload.get("incident")
        if incident_id is None:
            return
        for incident in self.incidents.values():
            if incident.negotiation is not None and incident.negotiation.incident_id == incident_id:
                return
        pattern = self.kb.patterns.get(payload.get("pattern", ""))
        if pattern is None:
            return
        from .percept import Subject

        match = ProblematicMatch(
            pattern=pattern,
            subject=Subject.from_json(payload["subject"]),
            risk=float(payload.get("risk", pattern.risk)),
            attrs=dict(payload.get("attrs", {})),
        )
        proposals = plan_search(
            match,
            self.repertoire,
            self.kb.dynamics,
            self.settings.depth_limit,
            top_k=self.settings.top_k,
            cost_weight=self.goals.cost_weight,
            state_class=state_class_label([match]),
            evidence_min=self.settings.dynamics_evidence_min,
        )
        outcome = select_action(
            proposals,
            self.goals,
            self._selection_constraints(services),
            self.repertoire,
            assigned_agent=self.agent_id,
        )
        if isinstance(outcome, ExecutableResponsePlan):
            proposals = [
                ProposedResponsePlan(
                    steps=outcome.steps, score=outcome.origin_score, addresses=outcome.addresses
                )
            ]
        else:
            # Nothing this agent could run; join with a losing placeholder so
            # the negotiation still counts this agent's capabilities.
            proposals = [ProposedResponsePlan(steps=(), score=-1.0, addresses=match.pattern_id)]
        self._incident_counter += 1
        incident = Incident(
            incident_id=incident_id,
            match=match,
            state_class=state_class_label([match]),
            opened_tick=services.tick,
            baseline=evaluate_goals(self.goals, services.view),
            proposals=proposals,
        )
        # Joiners key the incident by the initiator's id so duplicates from
        # rebroadcasts collapse.
        self.incidents[(incident_id, match.subject.key())] = incident
        session = NegotiationState(
            incident_id,
            self.agent_id,
            [a for a in services.agent_ids if a != self.agent_id],
            proposals[0],
            self._capability_fn(services),
            c2_id=services.c2_id,
        )
        incident.negotiation = session
        incident.phase = "negotiating"
        incident.round_deadline = services.tick + self.settings.negotiation_round_ticks
        for msg in session.opening_messages():
            self._send(services, msg["kind"], collab.BROADCAST, msg)

    def _handle_peer_loss(self, services: TurnServices, dead_agent: str) -> None:
        """Re-assign a dead peer's unexecuted steps among survivors."""
        if dead_agent == self.agent_id:
            return
        self.discovery.peers.pop(dead_agent, None)
        for incident in self.incidents.values():
            session = incident.negotiation
            if session is None or not isinstance(session.outcome, Agreement):
                continue
            before = session.outcome
            executed = frozenset(
                i for i in incident.my_step_indices if incident.execution is not None
                and i in incident.execution.done_indices
            )
            after = session.reassign_after_loss(dead_agent, executed)
            if after is not None and after.assignment != before.assignment:
                services.emit(
                    "negotiation-outcome",
                    dict(after.to_json(), agent=self.agent_id, incident=incident.incident_id, result="re-assigned"),
                )
                mine = sorted(i for i, owner in after.assignment.items() if owner == self.agent_id)
                new_steps = [i for i in mine if i not in incident.my_step_indices]
                incident.my_step_indices = mine
                if new_steps and incident.phase in ("closed", "effects-wait", "executing"):
                    steps = tuple(ActionInstance.from_json(s) for s in after.steps)
                    plan = ExecutableResponsePlan(
                        steps=steps,
                        origin_score=0.0,
                        addresses=incident.match.pattern_id,
                        assigned_agent=self.agent_id,
                        plan_hash=after.plan_hash,
                    )
                    incident.budget = None
                    self._start_execution(services, incident, plan)
                    incident.my_step_indices = mine

    # ------------------------------------------------------------------
    # Learning
    # ------------------------------------------------------------------

    def _record_experience(self, services: TurnServices, record: ExperienceRecord) -> None:
        self.log.record(record)
        services.emit("experience", {"agent": self.agent_id, "record": record.to_json()})

    def _learn(self, services: TurnServices) -> None:
        del services
        episodes, _tail = segment_episodes(self.log.records)
        fresh = episodes[self._episodes_consumed :]
        if fresh:
            improve_knowledge(self.kb, derive_proposals(fresh))
            self._episodes_consumed = len(episodes)


class C2Agent:
    """Central command node: consolidates delegated negotiations."""

    def __init__(self, agent_id: str, host_id: str) -> None:
        self.agent_id = agent_id
        self.host_id = host_id
        self._msg_counter = 0
        self.silenced = False

    def take_turn(self, services: TurnServices) -> None:
        if self.silenced or services.compromised:
            self.silenced = True
            return
        for msg in services.inbox():
            kind = msg["kind"]
            payload = msg.get("payload", {})
            if kind == collab.HELLO and payload.get("reply_to") is None:
                self._msg_counter += 1
                services.send(
                    collab.HELLO,
                    (msg["sender"],),
                    {"reply_to": msg["msg_id"], "msg_id": f"{self.agent_id}/m{self._msg_counter}"},
                )
            elif kind == collab.C2_DELEGATE:
                proposals = payload.get("proposals", {})
                capabilities = {
                    a: tuple(float(x) for x in caps)
                    for a, caps in payload.get("capabilities", {}).items()
                }
                if not proposals:
                    continue
                ranked = sorted(
                    proposals.values(), key=lambda p: (-float(p["score"]), p["plan_hash"])
                )
                winner = ranked[0]
                if not capabilities:
                    capabilities = {a: tuple(1.0 for _ in winner["steps"]) for a in proposals}
                assignment = collab.assign_steps(list(winner["steps"]), capabilities)
                self._msg_counter += 1
                services.send(
                    collab.C2_ASSIGN,
                    collab.BROADCAST,
                    {
                        "incident": payload.get("incident"),
                        "plan_hash": winner["plan_hash"],
                        "steps": winner["steps"],
                        "assignment": {str(k): v for k, v in assignment.items()},
                        "msg_id": f"{self.agent_id}/m{self._msg_counter}",
                    },
                )
                services.emit(
                    "negotiation-outcome",
                    {
                        "agent": self.agent_id,
                        "incident": payload.get("incident"),
                        "result": "c2-assigned",
                        "plan_hash": winner["plan_hash"],
                    },
                )
