"""Planning and action selection.

The planner enumerates bounded action sequences from the response repertoire
against a problematic match and scores them as predicted goal gain minus
weighted cost. The selector trims steps whose actuators are unavailable,
augments the survivors with prerequisites and post-actions, and resolves to
exactly one of: an executable plan, an escalation to the operator channel, or
a failsafe order.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Union

from .percept import ProblematicMatch
from .world import ActionInstance

logger = logging.getLogger(__name__)

DEFAULT_DEPTH_LIMIT = 2
DEFAULT_TOP_K = 3
DEFAULT_ACCEPT_THRESHOLD = 0.0
DEFAULT_DYNAMICS_EVIDENCE_MIN = 20

FAILSAFE_TEMPLATE = "isolate-host"

GOAL_KINDS = (
    "no-unknown-files",
    "no-unknown-processes",
    "no-enemy-c2",
    "host-connected",
    "agent-intact",
)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str  # "string" | "int"
    bind: str  # e.g. "subject.path", "subject.pid", "subject.flow_id", "subject.host"


@dataclass(frozen=True)
class ActionTemplate:
    name: str
    applicability: frozenset[str] = frozenset()
    params: tuple[ParamSpec, ...] = ()
    expected_effects: tuple[tuple[str, float], ...] = ()
    cost: float = 0.0
    prerequisites: tuple[str, ...] = ()
    post_actions: tuple[str, ...] = ()
    alternates: tuple[str, ...] = ()


class RepertoireError(ValueError):
    pass


def validate_repertoire(repertoire: dict[str, ActionTemplate]) -> list[str]:
    """Return every reference or cycle violation in the repertoire."""
    problems: list[str] = []
    for name, template in repertoire.items():
        for kind, refs in (
            ("prerequisite", template.prerequisites),
            ("post-action", template.post_actions),
            ("alternate", template.alternates),
        ):
            for ref in refs:
                if ref not in repertoire:
                    problems.append(f"template {name}: {kind} {ref!r} not in repertoire")
        if template.cost < 0:
            problems.append(f"template {name}: negative cost")
    # Prerequisite cycles make augmentation non-terminating.
    state: dict[str, int] = {}

    def visit(node: str, trail: tuple[str, ...]) -> None:
        mark = state.get(node, 0)
        if mark == 1:
            problems.append(f"prerequisite cycle: {' -> '.join(trail + (node,))}")
            return
        if mark == 2 or node not in repertoire:
            return
        state[node] = 1
        for dep in repertoire[node].prerequisites:
            visit(dep, trail + (node,))
        state[node] = 2

    for name in sorted(repertoire):
        visit(name, ())
    return problems


@dataclass(frozen=True)
class Goal:
    goal_id: str
    kind: str
    weight: float
    priority: int
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class GoalSet:
    goals: tuple[Goal, ...]
    cost_weight: float = 0.1

    def validate(self) -> list[str]:
        problems = []
        total = sum(g.weight for g in self.goals)
        if self.goals and abs(total - 1.0) > 1e-9:
            problems.append(f"goal weights sum to {total}, expected 1.0")
        ranks = [g.priority for g in self.goals]
        if len(set(ranks)) != len(ranks):
            problems.append("goal priority ranks are not unique")
        for g in self.goals:
            if g.kind not in GOAL_KINDS:
                problems.append(f"goal {g.goal_id}: unknown kind {g.kind!r}")
            if not 0.0 <= g.weight <= 1.0:
                problems.append(f"goal {g.goal_id}: weight outside [0,1]")
        if self.cost_weight < 0:
            problems.append("cost weight must be >= 0")
        return problems


def evaluate_goals(goal_set: GoalSet, view: Any, agent_compromised: bool = False) -> dict[str, float]:
    """Per-goal satisfaction in [0,1], evaluated on the agent's world view."""
    out: dict[str, float] = {}
    host = view.host
    for goal in goal_set.goals:
        if goal.kind == "no-unknown-files":
            bad = host is not None and any(not f.known for f in host.files.values())
            out[goal.goal_id] = 0.0 if bad else 1.0
        elif goal.kind == "no-unknown-processes":
            bad = host is not None and any(not p.known for p in host.processes.values())
            out[goal.goal_id] = 0.0 if bad else 1.0
        elif goal.kind == "no-enemy-c2":
            bad = any(f.kind == "enemy-c2" and f.active for f in view.flows)
            out[goal.goal_id] = 0.0 if bad else 1.0
        elif goal.kind == "host-connected":
            out[goal.goal_id] = 1.0 if getattr(view, "host_linked", True) else 0.0
        elif goal.kind == "agent-intact":
            out[goal.goal_id] = 0.0 if agent_compromised else 1.0
        else:
            out[goal.goal_id] = 0.0
    return out


@dataclass(frozen=True)
class ProposedResponsePlan:
    steps: tuple[ActionInstance, ...]
    score: float
    addresses: str

    def step_names(self) -> tuple[str, ...]:
        return tuple(s.template for s in self.steps)

    def to_json(self) -> dict[str, Any]:
        return {
            "steps": [s.to_json() for s in self.steps],
            "score": self.score,
            "addresses": self.addresses,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ProposedResponsePlan":
        return cls(
            steps=tuple(ActionInstance.from_json(s) for s in data["steps"]),
            score=float(data["score"]),
            addresses=data.get("addresses", ""),
        )


@dataclass(frozen=True)
class ExecutableResponsePlan:
    steps: tuple[ActionInstance, ...]
    origin_score: float
    addresses: str
    assigned_agent: str
    plan_hash: str

    def to_json(self) -> dict[str, Any]:
        return {
            "steps": [s.to_json() for s in self.steps],
            "origin_score": self.origin_score,
            "addresses": self.addresses,
            "assigned_agent": self.assigned_agent,
            "plan_hash": self.plan_hash,
        }


@dataclass(frozen=True)
class EscalationRequired:
    """Selector outcome: no acceptable plan; hand the proposals to a human."""

    proposals: tuple[ProposedResponsePlan, ...]
    reason: str


@dataclass(frozen=True)
class FailsafeOrder:
    """Selector outcome when escalation is unavailable: isolate the host."""

    target: str
    reason: str


SelectionOutcome = Union[ExecutableResponsePlan, EscalationRequired, FailsafeOrder]


def plan_hash(steps: Iterable[ActionInstance]) -> str:
    blob = json.dumps([s.to_json() for s in steps], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def bind_action(template: ActionTemplate, match: ProblematicMatch) -> Optional[ActionInstance]:
    """Instantiate a template against the match subject; None when unbindable."""
    params: dict[str, Any] = {}
    subject = match.subject
    for spec in template.params:
        value: Any = None
        if spec.bind == "subject.host":
            value = subject.host
        elif spec.bind == "subject.path" and subject.category == "file":
            value = subject.ident
        elif spec.bind == "subject.flow_id" and subject.category == "flow":
            value = subject.ident
        elif spec.bind == "subject.pid":
            if subject.category == "process":
                value = int(float(subject.ident))
            elif subject.category == "flow" and "src_pid" in match.attrs:
                value = int(match.attrs["src_pid"])
        if value is None:
            return None
        if spec.type == "int":
            value = int(value)
        params[spec.name] = value
    return ActionInstance(template=template.name, target=subject.host, params=params)


def predicted_resolution(
    steps: tuple[ActionInstance, ...],
    match: ProblematicMatch,
    repertoire: dict[str, ActionTemplate],
) -> float:
    """Fraction of the matched pattern's predicates falsified by the plan.

    Expected effects are applied cumulatively to the matched attributes; a
    predicate counts as falsified when it held before and no longer holds
    after. Patterns without predicates (including synthesized anomalies)
    resolve to 0, which routes them toward escalation.
    """
    predicates = match.pattern.predicates
    if not predicates:
        return 0.0
    before = dict(match.attrs)
    after = dict(match.attrs)
    for step in steps:
        template = repertoire.get(step.template)
        if template is None:
            continue
        for attr, delta in template.expected_effects:
            base = after.get(attr, 0.0)
            if isinstance(base, (int, float)) and not isinstance(base, bool):
                after[attr] = float(base) + delta
    falsified = sum(1 for p in predicates if p.holds(before) and not p.holds(after))
    return falsified / len(predicates)


def plan(
    match: ProblematicMatch,
    repertoire: dict[str, ActionTemplate],
    dynamics: Optional[Any] = None,
    depth_limit: int = DEFAULT_DEPTH_LIMIT,
    *,
    top_k: int = DEFAULT_TOP_K,
    cost_weight: float = 0.1,
    state_class: Optional[str] = None,
    evidence_min: int = DEFAULT_DYNAMICS_EVIDENCE_MIN,
    blocked: frozenset[str] = frozenset(),
) -> list[ProposedResponsePlan]:
    """Enumerate and score candidate plans for one problematic match.

    Every sequence of applicable bound actions up to depth_limit is scored
    as risk * predicted resolution - cost_weight * total cost; the learned
    dynamics model sharpens the resolution estimate once its evidence for
    (state class, action) reaches evidence_min. Returns the top_k plans,
    score-descending with a lexicographic tiebreak on step names; an empty
    list signals that escalation is required.
    """
    if depth_limit < 1:
        raise ValueError("depth_limit must be >= 1")
    candidates: list[tuple[str, ActionInstance]] = []
    for name in sorted(repertoire):
        template = repertoire[name]
        if name in blocked:
            continue
        applicable = match.pattern_id in template.applicability
        if not applicable and dynamics is not None and state_class is not None:
            # Dynamics-predicted route: the action demonstrably moves this
            # state class somewhere the pattern is absent.
            if dynamics.evidence(state_class, name) >= evidence_min:
                applicable = dynamics.resolve_probability(state_class, name, match.pattern_id) > 0.0
        if not applicable:
            continue
        action = bind_action(template, match)
        if action is not None:
            candidates.append((name, action))

    proposals: dict[tuple[str, ...], ProposedResponsePlan] = {}
    for length in range(1, depth_limit + 1):
        for combo in itertools.product(candidates, repeat=length):
            steps = tuple(action for _, action in combo)
            names = tuple(name for name, _ in combo)
            if names in proposals:
                continue
            resolution = predicted_resolution(steps, match, repertoire)
            if dynamics is not None and state_class is not None and steps:
                first = steps[0].template
                if dynamics.evidence(state_class, first) >= evidence_min:
                    p_resolve = dynamics.resolve_probability(state_class, first, match.pattern_id)
                    resolution = 0.5 * resolution + 0.5 * p_resolve
            total_cost = sum(repertoire[n].cost for n in names if n in repertoire)
            score = match.risk * resolution - cost_weight * total_cost
            proposals[names] = ProposedResponsePlan(steps=steps, score=score, addresses=match.pattern_id)

    ranked = sorted(proposals.values(), key=lambda p: (-p.score, p.step_names()))
    return ranked[:top_k]


@dataclass(frozen=True)
class SelectionConstraints:
    """Execution constraints consulted by the selector."""

    actuators_by_host: dict[str, frozenset[str]]
    accept_threshold: float = DEFAULT_ACCEPT_THRESHOLD
    escalation_enabled: bool = True
    failsafe_target: str = ""
    # Templates proven unusable earlier in the incident; treated as absent.
    excluded: frozenset[str] = frozenset()


def _augment(
    steps: tuple[ActionInstance, ...], repertoire: dict[str, ActionTemplate]
) -> tuple[ActionInstance, ...]:
    """Prefix prerequisites and suffix post-actions, deduplicated in order."""
    out: list[ActionInstance] = []
    seen: set[tuple[str, str, str]] = set()

    def key(action: ActionInstance) -> tuple[str, str, str]:
        return (action.template, action.target, json.dumps(action.params, sort_keys=True))

    def push(action: ActionInstance) -> None:
        k = key(action)
        if k not in seen:
            seen.add(k)
            out.append(action)

    def derive(name: str, base: ActionInstance) -> Optional[ActionInstance]:
        template = repertoire.get(name)
        if template is None:
            return None
        params = {}
        for spec in template.params:
            if spec.name not in base.params:
                return None
            params[spec.name] = base.params[spec.name]
        return ActionInstance(template=name, target=base.target, params=params)

    def prereq_chain(name: str, base: ActionInstance) -> None:
        template = repertoire.get(name)
        if template is None:
            return
        for dep in template.prerequisites:
            prereq_chain(dep, base)
            derived = derive(dep, base)
            if derived is not None:
                push(derived)

    def post_chain(name: str, base: ActionInstance) -> None:
        template = repertoire.get(name)
        if template is None:
            return
        for post in template.post_actions:
            derived = derive(post, base)
            if derived is not None:
                push(derived)
            post_chain(post, base)

    for step in steps:
        prereq_chain(step.template, step)
        push(step)
    for step in steps:
        post_chain(step.template, step)
    return tuple(out)


def select_action(
    plans: list[ProposedResponsePlan],
    goals: GoalSet,
    constraints: SelectionConstraints,
    repertoire: dict[str, ActionTemplate],
    *,
    assigned_agent: str = "",
    force: bool = False,
) -> SelectionOutcome:
    """Resolve proposals into exactly one outcome.

    The best proposal is trimmed of steps whose actuator is absent from the
    target host, then augmented; augmented steps are constraint-checked too
    so the executable plan never names an unavailable actuator. An empty
    trimmed plan or a score at or below the acceptance threshold escalates,
    and a failsafe order replaces escalation when the operator channel is
    configured off. `force` bypasses the threshold for operator-approved
    plans.
    """
    del goals  # Goal influence is already folded into proposal scores.

    def available(action: ActionInstance) -> bool:
        if action.template in constraints.excluded:
            return False
        return action.template in constraints.actuators_by_host.get(action.target, frozenset())

    if plans:
        best = plans[0]
        trimmed = tuple(s for s in best.steps if available(s))
        augmented = tuple(s for s in _augment(trimmed, repertoire) if available(s))
        acceptable = force or best.score > constraints.accept_threshold
        if augmented and acceptable:
            return ExecutableResponsePlan(
                steps=augmented,
                origin_score=best.score,
                addresses=best.addresses,
                assigned_agent=assigned_agent,
                plan_hash=plan_hash(augmented),
            )
        reason = "plan-trimmed-empty" if not augmented else "score-below-threshold"
    else:
        reason = "no-plans"

    if constraints.escalation_enabled:
        return EscalationRequired(proposals=tuple(plans), reason=reason)
    return FailsafeOrder(target=constraints.failsafe_target, reason=reason)
