"""Action execution: effect the plan, monitor it, adjust on deviation.

Steps run strictly in order; any status other than done walks a deterministic
adjustment ladder of retry, substitute, replan, escalate, bounded by a per
incident actuation budget of steps * (retries+1) * (replans+1). Effects
monitoring compares declared expected effects against observed deltas after
the final step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Union

from .planning import ActionTemplate, ExecutableResponsePlan
from .world import DONE, NOT_DONE, ActionInstance, ActuationResult

logger = logging.getLogger(__name__)

DEFAULT_RETRY_LIMIT = 1
DEFAULT_REPLAN_LIMIT = 2
DEFAULT_EFFECT_WINDOW = 10

SATISFACTORY = "satisfactory"
UNSATISFACTORY = "unsatisfactory"

RETRY = "retry"
SUBSTITUTE = "substitute"
REPLAN = "replan"
ESCALATE = "escalate"
NONE = "none"

_LADDER_ORDER = {RETRY: 0, SUBSTITUTE: 1, REPLAN: 2, ESCALATE: 3}


@dataclass(frozen=True)
class AdjustmentDecision:
    trigger: Union[int, str]  # step index or "effects"
    kind: str
    detail: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"trigger": self.trigger, "kind": self.kind, "detail": self.detail}


@dataclass
class StepRecord:
    action: ActionInstance
    status: str
    attempt_count: int

    def to_json(self) -> dict[str, Any]:
        return {"action": self.action.to_json(), "status": self.status, "attempts": self.attempt_count}


@dataclass
class ExecutionReport:
    plan_hash: str
    steps: list[StepRecord] = field(default_factory=list)
    effects_status: str = SATISFACTORY
    adjustments: list[AdjustmentDecision] = field(default_factory=list)
    outcome: str = "completed"  # completed | replan-requested | escalated

    def to_json(self) -> dict[str, Any]:
        return {
            "plan_hash": self.plan_hash,
            "steps": [s.to_json() for s in self.steps],
            "effects_status": self.effects_status,
            "adjustments": [a.to_json() for a in self.adjustments],
            "outcome": self.outcome,
        }


@dataclass
class IncidentBudget:
    """Shared actuation and replan budget for one incident."""

    actuations_remaining: int
    replans_remaining: int = DEFAULT_REPLAN_LIMIT

    @classmethod
    def for_plan(cls, steps: int, retry_limit: int = DEFAULT_RETRY_LIMIT, replan_limit: int = DEFAULT_REPLAN_LIMIT) -> "IncidentBudget":
        return cls(
            actuations_remaining=max(steps, 1) * (retry_limit + 1) * (replan_limit + 1),
            replans_remaining=replan_limit,
        )

    def can_actuate(self) -> bool:
        return self.actuations_remaining > 0

    def spend_actuation(self) -> None:
        self.actuations_remaining -= 1


def adjust(
    plan: ExecutableResponsePlan,
    statuses: list[tuple[int, str, int]],
    effects_status: str,
    repertoire: dict[str, ActionTemplate],
    budgets: IncidentBudget,
    *,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
    substituted: Optional[set[int]] = None,
) -> AdjustmentDecision:
    """One deterministic ladder decision for the first outstanding flag.

    `statuses` holds (step_index, status, attempts_on_current_template) for
    attempted steps. Ladder: retry while the current template still has
    attempts; substitute its first alternate once; then request a replan
    while the incident budget allows; escalation is the unconditional last
    rung. Effects failures have no failed step to retry, so they enter the
    ladder at the replan rung.
    """
    substituted = substituted or set()
    flagged = next(((i, s, a) for i, s, a in statuses if s != DONE), None)
    if flagged is not None:
        index, _status, attempts = flagged
        if attempts <= retry_limit and budgets.can_actuate():
            return AdjustmentDecision(trigger=index, kind=RETRY, detail={"attempt": attempts + 1})
        template = repertoire.get(plan.steps[index].template) if index < len(plan.steps) else None
        if (
            template is not None
            and template.alternates
            and index not in substituted
            and budgets.can_actuate()
        ):
            return AdjustmentDecision(
                trigger=index, kind=SUBSTITUTE, detail={"alternate": template.alternates[0]}
            )
        if budgets.replans_remaining > 0 and budgets.can_actuate():
            return AdjustmentDecision(trigger=index, kind=REPLAN, detail={})
        return AdjustmentDecision(trigger=index, kind=ESCALATE, detail={"reason": "budgets-exhausted"})
    if effects_status == UNSATISFACTORY:
        if budgets.replans_remaining > 0 and budgets.can_actuate():
            return AdjustmentDecision(trigger="effects", kind=REPLAN, detail={})
        return AdjustmentDecision(trigger="effects", kind=ESCALATE, detail={"reason": "budgets-exhausted"})
    return AdjustmentDecision(trigger="effects", kind=NONE, detail={})


def monitor_execution(plan: ExecutableResponsePlan, step_feedback: list[str]) -> list[tuple[int, str]]:
    """Flag every attempted step whose status is not done."""
    del plan
    return [(i, status) for i, status in enumerate(step_feedback) if status != DONE]


def monitor_effects(
    plan: ExecutableResponsePlan,
    env_feedback: dict[int, dict[str, float]],
    repertoire: dict[str, ActionTemplate],
    done_steps: Iterable[int],
) -> str:
    """satisfactory iff every declared effect of every done step was observed.

    env_feedback maps step index to observed attribute deltas; the comparison
    is exact (the world is integer valued).
    """
    for index in done_steps:
        if index >= len(plan.steps):
            continue
        template = repertoire.get(plan.steps[index].template)
        if template is None:
            continue
        observed = env_feedback.get(index, {})
        for attr, delta in template.expected_effects:
            if observed.get(attr) != delta:
                return UNSATISFACTORY
    return SATISFACTORY


class PlanExecution:
    """Incremental executor: one actuation per call, ladder between calls.

    Drives an executable plan against an actuate function while recording a
    complete ExecutionReport. The live agent calls `next_action` once per
    turn; `execute` below drives the same machine to completion in one call.
    """

    def __init__(
        self,
        plan: ExecutableResponsePlan,
        repertoire: dict[str, ActionTemplate],
        budget: IncidentBudget,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
    ) -> None:
        self.plan = plan
        self.repertoire = repertoire
        self.budget = budget
        self.retry_limit = retry_limit
        self.report = ExecutionReport(plan_hash=plan.plan_hash)
        self.current_index = 0
        self.current_action: Optional[ActionInstance] = (
            plan.steps[0] if plan.steps else None
        )
        self.attempts_current = 0
        self.substituted: set[int] = set()
        self.observed_deltas: dict[int, dict[str, float]] = {}
        self.done_indices: list[int] = []
        self.finished = not plan.steps
        self.pending_request: Optional[str] = None  # REPLAN | ESCALATE
        self._kind_floor: dict[int, int] = {}

    def next_action(self) -> Optional[ActionInstance]:
        if self.finished or not self.budget.can_actuate():
            if not self.finished and not self.budget.can_actuate():
                self._abort(ESCALATE, {"reason": "actuation-budget-exhausted"})
            return None
        return self.current_action

    def record_result(self, result: ActuationResult) -> Optional[AdjustmentDecision]:
        """Account one actuation result; returns the ladder decision if any."""
        assert self.current_action is not None
        self.budget.spend_actuation()
        self.attempts_current += 1
        self.report.steps.append(
            StepRecord(action=self.current_action, status=result.status, attempt_count=self.attempts_current)
        )
        if result.status == DONE:
            self.observed_deltas[self.current_index] = dict(result.deltas)
            self.done_indices.append(self.current_index)
            self._advance()
            return None
        decision = adjust(
            self.plan,
            [(self.current_index, result.status, self.attempts_current)],
            SATISFACTORY,
            self.repertoire,
            self.budget,
            retry_limit=self.retry_limit,
            substituted=self.substituted,
        )
        self._apply_ladder(decision)
        return decision

    def effects_ready(self) -> bool:
        return self.finished and self.pending_request is None

    def close_with_effects(self, effects_status: str) -> Optional[AdjustmentDecision]:
        """Record the effects verdict; unsatisfactory effects re-enter the ladder."""
        self.report.effects_status = effects_status
        if effects_status == UNSATISFACTORY:
            decision = adjust(
                self.plan, [], UNSATISFACTORY, self.repertoire, self.budget,
                retry_limit=self.retry_limit, substituted=self.substituted,
            )
            self.report.adjustments.append(decision)
            if decision.kind == REPLAN:
                self.budget.replans_remaining -= 1
                self.pending_request = REPLAN
            elif decision.kind == ESCALATE:
                self.pending_request = ESCALATE
            self.report.outcome = (
                "replan-requested" if self.pending_request == REPLAN else "escalated"
            )
            return decision
        return None

    # -- internals ---------------------------------------------------------

    def _advance(self) -> None:
        self.current_index += 1
        self.attempts_current = 0
        if self.current_index >= len(self.plan.steps):
            self.finished = True
            self.current_action = None
        else:
            self.current_action = self.plan.steps[self.current_index]

    def _apply_ladder(self, decision: AdjustmentDecision) -> None:
        floor = self._kind_floor.get(self.current_index, 0)
        rank = _LADDER_ORDER.get(decision.kind, 0)
        if rank < floor:
            # Ladder monotonicity: never move backwards for one step.
            decision = AdjustmentDecision(trigger=decision.trigger, kind=ESCALATE, detail={"reason": "ladder-regression"})
            rank = _LADDER_ORDER[ESCALATE]
        self._kind_floor[self.current_index] = rank
        self.report.adjustments.append(decision)
        if decision.kind == RETRY:
            return
        if decision.kind == SUBSTITUTE:
            alternate = decision.detail["alternate"]
            base = self.plan.steps[self.current_index]
            template = self.repertoire[alternate]
            params = {spec.name: base.params.get(spec.name) for spec in template.params}
            if any(v is None for v in params.values()):
                # Cannot bind the alternate; fall through to replan/escalate.
                self.substituted.add(self.current_index)
                follow = adjust(
                    self.plan,
                    [(self.current_index, NOT_DONE, self.attempts_current)],
                    SATISFACTORY,
                    self.repertoire,
                    self.budget,
                    retry_limit=self.retry_limit,
                    substituted=self.substituted,
                )
                self._apply_ladder(follow)
                return
            self.substituted.add(self.current_index)
            self.current_action = ActionInstance(template=alternate, target=base.target, params=params)
            self.attempts_current = 0
            return
        if decision.kind == REPLAN:
            self.budget.replans_remaining -= 1
            self._abort(REPLAN, decision.detail)
            return
        if decision.kind == ESCALATE:
            self._abort(ESCALATE, decision.detail)

    def _abort(self, request: str, detail: dict[str, Any]) -> None:
        del detail
        self.finished = True
        self.current_action = None
        self.pending_request = request
        self.report.outcome = "replan-requested" if request == REPLAN else "escalated"


def execute(
    plan: ExecutableResponsePlan,
    actuate_fn: Callable[[ActionInstance], ActuationResult],
    repertoire: dict[str, ActionTemplate],
    *,
    budget: Optional[IncidentBudget] = None,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
    effects_feedback: Optional[Callable[[PlanExecution], dict[int, dict[str, float]]]] = None,
) -> ExecutionReport:
    """Drive a plan to completion against an actuate function.

    Steps are attempted strictly in order, each failure resolved through the
    ladder before moving on. Effects are compared from the actuation deltas
    unless an explicit effects_feedback probe is supplied.
    """
    budget = budget or IncidentBudget.for_plan(len(plan.steps), retry_limit)
    machine = PlanExecution(plan, repertoire, budget, retry_limit)
    while True:
        action = machine.next_action()
        if action is None:
            break
        machine.record_result(actuate_fn(action))
    if machine.pending_request is None:
        feedback = effects_feedback(machine) if effects_feedback else machine.observed_deltas
        status = monitor_effects(plan, feedback, repertoire, machine.done_indices)
        machine.close_with_effects(status)
    return machine.report
