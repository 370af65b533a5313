"""Execution machine: ordering, monitoring, the adjustment ladder, budgets."""
from __future__ import annotations

import random

from sentinelsim.execution import (
    ESCALATE,
    REPLAN,
    RETRY,
    SATISFACTORY,
    SUBSTITUTE,
    UNSATISFACTORY,
    IncidentBudget,
    PlanExecution,
    adjust,
    execute,
    monitor_effects,
    monitor_execution,
)
from sentinelsim.planning import ExecutableResponsePlan, plan_hash
from sentinelsim.world import (
    DONE,
    NOT_DONE,
    WRONGLY_DONE,
    ActionInstance,
    ActuationResult,
    FileRecord,
)
from conftest import make_world, small_repertoire


def make_plan(*steps: ActionInstance) -> ExecutableResponsePlan:
    return ExecutableResponsePlan(
        steps=tuple(steps),
        origin_score=0.5,
        addresses="unexpected-file",
        assigned_agent="a1",
        plan_hash=plan_hash(steps),
    )


def delete_step(path: str = "/tmp/implant.bin") -> ActionInstance:
    return ActionInstance("delete-file", "h1", {"path": path})


class TestExecute:
    def test_empty_plan_is_vacuously_satisfactory(self):
        report = execute(make_plan(), lambda a: ActuationResult(DONE), small_repertoire())
        assert report.steps == []
        assert report.effects_status == SATISFACTORY
        assert report.outcome == "completed"

    def test_delete_file_done_and_gone(self):
        world = make_world()
        world.hosts["h1"].files["/tmp/implant.bin"] = FileRecord("/tmp/implant.bin", known=False)
        report = execute(make_plan(delete_step()), world.actuate, small_repertoire())
        assert [s.status for s in report.steps] == [DONE]
        assert "/tmp/implant.bin" not in world.hosts["h1"].files
        assert report.effects_status == SATISFACTORY

    def test_fault_then_success_retries_with_attempt_count_two(self):
        # Seeded so the first fault draw fires and the second does not
        # (seed 0 stream with rate 0.5: [False, True, ...] -> use rate where
        # draw1 fires). Easier: deterministic actuate stub.
        outcomes = iter([ActuationResult(WRONGLY_DONE, "fault-injected"), ActuationResult(DONE, deltas={"exists": -1})])
        report = execute(make_plan(delete_step()), lambda a: next(outcomes), small_repertoire())
        assert [s.status for s in report.steps] == [WRONGLY_DONE, DONE]
        assert report.steps[-1].attempt_count == 2
        assert report.adjustments[0].kind == RETRY
        assert report.effects_status == SATISFACTORY

    def test_fault_injection_through_the_world_rng(self):
        # Seed 2 with rate 0.57 opens [fault, clean]; asserted on the same
        # stream the world consumes before trusting the report.
        world = make_world(seed=2)
        world.fault_rates = {"delete-file": 0.57}
        rng = random.Random("2/faults")
        stream = [rng.random() < 0.57 for _ in range(2)]
        assert stream == [True, False]
        world.hosts["h1"].files["/tmp/implant.bin"] = FileRecord("/tmp/implant.bin", known=False)
        report = execute(make_plan(delete_step()), world.actuate, small_repertoire())
        assert [s.status for s in report.steps] == [WRONGLY_DONE, DONE]
        assert "/tmp/implant.bin" not in world.hosts["h1"].files

    def test_steps_execute_strictly_in_order(self):
        seen: list[str] = []

        def actuate(action: ActionInstance) -> ActuationResult:
            seen.append(action.template)
            return ActuationResult(DONE)

        steps = (
            ActionInstance("snapshot-file", "h1", {"path": "/a"}),
            ActionInstance("delete-file", "h1", {"path": "/a"}),
        )
        execute(make_plan(*steps), actuate, small_repertoire())
        assert seen == ["snapshot-file", "delete-file"]


class TestMonitorExecution:
    def test_all_done_yields_no_flags(self):
        assert monitor_execution(make_plan(delete_step()), [DONE, DONE]) == []

    def test_wrongly_done_is_flagged(self):
        assert monitor_execution(make_plan(delete_step()), [DONE, WRONGLY_DONE]) == [(1, WRONGLY_DONE)]

    def test_not_done_is_flagged(self):
        assert monitor_execution(make_plan(delete_step()), [NOT_DONE]) == [(0, NOT_DONE)]


class TestMonitorEffects:
    def test_no_declared_effects_is_satisfactory(self):
        plan = make_plan(ActionInstance("snapshot-file", "h1", {"path": "/a"}))
        assert monitor_effects(plan, {}, small_repertoire(), [0]) == SATISFACTORY

    def test_observed_delta_matches_prediction(self):
        plan = make_plan(delete_step())
        assert monitor_effects(plan, {0: {"exists": -1.0}}, small_repertoire(), [0]) == SATISFACTORY

    def test_missing_effect_is_unsatisfactory(self):
        # A kill that reports done while the enemy flow keeps firing: the
        # declared delta on the flow attribute is absent from observations.
        from sentinelsim.planning import ActionTemplate, ParamSpec

        repertoire = {
            "block-flow": ActionTemplate(
                name="block-flow",
                params=(ParamSpec("flow_id", "string", "subject.flow_id"),),
                expected_effects=(("enemy_c2", -1.0),),
                cost=0.2,
            )
        }
        plan = make_plan(ActionInstance("block-flow", "h1", {"flow_id": "f1"}))
        assert monitor_effects(plan, {0: {"enemy_c2": 0.0}}, repertoire, [0]) == UNSATISFACTORY
        assert monitor_effects(plan, {0: {}}, repertoire, [0]) == UNSATISFACTORY


class TestAdjustLadder:
    def test_first_failure_with_retry_budget_retries(self):
        plan = make_plan(delete_step())
        budget = IncidentBudget.for_plan(1)
        decision = adjust(plan, [(0, WRONGLY_DONE, 1)], SATISFACTORY, small_repertoire(), budget)
        assert decision.kind == RETRY

    def test_retries_exhausted_with_alternate_substitutes(self):
        plan = make_plan(delete_step())
        budget = IncidentBudget.for_plan(1)
        decision = adjust(plan, [(0, WRONGLY_DONE, 2)], SATISFACTORY, small_repertoire(), budget)
        assert decision.kind == SUBSTITUTE
        assert decision.detail["alternate"] == "quarantine-file"

    def test_substitution_already_used_requests_replan(self):
        plan = make_plan(delete_step())
        budget = IncidentBudget.for_plan(1)
        decision = adjust(
            plan, [(0, WRONGLY_DONE, 2)], SATISFACTORY, small_repertoire(), budget, substituted={0}
        )
        assert decision.kind == REPLAN

    def test_all_budgets_exhausted_escalates(self):
        plan = make_plan(delete_step())
        budget = IncidentBudget(actuations_remaining=0, replans_remaining=0)
        decision = adjust(plan, [(0, WRONGLY_DONE, 2)], SATISFACTORY, small_repertoire(), budget)
        assert decision.kind == ESCALATE

    def test_effects_trigger_enters_at_replan(self):
        plan = make_plan(delete_step())
        budget = IncidentBudget.for_plan(1)
        decision = adjust(plan, [], UNSATISFACTORY, small_repertoire(), budget)
        assert decision.kind == REPLAN
        assert decision.trigger == "effects"

    def test_nothing_flagged_is_none(self):
        plan = make_plan(delete_step())
        budget = IncidentBudget.for_plan(1)
        decision = adjust(plan, [(0, DONE, 1)], SATISFACTORY, small_repertoire(), budget)
        assert decision.kind == "none"


class TestLadderProperties:
    def run_faulty(self, seed: int, fail_prob: float = 0.5) -> PlanExecution:
        rng = random.Random(seed)
        plan = make_plan(
            ActionInstance("snapshot-file", "h1", {"path": "/a"}),
            ActionInstance("delete-file", "h1", {"path": "/a"}),
        )
        budget = IncidentBudget.for_plan(len(plan.steps))
        machine = PlanExecution(plan, small_repertoire(), budget)
        while True:
            action = machine.next_action()
            if action is None:
                break
            status = WRONGLY_DONE if rng.random() < fail_prob else DONE
            machine.record_result(ActuationResult(status, deltas={"exists": -1} if status == DONE else {}))
        if machine.pending_request is None:
            machine.close_with_effects(SATISFACTORY)
        return machine

    def test_no_silent_failures_across_seeds(self):
        for seed in range(200):
            machine = self.run_faulty(seed)
            non_done = sum(1 for s in machine.report.steps if s.status != DONE)
            assert len(machine.report.adjustments) >= min(non_done, 1) * (1 if non_done else 0)
            if non_done:
                assert machine.report.adjustments, f"seed {seed}: failures without adjustments"

    def test_ladder_never_moves_backwards_per_step(self):
        order = {RETRY: 0, SUBSTITUTE: 1, REPLAN: 2, ESCALATE: 3}
        for seed in range(200):
            machine = self.run_faulty(seed)
            floors: dict = {}
            for adj in machine.report.adjustments:
                if adj.kind == "none":
                    continue
                rank = order[adj.kind]
                assert rank >= floors.get(adj.trigger, 0), f"seed {seed} regressed"
                floors[adj.trigger] = rank

    def test_actuations_never_exceed_budget_bound(self):
        for seed in range(200):
            machine = self.run_faulty(seed, fail_prob=0.8)
            bound = 2 * (1 + 1) * (2 + 1)  # steps x (R+1) x (P+1)
            assert len(machine.report.steps) <= bound
