"""Peer discovery, negotiation protocol, warnings."""
from __future__ import annotations

from sentinelsim.collab import (
    Agreement,
    Delegation,
    SelfExecute,
    apply_warning,
    assign_steps,
    capability_scores,
    negotiate,
)
from sentinelsim.config import load_config
from sentinelsim.harness import run_scenario
from sentinelsim.planning import ProposedResponsePlan
from sentinelsim.scenarios import implant_beacon_config, two_agent_config
from sentinelsim.world import ActionInstance


def proposal(steps: list[tuple[str, str]], score: float) -> ProposedResponsePlan:
    return ProposedResponsePlan(
        steps=tuple(ActionInstance(t, host, {"path": "/x"}) for t, host in steps),
        score=score,
        addresses="unexpected-file",
    )


def const_caps(values: list[float]):
    return lambda steps: tuple(values[: len(steps)] + [0.0] * (len(steps) - len(values)))


class TestDiscovery:
    def test_lone_agent_has_no_peers(self):
        config = implant_beacon_config(seed=3)
        result = run_scenario(load_config(config))
        hellos = [e for e in result.events if e["kind"] == "message-sent"]
        assert hellos == []  # broadcast to nobody sends nothing

    def test_three_fully_linked_agents_find_each_other(self):
        # 3 opening HELLOs and 6 replies; every agent ends with 2 peers.
        config = two_agent_config(seed=3)
        config["agents"].append({"id": "agent-3", "host": "h2", "role": "defender"})
        config["world"]["hosts"][1]["actuators"] = ["isolate-host"]
        config["adversary"] = []
        config["tick_limit"] = 12
        result = run_scenario(load_config(config))
        hello_msgs = [
            e["payload"]
            for e in result.events
            if e["kind"] == "message-sent" and e["payload"]["kind"] == "HELLO"
        ]
        # Discovery refreshes every interval; count only the first wave.
        first_wave = [m for m in hello_msgs if m["msg_id"].endswith("/m1")]
        assert len(first_wave) == 3
        replies = [m for m in hello_msgs if not m["msg_id"].endswith("/m1")]
        assert len(replies) >= 6

    def test_partitioned_agents_do_not_discover(self):
        config = two_agent_config(seed=3)
        config["world"]["links"] = [["h1", "h2"]]  # h3 unreachable
        config["agents"].append({"id": "agent-3", "host": "h2", "role": "defender"})
        config["adversary"] = []
        config["tick_limit"] = 12
        result = run_scenario(load_config(config))
        dropped = [e for e in result.events if e["kind"] == "message-dropped"]
        assert dropped, "messages toward the partitioned host must drop"
        delivered_to = {e["payload"]["to"] for e in result.events if e["kind"] == "message-delivered"}
        assert "agent-2" not in delivered_to  # agent-2 sits on unreachable h3


class TestNegotiationProtocol:
    def test_single_agent_self_assigns_in_round_one(self):
        outcomes, rounds = negotiate(
            "i1",
            {"a1": proposal([("delete-file", "h1")], 0.5)},
            {"a1": const_caps([1.0])},
        )
        assert rounds == 0
        outcome = outcomes["a1"]
        assert isinstance(outcome, Agreement)
        assert outcome.assignment == {0: "a1"}

    def test_capability_forced_split(self):
        # Two steps, each actuatable by exactly one agent.
        steps = [("delete-file", "h1"), ("kill-process", "h2")]
        plans = {
            "a1": proposal(steps, 0.9),
            "a2": proposal(steps, 0.1),
        }
        caps = {
            "a1": const_caps([1.0, 0.0]),
            "a2": const_caps([0.0, 1.0]),
        }
        outcomes, rounds = negotiate("i1", plans, caps)
        assert rounds <= 3
        for outcome in outcomes.values():
            assert isinstance(outcome, Agreement)
            assert outcome.assignment == {0: "a1", 1: "a2"}

    def test_equal_capabilities_go_to_lowest_agent_id(self):
        steps = [("delete-file", "h1"), ("delete-file", "h1")]
        plans = {a: proposal(steps, 0.5) for a in ("a1", "a2", "a3")}
        caps = {a: const_caps([1.0, 1.0]) for a in plans}
        outcomes, _ = negotiate("i1", plans, caps)
        for outcome in outcomes.values():
            assert outcome.assignment == {0: "a1", 1: "a1"}

    def test_all_participants_hold_same_plan_hash(self):
        plans = {
            "a1": proposal([("delete-file", "h1")], 0.9),
            "a2": proposal([("quarantine-file", "h2")], 0.4),
            "a3": proposal([("delete-file", "h3")], 0.9),
        }
        caps = {a: const_caps([1.0]) for a in plans}
        outcomes, rounds = negotiate("i1", plans, caps)
        hashes = {o.plan_hash for o in outcomes.values()}
        assert len(hashes) == 1
        assert rounds <= 3

    def test_divergent_views_delegate_to_c2(self):
        plans = {
            "a1": proposal([("delete-file", "h1")], 0.9),
            "a2": proposal([("quarantine-file", "h2")], 0.8),
        }
        caps = {a: const_caps([1.0]) for a in plans}
        # a1's proposal never reaches a2, so the two compute different winners.
        outcomes, rounds = negotiate(
            "i1", plans, caps, c2_id="c2", lossy_pairs=frozenset([("a1", "a2")])
        )
        assert rounds <= 3
        assert any(isinstance(o, Delegation) for o in outcomes.values())

    def test_divergent_views_without_c2_self_execute(self):
        plans = {
            "a1": proposal([("delete-file", "h1")], 0.9),
            "a2": proposal([("quarantine-file", "h2")], 0.8),
        }
        caps = {a: const_caps([1.0]) for a in plans}
        outcomes, _ = negotiate("i1", plans, caps, lossy_pairs=frozenset([("a1", "a2")]))
        assert any(isinstance(o, SelfExecute) for o in outcomes.values())

    def test_zero_capability_step_falls_back_to_lowest_id(self):
        assignment = assign_steps(
            [{"template": "x", "target": "h9"}],
            {"a1": (0.0,), "a2": (0.0,)},
        )
        assert assignment == {0: "a1"}

    def test_capability_scores_require_actuator_and_reachability(self):
        steps = [{"template": "delete-file", "target": "h2"}]
        scores = capability_scores(
            steps,
            agent_host="h1",
            actuators_by_host={"h2": frozenset(["delete-file"])},
            reachable=lambda a, b: True,
            success_rate=lambda t: 0.5,
        )
        assert scores == (1.05,)
        unreachable = capability_scores(
            steps,
            agent_host="h1",
            actuators_by_host={"h2": frozenset(["delete-file"])},
            reachable=lambda a, b: False,
        )
        assert unreachable == (0.0,)


class TestReassignment:
    def build_agreed_sessions(self):
        from sentinelsim.collab import NegotiationState

        steps = [("delete-file", "h1"), ("quarantine-file", "h1")]
        plans = {"a1": proposal(steps, 0.9), "a2": proposal(steps, 0.2)}
        caps = {"a1": const_caps([1.0, 0.4]), "a2": const_caps([0.9, 0.9])}
        sessions = {
            a: NegotiationState(
                "i1", a, [b for b in plans if b != a], plans[a], caps[a]
            )
            for a in plans
        }
        outbox = {a: sessions[a].opening_messages() for a in sessions}
        for _ in range(3):
            for sender, msgs in outbox.items():
                for msg in msgs:
                    for receiver in sessions:
                        if receiver != sender:
                            sessions[receiver].receive(msg["kind"], sender, msg)
            outbox = {a: sessions[a].end_round() for a in sessions}
        return sessions

    def test_killed_assignee_steps_move_to_survivors(self):
        sessions = self.build_agreed_sessions()
        before = sessions["a2"].outcome
        assert isinstance(before, Agreement)
        assert before.assignment == {0: "a1", 1: "a2"}
        after = sessions["a2"].reassign_after_loss("a1", executed=frozenset())
        assert after is not None
        assert after.assignment[0] == "a2"
        assert after.assignment[1] == "a2"

    def test_executed_steps_are_not_reassigned(self):
        sessions = self.build_agreed_sessions()
        after = sessions["a2"].reassign_after_loss("a1", executed=frozenset([0]))
        assert after.assignment[0] == "a1"  # already executed, left in place


class TestC2Consolidation:
    def test_c2_assigns_winner_and_broadcasts(self):
        from sentinelsim.agent import C2Agent, TurnServices
        from sentinelsim.percept import WorldView

        sent: list[tuple[str, object, dict]] = []
        inbox = [
            {
                "kind": "C2-DELEGATE",
                "sender": "agent-1",
                "msg_id": "agent-1/m9",
                "payload": {
                    "incident": "agent-1/i1",
                    "proposals": {
                        "agent-1": {
                            "agent": "agent-1",
                            "plan_hash": "aaaa",
                            "steps": [{"template": "delete-file", "target": "h1", "params": {}}],
                            "score": 0.9,
                        },
                        "agent-2": {
                            "agent": "agent-2",
                            "plan_hash": "bbbb",
                            "steps": [{"template": "quarantine-file", "target": "h2", "params": {}}],
                            "score": 0.4,
                        },
                    },
                    "capabilities": {"agent-1": [1.0], "agent-2": [0.0]},
                },
            }
        ]
        services = TurnServices(
            tick=5,
            view=WorldView(tick=5, host=None),
            compromised=False,
            actuate=lambda a: None,
            send=lambda kind, recipients, payload: sent.append((kind, recipients, payload)) or payload,
            emit=lambda kind, payload: None,
            escalate=None,
            inbox=lambda: inbox,
            actuators_by_host={},
            reachable=lambda a, b: True,
            agent_ids=("agent-1", "agent-2", "c2"),
            c2_id="c2",
        )
        C2Agent("c2", "h2").take_turn(services)
        assert len(sent) == 1
        kind, recipients, payload = sent[0]
        assert kind == "C2-ASSIGN"
        assert payload["plan_hash"] == "aaaa"  # highest score wins
        assert payload["assignment"] == {"0": "agent-1"}

    def test_cohort_scenario_with_c2_runs_deterministically(self):
        r1 = run_scenario(load_config(two_agent_config(seed=4, with_c2=True)))
        r2 = run_scenario(load_config(two_agent_config(seed=4, with_c2=True)))
        assert r1.lines == r2.lines
        assert r1.metrics.remediated
        hello_senders = {
            e["payload"]["sender"]
            for e in r1.events
            if e["kind"] == "message-sent" and e["payload"]["kind"] == "HELLO"
        }
        assert "c2-node" in hello_senders  # the command node answers discovery


class TestWarnings:
    def test_duplicate_warning_transitions_once(self):
        seen: set[str] = set()
        msg = {"msg_id": "a2/m7", "kind": "WARNING"}
        assert apply_warning(seen, msg) is True
        assert apply_warning(seen, msg) is False

    def test_kill_raises_both_peer_alerts_after_delivery(self):
        from sentinelsim.scenarios import kill_agent_config

        config = kill_agent_config(seed=3)
        # A third defender so the dying agent's warning reaches two peers.
        config["agents"].append({"id": "agent-3", "host": "h2", "role": "defender"})
        result = run_scenario(load_config(config))
        killed = next(e for e in result.events if e["kind"] == "agent-killed")
        alerts = [e for e in result.events if e["kind"] == "alert-raised"]
        assert {a["payload"]["agent"] for a in alerts} == {"agent-1", "agent-3"}
        assert all(a["tick"] >= killed["tick"] + 1 for a in alerts)
        warning = next(
            e
            for e in result.events
            if e["kind"] == "message-sent" and e["payload"]["kind"] == "WARNING"
        )
        assert warning["payload"]["sender"] == killed["payload"]["agent"]
        # Dedup rule: one transition per receiver even with later warnings.
        assert len(alerts) == 2
