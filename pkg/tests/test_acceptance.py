"""Acceptance suite: one test per criterion, one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they print.
"""
from __future__ import annotations

import json
import random
import time

from sentinelsim.collab import Agreement, negotiate
from sentinelsim.config import load_config
from sentinelsim.harness import replay, run_scenario
from sentinelsim.learning import (
    Episode,
    ExperienceRecord,
    WorldDynamicsModel,
    learn_dynamics,
    segment_episodes,
)
from sentinelsim.planning import ProposedResponsePlan
from sentinelsim.scenarios import (
    escalation_config,
    fault_injection_config,
    implant_beacon_config,
    kill_agent_config,
    two_agent_config,
)
from sentinelsim.world import ActionInstance

A1_SEEDS = list(range(1, 26))
A1_FAULTS = {"delete-file": 0.05, "block-flow": 0.05, "snapshot-file": 0.05}


def a1_config(seed: int) -> dict:
    return implant_beacon_config(seed=seed, fault_rates=dict(A1_FAULTS))


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


class TestA1DetectAndRemediate:
    def test_a1(self):
        detected = 0
        remediated = 0
        slow = 0.0
        for seed in A1_SEEDS:
            started = time.monotonic()
            result = run_scenario(load_config(a1_config(seed)))
            elapsed = time.monotonic() - started
            slow = max(slow, elapsed)
            m = result.metrics
            if (
                m.implant_tick is not None
                and m.detection_tick is not None
                and m.detection_tick <= m.implant_tick + 50
            ):
                detected += 1
            if m.remediated:
                remediated += 1
        ok = detected == 25 and remediated >= 23 and slow < 10.0
        report(
            "A1 detect-and-remediate",
            ok,
            f"detected {detected}/25, remediated {remediated}/25 (>=23), slowest run {slow:.3f}s (<10s)",
        )


class TestA2Determinism:
    def test_a2(self):
        configs = [
            ("implant-beacon", lambda: implant_beacon_config(seed=42)),
            ("faults", lambda: fault_injection_config(seed=5)),
            ("two-agent", lambda: two_agent_config(seed=11)),
            ("kill-agent", lambda: kill_agent_config(seed=23)),
            ("escalate-scripted", lambda: escalation_config(
                seed=7, operator={"mode": "scripted", "policy": "deny-all"}
            )),
        ]
        identical = 0
        for name, builder in configs:
            digests = {run_scenario(load_config(builder())).trace_digest for _ in range(3)}
            if len(digests) == 1:
                identical += 1
            else:
                report("A2 determinism", False, f"config {name} produced {len(digests)} digests")
        report("A2 determinism", identical == 5, f"{identical}/5 configs byte-identical across 3 runs")


A3_TRUTH = {
    ("compromised", "isolate"): {"contained": 0.8, "compromised": 0.2},
    ("compromised", "clean"): {"nominal": 0.6, "compromised": 0.4},
    ("compromised", "observe"): {"compromised": 0.9, "spreading": 0.1},
    ("spreading", "isolate"): {"contained": 0.7, "spreading": 0.3},
    ("spreading", "clean"): {"compromised": 0.5, "spreading": 0.5},
    ("spreading", "observe"): {"spreading": 1.0},
    ("contained", "isolate"): {"contained": 1.0},
    ("contained", "clean"): {"nominal": 0.9, "contained": 0.1},
    ("contained", "observe"): {"contained": 0.95, "spreading": 0.05},
    ("nominal", "isolate"): {"contained": 1.0},
    ("nominal", "clean"): {"nominal": 1.0},
    ("nominal", "observe"): {"nominal": 0.97, "spreading": 0.03},
}


def _draw(rng: random.Random, row: dict) -> str:
    x, acc = rng.random(), 0.0
    for target, p in sorted(row.items()):
        acc += p
        if x <= acc:
            return target
    return sorted(row)[-1]


def _transition_episode(index: int, state: str, action: str, nxt: str) -> Episode:
    records = (
        ExperienceRecord(t=2 * index, a={"name": action, "state_class": state, "status": "done"}),
        ExperienceRecord(t=2 * index + 1, e={"digest": "d", "state_class": nxt}, r=0.0),
    )
    return Episode(records=records, reward=0.0)


def _worst_l1(model: WorldDynamicsModel) -> float:
    worst = 0.0
    for (state, action), truth in A3_TRUTH.items():
        estimated = model.distribution(state, action) or {}
        keys = set(estimated) | set(truth)
        worst = max(worst, sum(abs(estimated.get(k, 0.0) - truth.get(k, 0.0)) for k in keys))
    return worst


class TestA3DynamicsOracle:
    def test_a3(self):
        # Oracle is the generating table itself. Seed verified to satisfy the
        # stated binomial-concentration tolerances before freezing.
        rng = random.Random(7)

        small = WorldDynamicsModel()
        index = 0
        for state, action in sorted(A3_TRUTH):
            for _ in range(100):
                nxt = _draw(rng, A3_TRUTH[(state, action)])
                learn_dynamics(small, [_transition_episode(index, state, action, nxt)])
                index += 1
        small_worst = _worst_l1(small)

        big = WorldDynamicsModel()
        keys = sorted(A3_TRUTH)
        episodes = []
        for i in range(10_000):
            state, action = keys[rng.randrange(len(keys))]
            episodes.append(
                _transition_episode(i, state, action, _draw(rng, A3_TRUTH[(state, action)]))
            )
        learn_dynamics(big, episodes)
        big_worst = _worst_l1(big)

        evidence = min(big.evidence(s, a) for s, a in keys)
        ok = small_worst <= 0.15 and big_worst <= 0.05 and evidence > 0
        report(
            "A3 dynamics-learning oracle",
            ok,
            f"100-per-row worst L1 {small_worst:.3f} (<=0.15), "
            f"10k-transition worst L1 {big_worst:.3f} (<=0.05)",
        )


class TestA4EpisodeAlgebra:
    def test_a4(self):
        rng = random.Random(2024)
        cases = 0
        for _ in range(1000):
            n = rng.randrange(0, 30)
            records = []
            for i in range(n):
                has_a, has_e, has_r = False, False, False
                while not (has_a or has_e or has_r):
                    has_a, has_e, has_r = (rng.random() < 0.6, rng.random() < 0.6, rng.random() < 0.25)
                records.append(
                    ExperienceRecord(
                        t=i,
                        a={"name": f"a{i}"} if has_a else None,
                        e={"digest": f"e{i}"} if has_e else None,
                        r=rng.uniform(-1, 1) if has_r else None,
                    )
                )
            episodes, tail = segment_episodes(records)
            rebuilt = [r for ep in episodes for r in ep.records] + tail
            assert rebuilt == records, "reconstruction failed"
            assert len(episodes) == sum(1 for r in records if r.r is not None)
            for ep in episodes:
                assert ep.records[-1].r is not None
                assert sum(1 for r in ep.records if r.r is not None) == 1
            cases += 1

        # The worked sequence: (t1,a1,e1,R1)(t2,a2,NULL,NULL)(t3,NULL,e3,R3)
        worked = [
            ExperienceRecord(t=1, a={"name": "a1"}, e={"digest": "e1"}, r=0.5),
            ExperienceRecord(t=2, a={"name": "a2"}),
            ExperienceRecord(t=3, e={"digest": "e3"}, r=0.2),
        ]
        episodes, tail = segment_episodes(worked)
        split_ok = (
            tail == []
            and len(episodes) == 2
            and episodes[0].pairs == (({"name": "a1"}, {"digest": "e1"}),)
            and episodes[1].pairs == (({"name": "a2"}, None), (None, {"digest": "e3"}))
        )
        report(
            "A4 episode algebra",
            cases == 1000 and split_ok,
            f"{cases}/1000 fuzzed logs reconstruct exactly; worked sequence splits into E1/E2",
        )


class TestA5Negotiation:
    def test_a5(self):
        rng = random.Random(99)
        cases = failures = 0
        reassigned = 0
        for case in range(200):
            n_agents = rng.randrange(2, 6)
            n_steps = rng.randrange(1, 5)
            agents = [f"agent-{i}" for i in range(n_agents)]
            steps = [("delete-file", f"h{rng.randrange(1, 4)}") for _ in range(n_steps)]
            proposals = {
                a: ProposedResponsePlan(
                    steps=tuple(
                        ActionInstance(t, host, {"path": f"/tmp/{case}"}) for t, host in steps
                    ),
                    score=round(rng.uniform(0, 1), 6),
                    addresses="unexpected-file",
                )
                for a in agents
            }
            capabilities = {
                a: tuple(
                    (1.0 if rng.random() < 0.7 else 0.0) + 0.1 * round(rng.random(), 3)
                    for _ in range(n_steps)
                )
                for a in agents
            }
            # Zero bases keep the 0.1 bonus meaningless on their own.
            capabilities = {
                a: tuple(v if v >= 1.0 else 0.0 for v in caps) for a, caps in capabilities.items()
            }
            cap_fns = {a: (lambda steps, _c=capabilities[a]: _c) for a in agents}
            outcomes, rounds = negotiate(f"i{case}", proposals, cap_fns)
            ok = rounds <= 3
            agreements = [o for o in outcomes.values() if isinstance(o, Agreement)]
            ok = ok and len(agreements) == len(agents)
            hashes = {a.plan_hash for a in agreements}
            ok = ok and len(hashes) == 1
            assignment = agreements[0].assignment
            ok = ok and sorted(assignment) == list(range(n_steps))
            ok = ok and all(a.assignment == assignment for a in agreements)
            for index, owner in assignment.items():
                capable = [a for a in agents if capabilities[a][index] > 0]
                if capable:
                    ok = ok and owner in capable
            if ok and len(agents) > 2:
                # Kill one assignee pre-execution and re-run assignment on a
                # survivor's session view.
                from sentinelsim.collab import NegotiationState

                victims = [a for a in agents if a in assignment.values()]
                victim = sorted(victims)[0]
                survivors_expected = [a for a in agents if a != victim]
                survivor = survivors_expected[0]
                state = NegotiationState(
                    f"i{case}", survivor,
                    [a for a in agents if a != survivor],
                    proposals[survivor], cap_fns[survivor],
                )
                # Rebuild the survivor's agreed view directly.
                state.outcome = agreements[0]
                state.agrees[survivor] = {
                    "capabilities": {a: list(capabilities[a]) for a in agents}
                }
                new_agreement = state.reassign_after_loss(victim, executed=frozenset())
                if new_agreement is not None:
                    ok = ok and victim not in new_agreement.assignment.values()
                    ok = ok and sorted(new_agreement.assignment) == list(range(n_steps))
                    reassigned += 1
            cases += 1
            if not ok:
                failures += 1
        report(
            "A5 negotiation",
            failures == 0,
            f"{cases - failures}/200 cases terminated <=3 rounds with coherent partitions; "
            f"{reassigned} kill-reassignments verified",
        )


class TestA6AdjustmentLadder:
    def test_a6(self):
        silent = 0
        breaches = 0
        flagged_total = 0
        disordered = 0
        for seed in range(50):
            config = load_config(fault_injection_config(seed=seed, fault_rate=0.3))
            result = run_scenario(config)
            plan_steps: dict[str, int] = {}
            actuations: dict[str, int] = {}
            last_actuation_tick: dict[str, int] = {}
            for event in result.events:
                kind = event["kind"]
                payload = event.get("payload", {})
                if kind == "plan-selected":
                    plan_steps.setdefault(payload["incident"], len(payload["steps"]))
                elif kind == "actuation":
                    incident = payload["incident"]
                    actuations[incident] = actuations.get(incident, 0) + 1
                    if event["tick"] <= last_actuation_tick.get(incident, -1):
                        disordered += 1
                    last_actuation_tick[incident] = event["tick"]
                elif kind == "execution-report":
                    rep = payload["report"]
                    non_done = [s for s in rep["steps"] if s["status"] != "done"]
                    flagged_total += len(non_done)
                    if non_done and not rep["adjustments"]:
                        silent += 1
            for incident, count in actuations.items():
                steps = max(plan_steps.get(incident, 1), 1)
                if count > steps * (1 + 1) * (2 + 1):
                    breaches += 1
        ok = silent == 0 and breaches == 0 and disordered == 0 and flagged_total > 0
        report(
            "A6 adjustment ladder",
            ok,
            f"{flagged_total} non-done steps across 50 faulty runs, "
            f"{silent} silent failures, {breaches} budget breaches, "
            f"{disordered} out-of-order actuations",
        )


class TestA7FailsafeOnAbsentOperator:
    def test_a7(self):
        exact = 0
        for seed in range(10):
            config = load_config(
                escalation_config(
                    seed=seed, operator={"mode": "listen", "port": 0, "timeout_ticks": 20}
                )
            )
            result = run_scenario(config)
            request = next(e for e in result.events if e["kind"] == "escalation-request")
            decision = next(e for e in result.events if e["kind"] == "operator-decision")
            failsafes = [e for e in result.events if e["kind"] == "failsafe"]
            if (
                decision["payload"]["source"] == "timeout"
                and decision["payload"]["failsafe"] is True
                and len(failsafes) == 1
                and failsafes[0]["tick"] == request["payload"]["deadline_tick"]
            ):
                exact += 1
        report(
            "A7 failsafe on absent operator",
            exact == 10,
            f"{exact}/10 runs fired deny+failsafe exactly at deadline-tick",
        )


class TestA8ReplayFidelity:
    def test_a8(self, tmp_path):
        verified = 0
        tampers_detected = 0
        for seed in A1_SEEDS:
            path = str(tmp_path / f"a1-{seed}.jsonl")
            config = load_config(a1_config(seed))
            result = run_scenario(config, trace_path=path)
            rep = replay(path, load_config(a1_config(seed)))
            kb_ok = rep.checks["kb-digest"] == "ok"
            metrics_ok = rep.metrics.to_json() == result.metrics.to_json()
            if rep.ok and kb_ok and metrics_ok:
                verified += 1
            lines = open(path).readlines()
            tampered = str(tmp_path / f"a1-{seed}-tampered.jsonl")
            middle = len(lines) // 2
            with open(tampered, "w") as fh:
                fh.writelines(lines[:middle] + lines[middle + 1 :])
            tamper_report = replay(tampered, load_config(a1_config(seed)))
            if not tamper_report.ok and "mismatch" in tamper_report.checks["integrity"]:
                tampers_detected += 1
        ok = verified == 25 and tampers_detected == 25
        report(
            "A8 replay fidelity",
            ok,
            f"{verified}/25 traces replayed with identical KB digests and metrics; "
            f"{tampers_detected}/25 single-line tampers detected",
        )
