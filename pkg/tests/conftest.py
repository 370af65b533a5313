"""Shared builders for world, pattern and repertoire fixtures."""
from __future__ import annotations

import pytest

from sentinelsim.percept import Predicate, ProblematicMatch, Subject, WorldStatePattern
from sentinelsim.planning import ActionTemplate, Goal, GoalSet, ParamSpec
from sentinelsim.world import Host, World


def make_world(seed: int = 1, hosts: int = 1, linked: bool = True) -> World:
    world = World(seed=seed)
    for i in range(hosts):
        world.add_host(
            Host(
                host_id=f"h{i+1}",
                actuators_available=frozenset(
                    ["delete-file", "quarantine-file", "snapshot-file", "kill-process", "block-flow", "isolate-host"]
                ),
            )
        )
    if linked:
        for i in range(hosts - 1):
            world.add_link(f"h{i+1}", f"h{i+2}")
    return world


def unexpected_file_pattern(risk: float = 0.6) -> WorldStatePattern:
    return WorldStatePattern(
        pattern_id="unexpected-file",
        predicates=(
            Predicate("category", "=", "file"),
            Predicate("known", "=", 0),
            Predicate("exists", "=", 1),
        ),
        label="problematic",
        risk=risk,
    )


def file_match(path: str = "/tmp/implant.bin", host: str = "h1", risk: float = 0.6) -> ProblematicMatch:
    pattern = unexpected_file_pattern(risk)
    return ProblematicMatch(
        pattern=pattern,
        subject=Subject("file", host, path),
        risk=risk,
        attrs={"category": "file", "known": 0.0, "exists": 1.0, "quarantined": 0.0, "snapshotted": 0.0},
    )


def delete_file_template(**overrides) -> ActionTemplate:
    base = dict(
        name="delete-file",
        applicability=frozenset(["unexpected-file"]),
        params=(ParamSpec("path", "string", "subject.path"),),
        expected_effects=(("exists", -1.0),),
        cost=0.2,
    )
    base.update(overrides)
    return ActionTemplate(**base)


def small_repertoire() -> dict[str, ActionTemplate]:
    return {
        "snapshot-file": ActionTemplate(
            name="snapshot-file",
            params=(ParamSpec("path", "string", "subject.path"),),
            cost=0.05,
        ),
        "delete-file": delete_file_template(
            prerequisites=("snapshot-file",), alternates=("quarantine-file",)
        ),
        "quarantine-file": ActionTemplate(
            name="quarantine-file",
            applicability=frozenset(["unexpected-file"]),
            params=(ParamSpec("path", "string", "subject.path"),),
            expected_effects=(("quarantined", 1.0),),
            cost=0.1,
        ),
    }


def simple_goals() -> GoalSet:
    return GoalSet(
        goals=(
            Goal("clean-files", "no-unknown-files", 0.5, 1),
            Goal("no-c2", "no-enemy-c2", 0.5, 2),
        ),
        cost_weight=0.1,
    )


@pytest.fixture
def world() -> World:
    return make_world()
