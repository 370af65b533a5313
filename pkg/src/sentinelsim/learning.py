"""Learning and knowledge improvement.

Experience is an append-only log of (t, a, e, R) records with NULL slots as
first-class values. Rewards close episodes; episodes feed a tabular world
dynamics model (state class x action -> next state class counts, plus a
feasible action map) and evidence-weighted knowledge base merges. The whole
pipeline is pure over the log so a replay from a persisted log reproduces
the knowledge base digest exactly.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Any, Iterable, Optional

from .percept import WorldStatePattern
from .planning import GoalSet
from .world import DONE

logger = logging.getLogger(__name__)


class ClockViolation(ValueError):
    """A record's tick precedes the tail of the log."""


@dataclass(frozen=True)
class ExperienceRecord:
    """One (t, a, e, R) tuple; a and e may independently be NULL."""

    t: int
    a: Optional[dict[str, Any]] = None
    e: Optional[dict[str, Any]] = None
    r: Optional[float] = None

    def __post_init__(self) -> None:
        if self.a is None and self.e is None and self.r is None:
            raise ValueError("experience record needs an action, a percept or a reward")

    def to_json(self) -> dict[str, Any]:
        return {"t": self.t, "a": self.a, "e": self.e, "r": self.r}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ExperienceRecord":
        return cls(t=int(data["t"]), a=data.get("a"), e=data.get("e"), r=data.get("r"))


@dataclass(frozen=True)
class Episode:
    """A reward-terminated chunk of the log; keeps its source records so the
    original log is reconstructible by concatenation."""

    records: tuple[ExperienceRecord, ...]
    reward: float

    @property
    def pairs(self) -> tuple[tuple[Optional[dict[str, Any]], Optional[dict[str, Any]]], ...]:
        return tuple((rec.a, rec.e) for rec in self.records)


class ExperienceLog:
    """Append-only, time-ordered record store."""

    def __init__(self) -> None:
        self.records: list[ExperienceRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def last_tick(self) -> Optional[int]:
        return self.records[-1].t if self.records else None

    def record(self, rec: ExperienceRecord) -> "ExperienceLog":
        last = self.last_tick()
        if last is not None and rec.t < last:
            raise ClockViolation(f"record tick {rec.t} precedes log tail {last}")
        self.records.append(rec)
        return self

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "ExperienceLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                log.record(ExperienceRecord.from_json(json.loads(line)))
        return log


def segment_episodes(
    records: Iterable[ExperienceRecord],
) -> tuple[list[Episode], list[ExperienceRecord]]:
    """Greedy left-to-right chunking: every reward closes the open chunk.

    Records after the last reward form the open tail. Concatenating the
    episodes' records followed by the tail reconstructs the input exactly.
    """
    episodes: list[Episode] = []
    current: list[ExperienceRecord] = []
    for rec in records:
        current.append(rec)
        if rec.r is not None:
            episodes.append(Episode(records=tuple(current), reward=rec.r))
            current = []
    return episodes, current


def compute_reward(
    goals: GoalSet,
    achieved: dict[str, float],
    baseline: dict[str, float],
    total_cost: float,
) -> float:
    """Reward as weighted goal movement from the incident-start baseline,
    minus weighted cost, clamped to [-1, 1]."""
    total = sum(g.weight for g in goals.goals)
    if goals.goals and abs(total - 1.0) > 1e-9:
        raise ValueError("goal weights must sum to 1")
    moved = sum(
        g.weight * (achieved.get(g.goal_id, 0.0) - baseline.get(g.goal_id, 0.0)) for g in goals.goals
    )
    value = moved - goals.cost_weight * total_cost
    return max(-1.0, min(1.0, value))


class WorldDynamicsModel:
    """Tabular (state class, action) -> next state class estimator.

    Estimates are count-normalized frequencies; a query with zero evidence
    returns None rather than a fabricated distribution. The feasible map
    holds only actions observed with status done in that state class.
    """

    def __init__(self) -> None:
        self.counts: dict[str, dict[str, dict[str, int]]] = {}
        self.feasible: dict[str, set[str]] = {}

    def update(self, state: str, action: str, next_state: str, *, status: str = DONE) -> None:
        row = self.counts.setdefault(state, {}).setdefault(action, {})
        row[next_state] = row.get(next_state, 0) + 1
        if status == DONE:
            self.feasible.setdefault(state, set()).add(action)

    def evidence(self, state: str, action: str) -> int:
        return sum(self.counts.get(state, {}).get(action, {}).values())

    def distribution(self, state: str, action: str) -> Optional[dict[str, float]]:
        row = self.counts.get(state, {}).get(action, {})
        total = sum(row.values())
        if total == 0:
            return None
        return {s: c / total for s, c in sorted(row.items())}

    def resolve_probability(self, state: str, action: str, pattern_id: str) -> float:
        """Probability the next state class no longer contains pattern_id."""
        dist = self.distribution(state, action)
        if dist is None:
            return 0.0
        return sum(p for nxt, p in dist.items() if pattern_id not in nxt.split("+"))

    def feasible_actions(self, state: str) -> set[str]:
        return set(self.feasible.get(state, set()))

    def merge_row(self, state: str, action: str, new_counts: dict[str, int], feasible: bool) -> None:
        row = self.counts.setdefault(state, {}).setdefault(action, {})
        for nxt, c in new_counts.items():
            row[nxt] = row.get(nxt, 0) + int(c)
        if feasible:
            self.feasible.setdefault(state, set()).add(action)

    def to_json(self) -> dict[str, Any]:
        return {
            "counts": {
                s: {a: dict(sorted(row.items())) for a, row in sorted(actions.items())}
                for s, actions in sorted(self.counts.items())
            },
            "feasible": {s: sorted(actions) for s, actions in sorted(self.feasible.items())},
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "WorldDynamicsModel":
        model = cls()
        for s, actions in data.get("counts", {}).items():
            for a, row in actions.items():
                for nxt, c in row.items():
                    model.counts.setdefault(s, {}).setdefault(a, {})[nxt] = int(c)
        for s, actions in data.get("feasible", {}).items():
            model.feasible[s] = set(actions)
        return model


def learn_dynamics(model: WorldDynamicsModel, episodes: Iterable[Episode]) -> WorldDynamicsModel:
    """Fold episode transitions into the model.

    An action record carries its pre-action state class; the transition
    lands on the state class of the next percept record that follows it.
    """
    for episode in episodes:
        pending: Optional[dict[str, Any]] = None
        for rec in episode.records:
            if rec.a is not None:
                pending = rec.a
            if rec.e is not None and pending is not None:
                state = pending.get("state_class")
                nxt = rec.e.get("state_class")
                if state is not None and nxt is not None:
                    model.update(state, pending["name"], nxt, status=pending.get("status", DONE))
                pending = None
    return model


class KnowledgeBase:
    """Patterns, per-template success statistics and the dynamics model."""

    def __init__(
        self,
        patterns: Optional[dict[str, WorldStatePattern]] = None,
        template_stats: Optional[dict[str, dict[str, float]]] = None,
        dynamics: Optional[WorldDynamicsModel] = None,
    ) -> None:
        self.patterns = patterns or {}
        self.template_stats = template_stats or {}
        self.dynamics = dynamics or WorldDynamicsModel()

    def success_rate(self, template: str) -> float:
        stat = self.template_stats.get(template)
        if not stat or stat.get("evidence", 0) <= 0:
            return 0.0
        return float(stat["success"])

    def to_json(self) -> dict[str, Any]:
        return {
            "patterns": [self.patterns[k].to_json() for k in sorted(self.patterns)],
            "template_stats": {
                k: {"success": v["success"], "evidence": int(v["evidence"])}
                for k, v in sorted(self.template_stats.items())
            },
            "dynamics": self.dynamics.to_json(),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path: str) -> None:
        doc = {"kb": self.to_json()}
        doc["digest"] = self.digest()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path: str) -> "KnowledgeBase":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_json(doc["kb"])

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "KnowledgeBase":
        patterns = {p["id"]: WorldStatePattern.from_json(p) for p in data.get("patterns", [])}
        stats = {
            k: {"success": float(v["success"]), "evidence": int(v["evidence"])}
            for k, v in data.get("template_stats", {}).items()
        }
        dynamics = WorldDynamicsModel.from_json(data.get("dynamics", {}))
        return cls(patterns=patterns, template_stats=stats, dynamics=dynamics)


def improve_knowledge(kb: KnowledgeBase, proposals: Iterable[dict[str, Any]]) -> KnowledgeBase:
    """Evidence-weighted merge of learning proposals into the knowledge base.

    merged_value = (old*old_evidence + new*new_evidence) / (old+new evidence);
    evidence counts are summed, unseen entries inserted verbatim, and a
    schema-incompatible proposal is rejected and logged without touching the
    knowledge base.
    """
    for proposal in proposals:
        try:
            kind = proposal["kind"]
            if kind == "pattern":
                incoming = WorldStatePattern.from_json(proposal["pattern"])
                new_evidence = int(proposal.get("evidence", incoming.evidence_count))
                existing = kb.patterns.get(incoming.pattern_id)
                if existing is None:
                    kb.patterns[incoming.pattern_id] = WorldStatePattern(
                        pattern_id=incoming.pattern_id,
                        predicates=incoming.predicates,
                        label=incoming.label,
                        risk=incoming.risk,
                        evidence_count=new_evidence,
                    )
                else:
                    if existing.label != incoming.label:
                        raise ValueError("label mismatch")
                    total = existing.evidence_count + new_evidence
                    if total > 0:
                        existing.risk = (
                            existing.risk * existing.evidence_count + incoming.risk * new_evidence
                        ) / total
                    existing.evidence_count = total
            elif kind == "template-stat":
                name = proposal["name"]
                success = float(proposal["success"])
                new_evidence = int(proposal["evidence"])
                stat = kb.template_stats.get(name)
                if stat is None:
                    kb.template_stats[name] = {"success": success, "evidence": new_evidence}
                else:
                    total = stat["evidence"] + new_evidence
                    if total > 0:
                        stat["success"] = (stat["success"] * stat["evidence"] + success * new_evidence) / total
                    stat["evidence"] = total
            elif kind == "dynamics":
                kb.dynamics.merge_row(
                    proposal["state"],
                    proposal["action"],
                    {k: int(v) for k, v in proposal["counts"].items()},
                    bool(proposal.get("feasible", False)),
                )
            else:
                raise ValueError(f"unknown proposal kind {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            logger.warning("rejecting knowledge proposal %r: %s", proposal, exc)
    return kb


def derive_proposals(episodes: Iterable[Episode]) -> list[dict[str, Any]]:
    """Turn closed episodes into knowledge proposals, purely.

    Emits dynamics rows for observed transitions and per-template success
    statistics. Replay runs this same function over the persisted log to
    reproduce the knowledge base.
    """
    proposals: list[dict[str, Any]] = []
    dynamics = WorldDynamicsModel()
    template_counts: dict[str, list[int]] = {}
    episodes = list(episodes)
    learn_dynamics(dynamics, episodes)
    for episode in episodes:
        for rec in episode.records:
            if rec.a is not None and "name" in rec.a:
                counts = template_counts.setdefault(rec.a["name"], [0, 0])
                counts[1] += 1
                if rec.a.get("status") == DONE:
                    counts[0] += 1
    for state in sorted(dynamics.counts):
        for action in sorted(dynamics.counts[state]):
            proposals.append(
                {
                    "kind": "dynamics",
                    "state": state,
                    "action": action,
                    "counts": dict(sorted(dynamics.counts[state][action].items())),
                    "feasible": action in dynamics.feasible.get(state, set()),
                }
            )
    for name in sorted(template_counts):
        done, attempts = template_counts[name]
        proposals.append(
            {"kind": "template-stat", "name": name, "success": done / attempts, "evidence": attempts}
        )
    return proposals
