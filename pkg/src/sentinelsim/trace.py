"""JSON Lines trace persistence: one event per line, trailing digest record.

Serialization is canonical (sorted keys, fixed separators) so identical runs
produce byte-identical files; the digest record covers every preceding line
and is what tamper detection checks.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Optional

from .world import SimEvent

DIGEST_KIND = "trace-digest"


def event_line(event: SimEvent) -> str:
    return json.dumps(event.to_json(), sort_keys=True, separators=(",", ":")) + "\n"


class TraceWriter:
    """Collects events in memory and optionally streams them to a file."""

    def __init__(self, path: Optional[str] = None) -> None:
        self.path = path
        self.lines: list[str] = []
        self.events: list[SimEvent] = []
        self._hasher = hashlib.sha256()
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def on_event(self, event: SimEvent) -> None:
        line = event_line(event)
        self.lines.append(line)
        self.events.append(event)
        self._hasher.update(line.encode())
        if self._fh:
            self._fh.write(line)

    def digest(self) -> str:
        return self._hasher.hexdigest()

    def finalize(self, tick: int, seq: int) -> str:
        digest = self.digest()
        closing = SimEvent(tick=tick, seq=seq, kind=DIGEST_KIND, payload={"sha256": digest})
        line = event_line(closing)
        self.lines.append(line)
        self.events.append(closing)
        if self._fh:
            self._fh.write(line)
            self._fh.close()
            self._fh = None
        return digest

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass
class TraceDocument:
    lines: list[str]
    events: list[dict[str, Any]]

    @property
    def digest_record(self) -> Optional[dict[str, Any]]:
        if self.events and self.events[-1]["kind"] == DIGEST_KIND:
            return self.events[-1]
        return None

    def body_events(self) -> list[dict[str, Any]]:
        if self.digest_record is not None:
            return self.events[:-1]
        return self.events

    def verify_digest(self) -> tuple[bool, str]:
        """Check the trailing digest record against the preceding lines."""
        record = self.digest_record
        if record is None:
            return (False, "missing trace-digest record")
        hasher = hashlib.sha256()
        for line in self.lines[:-1]:
            hasher.update(line.encode())
        actual = hasher.hexdigest()
        expected = record["payload"]["sha256"]
        if actual != expected:
            return (False, f"digest mismatch: recorded {expected[:12]}.., actual {actual[:12]}..")
        return (True, "")


def read_trace(path: str) -> TraceDocument:
    lines: list[str] = []
    events: list[dict[str, Any]] = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            lines.append(raw if raw.endswith("\n") else raw + "\n")
            events.append(json.loads(raw))
    return TraceDocument(lines=lines, events=events)


def parse_trace_text(text: str) -> TraceDocument:
    lines = [line + "\n" for line in text.splitlines() if line.strip()]
    return TraceDocument(lines=lines, events=[json.loads(line) for line in lines])
