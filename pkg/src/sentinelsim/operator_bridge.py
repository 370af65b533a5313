"""The operator channel: scripted policies, a live socket endpoint, or absent.

The wire protocol is newline-delimited UTF-8 JSON over a local TCP socket.
Server to client:
    {"type": "escalation_request", "id": .., "agent_id": .., "tick": ..,
     "pattern": .., "plans": [..], "deadline_tick": ..}
    {"type": "event", "tick": .., "kind": .., "payload": ..}
Client to server:
    {"type": "operator_decision", "request_id": .., "verdict":
     "approve"|"deny"|"modify", "plan_index": .., "modified_plan": ..}
One JSON document per line; unknown fields are ignored, malformed lines are
logged and dropped. The run loop polls decisions only at tick boundaries.
"""
from __future__ import annotations

import json
import logging
import queue
import socket
import threading
from dataclasses import dataclass, field
from typing import Any, Optional

from .world import SimEvent

logger = logging.getLogger(__name__)

VERDICTS = ("approve", "deny", "modify")


@dataclass
class OperatorDecision:
    request_id: str
    verdict: str
    plan_index: Optional[int] = None
    modified_plan: Optional[list[dict[str, Any]]] = None
    source: str = "scripted"
    failsafe: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "verdict": self.verdict,
            "plan_index": self.plan_index,
            "source": self.source,
            "failsafe": self.failsafe,
        }


class OperatorBridge:
    """Interface shared by all operator modes."""

    def on_escalation(self, request: dict[str, Any]) -> None:
        raise NotImplementedError

    def on_event(self, event: SimEvent) -> None:
        pass

    def on_tick(self, tick: int) -> None:
        pass

    def poll_decision(self, wall_timeout: float = 0.0) -> Optional[OperatorDecision]:
        raise NotImplementedError

    def has_client(self) -> bool:
        return False

    def close(self) -> None:
        pass


class NoneBridge(OperatorBridge):
    """Escalation configured off: requests are never answered; the engine's
    deadline handling converts silence into deny + failsafe."""

    def on_escalation(self, request: dict[str, Any]) -> None:
        pass

    def poll_decision(self, wall_timeout: float = 0.0) -> Optional[OperatorDecision]:
        return None


class ScriptedBridge(OperatorBridge):
    """Applies a named policy to every escalation immediately."""

    def __init__(self, policy: str) -> None:
        self.policy = policy
        self._pending: list[OperatorDecision] = []

    def on_escalation(self, request: dict[str, Any]) -> None:
        request_id = request["id"]
        plans = request.get("plans", [])
        if self.policy == "approve-first" and plans:
            decision = OperatorDecision(request_id=request_id, verdict="approve", plan_index=0)
        elif self.policy == "modify-reverse" and plans:
            steps = list(reversed(plans[0]["steps"]))
            decision = OperatorDecision(
                request_id=request_id, verdict="modify", plan_index=0, modified_plan=steps
            )
        else:
            decision = OperatorDecision(request_id=request_id, verdict="deny", failsafe=True)
        self._pending.append(decision)

    def poll_decision(self, wall_timeout: float = 0.0) -> Optional[OperatorDecision]:
        if self._pending:
            return self._pending.pop(0)
        return None


class ListenBridge(OperatorBridge):
    """Live console endpoint over a local stream socket.

    Socket I/O runs in daemon threads that communicate with the run loop only
    through a decision queue; the run loop drains the queue at tick
    boundaries, which keeps runs reproducible with a scripted client.
    """

    def __init__(self, port: int = 0, host: str = "127.0.0.1") -> None:
        self._server = socket.create_server((host, port))
        self.port = self._server.getsockname()[1]
        self._decisions: "queue.Queue[OperatorDecision]" = queue.Queue()
        self._clients: list[socket.socket] = []
        self._lock = threading.Lock()
        self._closed = False
        self.malformed_count = 0
        # Requests not yet decided; replayed to clients that attach late so a
        # reconnecting console resumes with the full pending queue.
        self._pending_requests: dict[str, dict[str, Any]] = {}
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _addr = self._server.accept()
            except OSError:
                return
            with self._lock:
                self._clients.append(conn)
                pending = list(self._pending_requests.values())
            for request in pending:
                self._send_to(conn, self._request_doc(request))
            reader = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            reader.start()

    def _read_loop(self, conn: socket.socket) -> None:
        buffer = b""
        while not self._closed:
            try:
                chunk = conn.recv(4096)
            except OSError:
                break
            if not chunk:
                break
            buffer += chunk
            while b"\n" in buffer:
                line, buffer = buffer.split(b"\n", 1)
                self._handle_line(line)
        with self._lock:
            if conn in self._clients:
                self._clients.remove(conn)

    def _handle_line(self, line: bytes) -> None:
        if not line.strip():
            return
        try:
            doc = json.loads(line)
            if doc.get("type") != "operator_decision":
                return
            verdict = doc["verdict"]
            if verdict not in VERDICTS:
                raise ValueError(f"bad verdict {verdict!r}")
            decision = OperatorDecision(
                request_id=str(doc["request_id"]),
                verdict=verdict,
                plan_index=doc.get("plan_index"),
                modified_plan=doc.get("modified_plan"),
                source="wire",
            )
        except (ValueError, KeyError, TypeError) as exc:
            self.malformed_count += 1
            logger.warning("dropping malformed operator line: %s", exc)
            return
        self._decisions.put(decision)

    def _send_to(self, conn: socket.socket, doc: dict[str, Any]) -> None:
        data = (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()
        try:
            conn.sendall(data)
        except OSError:
            with self._lock:
                if conn in self._clients:
                    self._clients.remove(conn)

    def _send_line(self, doc: dict[str, Any]) -> None:
        with self._lock:
            clients = list(self._clients)
        for conn in clients:
            self._send_to(conn, doc)

    @staticmethod
    def _request_doc(request: dict[str, Any]) -> dict[str, Any]:
        return {
            "type": "escalation_request",
            "id": request["id"],
            "agent_id": request["agent_id"],
            "tick": request["tick"],
            "pattern": request["pattern"],
            "plans": request["plans"],
            "deadline_tick": request["deadline_tick"],
        }

    def on_escalation(self, request: dict[str, Any]) -> None:
        with self._lock:
            self._pending_requests[request["id"]] = request
        self._send_line(self._request_doc(request))

    def on_event(self, event: SimEvent) -> None:
        if event.kind == "operator-decision":
            with self._lock:
                self._pending_requests.pop(event.payload.get("request_id", ""), None)
        self._send_line(
            {"type": "event", "tick": event.tick, "kind": event.kind, "payload": event.payload}
        )

    def poll_decision(self, wall_timeout: float = 0.0) -> Optional[OperatorDecision]:
        try:
            if wall_timeout > 0 and self.has_client():
                return self._decisions.get(timeout=wall_timeout)
            return self._decisions.get_nowait()
        except queue.Empty:
            return None

    def has_client(self) -> bool:
        with self._lock:
            return bool(self._clients)

    def close(self) -> None:
        self._closed = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._clients:
                try:
                    conn.close()
                except OSError:
                    pass
            self._clients.clear()


def make_bridge(mode: str, *, policy: str = "approve-first", port: int = 0) -> OperatorBridge:
    if mode == "scripted":
        return ScriptedBridge(policy)
    if mode == "listen":
        return ListenBridge(port)
    return NoneBridge()
