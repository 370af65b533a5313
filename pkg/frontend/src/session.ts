/**
 * Live console session against a simulator in listen mode.
 *
 * Owns the socket, the pending-escalation queue and the event feed. All
 * rendered figures come verbatim from wire messages; the session never
 * recomputes scores and never writes anything to the socket except
 * schema-valid operator_decision lines. Dropped connections surface as a
 * visible status and reconnect with backoff; requests whose deadline has
 * passed are retired automatically.
 */
import { EventEmitter } from "node:events";
import net from "node:net";

import {
  DecisionForm,
  EscalationRequest,
  EventLine,
  buildDecisionLine,
  parseServerLine,
  serializeDecision,
} from "./protocol.js";

export type SessionStatus = "idle" | "connecting" | "connected" | "disconnected" | "closed";

export interface EscalationView {
  request: EscalationRequest;
  /** Ticks until the simulator fails safe; never negative. */
  countdown: number;
}

export interface SubmitResult {
  ok: boolean;
  reason?: string;
}

export interface SessionOptions {
  reconnectInitialMs?: number;
  reconnectMaxMs?: number;
  maxFeedEvents?: number;
}

export class ConsoleSession extends EventEmitter {
  status: SessionStatus = "idle";
  currentTick = 0;
  malformedCount = 0;

  private host = "";
  private port = 0;
  private socket: net.Socket | null = null;
  private buffer = "";
  private backoffMs: number;
  private readonly initialBackoffMs: number;
  private readonly maxBackoffMs: number;
  private readonly maxFeedEvents: number;
  private reconnectTimer: NodeJS.Timeout | null = null;
  private pendingMap = new Map<string, EscalationRequest>();
  private feed: EventLine[] = [];

  constructor(options: SessionOptions = {}) {
    super();
    this.initialBackoffMs = options.reconnectInitialMs ?? 250;
    this.maxBackoffMs = options.reconnectMaxMs ?? 4000;
    this.backoffMs = this.initialBackoffMs;
    this.maxFeedEvents = options.maxFeedEvents ?? 500;
  }

  connect(host: string, port: number): void {
    this.host = host;
    this.port = port;
    this.dial();
  }

  private dial(): void {
    if (this.status === "closed") return;
    this.setStatus("connecting");
    const socket = net.createConnection({ host: this.host, port: this.port });
    this.socket = socket;
    socket.setEncoding("utf-8");
    socket.on("connect", () => {
      this.backoffMs = this.initialBackoffMs;
      this.setStatus("connected");
    });
    socket.on("data", (chunk: string) => this.onData(chunk));
    socket.on("error", () => {
      /* the close handler owns reconnection */
    });
    socket.on("close", () => {
      if (this.status === "closed") return;
      this.setStatus("disconnected");
      this.scheduleReconnect();
    });
  }

  private scheduleReconnect(): void {
    if (this.reconnectTimer || this.status === "closed") return;
    const delay = this.backoffMs;
    this.backoffMs = Math.min(this.backoffMs * 2, this.maxBackoffMs);
    this.reconnectTimer = setTimeout(() => {
      this.reconnectTimer = null;
      this.dial();
    }, delay);
    this.emit("reconnect-scheduled", delay);
  }

  private setStatus(status: SessionStatus): void {
    if (this.status === status) return;
    this.status = status;
    this.emit("status", status);
  }

  private onData(chunk: string): void {
    this.buffer += chunk;
    let index = this.buffer.indexOf("\n");
    while (index >= 0) {
      const line = this.buffer.slice(0, index);
      this.buffer = this.buffer.slice(index + 1);
      this.onLine(line);
      index = this.buffer.indexOf("\n");
    }
  }

  private onLine(line: string): void {
    if (!line.trim()) return;
    const parsed = parseServerLine(line);
    if (parsed === null) {
      this.malformedCount += 1;
      this.emit("malformed", line);
      return;
    }
    if (parsed.type === "escalation_request") {
      if (!this.pendingMap.has(parsed.id)) {
        this.pendingMap.set(parsed.id, parsed);
        this.emit("escalation", parsed);
      }
      return;
    }
    this.currentTick = Math.max(this.currentTick, parsed.tick);
    this.feed.push(parsed);
    if (this.feed.length > this.maxFeedEvents) this.feed.shift();
    if (parsed.kind === "operator-decision") {
      const requestId = String(parsed.payload["request_id"] ?? "");
      if (this.pendingMap.delete(requestId)) {
        this.emit("resolved", requestId, parsed.payload);
      }
    }
    this.retireExpired();
    this.emit("event", parsed);
  }

  /** Expired requests leave the queue without user action. */
  private retireExpired(): void {
    for (const [id, request] of [...this.pendingMap]) {
      if (this.currentTick > request.deadline_tick) {
        this.pendingMap.delete(id);
        this.emit("retired", id);
      }
    }
  }

  pending(): EscalationView[] {
    return [...this.pendingMap.values()].map((request) => ({
      request,
      countdown: Math.max(0, request.deadline_tick - this.currentTick),
    }));
  }

  recentEvents(limit = 20): EventLine[] {
    return this.feed.slice(-limit);
  }

  submitDecision(form: DecisionForm): SubmitResult {
    const request = this.pendingMap.get(form.requestId);
    if (!request) {
      return { ok: false, reason: `no pending request ${form.requestId}` };
    }
    if (this.currentTick > request.deadline_tick) {
      // The simulator has already failed safe; nothing goes on the wire.
      this.pendingMap.delete(form.requestId);
      this.emit("retired", form.requestId);
      return { ok: false, reason: "deadline passed; the simulator failed safe" };
    }
    const built = buildDecisionLine(form, request);
    if (!built.ok) {
      return { ok: false, reason: built.reason };
    }
    if (this.status !== "connected" || this.socket === null) {
      return { ok: false, reason: "not connected" };
    }
    this.socket.write(serializeDecision(built.line));
    this.pendingMap.delete(form.requestId);
    this.emit("submitted", form.requestId, built.line);
    return { ok: true };
  }

  close(): void {
    this.setStatus("closed");
    if (this.reconnectTimer) {
      clearTimeout(this.reconnectTimer);
      this.reconnectTimer = null;
    }
    this.socket?.destroy();
    this.socket = null;
  }
}
