import net from "node:net";
import { AddressInfo } from "node:net";
import { afterEach, describe, expect, it } from "vitest";

import { ConsoleSession } from "../src/session.js";
import { renderQueue, renderStatus } from "../src/render.js";

function waitFor(check: () => boolean, timeoutMs = 5000): Promise<void> {
  return new Promise((resolve, reject) => {
    const started = Date.now();
    const timer = setInterval(() => {
      if (check()) {
        clearInterval(timer);
        resolve();
      } else if (Date.now() - started > timeoutMs) {
        clearInterval(timer);
        reject(new Error("condition not reached in time"));
      }
    }, 10);
  });
}

class ScriptedServer {
  server: net.Server;
  sockets: net.Socket[] = [];
  received: string[] = [];
  port = 0;

  async start(): Promise<void> {
    this.server = net.createServer((socket) => {
      this.sockets.push(socket);
      socket.setEncoding("utf-8");
      let buffer = "";
      socket.on("data", (chunk: string) => {
        buffer += chunk;
        let at = buffer.indexOf("\n");
        while (at >= 0) {
          this.received.push(buffer.slice(0, at));
          buffer = buffer.slice(at + 1);
          at = buffer.indexOf("\n");
        }
      });
    });
    await new Promise<void>((resolve) => this.server.listen(0, "127.0.0.1", resolve));
    this.port = (this.server.address() as AddressInfo).port;
  }

  send(doc: unknown): void {
    for (const socket of this.sockets) socket.write(JSON.stringify(doc) + "\n");
  }

  sendRaw(line: string): void {
    for (const socket of this.sockets) socket.write(line);
  }

  async stop(): Promise<void> {
    for (const socket of this.sockets) socket.destroy();
    this.sockets = [];
    await new Promise<void>((resolve) => this.server.close(() => resolve()));
  }
}

const escalation = {
  type: "escalation_request",
  id: "esc-1",
  agent_id: "agent-1",
  tick: 5,
  pattern: "unexpected-file",
  plans: [
    {
      steps: [{ template: "delete-file", target: "h1", params: { path: "/tmp/x" } }],
      score: 0.5,
    },
  ],
  deadline_tick: 25,
};

describe("ConsoleSession", () => {
  let server: ScriptedServer;
  let session: ConsoleSession;

  afterEach(async () => {
    session?.close();
    await server?.stop().catch(() => undefined);
  });

  it("shows a visible disconnected state when nothing listens", async () => {
    session = new ConsoleSession({ reconnectInitialMs: 50, reconnectMaxMs: 100 });
    session.connect("127.0.0.1", 1); // nothing listens on port 1
    await waitFor(() => session.status === "disconnected");
    expect(renderStatus(session.status, session.currentTick, 0)).toContain("DISCONNECTED");
  });

  it("queues one escalation per request id", async () => {
    server = new ScriptedServer();
    await server.start();
    session = new ConsoleSession();
    session.connect("127.0.0.1", server.port);
    await waitFor(() => session.status === "connected");
    server.send(escalation);
    server.send(escalation); // duplicate delivery collapses
    await waitFor(() => session.pending().length === 1);
    const view = session.pending()[0];
    expect(view.request.id).toBe("esc-1");
    expect(view.countdown).toBe(25);
    expect(renderQueue(session.pending())).toContain("esc-1");
  });

  it("drops malformed lines and counts them", async () => {
    server = new ScriptedServer();
    await server.start();
    session = new ConsoleSession();
    session.connect("127.0.0.1", server.port);
    await waitFor(() => session.status === "connected");
    server.sendRaw("this is not json\n");
    server.send({ type: "event", tick: 1, kind: "beacon-fired", payload: {} });
    await waitFor(() => session.recentEvents().length === 1);
    expect(session.malformedCount).toBe(1);
    expect(session.pending()).toHaveLength(0);
  });

  it("writes a schema-valid approve line and clears the queue", async () => {
    server = new ScriptedServer();
    await server.start();
    session = new ConsoleSession();
    session.connect("127.0.0.1", server.port);
    await waitFor(() => session.status === "connected");
    server.send(escalation);
    await waitFor(() => session.pending().length === 1);
    const result = session.submitDecision({ requestId: "esc-1", verdict: "approve", planIndex: 0 });
    expect(result.ok).toBe(true);
    expect(session.pending()).toHaveLength(0);
    await waitFor(() => server.received.length === 1);
    expect(JSON.parse(server.received[0])).toEqual({
      type: "operator_decision",
      request_id: "esc-1",
      verdict: "approve",
      plan_index: 0,
    });
  });

  it("rejects a past-deadline submission locally without a wire write", async () => {
    server = new ScriptedServer();
    await server.start();
    session = new ConsoleSession();
    session.connect("127.0.0.1", server.port);
    await waitFor(() => session.status === "connected");
    server.send(escalation);
    await waitFor(() => session.pending().length === 1);
    // An event past the deadline retires the request automatically.
    server.send({ type: "event", tick: 26, kind: "failsafe", payload: {} });
    await waitFor(() => session.pending().length === 0);
    const result = session.submitDecision({ requestId: "esc-1", verdict: "approve", planIndex: 0 });
    expect(result.ok).toBe(false);
    expect(server.received).toHaveLength(0);
  });

  it("removes a request when the simulator reports its decision", async () => {
    server = new ScriptedServer();
    await server.start();
    session = new ConsoleSession();
    session.connect("127.0.0.1", server.port);
    await waitFor(() => session.status === "connected");
    server.send(escalation);
    await waitFor(() => session.pending().length === 1);
    server.send({
      type: "event",
      tick: 10,
      kind: "operator-decision",
      payload: { request_id: "esc-1", verdict: "deny", failsafe: true },
    });
    await waitFor(() => session.pending().length === 0);
  });

  it("reconnects with backoff and resumes the feed", async () => {
    server = new ScriptedServer();
    await server.start();
    const port = server.port;
    session = new ConsoleSession({ reconnectInitialMs: 50, reconnectMaxMs: 200 });
    session.connect("127.0.0.1", port);
    await waitFor(() => session.status === "connected");
    await server.stop();
    await waitFor(() => session.status === "disconnected");
    server = new ScriptedServer();
    // Rebind the same port so the session's reconnect can find us.
    await new Promise<void>((resolve) => {
      server.server = net.createServer((socket) => {
        server.sockets.push(socket);
        socket.setEncoding("utf-8");
      });
      server.server.listen(port, "127.0.0.1", () => {
        server.port = port;
        resolve();
      });
    });
    await waitFor(() => session.status === "connected", 10000);
    server.send(escalation);
    await waitFor(() => session.pending().length === 1);
  });
});
