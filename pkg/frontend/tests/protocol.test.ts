import { describe, expect, it } from "vitest";

import {
  EscalationRequest,
  buildDecisionLine,
  parseServerLine,
  serializeDecision,
} from "../src/protocol.js";

const request: EscalationRequest = {
  type: "escalation_request",
  id: "esc-1",
  agent_id: "agent-1",
  tick: 5,
  pattern: "unexpected-file",
  plans: [
    {
      steps: [
        { template: "snapshot-file", target: "h1", params: { path: "/tmp/x" } },
        { template: "delete-file", target: "h1", params: { path: "/tmp/x" } },
      ],
      score: 0.55,
    },
  ],
  deadline_tick: 35,
};

describe("parseServerLine", () => {
  it("parses an escalation request", () => {
    const line = JSON.stringify({
      type: "escalation_request",
      id: "esc-1",
      agent_id: "agent-1",
      tick: 5,
      pattern: "unexpected-file",
      plans: [{ steps: [], score: 0.1 }],
      deadline_tick: 35,
      extra_field: "ignored",
    });
    const parsed = parseServerLine(line);
    expect(parsed?.type).toBe("escalation_request");
    if (parsed?.type === "escalation_request") {
      expect(parsed.id).toBe("esc-1");
      expect(parsed.deadline_tick).toBe(35);
    }
  });

  it("parses an event line and ignores unknown fields", () => {
    const parsed = parseServerLine(
      JSON.stringify({ type: "event", tick: 9, kind: "actuation", payload: { x: 1 }, junk: true }),
    );
    expect(parsed).toEqual({ type: "event", tick: 9, kind: "actuation", payload: { x: 1 } });
  });

  it("drops malformed lines", () => {
    expect(parseServerLine("not json")).toBeNull();
    expect(parseServerLine(JSON.stringify({ type: "mystery" }))).toBeNull();
    expect(parseServerLine(JSON.stringify({ type: "event", tick: "x", kind: "k" }))).toBeNull();
    expect(
      parseServerLine(JSON.stringify({ type: "escalation_request", id: "a", plans: "no" })),
    ).toBeNull();
    expect(parseServerLine("")).toBeNull();
  });
});

describe("buildDecisionLine", () => {
  it("builds an approve decision", () => {
    const result = buildDecisionLine({ requestId: "esc-1", verdict: "approve", planIndex: 0 }, request);
    expect(result.ok).toBe(true);
    if (result.ok) {
      expect(result.line).toEqual({
        type: "operator_decision",
        request_id: "esc-1",
        verdict: "approve",
        plan_index: 0,
      });
      expect(serializeDecision(result.line).endsWith("\n")).toBe(true);
    }
  });

  it("builds a deny decision without a plan index", () => {
    const result = buildDecisionLine({ requestId: "esc-1", verdict: "deny" }, request);
    expect(result.ok).toBe(true);
  });

  it("rejects an out-of-range plan index", () => {
    const result = buildDecisionLine({ requestId: "esc-1", verdict: "approve", planIndex: 7 }, request);
    expect(result.ok).toBe(false);
  });

  it("accepts a modify that reorders and drops proposed steps", () => {
    const steps = request.plans[0].steps;
    const result = buildDecisionLine(
      { requestId: "esc-1", verdict: "modify", planIndex: 0, modifiedPlan: [steps[1]] },
      request,
    );
    expect(result.ok).toBe(true);
    if (result.ok) expect(result.line.modified_plan).toEqual([steps[1]]);
  });

  it("rejects a modify that invents a new step", () => {
    const alien = { template: "format-disk", target: "h1", params: {} };
    const result = buildDecisionLine(
      { requestId: "esc-1", verdict: "modify", planIndex: 0, modifiedPlan: [alien] },
      request,
    );
    expect(result.ok).toBe(false);
    if (!result.ok) expect(result.reason).toContain("proposed steps");
  });

  it("rejects an empty modified plan", () => {
    const result = buildDecisionLine(
      { requestId: "esc-1", verdict: "modify", planIndex: 0, modifiedPlan: [] },
      request,
    );
    expect(result.ok).toBe(false);
  });
});
