/**
 * Escalation wire protocol: newline-delimited UTF-8 JSON.
 *
 * Server -> client: escalation_request and event lines.
 * Client -> server: operator_decision lines.
 * Unknown fields are ignored; malformed lines are dropped (and counted by
 * the session). The console never sends anything except a schema-valid
 * operator_decision.
 */

export interface PlanStep {
  template: string;
  target: string;
  params: Record<string, unknown>;
}

export interface CandidatePlan {
  steps: PlanStep[];
  score: number;
  addresses?: string;
}

export interface EscalationRequest {
  type: "escalation_request";
  id: string;
  agent_id: string;
  tick: number;
  pattern: string;
  plans: CandidatePlan[];
  deadline_tick: number;
}

export interface EventLine {
  type: "event";
  tick: number;
  kind: string;
  payload: Record<string, unknown>;
}

export type ServerLine = EscalationRequest | EventLine;

export type Verdict = "approve" | "deny" | "modify";

export interface DecisionForm {
  requestId: string;
  verdict: Verdict;
  planIndex?: number;
  /** For modify: a reordering/subset of the chosen plan's steps. */
  modifiedPlan?: PlanStep[];
}

export interface OperatorDecisionLine {
  type: "operator_decision";
  request_id: string;
  verdict: Verdict;
  plan_index?: number;
  modified_plan?: PlanStep[];
}

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function isPlanStep(value: unknown): value is PlanStep {
  return (
    isRecord(value) &&
    typeof value.template === "string" &&
    typeof value.target === "string" &&
    isRecord(value.params ?? {})
  );
}

function isCandidatePlan(value: unknown): value is CandidatePlan {
  return (
    isRecord(value) &&
    Array.isArray(value.steps) &&
    value.steps.every(isPlanStep) &&
    typeof value.score === "number"
  );
}

/** Parse one server line; null means the line is malformed and must be dropped. */
export function parseServerLine(line: string): ServerLine | null {
  if (!line.trim()) return null;
  let doc: unknown;
  try {
    doc = JSON.parse(line);
  } catch {
    return null;
  }
  if (!isRecord(doc)) return null;
  if (doc.type === "escalation_request") {
    const idOk = typeof doc.id === "string" || typeof doc.id === "number";
    if (
      !idOk ||
      typeof doc.agent_id !== "string" ||
      typeof doc.tick !== "number" ||
      typeof doc.deadline_tick !== "number" ||
      !Array.isArray(doc.plans) ||
      !doc.plans.every(isCandidatePlan)
    ) {
      return null;
    }
    return {
      type: "escalation_request",
      id: String(doc.id),
      agent_id: doc.agent_id as string,
      tick: doc.tick as number,
      pattern: typeof doc.pattern === "string" ? doc.pattern : "",
      plans: doc.plans as CandidatePlan[],
      deadline_tick: doc.deadline_tick as number,
    };
  }
  if (doc.type === "event") {
    if (typeof doc.tick !== "number" || typeof doc.kind !== "string") return null;
    return {
      type: "event",
      tick: doc.tick,
      kind: doc.kind,
      payload: isRecord(doc.payload) ? doc.payload : {},
    };
  }
  return null;
}

/**
 * Validate a decision form against its pending request. Returns the exact
 * wire document, or an error string when the form cannot be submitted.
 */
export function buildDecisionLine(
  form: DecisionForm,
  request: EscalationRequest,
): { ok: true; line: OperatorDecisionLine } | { ok: false; reason: string } {
  if (form.requestId !== request.id) {
    return { ok: false, reason: "form does not match the request" };
  }
  if (form.verdict === "deny") {
    return {
      ok: true,
      line: { type: "operator_decision", request_id: request.id, verdict: "deny" },
    };
  }
  const index = form.planIndex;
  if (index === undefined || !Number.isInteger(index) || index < 0 || index >= request.plans.length) {
    return { ok: false, reason: `plan index must be within 0..${request.plans.length - 1}` };
  }
  if (form.verdict === "approve") {
    return {
      ok: true,
      line: {
        type: "operator_decision",
        request_id: request.id,
        verdict: "approve",
        plan_index: index,
      },
    };
  }
  // modify: step deletion/reordering over the chosen plan's steps only.
  const edited = form.modifiedPlan ?? [];
  if (edited.length === 0) {
    return { ok: false, reason: "modified plan must keep at least one step" };
  }
  const pool = request.plans[index].steps.map((s) => JSON.stringify(s));
  for (const step of edited) {
    const key = JSON.stringify(step);
    const at = pool.indexOf(key);
    if (at < 0) {
      return { ok: false, reason: "modified plan may only reorder or drop proposed steps" };
    }
    pool.splice(at, 1);
  }
  return {
    ok: true,
    line: {
      type: "operator_decision",
      request_id: request.id,
      verdict: "modify",
      plan_index: index,
      modified_plan: edited,
    },
  };
}

export function serializeDecision(line: OperatorDecisionLine): string {
  return JSON.stringify(line) + "\n";
}
