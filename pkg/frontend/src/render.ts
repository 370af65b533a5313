/** Pure text rendering for the terminal console; kept separate for tests. */
import { EventLine } from "./protocol.js";
import { EscalationView, SessionStatus } from "./session.js";

export function renderStatus(status: SessionStatus, tick: number, malformed: number): string {
  const badge =
    status === "connected" ? "CONNECTED" : status === "connecting" ? "CONNECTING" : status.toUpperCase();
  const suffix = malformed > 0 ? `  malformed-lines=${malformed}` : "";
  return `[${badge}] tick=${tick}${suffix}`;
}

export function renderQueue(pending: EscalationView[]): string {
  if (pending.length === 0) return "(no pending escalations)";
  const lines: string[] = [];
  for (const view of pending) {
    const r = view.request;
    lines.push(
      `${r.id}  agent=${r.agent_id}  pattern=${r.pattern}  raised@${r.tick}  ` +
        `deadline@${r.deadline_tick}  countdown=${view.countdown}`,
    );
    r.plans.forEach((plan, index) => {
      const steps = plan.steps.map((s) => `${s.template}(${s.target})`).join(" -> ");
      lines.push(`    [${index}] score=${plan.score}  ${steps || "(empty)"}`);
    });
  }
  return lines.join("\n");
}

export function renderEvent(event: EventLine): string {
  const payload = JSON.stringify(event.payload);
  return `tick=${event.tick} ${event.kind} ${payload.length > 120 ? payload.slice(0, 117) + "..." : payload}`;
}
