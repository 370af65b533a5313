/**
 * Terminal operator console.
 *
 * Usage: node dist/app.js [host] [port]
 *
 * Commands:
 *   list                         pending escalations with countdowns
 *   approve <request> <plan>     approve a candidate plan by index
 *   deny <request>               deny (the simulator fails safe)
 *   modify <request> <plan> <order>
 *                                reorder/drop steps, e.g. "modify esc-1 0 1,0"
 *   feed [n]                     last n feed events (default 10)
 *   quit
 */
import readline from "node:readline";

import { DecisionForm, PlanStep } from "./protocol.js";
import { renderEvent, renderQueue, renderStatus } from "./render.js";
import { ConsoleSession } from "./session.js";

const host = process.argv[2] ?? "127.0.0.1";
const port = Number(process.argv[3] ?? "9400");

const session = new ConsoleSession();
const rl = readline.createInterface({ input: process.stdin, output: process.stdout, prompt: "> " });

function say(text: string): void {
  console.log(text);
  rl.prompt(true);
}

session.on("status", (status) => say(renderStatus(status, session.currentTick, session.malformedCount)));
session.on("escalation", (request) =>
  say(`new escalation ${request.id} from ${request.agent_id} (pattern ${request.pattern}); type "list"`),
);
session.on("retired", (id) => say(`escalation ${id} expired; the simulator failed safe`));
session.on("resolved", (id, payload) => say(`escalation ${id} resolved: ${JSON.stringify(payload)}`));
session.on("reconnect-scheduled", (delay) => say(`reconnecting in ${delay}ms`));

function parseOrder(text: string, steps: PlanStep[]): PlanStep[] | null {
  const indices = text.split(",").map((part) => Number(part.trim()));
  if (indices.some((i) => !Number.isInteger(i) || i < 0 || i >= steps.length)) return null;
  return indices.map((i) => steps[i]);
}

function handle(command: string): void {
  const parts = command.trim().split(/\s+/).filter(Boolean);
  if (parts.length === 0) return;
  const [verb, ...args] = parts;
  if (verb === "quit" || verb === "exit") {
    session.close();
    rl.close();
    return;
  }
  if (verb === "list") {
    say(renderQueue(session.pending()));
    return;
  }
  if (verb === "feed") {
    const limit = Number(args[0] ?? "10");
    for (const event of session.recentEvents(limit)) say(renderEvent(event));
    return;
  }
  if (verb === "approve" || verb === "deny" || verb === "modify") {
    const requestId = args[0];
    if (!requestId) {
      say(`usage: ${verb} <request> ...`);
      return;
    }
    let form: DecisionForm;
    if (verb === "deny") {
      form = { requestId, verdict: "deny" };
    } else {
      const planIndex = Number(args[1]);
      if (verb === "approve") {
        form = { requestId, verdict: "approve", planIndex };
      } else {
        const pending = session.pending().find((v) => v.request.id === requestId);
        const steps = pending?.request.plans[planIndex]?.steps ?? [];
        const order = parseOrder(args[2] ?? "", steps);
        if (order === null) {
          say("modify needs a step order like 1,0 over the chosen plan");
          return;
        }
        form = { requestId, verdict: "modify", planIndex, modifiedPlan: order };
      }
    }
    const result = session.submitDecision(form);
    say(result.ok ? `${verb} sent for ${requestId}` : `rejected: ${result.reason}`);
    return;
  }
  say(`unknown command ${verb}; try list / approve / deny / modify / feed / quit`);
}

rl.on("line", handle);
rl.on("close", () => {
  session.close();
  process.exit(0);
});

console.log(`connecting to ${host}:${port} ...`);
session.connect(host, port);
rl.prompt();
