// Workflow view: step graph with live status, cost-vs-budget gauge, audit
// tail. Everything shown comes from GET /workflows/{id} and its /audit —
// the client invents no state of its own.

import { escapeHtml } from "./triage.js";
import type { AuditEntryJson, WorkflowViewJson } from "./types.js";

export type StepLiveStatus = "executed" | "pending" | "idle";

export interface StepView {
  id: string;
  kind: string;
  status: StepLiveStatus;
  detail: string;
}

export interface WorkflowViewModel {
  workflowId: string;
  hypothesisId: string | null;
  containerStatus: string;
  steps: StepView[];
  costCharged: number;
  budget: number;
  transitionsUsed: number;
  maxTransitions: number;
  findingsCount: number;
}

function describe(kind: string, params: Record<string, unknown>): string {
  if (kind === "define-alert") {
    return `alert every ${params["interval"]} ticks -> ${params["handler"]}`;
  }
  if (kind === "run-task") {
    const task = params["task"] as { scan?: string } | undefined;
    return `task ${task?.scan ?? "?"}`;
  }
  if (kind === "deploy-policy") {
    const policy = params["policy"] as { monitors?: unknown[] } | undefined;
    return `policy with ${policy?.monitors?.length ?? 0} monitors`;
  }
  if (kind === "verdict") {
    return `verdict ${params["decision"]}`;
  }
  return kind;
}

export function buildWorkflowModel(payload: WorkflowViewJson): WorkflowViewModel {
  const container = payload.containers[payload.containers.length - 1];
  const executed = new Set((container?.step_log ?? []).map((entry) => entry.step));
  const pending = new Set(container?.state?.pending ?? []);
  const steps: StepView[] = Object.entries(payload.workflow.steps)
    .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0))
    .map(([id, step]) => ({
      id,
      kind: step.kind,
      status: executed.has(id) ? "executed" : pending.has(id) ? "pending" : "idle",
      detail: describe(step.kind, step.params),
    }));
  return {
    workflowId: payload.workflow.id,
    hypothesisId: payload.workflow.hypothesis,
    containerStatus: container?.state?.status ?? container?.status ?? "not started",
    steps,
    costCharged: container?.state?.cost_charged ?? 0,
    budget: payload.workflow.budget,
    transitionsUsed: container?.state?.transitions_used ?? 0,
    maxTransitions: payload.workflow.max_transitions,
    findingsCount: container?.state?.findings.length ?? 0,
  };
}

export function renderCostGauge(charged: number, budget: number): string {
  const pct = budget > 0 ? Math.min(100, Math.round((100 * charged) / budget)) : 0;
  return (
    `<div class="gauge" title="cost ${charged} of budget ${budget}">` +
    `<i style="width:${pct}%"></i><span>${charged.toFixed(0)} / ${budget.toFixed(0)} cost units</span></div>`
  );
}

export function renderAuditTail(entries: AuditEntryJson[], limit = 12): string {
  const tail = entries.slice(-limit);
  if (tail.length === 0) return '<div class="audit empty">no mediator calls yet</div>';
  const rows = tail
    .map(
      (e) =>
        `<li><code>t=${e.tick}</code> ${escapeHtml(e.call)} <span class="digest">${escapeHtml(e.digest)}</span></li>`,
    )
    .join("");
  return `<ul class="audit">${rows}</ul>`;
}

export function renderWorkflow(model: WorkflowViewModel, audit: AuditEntryJson[]): string {
  const steps = model.steps
    .map(
      (s) =>
        `<li class="step ${s.status}" data-step="${escapeHtml(s.id)}">` +
        `<b>${escapeHtml(s.id)}</b> <em>${escapeHtml(s.kind)}</em> — ${escapeHtml(s.detail)}` +
        ` <span class="live">${s.status}</span></li>`,
    )
    .join("");
  return `
<div class="workflow-view" data-workflow="${escapeHtml(model.workflowId)}">
  <header>
    <button data-action="back">&larr; triage</button>
    <h2>${escapeHtml(model.workflowId)}${model.hypothesisId ? ` &middot; ${escapeHtml(model.hypothesisId)}` : ""}</h2>
    <span class="container-status ${escapeHtml(model.containerStatus)}">${escapeHtml(model.containerStatus)}</span>
  </header>
  ${renderCostGauge(model.costCharged, model.budget)}
  <div class="transitions">transitions ${model.transitionsUsed}/${model.maxTransitions} &middot; findings ${model.findingsCount}</div>
  <ol class="steps">${steps}</ol>
  <h3>mediator audit tail</h3>
  ${renderAuditTail(audit)}
</div>`;
}
