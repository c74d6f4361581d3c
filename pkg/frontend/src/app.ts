// The console controller: owns view state, drives polling, and mediates
// every mutation through the API client. Mutations are serialized per
// hypothesis — a second click while a request is in flight is dropped.

import { ApiClient, ApiError } from "./api.js";
import { EditSet, renderAugmentEditor } from "./augment.js";
import { renderNeighbors } from "./graphview.js";
import { buildTriageRows, renderTriage } from "./triage.js";
import { buildWorkflowModel, renderWorkflow } from "./workflow.js";
import type { AuditEntryJson, HypothesisJson, WorkflowViewJson } from "./types.js";

export type ViewName = "triage" | "workflow" | "augment" | "graph";

export interface AppState {
  view: ViewName;
  hypotheses: HypothesisJson[];
  stale: boolean;
  error: string | null;
  statusFilter: string | null;
  workflowId: string | null;
  workflowData: WorkflowViewJson | null;
  audit: AuditEntryJson[];
  augmentTarget: HypothesisJson | null;
  augmentError: string | null;
  graphHtml: string | null;
}

export class AppController {
  state: AppState = {
    view: "triage",
    hypotheses: [],
    stale: false,
    error: null,
    statusFilter: null,
    workflowId: null,
    workflowData: null,
    audit: [],
    augmentTarget: null,
    augmentError: null,
    graphHtml: null,
  };
  edits = new EditSet();
  private inFlight = new Set<string>();
  private renderSink: (html: string) => void;

  constructor(private api: ApiClient, renderSink?: (html: string) => void) {
    this.renderSink = renderSink ?? (() => undefined);
  }

  render(): string {
    const s = this.state;
    let html: string;
    if (s.view === "workflow" && s.workflowData) {
      html = renderWorkflow(buildWorkflowModel(s.workflowData), s.audit);
    } else if (s.view === "augment" && s.augmentTarget) {
      html = renderAugmentEditor(s.augmentTarget, this.edits, s.augmentError);
    } else if (s.view === "graph" && s.graphHtml) {
      html = `<button data-action="back">&larr; triage</button>${s.graphHtml}`;
    } else {
      const rows = buildTriageRows(
        s.statusFilter ? s.hypotheses.filter((h) => h.status === s.statusFilter) : s.hypotheses,
      );
      html = renderTriage(rows, { stale: s.stale, error: s.error });
    }
    this.renderSink(html);
    return html;
  }

  // -- polling ------------------------------------------------------------

  async refresh(): Promise<void> {
    try {
      if (this.state.view === "workflow" && this.state.workflowId) {
        const [data, audit] = await Promise.all([
          this.api.workflow(this.state.workflowId),
          this.api.audit(this.state.workflowId),
        ]);
        this.state.workflowData = data;
        this.state.audit = audit;
      } else {
        this.state.hypotheses = await this.api.hypotheses();
      }
      this.state.error = null;
      this.state.stale = false;
    } catch (err) {
      // keep the last good data on screen, marked stale
      this.state.error = err instanceof Error ? err.message : String(err);
      this.state.stale = this.state.hypotheses.length > 0 || this.state.workflowData !== null;
    }
    this.render();
  }

  setStatusFilter(status: string | null): void {
    this.state.statusFilter = status;
    this.render();
  }

  // -- actions -------------------------------------------------------------

  async approveAndWatch(hypothesisId: string): Promise<void> {
    if (this.inFlight.has(hypothesisId)) return; // debounced: one POST per click burst
    this.inFlight.add(hypothesisId);
    try {
      const updated = await this.api.approve(hypothesisId);
      this.patchHypothesis(updated);
      if (updated.workflow) {
        await this.openWorkflow(updated.workflow);
        return;
      }
    } catch (err) {
      this.surface(err);
    } finally {
      this.inFlight.delete(hypothesisId);
    }
    this.render();
  }

  async openWorkflow(workflowId: string): Promise<void> {
    this.state.view = "workflow";
    this.state.workflowId = workflowId;
    await this.refresh();
  }

  async dismiss(hypothesisId: string): Promise<void> {
    if (this.inFlight.has(hypothesisId)) return;
    this.inFlight.add(hypothesisId);
    try {
      this.patchHypothesis(await this.api.dismiss(hypothesisId));
    } catch (err) {
      this.surface(err);
    } finally {
      this.inFlight.delete(hypothesisId);
    }
    this.render();
  }

  async pin(hypothesisId: string): Promise<void> {
    try {
      this.patchHypothesis(await this.api.pin(hypothesisId));
    } catch (err) {
      this.surface(err);
    }
    this.render();
  }

  // -- augment editor ---------------------------------------------------------

  openAugment(hypothesisId: string): void {
    const target = this.state.hypotheses.find((h) => h.id === hypothesisId);
    if (!target) return;
    this.edits.clear();
    this.state.view = "augment";
    this.state.augmentTarget = target;
    this.state.augmentError = null;
    this.render();
  }

  async submitAugment(): Promise<void> {
    const target = this.state.augmentTarget;
    if (!target || this.edits.isEmpty()) return; // net-empty edit: nothing to send
    try {
      const updated = await this.api.augment(target.id, this.edits.net());
      this.patchHypothesis(updated);
      this.edits.clear();
      this.state.augmentTarget = updated;
      this.state.augmentError = null;
    } catch (err) {
      // editor state (pending edits) survives a rejected submit
      this.state.augmentError = err instanceof Error ? err.message : String(err);
    }
    this.render();
  }

  // -- graph explorer -------------------------------------------------------------

  async openGraph(nodeId: string, depth = 2): Promise<void> {
    try {
      const data = await this.api.neighbors(nodeId, depth);
      this.state.graphHtml = renderNeighbors(data, nodeId);
      this.state.view = "graph";
    } catch (err) {
      this.surface(err);
    }
    this.render();
  }

  backToTriage(): void {
    this.state.view = "triage";
    this.state.workflowId = null;
    this.state.workflowData = null;
    this.state.augmentTarget = null;
    this.render();
  }

  // -- internals --------------------------------------------------------------------

  private patchHypothesis(updated: HypothesisJson): void {
    const idx = this.state.hypotheses.findIndex((h) => h.id === updated.id);
    if (idx >= 0) this.state.hypotheses[idx] = updated;
  }

  private surface(err: unknown): void {
    // 409s and friends are surfaced verbatim in the banner, never thrown at the DOM
    this.state.error = err instanceof ApiError ? err.message : err instanceof Error ? err.message : String(err);
  }
}
