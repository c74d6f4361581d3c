// Thin typed client over the HuntLoop HTTP API. The fetch implementation is
// injected so tests can run against a scripted fake.

import type {
  AlertsJson,
  AuditEntryJson,
  GraphNeighborsJson,
  HypothesisJson,
  WorkflowViewJson,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`API ${status}: ${detail}`);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body: keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  hypotheses(status?: string): Promise<HypothesisJson[]> {
    const suffix = status ? `?status=${encodeURIComponent(status)}` : "";
    return this.request(`/hypotheses${suffix}`);
  }

  hypothesis(id: string): Promise<HypothesisJson> {
    return this.request(`/hypotheses/${encodeURIComponent(id)}`);
  }

  private action(id: string, action: string, payload?: unknown): Promise<HypothesisJson> {
    return this.request(`/hypotheses/${encodeURIComponent(id)}/${action}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload ?? {}),
    });
  }

  approve(id: string): Promise<HypothesisJson> {
    return this.action(id, "approve");
  }

  augment(id: string, edits: { add: unknown[]; remove: unknown[] }): Promise<HypothesisJson> {
    return this.action(id, "augment", edits);
  }

  pin(id: string): Promise<HypothesisJson> {
    return this.action(id, "pin");
  }

  dismiss(id: string): Promise<HypothesisJson> {
    return this.action(id, "dismiss");
  }

  workflow(id: string): Promise<WorkflowViewJson> {
    return this.request(`/workflows/${encodeURIComponent(id)}`);
  }

  audit(workflowId: string): Promise<AuditEntryJson[]> {
    return this.request(`/workflows/${encodeURIComponent(workflowId)}/audit`);
  }

  alerts(): Promise<AlertsJson> {
    return this.request("/alerts");
  }

  neighbors(id: string, depth = 2): Promise<GraphNeighborsJson> {
    return this.request(`/graph/neighbors?id=${encodeURIComponent(id)}&depth=${depth}`);
  }
}
