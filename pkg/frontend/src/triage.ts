// Triage board: rank-ordered hypotheses with evidence coverage bars and the
// actions the API says are legal. The board never reorders or invents data;
// rows render in exactly the order the API returned.

import type { HypothesisJson, ObservableJson } from "./types.js";

const CLASS_OF: Record<string, string> = {
  "file-hash-sha256": "hash",
  "file-hash-md5": "hash",
  ip: "network",
  domain: "network",
  url: "network",
  email: "network",
  "file-path": "host-artifact",
  "process-name": "host-artifact",
  "registry-key": "host-artifact",
  mutex: "host-artifact",
};

export const WEIGHT_CLASSES = ["hash", "network", "host-artifact"] as const;

export interface CoverageBucket {
  weightClass: string;
  sighted: number;
  expected: number;
}

export interface TriageRow {
  id: string;
  suspectName: string;
  suspect: string;
  jaccard: number;
  support: number;
  status: string;
  pinned: boolean;
  coverage: CoverageBucket[];
  actions: string[];
  workflow: string | null;
}

function bucketize(sighted: ObservableJson[], expected: ObservableJson[]): CoverageBucket[] {
  const buckets = new Map<string, CoverageBucket>();
  for (const wc of WEIGHT_CLASSES) {
    buckets.set(wc, { weightClass: wc, sighted: 0, expected: 0 });
  }
  for (const o of sighted) {
    const bucket = buckets.get(CLASS_OF[o.type] ?? "host-artifact")!;
    bucket.sighted += 1;
  }
  for (const o of expected) {
    const bucket = buckets.get(CLASS_OF[o.type] ?? "host-artifact")!;
    bucket.expected += 1;
  }
  return [...buckets.values()].filter((b) => b.sighted + b.expected > 0);
}

export function buildTriageRows(hypotheses: HypothesisJson[]): TriageRow[] {
  return hypotheses.map((h) => ({
    id: h.id,
    suspectName: h.suspect_name,
    suspect: h.suspect,
    jaccard: h.jaccard,
    support: h.support,
    status: h.status,
    pinned: Boolean(h.meta?.pinned),
    coverage: bucketize(h.sighted, h.expected_unsighted),
    actions: [...h.legal_actions],
    workflow: h.workflow,
  }));
}

export function escapeHtml(raw: string): string {
  return raw
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function coverageBar(buckets: CoverageBucket[]): string {
  if (buckets.length === 0) return '<div class="coverage empty">no observables</div>';
  const cells = buckets
    .map((b) => {
      const pct = b.sighted + b.expected === 0 ? 0 : Math.round((100 * b.sighted) / (b.sighted + b.expected));
      return (
        `<span class="bucket ${b.weightClass}" title="${b.weightClass}: ${b.sighted}/${b.sighted + b.expected} sighted">` +
        `${escapeHtml(b.weightClass)} <i style="width:${pct}%"></i> ${b.sighted}/${b.sighted + b.expected}</span>`
      );
    })
    .join("");
  return `<div class="coverage">${cells}</div>`;
}

function actionButtons(row: TriageRow): string {
  return row.actions
    .map(
      (action) =>
        `<button data-action="${action}" data-hypothesis="${escapeHtml(row.id)}">${action}</button>`,
    )
    .join("");
}

export function renderTriage(rows: TriageRow[], opts: { stale?: boolean; error?: string | null } = {}): string {
  const banner = opts.error
    ? `<div class="banner error" role="alert">${escapeHtml(opts.error)} <button data-action="retry">retry</button></div>`
    : "";
  const staleMark = opts.stale ? '<div class="banner stale">showing last good data (stale)</div>' : "";
  if (rows.length === 0) {
    return `${banner}${staleMark}<div class="empty-state">No hypotheses yet. Inject a trigger or wait for the proactive loop.</div>`;
  }
  const body = rows
    .map(
      (row, i) => `
  <tr class="status-${row.status}" data-hypothesis="${escapeHtml(row.id)}">
    <td class="rank">#${i + 1}</td>
    <td class="suspect"><span class="node" data-node="${escapeHtml(row.suspect)}" title="explore in the attack graph">${escapeHtml(row.suspectName)}</span>${row.pinned ? " &#x1F4CC;" : ""}<span class="hyp-id">${escapeHtml(row.id)}</span></td>
    <td class="jaccard">${row.jaccard.toFixed(3)}</td>
    <td class="support">${row.support.toFixed(2)}</td>
    <td class="status">${escapeHtml(row.status)}</td>
    <td>${coverageBar(row.coverage)}</td>
    <td class="actions">${actionButtons(row)}</td>
  </tr>`,
    )
    .join("");
  return `${banner}${staleMark}
<table class="triage">
  <thead><tr><th></th><th>suspect</th><th>jaccard</th><th>support</th><th>status</th><th>evidence coverage</th><th>actions</th></tr></thead>
  <tbody>${body}</tbody>
</table>`;
}
