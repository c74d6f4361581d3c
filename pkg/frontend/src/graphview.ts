// Graph explorer: renders the neighborhood of a node (malware -> techniques
// -> tactics and down to observed data), grouped by Pyramid-of-Pain level.

import { escapeHtml } from "./triage.js";
import type { GraphNeighborsJson } from "./types.js";

const LEVEL_ORDER = ["technique", "tool-malware", "ioc", "artifact"];

export function renderNeighbors(data: GraphNeighborsJson, focus: string): string {
  const byLevel = new Map<string, { id: string; kind: string; name: string }[]>();
  for (const node of data.nodes) {
    const level = node.pop_level;
    if (!byLevel.has(level)) byLevel.set(level, []);
    byLevel.get(level)!.push(node);
  }
  const tiers = LEVEL_ORDER.filter((level) => byLevel.has(level))
    .map((level) => {
      const nodes = byLevel
        .get(level)!
        .map((n) => {
          const cls = n.id === focus ? "node focus" : "node";
          return `<span class="${cls} kind-${escapeHtml(n.kind)}" data-node="${escapeHtml(n.id)}">${escapeHtml(n.name)}</span>`;
        })
        .join(" ");
      return `<div class="tier"><h4>${escapeHtml(level)}</h4>${nodes}</div>`;
    })
    .join("");
  const edges = data.edges
    .map((e) => `<li>${escapeHtml(e.src)} &ndash;${escapeHtml(e.rkind)}&rarr; ${escapeHtml(e.dst)}</li>`)
    .join("");
  return `<div class="graph-explorer">${tiers}<details><summary>${data.edges.length} relationships</summary><ul>${edges}</ul></details></div>`;
}
