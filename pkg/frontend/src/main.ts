// Browser bootstrap: wire the controller to the DOM with event delegation
// and start the poll loop. The API base URL and poll interval come from
// window config (set in index.html) with sane defaults.

import { ApiClient } from "./api.js";
import { AppController } from "./app.js";

declare global {
  interface Window {
    HUNTLOOP_API_BASE?: string;
    HUNTLOOP_POLL_MS?: number;
  }
}

function boot(): void {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  const api = new ApiClient(window.HUNTLOOP_API_BASE ?? "");
  const app = new AppController(api, (html) => {
    root.innerHTML = html;
  });

  root.addEventListener("click", (event) => {
    const target = (event.target as HTMLElement).closest("[data-action]") as HTMLElement | null;
    if (!target) return;
    const action = target.dataset["action"];
    const hyp = target.dataset["hypothesis"] ?? "";
    if (action === "approve") void app.approveAndWatch(hyp);
    else if (action === "dismiss") void app.dismiss(hyp);
    else if (action === "pin") void app.pin(hyp);
    else if (action === "augment") app.openAugment(hyp);
    else if (action === "back") app.backToTriage();
    else if (action === "retry") void app.refresh();
    else if (action === "edit-submit") void app.submitAugment();
    else if (action === "edit-remove") {
      app.edits.remove({ type: target.dataset["otype"] ?? "", value: target.dataset["value"] ?? "" });
      app.render();
    } else if (action === "edit-add") {
      event.preventDefault();
      const form = target.closest("form");
      if (form) {
        const otype = (form.querySelector('[name="otype"]') as HTMLInputElement).value.trim();
        const value = (form.querySelector('[name="value"]') as HTMLInputElement).value.trim();
        if (otype && value) {
          app.edits.add({ type: otype, value });
          app.render();
        }
      }
    }
  });

  root.addEventListener("click", (event) => {
    const node = (event.target as HTMLElement).closest("[data-node]") as HTMLElement | null;
    if (node?.dataset["node"]) void app.openGraph(node.dataset["node"]);
  });

  const interval = window.HUNTLOOP_POLL_MS ?? 2000;
  void app.refresh();
  setInterval(() => void app.refresh(), interval);
}

document.addEventListener("DOMContentLoaded", boot);
