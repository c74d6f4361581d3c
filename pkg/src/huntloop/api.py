"""HTTP API over the orchestrator, consumed by the analyst console.

Plain JSON over HTTP; every response is computed from the orchestrator's
persisted state under its lock, so reads always reflect completed writes.
"""

from __future__ import annotations

import json

from fastapi import Body, FastAPI, HTTPException, Query as QueryParam

from .attackdb import UnknownNodeError, neighbors
from .cnc import (
    IllegalTransitionError,
    Orchestrator,
    TerminalHypothesisError,
    UnknownHypothesisError,
)
from .evidence import InvalidQueryError, Query
from .hypotheses import Hypothesis
from .observables import ObservableError
from .scenario import EvalReport, ScenarioScript, run_scenario

# actions the console may offer per hypothesis status
LEGAL_ACTIONS = {
    "proposed": ("approve", "augment", "pin", "dismiss"),
    "approved": ("augment", "pin", "dismiss"),
    "testing": ("augment", "pin", "dismiss"),
    "confirmed": (),
    "demoted": (),
    "stale": (),
}


def hypothesis_json(orch: Orchestrator, h: Hypothesis) -> dict:
    data = h.to_json()
    data["legal_actions"] = list(LEGAL_ACTIONS[h.status])
    data["meta"] = dict(orch.meta.get(h.id, {}))
    cid = orch.active_container.get(h.id)
    data["container"] = cid
    data["workflow"] = orch.container_info[cid]["workflow_id"] if cid else None
    return data


def create_app(orch: Orchestrator) -> FastAPI:
    app = FastAPI(title="huntloop", version="0.1.0")
    reports: dict[str, EvalReport] = {}

    @app.get("/hypotheses")
    def list_hypotheses(status: str | None = None):
        with orch.lock:
            ranked = orch.ranked()
            if status:
                ranked = [h for h in ranked if h.status == status]
            return [hypothesis_json(orch, h) for h in ranked]

    @app.get("/hypotheses/{hyp_id}")
    def get_hypothesis(hyp_id: str):
        with orch.lock:
            try:
                return hypothesis_json(orch, orch.hypothesis(hyp_id))
            except UnknownHypothesisError as exc:
                raise HTTPException(404, str(exc))

    def _action(action: str, hyp_id: str, payload: dict | None = None):
        with orch.lock:
            try:
                h = orch.analyst_action(action, hyp_id, payload or {})
            except UnknownHypothesisError as exc:
                raise HTTPException(404, str(exc))
            except (TerminalHypothesisError, IllegalTransitionError) as exc:
                raise HTTPException(409, str(exc))
            except ObservableError as exc:
                raise HTTPException(400, str(exc))
            return hypothesis_json(orch, h)

    @app.post("/hypotheses/{hyp_id}/approve")
    def approve(hyp_id: str):
        return _action("approve", hyp_id)

    @app.post("/hypotheses/{hyp_id}/augment")
    def augment(hyp_id: str, payload: dict = Body(default={})):
        return _action("augment", hyp_id, payload)

    @app.post("/hypotheses/{hyp_id}/pin")
    def pin(hyp_id: str):
        return _action("pin", hyp_id)

    @app.post("/hypotheses/{hyp_id}/dismiss")
    def dismiss(hyp_id: str):
        return _action("dismiss", hyp_id)

    @app.get("/workflows/{workflow_id}")
    def get_workflow(workflow_id: str):
        with orch.lock:
            workflow = orch.workflows.get(workflow_id)
            if workflow is None:
                raise HTTPException(404, f"unknown workflow: {workflow_id}")
            containers = [
                dict(info, state=orch.runtime.container(cid).state().to_json(),
                     step_log=orch.runtime.container(cid).step_log)
                if cid in orch.runtime._containers
                else dict(info)
                for cid, info in sorted(orch.container_info.items())
                if info["workflow_id"] == workflow_id
            ]
            return {"workflow": workflow.to_json(), "containers": containers}

    @app.get("/workflows/{workflow_id}/audit")
    def get_audit(workflow_id: str):
        with orch.lock:
            if workflow_id not in orch.workflows:
                raise HTTPException(404, f"unknown workflow: {workflow_id}")
            cids = {
                cid for cid, info in orch.container_info.items() if info["workflow_id"] == workflow_id
            }
            return [e for e in orch.audit.entries if e["container"] in cids]

    @app.get("/alerts")
    def alerts():
        with orch.lock:
            return {
                "rules": [
                    {
                        "id": r.id,
                        "interval": r.interval,
                        "handler": list(r.handler),
                        "watermark": r.watermark,
                        "query": r.query.to_json(),
                    }
                    for r in orch.store.rules()
                ],
                "notifications": orch.notifications[-200:],
            }

    @app.get("/events/search")
    def search(q: str = QueryParam(...)):
        try:
            query = Query.from_json(json.loads(q))
            events = orch.store.search(query)
        except (json.JSONDecodeError, InvalidQueryError) as exc:
            raise HTTPException(400, f"bad query: {exc}")
        return [e.to_json() for e in events]

    @app.get("/graph/neighbors")
    def graph_neighbors(id: str, depth: int = 1):
        try:
            return neighbors(orch.graph, id, depth=min(depth, 4))
        except UnknownNodeError as exc:
            raise HTTPException(404, str(exc))

    @app.post("/triggers")
    def triggers(payload: dict = Body(...)):
        with orch.lock:
            created = orch.on_external_trigger(payload)
            return [hypothesis_json(orch, h) for h in created]

    @app.post("/scenarios/run")
    def scenarios_run(payload: dict = Body(...)):
        # runs in a fresh, isolated environment; the serving orchestrator's
        # live state is untouched (scenario mode owns its own clock)
        script = ScenarioScript.from_json(payload)
        report = run_scenario(orch.graph, script, config=orch.config)
        run_id = f"run-{len(reports) + 1:04d}"
        reports[run_id] = report
        return {"run_id": run_id, "report": report.to_json()}

    @app.get("/reports/{run_id}")
    def get_report(run_id: str):
        report = reports.get(run_id)
        if report is None:
            raise HTTPException(404, f"unknown run: {run_id}")
        return report.to_json()

    return app
