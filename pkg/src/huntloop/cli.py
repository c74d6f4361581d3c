"""The huntloop command line: ingest bundles, serve the API, run hunts, rank sightings.

Exit code 0 on success; failures print one machine-readable JSON object to
stderr and exit nonzero.
"""

from __future__ import annotations

import json
import sys

import click

from .attackdb import (
    AttackGraph,
    MalformedBundleError,
    ingest_bundle,
    load_snapshot,
    save_snapshot,
)
from .cnc import Orchestrator
from .config import ServiceConfig
from .hypotheses import Sighting, generate, rank
from .scenario import ScenarioScript, run_scenario


def _fail(code: str, detail: str, exit_code: int = 1):
    sys.stderr.write(json.dumps({"error": code, "detail": detail}) + "\n")
    sys.exit(exit_code)


def _load_graph(db: str | None, config: ServiceConfig) -> AttackGraph:
    path = db or config.attackdb_path
    if not path:
        _fail("no-attackdb", "no AttackDB snapshot given (--db or config attackdb_path)")
    try:
        return load_snapshot(path)
    except FileNotFoundError:
        _fail("no-attackdb", f"snapshot not found: {path}")


@click.group()
def main():
    """HuntLoop: agile threat-hunting orchestration."""


@main.command()
@click.argument("bundles", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--db", required=True, type=click.Path(), help="AttackDB snapshot file to create or extend.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def ingest(bundles, db, config_path):
    """Ingest bundle files into an AttackDB snapshot."""
    try:
        config = ServiceConfig.load(config_path)
        try:
            graph = load_snapshot(db)
        except FileNotFoundError:
            graph = AttackGraph.empty()
        reports = []
        for path in bundles:
            with open(path, encoding="utf-8") as fh:
                bundle = json.load(fh)
            graph, report = ingest_bundle(bundle, graph, trusted_sources=config.trusted_sources)
            reports.append({"bundle": path, **report.to_json()})
        save_snapshot(graph, db)
        click.echo(
            json.dumps(
                {
                    "db": db,
                    "nodes": len(graph.nodes),
                    "edges": len(graph.edges),
                    "observables": len(graph.observable_index),
                    "reports": reports,
                },
                indent=1,
                sort_keys=True,
            )
        )
    except json.JSONDecodeError as exc:
        _fail("malformed-document", str(exc))
    except MalformedBundleError as exc:
        _fail("malformed-document", str(exc))


@main.command()
@click.option("--port", default=8080, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--db", type=click.Path(exists=True), default=None)
def serve(port, host, config_path, db):
    """Serve the HTTP API (live mode)."""
    import uvicorn

    from .api import create_app

    config = ServiceConfig.load(config_path)
    graph = _load_graph(db, config)
    orch = Orchestrator(graph, config=config)
    uvicorn.run(create_app(orch), host=host, port=port)


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the script seed.")
@click.option("--auto-approve", is_flag=True, default=False)
@click.option("--budget", type=float, default=None, help="Override the per-workflow budget.")
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--db", type=click.Path(exists=True), default=None)
def hunt(scenario_path, seed, auto_approve, budget, report_path, config_path, db):
    """Run a scenario end to end and write the evaluation report."""
    try:
        config = ServiceConfig.load(config_path)
        graph = _load_graph(db, config)
        script = ScenarioScript.load(scenario_path)
        overrides = {}
        if seed is not None:
            overrides["seed"] = seed
        if auto_approve:
            overrides["auto_approve"] = True
        if budget is not None:
            overrides["budget"] = budget
        if overrides:
            from dataclasses import replace

            script = replace(script, **overrides)
        report = run_scenario(graph, script, config=config)
        payload = report.to_bytes()
        if report_path:
            with open(report_path, "wb") as fh:
                fh.write(payload)
        click.echo(payload.decode("utf-8"), nl=False)
    except Exception as exc:  # surfaced as machine-readable error JSON
        if isinstance(exc, SystemExit):
            raise
        _fail(type(exc).__name__, str(exc))


@main.command("rank")
@click.option("--sightings", "sightings_path", required=True, type=click.Path(exists=True))
@click.option("--db", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--top-k", type=int, default=10)
def rank_cmd(sightings_path, db, config_path, top_k):
    """Generate and rank hypotheses from a sightings file."""
    try:
        config = ServiceConfig.load(config_path)
        graph = _load_graph(db, config)
        with open(sightings_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        sightings = [Sighting.from_json(s) for s in raw.get("sightings", raw if isinstance(raw, list) else [])]
        hypotheses = generate(graph, sightings, k=top_k, weights=config.weights)
        ranked = rank(hypotheses, frozenset(s.observable for s in sightings))
        click.echo(json.dumps([h.to_json() for h in ranked], indent=1, sort_keys=True))
    except Exception as exc:
        if isinstance(exc, SystemExit):
            raise
        _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    main()
