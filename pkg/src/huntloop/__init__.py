"""HuntLoop: agile threat-hunting orchestration.

Ingests CTI into a layered attack knowledge graph, generates and ranks attack
hypotheses from sighted observables, compiles them into staged
evidence-collection workflows, executes those in budget-enforced containers
against a simulated endpoint fleet, and closes the loop by confirming or
demoting hypotheses.
"""

from .attackdb import AttackGraph, affinity, candidates_for, ingest_bundle, ioa_of, observables_of
from .cnc import Orchestrator
from .config import ServiceConfig
from .hypotheses import Hypothesis, Sighting, generate, jaccard_similarity, rank
from .observables import Observable
from .scenario import ScenarioScript, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AttackGraph",
    "Hypothesis",
    "Observable",
    "Orchestrator",
    "ScenarioScript",
    "ServiceConfig",
    "Sighting",
    "affinity",
    "candidates_for",
    "generate",
    "ingest_bundle",
    "ioa_of",
    "jaccard_similarity",
    "observables_of",
    "rank",
    "run_scenario",
]
