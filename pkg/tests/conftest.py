"""Session-scoped fixtures shared across the suite: one recorded 20-record
scripted environment, reused wherever a full scripted run is needed."""

import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from triage.domain import DepartmentTaxonomy, load_default_taxonomy
from triage.llm_gateway import BackendConfig
from triage.orchestrator import Resources, SessionConfig, uniform_backends
from triage.pipeline import synth_fixtures
from triage.synthetic import record_reply_fixtures


@dataclass(frozen=True)
class ScriptedEnv:
    taxonomy: DepartmentTaxonomy
    records: list
    fixture_path: Path
    config: SessionConfig

    def resources(self) -> Resources:
        return Resources.load(self.config)

    def truths(self) -> dict:
        return {r.id: r.truth for r in self.records}


@pytest.fixture(scope="session")
def default_taxonomy():
    return load_default_taxonomy()


@pytest.fixture(scope="session")
def scripted_env(tmp_path_factory, default_taxonomy) -> ScriptedEnv:
    """20 synthetic records (seed 42) with a recorded reply fixture and a
    scripted session config replaying it."""
    base = tmp_path_factory.mktemp("scripted")
    fixture = base / "replies.jsonl"
    records = synth_fixtures(42, 20, default_taxonomy)
    record_config = SessionConfig(rounds=4, variant="full")
    record_reply_fixtures(records, record_config, fixture)
    config = SessionConfig(
        rounds=4,
        variant="full",
        backends=uniform_backends(BackendConfig(kind="scripted", fixture_path=fixture)),
    )
    return ScriptedEnv(default_taxonomy, records, fixture, config)
