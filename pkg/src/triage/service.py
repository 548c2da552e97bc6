"""HTTP session service: interactive triage over a JSON API.

Sessions are persisted in an embedded sqlite store and survive restarts;
requests for one session serialize on an in-process lock while distinct
sessions run concurrently. Re-sending a message with the same idempotency
key returns the stored response instead of advancing the round again.
"""

from __future__ import annotations

import json
import secrets
import sqlite3
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from fastapi import Depends, FastAPI, HTTPException, Request
from pydantic import BaseModel

from .errors import TriageError
from .orchestrator import (
    Resources,
    SessionConfig,
    SessionEngine,
    SessionTrace,
    trace_from_dict,
    trace_to_dict,
)

ENV_HTTP_ADDR = "TRIAGE_HTTP_ADDR"
ENV_HTTP_TOKEN = "TRIAGE_HTTP_TOKEN"

DEFAULT_IDLE_EXPIRY_SECONDS = 30 * 60.0


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _rfc3339(moment: datetime) -> str:
    return moment.isoformat(timespec="seconds")


@dataclass(frozen=True)
class ServiceConfig:
    session_config: SessionConfig
    db_path: Path
    idle_expiry_seconds: float = DEFAULT_IDLE_EXPIRY_SECONDS
    bearer_token: str | None = None
    static_dir: Path | None = None


@dataclass
class SessionRow:
    session_id: str
    state: str
    round: int
    created: str
    updated: str
    trace: SessionTrace
    idempotency_key: str | None = None
    idempotency_response: dict | None = None


class SessionStore:
    """Embedded sqlite persistence for session state and traces."""

    def __init__(self, db_path: str | Path) -> None:
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        with self._connect() as conn:
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS sessions (
                    session_id TEXT PRIMARY KEY,
                    state TEXT NOT NULL,
                    round INTEGER NOT NULL,
                    created TEXT NOT NULL,
                    updated TEXT NOT NULL,
                    trace TEXT NOT NULL,
                    idempotency_key TEXT,
                    idempotency_response TEXT
                )
                """
            )

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path, timeout=30.0)

    def save(self, row: SessionRow) -> None:
        with self._connect() as conn:
            conn.execute(
                """
                INSERT INTO sessions
                    (session_id, state, round, created, updated, trace,
                     idempotency_key, idempotency_response)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
                ON CONFLICT(session_id) DO UPDATE SET
                    state = excluded.state,
                    round = excluded.round,
                    updated = excluded.updated,
                    trace = excluded.trace,
                    idempotency_key = excluded.idempotency_key,
                    idempotency_response = excluded.idempotency_response
                """,
                (
                    row.session_id,
                    row.state,
                    row.round,
                    row.created,
                    row.updated,
                    json.dumps(trace_to_dict(row.trace, include_timing=True), ensure_ascii=False),
                    row.idempotency_key,
                    json.dumps(row.idempotency_response) if row.idempotency_response else None,
                ),
            )

    def get(self, session_id: str) -> SessionRow | None:
        with self._connect() as conn:
            cursor = conn.execute(
                "SELECT session_id, state, round, created, updated, trace, "
                "idempotency_key, idempotency_response FROM sessions WHERE session_id = ?",
                (session_id,),
            )
            row = cursor.fetchone()
        if row is None:
            return None
        return SessionRow(
            session_id=row[0],
            state=row[1],
            round=row[2],
            created=row[3],
            updated=row[4],
            trace=trace_from_dict(json.loads(row[5])),
            idempotency_key=row[6],
            idempotency_response=json.loads(row[7]) if row[7] else None,
        )


def _recommendation_payload(trace: SessionTrace) -> dict | None:
    rec = trace.final_recommendation
    if rec is None:
        return None
    return {
        "best": {"primary": rec.best.primary, "secondary": rec.best.secondary},
        "candidates": [
            {"primary": c.primary, "secondary": c.secondary} for c in rec.candidates
        ],
        "round": rec.round,
        "rationale": rec.rationale,
        "ambiguous": rec.ambiguous,
    }


class SessionService:
    """Application core behind the HTTP API."""

    def __init__(self, config: ServiceConfig, resources: Resources | None = None) -> None:
        self.config = config
        self.store = SessionStore(config.db_path)
        self.resources = resources if resources is not None else Resources.load(config.session_config)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._resource_cache: dict[str, Resources] = {}

    def _lock(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    def _session_config(self, rounds: int | None, taxonomy: str | None = None) -> SessionConfig:
        config = self.config.session_config
        if rounds is not None:
            config = replace(config, rounds=rounds)
        if taxonomy is not None:
            config = replace(config, taxonomy_path=taxonomy)
        return config

    def _resources_for(self, config: SessionConfig) -> Resources:
        """Per-taxonomy resources: sessions may name a server-side taxonomy
        file; the KBs are revalidated against it."""
        if config.taxonomy_path == self.config.session_config.taxonomy_path:
            return self.resources
        key = str(config.taxonomy_path)
        with self._locks_guard:
            if key not in self._resource_cache:
                try:
                    self._resource_cache[key] = Resources.load(config)
                except TriageError as exc:
                    raise HTTPException(status_code=422, detail=str(exc)) from exc
            return self._resource_cache[key]

    def create_session(self, rounds: int | None = None, taxonomy: str | None = None) -> dict:
        if rounds is not None and rounds < 1:
            raise HTTPException(status_code=422, detail="rounds must be >= 1")
        session_id = secrets.token_urlsafe(12)
        config = self._session_config(rounds, taxonomy)
        engine = SessionEngine(session_id, config, self._resources_for(config))
        stamp = _rfc3339(_now())
        self.store.save(
            SessionRow(
                session_id=session_id,
                state=engine.state,
                round=0,
                created=stamp,
                updated=stamp,
                trace=engine.trace,
            )
        )
        return {"session_id": session_id, "first_prompt": engine.prompt_for_patient()}

    def _load(self, session_id: str) -> SessionRow:
        row = self.store.get(session_id)
        if row is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        if row.state in ("awaiting_input", "processing"):
            updated = datetime.fromisoformat(row.updated)
            idle = (_now() - updated).total_seconds()
            if idle > self.config.idle_expiry_seconds:
                row.state = "expired"
                row.trace.state = "expired"
                row.updated = _rfc3339(_now())
                self.store.save(row)
        return row

    def _rebuild_engine(self, row: SessionRow) -> SessionEngine:
        snapshot = row.trace.config or {}
        config = replace(
            self.config.session_config,
            rounds=snapshot.get("rounds", self.config.session_config.rounds),
            variant=snapshot.get("variant", self.config.session_config.variant),
            taxonomy_path=snapshot.get(
                "taxonomy_path", self.config.session_config.taxonomy_path
            ),
        )
        engine = SessionEngine(row.session_id, config, self._resources_for(config))
        engine.trace = row.trace
        return engine

    def message(self, session_id: str, text: str, idempotency_key: str | None = None) -> dict:
        if not text.strip():
            raise HTTPException(status_code=422, detail="text must be non-empty")
        with self._lock(session_id):
            row = self._load(session_id)
            if row.state == "expired":
                raise HTTPException(status_code=410, detail="session expired")
            if (
                idempotency_key
                and row.idempotency_key == idempotency_key
                and row.idempotency_response is not None
            ):
                return row.idempotency_response
            if row.state != "awaiting_input":
                raise HTTPException(
                    status_code=409, detail=f"session is {row.state}, not awaiting input"
                )
            engine = self._rebuild_engine(row)
            try:
                engine.submit(text)
            except TriageError as exc:
                row.state = engine.state
                row.round = engine.round
                row.updated = _rfc3339(_now())
                self.store.save(row)
                raise HTTPException(status_code=502, detail=str(exc)) from exc
            question = engine.current_question()
            response = {
                "question": question.text if engine.state == "awaiting_input" and question else None,
                "recommendation": _recommendation_payload(engine.trace),
                "round": engine.round,
                "state": engine.state,
            }
            row.state = engine.state
            row.round = engine.round
            row.updated = _rfc3339(_now())
            row.idempotency_key = idempotency_key
            row.idempotency_response = response
            self.store.save(row)
            return response

    def trace_view(self, session_id: str) -> dict:
        row = self._load(session_id)
        return {
            "session_id": row.session_id,
            "state": row.state,
            "round": row.round,
            "created": row.created,
            "updated": row.updated,
            "trace": trace_to_dict(row.trace, include_timing=True),
        }

    def final_recommendation(self, session_id: str) -> dict:
        row = self._load(session_id)
        if row.state == "expired":
            raise HTTPException(status_code=410, detail="session expired")
        if row.state != "completed":
            raise HTTPException(
                status_code=409, detail=f"session is {row.state}; no final recommendation yet"
            )
        payload = _recommendation_payload(row.trace)
        assert payload is not None
        return {"session_id": session_id, "state": row.state, "recommendation": payload}


class CreateSessionRequest(BaseModel):
    rounds: int | None = None
    taxonomy: str | None = None  # server-side taxonomy file path


class MessageRequest(BaseModel):
    text: str
    idempotency_key: str | None = None


def create_app(config: ServiceConfig, resources: Resources | None = None) -> FastAPI:
    service = SessionService(config, resources)
    app = FastAPI(title="triage session service")
    app.state.service = service

    async def check_auth(request: Request) -> None:
        if config.bearer_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {config.bearer_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/api/v1/sessions", dependencies=[Depends(check_auth)])
    def create_session(body: CreateSessionRequest | None = None) -> dict:
        body = body or CreateSessionRequest()
        return service.create_session(rounds=body.rounds, taxonomy=body.taxonomy)

    @app.post("/api/v1/sessions/{session_id}/message", dependencies=[Depends(check_auth)])
    def message(session_id: str, body: MessageRequest) -> dict:
        return service.message(session_id, body.text, body.idempotency_key)

    @app.get("/api/v1/sessions/{session_id}", dependencies=[Depends(check_auth)])
    def trace_view(session_id: str) -> dict:
        return service.trace_view(session_id)

    @app.get("/api/v1/sessions/{session_id}/recommendation", dependencies=[Depends(check_auth)])
    def final_recommendation(session_id: str) -> dict:
        return service.final_recommendation(session_id)

    if config.static_dir is not None and Path(config.static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(config.static_dir), html=True), name="console")

    return app
