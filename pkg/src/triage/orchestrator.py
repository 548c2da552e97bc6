"""The bounded multi-round session loop and batch execution.

One round runs, in strict order: obtain patient text, fold it into the
structured record (or concatenate raw dialogue under the no-HPI ablation),
compute classification guidance from the previous round's candidates, decide
the department, and — except in the final round — compute inquiry guidance
and generate the next question. The final routing answer is the last round's
decision.

The engine advances one round per submitted patient text, which lets the
same code drive simulated batches and interactive HTTP sessions; interactive
sessions simply park in the awaiting-input state between submissions.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from . import agents
from .agents import SixDimScore, TemplateSet
from .domain import (
    HPI,
    DepartmentRef,
    DepartmentTaxonomy,
    DialogueTurn,
    PatientRecord,
    Question,
    Recommendation,
    taxonomy_load,
)
from .errors import AgentError, GatewayError, TriageError
from .guidance import (
    EMPTY_DIRECTIVES,
    Directive,
    GuidanceDirectives,
    KBSet,
    avoid_patterns_for,
    classification_guidance_for,
    extract_findings,
    inquiry_guidance_for,
    load_kbs,
)
from .llm_gateway import AGENT_TAGS, Backend, BackendConfig, CountingBackend, backend_for

SCHEMA_VERSION = 1

VARIANTS = ("full", "ig_only", "cg_only", "none", "no_hpi")

# Which guidance mechanisms each ablation variant injects. The no-HPI
# ablation only bypasses the intake stage; both mechanisms stay on.
_VARIANT_GUIDANCE = {
    "full": (True, True),
    "ig_only": (True, False),
    "cg_only": (False, True),
    "none": (False, False),
    "no_hpi": (True, True),
}


@dataclass(frozen=True)
class SessionConfig:
    rounds: int = 4
    variant: str = "full"
    non_repetition_threshold: float = 0.8
    backends: Mapping[str, BackendConfig] = field(default_factory=dict)
    taxonomy_path: str | None = None
    kb_dir: str | None = None
    template_dir: str | None = None
    max_parse_attempts: int = 3
    evaluate: bool = False

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def inquiry_guidance_enabled(self) -> bool:
        return _VARIANT_GUIDANCE[self.variant][0]

    @property
    def classification_guidance_enabled(self) -> bool:
        return _VARIANT_GUIDANCE[self.variant][1]

    @property
    def recipient_bypassed(self) -> bool:
        return self.variant == "no_hpi"

    def snapshot(self) -> dict:
        return {
            "rounds": self.rounds,
            "variant": self.variant,
            "non_repetition_threshold": self.non_repetition_threshold,
            "taxonomy_path": self.taxonomy_path,
            "kb_dir": self.kb_dir,
            "template_dir": self.template_dir,
            "max_parse_attempts": self.max_parse_attempts,
            "backends": {
                tag: {
                    "kind": cfg.kind,
                    "model_id": cfg.model_id,
                    "fixture_path": str(cfg.fixture_path) if cfg.fixture_path else None,
                }
                for tag, cfg in sorted(self.backends.items())
            },
        }


def ablation_config(base: SessionConfig, variant: str) -> SessionConfig:
    """Return ``base`` with the variant's stages toggled."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    return dataclasses.replace(base, variant=variant)


@dataclass(frozen=True)
class PatientSource:
    kind: str  # simulated | interactive
    record: PatientRecord | None = None
    channel: Callable[[str | None], str | None] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("simulated", "interactive"):
            raise ValueError("source kind must be 'simulated' or 'interactive'")
        if self.kind == "simulated" and self.record is None:
            raise ValueError("simulated sources require a patient record")


@dataclass
class SessionTrace:
    """Complete per-round record of one consultation."""

    session_id: str
    config: dict
    schema_version: int = SCHEMA_VERSION
    turns: list[DialogueTurn] = field(default_factory=list)
    questions: list[Question] = field(default_factory=list)
    hpis: list[HPI] = field(default_factory=list)
    recommendations: list[Recommendation] = field(default_factory=list)
    guidance_used: list[GuidanceDirectives] = field(default_factory=list)
    score: SixDimScore | None = None
    timing: dict[str, float] = field(default_factory=dict)
    state: str = "awaiting_input"
    aborted: bool = False
    abort_reason: str | None = None

    @property
    def final_recommendation(self) -> Recommendation | None:
        return self.recommendations[-1] if self.recommendations else None

    @property
    def completed(self) -> bool:
        return self.state == "completed"


class Resources:
    """Loaded, shareable session resources: taxonomy, KBs, templates, and one
    instrumented backend per agent."""

    def __init__(
        self,
        taxonomy: DepartmentTaxonomy,
        kbs: KBSet,
        templates: TemplateSet,
        backends: Mapping[str, Backend],
    ) -> None:
        self.taxonomy = taxonomy
        self.kbs = kbs
        self.templates = templates
        self.backends = {
            tag: backend if isinstance(backend, CountingBackend) else CountingBackend(backend)
            for tag, backend in backends.items()
        }

    @classmethod
    def load(cls, config: SessionConfig) -> "Resources":
        from .agents import load_default_templates
        from .domain import load_default_taxonomy
        from .guidance import load_default_kbs

        taxonomy = (
            taxonomy_load(config.taxonomy_path)
            if config.taxonomy_path
            else load_default_taxonomy()
        )
        kbs = (
            load_kbs(config.kb_dir, taxonomy)
            if config.kb_dir
            else load_default_kbs(taxonomy)
        )
        templates = (
            TemplateSet(config.template_dir)
            if config.template_dir
            else load_default_templates()
        )
        backends = {tag: backend_for(cfg) for tag, cfg in config.backends.items()}
        missing = [t for t in AGENT_TAGS if t not in backends and t != "imputer"]
        if missing and "default" in config.backends:
            for tag in missing:
                backends[tag] = backend_for(config.backends["default"])
        return cls(taxonomy, kbs, templates, backends)

    def backend(self, tag: str) -> Backend:
        if tag not in self.backends:
            raise TriageError(f"no backend configured for agent {tag!r}")
        return self.backends[tag]

    def call_count(self, tag: str) -> int:
        backend = self.backends.get(tag)
        return backend.count(tag) if isinstance(backend, CountingBackend) else 0


def uniform_backends(config: BackendConfig, tags: Sequence[str] = AGENT_TAGS) -> dict[str, BackendConfig]:
    return {tag: config for tag in tags}


def _raw_dialogue_hpi(turns: Sequence[DialogueTurn]) -> HPI:
    """The no-HPI ablation record: nothing but concatenated dialogue."""
    lines = []
    first_patient = ""
    for turn in turns:
        speaker = "Patient" if turn.speaker == "patient" else "Triage desk"
        lines.append(f"{speaker}: {turn.text}")
        if not first_patient and turn.speaker == "patient":
            first_patient = turn.text
    return HPI(
        narrative="\n".join(lines),
        sections={"chief_complaint": first_patient} if first_patient else {},
        fact_log=(),
    )


class SessionEngine:
    """Drives one session forward, one round per submitted patient text."""

    OPENING_PROMPT = "Please describe your main complaint."

    def __init__(
        self,
        session_id: str,
        config: SessionConfig,
        resources: Resources,
    ) -> None:
        self.session_id = session_id
        self.config = config
        self.resources = resources
        self.trace = SessionTrace(session_id=session_id, config=config.snapshot())

    @property
    def round(self) -> int:
        return len(self.trace.recommendations)

    @property
    def state(self) -> str:
        return self.trace.state

    def current_question(self) -> Question | None:
        return self.trace.questions[-1] if self.trace.questions else None

    def prompt_for_patient(self) -> str:
        question = self.current_question()
        return question.text if question else self.OPENING_PROMPT

    def _timed(self, stage: str, fn, *args, **kwargs):
        started = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            elapsed = (time.perf_counter() - started) * 1000.0
            self.trace.timing[stage] = self.trace.timing.get(stage, 0.0) + elapsed

    def submit(self, text: str) -> SessionTrace:
        """Run one full round on the submitted patient text."""
        if self.trace.state not in ("awaiting_input",):
            raise TriageError(f"session {self.session_id} is {self.trace.state}, not awaiting input")
        round_ = self.round + 1
        trace = self.trace
        trace.state = "processing"
        try:
            trace.turns.append(DialogueTurn(round_, "patient", text))

            if self.config.recipient_bypassed:
                hpi = _raw_dialogue_hpi(trace.turns)
            else:
                prev_hpi = trace.hpis[-1] if trace.hpis else None
                prev_question = self.trace.questions[-1] if trace.questions else None
                hpi = self._timed(
                    "recipient",
                    agents.recipient_update,
                    text,
                    prev_question,
                    prev_hpi,
                    self.resources.backend("recipient"),
                    self.resources.templates,
                    session_id=self.session_id,
                    round_=round_,
                    max_attempts=self.config.max_parse_attempts,
                )
            trace.hpis.append(hpi)

            guidance = EMPTY_DIRECTIVES
            prev_rec = trace.recommendations[-1] if trace.recommendations else None
            if (
                self.config.classification_guidance_enabled
                and prev_rec is not None
                and len(prev_rec.candidates) >= 2
            ):
                findings = extract_findings(hpi, self.resources.kbs)
                guidance = self._timed(
                    "guidance",
                    classification_guidance_for,
                    findings,
                    prev_rec.candidates,
                    self.resources.kbs,
                )
            trace.guidance_used.append(guidance)

            recommendation = self._timed(
                "department",
                agents.department_decide,
                hpi,
                self.resources.taxonomy,
                guidance if guidance.directives else None,
                self.resources.backend("department"),
                self.resources.templates,
                session_id=self.session_id,
                round_=round_,
                max_attempts=self.config.max_parse_attempts,
            )
            trace.recommendations.append(recommendation)

            if round_ < self.config.rounds:
                inquiry_text = ""
                avoid = ()
                if self.config.inquiry_guidance_enabled:
                    inquiry_text = self._timed(
                        "guidance",
                        inquiry_guidance_for,
                        recommendation.best,
                        recommendation.candidates,
                        self.resources.kbs,
                    )
                    avoid = avoid_patterns_for(recommendation.best, self.resources.kbs)
                question = self._timed(
                    "inquirer",
                    agents.inquirer_next,
                    hpi,
                    trace.questions,
                    recommendation.candidates or None,
                    inquiry_text,
                    self.resources.backend("inquirer"),
                    self.resources.templates,
                    session_id=self.session_id,
                    round_=round_,
                    non_repetition_threshold=self.config.non_repetition_threshold,
                    avoid_patterns=avoid,
                    max_attempts=self.config.max_parse_attempts,
                )
                trace.questions.append(question)
                trace.turns.append(DialogueTurn(round_, "system", question.text))
                trace.state = "awaiting_input"
            else:
                trace.state = "completed"
        except (AgentError, GatewayError) as exc:
            trace.state = "aborted"
            trace.aborted = True
            trace.abort_reason = f"{type(exc).__name__}: {exc}"
            raise
        return trace


def run_session(
    source: PatientSource,
    config: SessionConfig,
    resources: Resources,
    *,
    session_id: str | None = None,
) -> SessionTrace:
    """Run one session to completion (or abort), returning its trace.

    Simulated sources answer through the patient agent; interactive sources
    answer through ``source.channel``. A channel returning None leaves the
    session parked awaiting input rather than failing.
    """
    if source.kind == "simulated":
        session_id = session_id or source.record.id  # type: ignore[union-attr]
    elif session_id is None:
        raise ValueError("interactive sessions need an explicit session id")
    engine = SessionEngine(session_id, config, resources)
    trace = engine.trace
    try:
        while trace.state == "awaiting_input" and engine.round < config.rounds:
            question = engine.current_question()
            if source.kind == "simulated":
                started = time.perf_counter()
                text = agents.patient_reply(
                    question,
                    engine.round + 1,
                    source.record,  # type: ignore[arg-type]
                    resources.backend("patient"),
                    resources.templates,
                    session_id=session_id,
                    max_attempts=config.max_parse_attempts,
                )
                trace.timing["patient"] = trace.timing.get("patient", 0.0) + (
                    (time.perf_counter() - started) * 1000.0
                )
            else:
                if source.channel is None:
                    raise ValueError("interactive sources require a channel")
                text = source.channel(question.text if question else None)
                if text is None:
                    return trace  # awaiting input; not an error
            engine.submit(text)
    except (AgentError, GatewayError) as exc:
        if not trace.aborted:
            trace.state = "aborted"
            trace.aborted = True
            trace.abort_reason = f"{type(exc).__name__}: {exc}"
        return trace
    if (
        trace.completed
        and config.evaluate
        and source.kind == "simulated"
        and source.record is not None
    ):
        try:
            started = time.perf_counter()
            trace.score = agents.evaluate_session(
                trace,
                source.record.truth,
                resources.backend("evaluator"),
                resources.templates,
                max_attempts=config.max_parse_attempts,
            )
            trace.timing["evaluate"] = (time.perf_counter() - started) * 1000.0
        except (AgentError, GatewayError) as exc:
            trace.aborted = True
            trace.state = "aborted"
            trace.abort_reason = f"{type(exc).__name__}: {exc}"
    return trace


def run_batch(
    dataset: Sequence[PatientRecord],
    config: SessionConfig,
    resources: Resources,
    workers: int = 1,
) -> list[SessionTrace]:
    """One independent session per record; output order equals input order
    regardless of worker count, and per-session failures are captured as
    aborted traces rather than failing the batch."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    def one(record: PatientRecord) -> SessionTrace:
        try:
            return run_session(
                PatientSource(kind="simulated", record=record), config, resources
            )
        except TriageError as exc:
            trace = SessionTrace(session_id=record.id, config=config.snapshot())
            trace.state = "aborted"
            trace.aborted = True
            trace.abort_reason = f"{type(exc).__name__}: {exc}"
            return trace

    if workers == 1:
        return [one(record) for record in dataset]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, dataset))


def _ref_to_list(ref: DepartmentRef) -> list:
    return [ref.primary, ref.secondary]


def _ref_from_list(pair) -> DepartmentRef:
    return DepartmentRef(pair[0], pair[1])


def trace_to_dict(trace: SessionTrace, include_timing: bool = False) -> dict:
    data = {
        "schema_version": trace.schema_version,
        "session_id": trace.session_id,
        "state": trace.state,
        "aborted": trace.aborted,
        "abort_reason": trace.abort_reason,
        "config": trace.config,
        "turns": [
            {"round": t.round, "speaker": t.speaker, "text": t.text} for t in trace.turns
        ],
        "questions": [
            {
                "round": q.round,
                "text": q.text,
                "intent_tags": sorted(q.intent_tags),
                "differentiation_targets": [
                    _ref_to_list(r) for r in q.differentiation_targets
                ],
            }
            for q in trace.questions
        ],
        "hpis": [h.to_dict() for h in trace.hpis],
        "recommendations": [
            {
                "round": r.round,
                "best": _ref_to_list(r.best),
                "candidates": [_ref_to_list(c) for c in r.candidates],
                "rationale": r.rationale,
                "ambiguous": r.ambiguous,
            }
            for r in trace.recommendations
        ],
        "guidance_used": [
            {
                "directives": [
                    {
                        "kind": d.kind,
                        "department": _ref_to_list(d.department),
                        "reason": d.reason,
                    }
                    for d in g.directives
                ],
                "rendered": g.rendered,
            }
            for g in trace.guidance_used
        ],
        "score": (
            {"scores": trace.score.as_dict(), "justifications": dict(trace.score.justifications)}
            if trace.score
            else None
        ),
    }
    if include_timing:
        data["timing"] = dict(trace.timing)
    return data


def trace_from_dict(data: Mapping) -> SessionTrace:
    trace = SessionTrace(
        session_id=data["session_id"],
        config=dict(data.get("config") or {}),
        schema_version=int(data.get("schema_version", SCHEMA_VERSION)),
        state=data.get("state", "completed"),
        aborted=bool(data.get("aborted", False)),
        abort_reason=data.get("abort_reason"),
    )
    trace.turns = [
        DialogueTurn(t["round"], t["speaker"], t["text"]) for t in data.get("turns", [])
    ]
    trace.questions = [
        Question(
            round=q["round"],
            text=q["text"],
            intent_tags=frozenset(q.get("intent_tags", [])),
            differentiation_targets=tuple(
                _ref_from_list(r) for r in q.get("differentiation_targets", [])
            ),
        )
        for q in data.get("questions", [])
    ]
    trace.hpis = [HPI.from_dict(h) for h in data.get("hpis", [])]
    trace.recommendations = [
        Recommendation(
            round=r["round"],
            best=_ref_from_list(r["best"]),
            candidates=tuple(_ref_from_list(c) for c in r.get("candidates", [])),
            rationale=r.get("rationale", ""),
            ambiguous=bool(r.get("ambiguous", False)),
        )
        for r in data.get("recommendations", [])
    ]
    trace.guidance_used = [
        GuidanceDirectives(
            directives=tuple(
                Directive(d["kind"], _ref_from_list(d["department"]), d.get("reason", ""))
                for d in g.get("directives", [])
            ),
            rendered=g.get("rendered", ""),
        )
        for g in data.get("guidance_used", [])
    ]
    score = data.get("score")
    if score:
        trace.score = SixDimScore(
            justifications=score.get("justifications", {}), **score["scores"]
        )
    timing = data.get("timing")
    if timing:
        trace.timing = dict(timing)
    return trace


def trace_to_json(trace: SessionTrace, include_timing: bool = False) -> str:
    return json.dumps(
        trace_to_dict(trace, include_timing=include_timing),
        ensure_ascii=False,
        sort_keys=True,
    )


def save_traces(
    traces: Iterable[SessionTrace], path: str | Path, include_timing: bool = False
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(trace_to_json(trace, include_timing=include_timing))
            fh.write("\n")


def load_traces(path: str | Path) -> list[SessionTrace]:
    path = Path(path)
    traces = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                traces.append(trace_from_dict(json.loads(line)))
    return traces
