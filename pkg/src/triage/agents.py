"""The five prompt-driven agents.

Each agent is a pure function over (inputs, backend): it renders a prompt
from the template set, asks the backend for a completion, parses the fenced
JSON block out of the reply, and validates it against the agent's output
contract. Invalid replies trigger a bounded re-prompt (the correction names
the problem); replies still invalid after the re-prompt budget raise a
typed error.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

from .domain import (
    HPI,
    HPI_SECTIONS,
    DepartmentRef,
    DepartmentTaxonomy,
    FactEntry,
    PatientRecord,
    Question,
    Recommendation,
    record_public_view,
    resolve_department,
)
from .errors import (
    EmptyDescription,
    RepetitionUnresolved,
    ScoreOutOfRange,
    UnknownDepartment,
    UnparseableAgentOutput,
)
from .guidance import GuidanceDirectives, TextPattern
from .llm_gateway import Backend, ChatExchange, ChatMessage, default_params

if TYPE_CHECKING:  # pragma: no cover
    from .orchestrator import SessionTrace

MAX_PARSE_ATTEMPTS = 3  # first try plus two re-prompts

SCORE_DIMENSIONS = (
    "inquiry_logic",
    "triage_accuracy",
    "diagnostic_reasoning",
    "communication",
    "consistency",
    "professionalism",
)

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class SixDimScore:
    """Six-dimensional consultation score, each dimension an integer 1..5."""

    inquiry_logic: int
    triage_accuracy: int
    diagnostic_reasoning: int
    communication: int
    consistency: int
    professionalism: int
    justifications: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for dim in SCORE_DIMENSIONS:
            value = getattr(self, dim)
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise ValueError(f"{dim} must be an integer in [1, 5], got {value!r}")

    def as_dict(self) -> dict[str, int]:
        return {dim: getattr(self, dim) for dim in SCORE_DIMENSIONS}


@dataclass(frozen=True)
class AgentEnvelope:
    raw: str
    parsed: dict
    parse_attempts: int


class TemplateSet:
    """Prompt templates, one file per agent, with named placeholders.

    A template file holds a ``<<SYSTEM>>`` and a ``<<USER>>`` part; rendering
    substitutes ``{placeholder}`` tokens, leaving unknown tokens (and any
    literal braces in examples) untouched.
    """

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._parts: dict[str, tuple[str, str]] = {}
        for path in sorted(self.directory.glob("*.txt")):
            if path.stem == "rubric":
                continue
            text = path.read_text(encoding="utf-8")
            self._parts[path.stem] = self._split(text, path)
        rubric_path = self.directory / "rubric.txt"
        self.rubric = rubric_path.read_text(encoding="utf-8") if rubric_path.exists() else ""

    @staticmethod
    def _split(text: str, path: Path) -> tuple[str, str]:
        if "<<SYSTEM>>" not in text or "<<USER>>" not in text:
            raise ValueError(f"{path}: template needs <<SYSTEM>> and <<USER>> sections")
        _, rest = text.split("<<SYSTEM>>", 1)
        system, user = rest.split("<<USER>>", 1)
        return system.strip(), user.strip()

    def render(self, agent: str, **values) -> tuple[str, str]:
        if agent not in self._parts:
            raise KeyError(f"no template for agent {agent!r} in {self.directory}")
        system, user = self._parts[agent]

        def substitute(match: re.Match) -> str:
            key = match.group(1)
            if key in values:
                return str(values[key])
            return match.group(0)

        return _PLACEHOLDER_RE.sub(substitute, system), _PLACEHOLDER_RE.sub(substitute, user)


def default_template_dir() -> Path:
    return Path(str(importlib_resources.files("triage") / "data" / "templates"))


def load_default_templates() -> TemplateSet:
    return TemplateSet(default_template_dir())


def parse_fenced_json(text: str) -> dict:
    """Extract the first fenced JSON block, tolerating surrounding prose."""
    match = _FENCE_RE.search(text)
    candidate = match.group(1) if match else text
    try:
        parsed = json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise ValueError(f"reply is not a fenced JSON block: {exc}") from exc
    if not isinstance(parsed, dict):
        raise ValueError("reply JSON must be an object")
    return parsed


def normalized_tokens(text: str) -> frozenset[str]:
    return frozenset(t.casefold() for t in _TOKEN_RE.findall(text))


def token_jaccard(a: str, b: str) -> float:
    """Jaccard overlap of the normalized token sets of two texts."""
    ta, tb = normalized_tokens(a), normalized_tokens(b)
    union = ta | tb
    if not union:
        return 1.0
    return len(ta & tb) / len(union)


class _Invalid(Exception):
    """A parsed reply violated the agent contract; carries the re-prompt
    correction text and the error type to raise when attempts run out."""

    def __init__(self, problem: str, error_cls=UnparseableAgentOutput) -> None:
        super().__init__(problem)
        self.problem = problem
        self.error_cls = error_cls


def _run_structured(
    backend: Backend,
    agent_tag: str,
    session_id: str,
    round_: int,
    system: str,
    user: str,
    validate: Callable[[dict], object],
    max_attempts: int = MAX_PARSE_ATTEMPTS,
):
    """Completion loop with bounded re-prompting.

    ``validate`` turns the parsed JSON into the agent's result object or
    raises ``_Invalid``. Returns (result, envelope).
    """
    messages: list[ChatMessage] = [ChatMessage("system", system), ChatMessage("user", user)]
    last_problem = "no reply"
    last_error_cls = UnparseableAgentOutput
    for attempt in range(1, max_attempts + 1):
        exchange = ChatExchange(
            agent_tag=agent_tag,
            session_id=session_id,
            round=round_,
            messages=tuple(messages),
            params=default_params(agent_tag),
        )
        completion = backend.complete(exchange)
        try:
            parsed = parse_fenced_json(completion.text)
        except ValueError as exc:
            last_problem = str(exc)
            last_error_cls = UnparseableAgentOutput
        else:
            try:
                result = validate(parsed)
                return result, AgentEnvelope(completion.text, parsed, attempt)
            except _Invalid as exc:
                last_problem = exc.problem
                last_error_cls = exc.error_cls
        messages.append(
            ChatMessage(
                "user",
                f"Your previous reply was rejected: {last_problem} "
                "Answer again, following the required reply format exactly.",
            )
        )
    raise last_error_cls(
        f"{agent_tag} agent reply still invalid after {max_attempts} attempts: {last_problem}"
    )


def hpi_prompt_json(hpi: HPI | None) -> str:
    if hpi is None:
        return "(none)"
    return json.dumps(hpi.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)


def merge_hpi(prev: HPI | None, parsed: Mapping, round_: int) -> HPI:
    """Fold one intake reply into the accumulated record.

    Every prior fact-log entry is retained; entries named in ``superseded``
    flip status but are never removed. New facts append at ``round_``.
    """
    narrative = str(parsed.get("narrative", "")).strip()
    raw_sections = parsed.get("sections") or {}
    if not isinstance(raw_sections, Mapping):
        raise ValueError("sections must be a JSON object")
    sections: dict[str, str] = {}
    for name in HPI_SECTIONS:
        new_value = str(raw_sections.get(name, "") or "").strip()
        if not new_value and prev is not None:
            new_value = prev.section(name)
        if new_value:
            sections[name] = new_value
    superseded = {
        " ".join(str(f).split()).casefold() for f in parsed.get("superseded") or []
    }
    entries: list[FactEntry] = []
    existing: set[tuple[str, str]] = set()
    if prev is not None:
        for entry in prev.fact_log:
            if entry.round > round_:
                raise ValueError("fact log contains rounds later than the current round")
            status = entry.status
            if status == "added" and " ".join(entry.fact.split()).casefold() in superseded:
                status = "superseded"
            entries.append(FactEntry(entry.round, entry.fact, status))
            existing.add((" ".join(entry.fact.split()).casefold(), status))
    for fact in parsed.get("new_facts") or []:
        fact_text = str(fact).strip()
        if not fact_text:
            continue
        key = (" ".join(fact_text.split()).casefold(), "added")
        if key in existing:
            continue
        existing.add(key)
        entries.append(FactEntry(round_, fact_text, "added"))
    return HPI(narrative=narrative, sections=sections, fact_log=tuple(entries))


def recipient_update(
    description: str,
    prev_question: Question | None,
    prev_hpi: HPI | None,
    backend: Backend,
    templates: TemplateSet,
    *,
    session_id: str = "adhoc",
    round_: int | None = None,
    max_attempts: int = MAX_PARSE_ATTEMPTS,
) -> HPI:
    """Fold the latest patient description into the structured record."""
    if not description.strip():
        raise EmptyDescription("patient description is empty")
    if (prev_question is None) != (prev_hpi is None):
        raise ValueError("previous question and previous record go together: "
                         "both absent in round 1, both present afterwards")
    if round_ is None:
        if prev_hpi is None:
            round_ = 1
        else:
            round_ = max((f.round for f in prev_hpi.fact_log), default=1) + 1
    system, user = templates.render(
        "recipient",
        description=description,
        prev_question=prev_question.text if prev_question else "(none)",
        hpi=hpi_prompt_json(prev_hpi),
    )

    def validate(parsed: dict) -> HPI:
        try:
            merged = merge_hpi(prev_hpi, parsed, round_)
        except ValueError as exc:
            raise _Invalid(f"{exc}.") from exc
        if not merged.section("chief_complaint"):
            raise _Invalid("the chief_complaint section must not be empty.")
        if not merged.narrative:
            raise _Invalid("the narrative must not be empty.")
        return merged

    merged, _ = _run_structured(
        backend, "recipient", session_id, round_, system, user, validate, max_attempts
    )
    return merged


def department_decide(
    hpi: HPI,
    taxonomy: DepartmentTaxonomy,
    guidance: GuidanceDirectives | None,
    backend: Backend,
    templates: TemplateSet,
    *,
    session_id: str = "adhoc",
    round_: int = 1,
    max_attempts: int = MAX_PARSE_ATTEMPTS,
) -> Recommendation:
    """Choose the best department (and, under ambiguity, 2-3 candidates)."""
    if not hpi.section("chief_complaint"):
        raise ValueError("cannot decide a department without a chief complaint")
    guidance_text = guidance.rendered if guidance and guidance.rendered else "(none)"
    excluded = guidance.excluded() if guidance else ()
    system, user = templates.render(
        "department",
        hpi=hpi_prompt_json(hpi),
        taxonomy=taxonomy.render_list(),
        guidance=guidance_text,
    )
    valid_list = ", ".join(taxonomy.primary_names + taxonomy.secondary_names)

    def resolve_or_invalid(name: str) -> DepartmentRef:
        try:
            return resolve_department(name, taxonomy)
        except UnknownDepartment as exc:
            raise _Invalid(
                f"{exc}. Valid department names are: {valid_list}.",
                UnknownDepartment,
            ) from exc

    def validate(parsed: dict) -> Recommendation:
        if "best" not in parsed or "rationale" not in parsed:
            raise _Invalid("reply must contain 'best' and 'rationale' keys.")
        best = resolve_or_invalid(str(parsed["best"]))
        rationale = str(parsed.get("rationale", "")).strip()
        if not rationale:
            raise _Invalid("the rationale must not be empty.")
        ambiguous = bool(parsed.get("ambiguous", False))
        raw_candidates = parsed.get("candidates") or []
        if not isinstance(raw_candidates, list):
            raise _Invalid("candidates must be a list of department names.")
        candidates = tuple(resolve_or_invalid(str(c)) for c in raw_candidates)
        if ambiguous != bool(candidates):
            raise _Invalid(
                "declare ambiguity with 2-3 candidates, or no ambiguity with none."
            )
        if candidates and not (2 <= len(candidates) <= 3):
            raise _Invalid("the candidate set must hold 2-3 departments.")
        if candidates and best not in candidates:
            raise _Invalid("the candidate set must include your best choice.")
        for banned in excluded:
            if banned.covers(best):
                raise _Invalid(
                    f"department {best.display()} is excluded by guidance; choose another."
                )
        return Recommendation(
            round=round_,
            best=best,
            candidates=candidates,
            rationale=rationale,
            ambiguous=ambiguous,
        )

    recommendation, _ = _run_structured(
        backend, "department", session_id, round_, system, user, validate, max_attempts
    )
    return recommendation


def inquirer_next(
    hpi: HPI,
    history: Sequence[Question],
    candidates: Sequence[DepartmentRef] | None,
    inquiry_guidance: str,
    backend: Backend,
    templates: TemplateSet,
    *,
    session_id: str = "adhoc",
    round_: int = 1,
    non_repetition_threshold: float = 0.8,
    avoid_patterns: Sequence[TextPattern] = (),
    max_attempts: int = MAX_PARSE_ATTEMPTS,
) -> Question:
    """Generate the next question: non-repetitive, on-topic, and aimed at
    differentiating the candidate departments when they are given."""
    history_text = (
        "\n".join(f"{i + 1}. {q.text}" for i, q in enumerate(history)) or "(none)"
    )
    candidates_text = (
        ", ".join(c.display() for c in candidates) if candidates else "(none)"
    )
    system, user = templates.render(
        "inquirer",
        hpi=hpi_prompt_json(hpi),
        history=history_text,
        candidates=candidates_text,
        guidance=inquiry_guidance or "(none)",
    )

    def validate(parsed: dict) -> Question:
        text = str(parsed.get("question", "")).strip()
        if not text:
            raise _Invalid("reply must contain a non-empty 'question'.")
        for prior in history:
            overlap = token_jaccard(text, prior.text)
            if overlap >= non_repetition_threshold:
                raise _Invalid(
                    f"the question repeats an earlier one ({prior.text!r}); "
                    "ask about something new.",
                    RepetitionUnresolved,
                )
        for pattern in avoid_patterns:
            if pattern.matches(text):
                raise _Invalid(
                    f"the question touches a banned topic ({pattern.pattern!r}); "
                    "stay at triage granularity."
                )
        tags = frozenset(str(t) for t in parsed.get("intent_tags") or [])
        return Question(
            round=round_,
            text=text,
            intent_tags=tags,
            differentiation_targets=tuple(candidates) if candidates else (),
        )

    question, _ = _run_structured(
        backend, "inquirer", session_id, round_, system, user, validate, max_attempts
    )
    return question


def patient_reply(
    question: Question | None,
    round_: int,
    record: PatientRecord,
    backend: Backend,
    templates: TemplateSet,
    *,
    session_id: str = "adhoc",
    max_attempts: int = MAX_PARSE_ATTEMPTS,
) -> str:
    """Simulated patient answer, grounded in the record and progressively
    disclosed: round 1 states only the chief complaint."""
    if (round_ == 1) != (question is None):
        raise ValueError("round 1 has no question; later rounds require one")
    system, user = templates.render(
        "patient",
        record=json.dumps(record_public_view(record), ensure_ascii=False, sort_keys=True, indent=2),
        round=str(round_),
        question=question.text if question else "(none — opening statement)",
    )

    def validate(parsed: dict) -> str:
        reply = str(parsed.get("reply", "")).strip()
        if not reply:
            raise _Invalid("reply must contain a non-empty 'reply'.")
        if round_ == 1:
            complaint_tokens = normalized_tokens(record.chief_complaint)
            if not complaint_tokens <= normalized_tokens(reply):
                raise _Invalid(
                    "the opening statement must state the chief complaint "
                    f"({record.chief_complaint!r})."
                )
        return reply

    reply, _ = _run_structured(
        backend, "patient", session_id, round_, system, user, validate, max_attempts
    )
    return reply


def render_transcript(trace: "SessionTrace") -> str:
    """Linearize a session for the evaluator prompt."""
    lines: list[str] = []
    for turn in trace.turns:
        speaker = "Patient" if turn.speaker == "patient" else "Triage desk"
        lines.append(f"[round {turn.round}] {speaker}: {turn.text}")
    for rec in trace.recommendations:
        suffix = ""
        if rec.candidates:
            suffix = f" (weighing: {', '.join(c.display() for c in rec.candidates)})"
        lines.append(
            f"[round {rec.round}] Recommendation: {rec.best.display()}{suffix} — {rec.rationale}"
        )
    if trace.recommendations:
        lines.append(f"Final recommendation: {trace.recommendations[-1].best.display()}")
    return "\n".join(lines)


def evaluate_session(
    trace: "SessionTrace",
    truth: DepartmentRef,
    backend: Backend,
    templates: TemplateSet,
    *,
    max_attempts: int = MAX_PARSE_ATTEMPTS,
) -> SixDimScore:
    """Score one completed session on the six-dimension rubric."""
    if not trace.recommendations:
        raise ValueError("cannot evaluate a session without a final recommendation")
    if getattr(trace, "aborted", False):
        raise ValueError("cannot evaluate an aborted session")
    system, user = templates.render(
        "evaluator",
        rubric=templates.rubric,
        truth=truth.display(),
        transcript=render_transcript(trace),
    )

    def validate(parsed: dict) -> SixDimScore:
        scores = parsed.get("scores")
        if not isinstance(scores, Mapping):
            raise _Invalid("reply must contain a 'scores' object.")
        missing = [d for d in SCORE_DIMENSIONS if d not in scores]
        if missing:
            raise _Invalid(f"scores must cover all six dimensions; missing {missing}.")
        values: dict[str, int] = {}
        for dim in SCORE_DIMENSIONS:
            value = scores[dim]
            if isinstance(value, bool) or not isinstance(value, int):
                raise _Invalid(f"score for {dim} must be an integer.")
            if not 1 <= value <= 5:
                raise _Invalid(
                    f"score for {dim} is {value}, outside the 1..5 scale.",
                    ScoreOutOfRange,
                )
            values[dim] = value
        justifications = {
            str(k): str(v) for k, v in (parsed.get("justifications") or {}).items()
        }
        return SixDimScore(justifications=justifications, **values)

    score, _ = _run_structured(
        backend,
        "evaluator",
        trace.session_id,
        len(trace.recommendations),
        system,
        user,
        validate,
        max_attempts,
    )
    return score
